import numpy as np
import pytest

from dualscale import autodiff as ad
from dualscale import temporal
from dualscale.autodiff import ParamStore, Var
from dualscale.temporal import (
    TemporalConfig,
    apply_scale_weights,
    dynamic_scale_weights,
    eligible_parts,
    mt_gru_step,
)

PREFIX = "cell"


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def make_params(cfg, seed=0):
    store = ParamStore()
    temporal.register_params(store, cfg, PREFIX, seed)
    return store


def classic_gru_step(x, h, p):
    """Independent textbook GRU cell in plain numpy."""
    r = sigmoid(x @ p["W_xr"] + h @ p["W_hr"] + p["b_r"])
    z = sigmoid(x @ p["W_xz"] + h @ p["W_hz"] + p["b_z"])
    cand = np.tanh(x @ p["W_xh"] + (r * h) @ p["W_hh"] + p["b_h"])
    return z * h + (1.0 - z) * cand


class TestConfig:
    def test_part_geometry(self):
        cfg = TemporalConfig(in_width=3, hidden_width=12, periods=(1, 2, 4))
        assert cfg.part_count == 3
        assert cfg.part_width == 4

    def test_periods_must_increase(self):
        with pytest.raises(temporal.ConfigError):
            TemporalConfig(in_width=3, hidden_width=12, periods=(2, 1))
        with pytest.raises(temporal.ConfigError):
            TemporalConfig(in_width=3, hidden_width=12, periods=(2, 2))

    def test_divisibility_required(self):
        with pytest.raises(temporal.ConfigError):
            TemporalConfig(in_width=3, hidden_width=10, periods=(1, 2, 4))

    def test_positive_periods(self):
        with pytest.raises(temporal.ConfigError):
            TemporalConfig(in_width=3, hidden_width=12, periods=(0, 2))


class TestEligibleParts:
    def test_examples(self):
        periods = (1, 2, 4)
        assert eligible_parts(1, periods) == {0}
        assert eligible_parts(2, periods) == {0, 1}
        assert eligible_parts(3, periods) == {0}
        assert eligible_parts(4, periods) == {0, 1, 2}

    def test_period_one_always_eligible(self):
        for t in range(1, 50):
            assert 0 in eligible_parts(t, (1, 3, 7))

    def test_schedule_exact_over_long_run(self):
        periods = (1, 2, 4)
        for t in range(1, 1001):
            expected = {v for v, p in enumerate(periods) if t % p == 0}
            assert eligible_parts(t, periods) == expected

    def test_step_zero_rejected(self):
        with pytest.raises(temporal.ConfigError):
            eligible_parts(0, (1, 2))


class TestDynamicScaleWeights:
    def test_zero_params_give_half(self):
        cfg = TemporalConfig(in_width=2, hidden_width=4, periods=(1, 2))
        params = {f"{PREFIX}.{s}": Var(np.zeros(shape)) for s, shape in
                  (("W_xp", (2, 2)), ("W_hp", (4, 2)), ("b_p", (1, 2)))}
        w = dynamic_scale_weights(Var(np.ones((3, 2))), Var(np.ones((3, 4))), params, PREFIX)
        assert np.array_equal(w.value, np.full((3, 2), 0.5))

    def test_sigmoid_of_two(self):
        # x=[1,1], W_xp column sums to 2 with everything else zero.
        params = {
            f"{PREFIX}.W_xp": Var(np.array([[2.0], [0.0]])),
            f"{PREFIX}.W_hp": Var(np.zeros((2, 1))),
            f"{PREFIX}.b_p": Var(np.zeros((1, 1))),
        }
        w = dynamic_scale_weights(Var([[1.0, 1.0]]), Var([[0.0, 0.0]]), params, PREFIX)
        assert w.value[0, 0] == pytest.approx(sigmoid(2.0), abs=1e-12)

    def test_range_open_unit_interval(self):
        rng = np.random.default_rng(0)
        cfg = TemporalConfig(in_width=3, hidden_width=6, periods=(1, 2, 4))
        store = make_params(cfg, seed=1)
        w = dynamic_scale_weights(Var(rng.normal(size=(5, 3))),
                                  Var(rng.normal(size=(5, 6))),
                                  store.leaves(), PREFIX)
        assert np.all(w.value > 0.0) and np.all(w.value < 1.0)
        assert w.shape == (5, 3)


class TestApplyScaleWeights:
    def test_hand_example(self):
        cfg = TemporalConfig(in_width=1, hidden_width=4, periods=(1, 2))
        h = Var([[1.0, 2.0, 3.0, 4.0]])
        w = Var([[0.5, 0.25]])
        out = apply_scale_weights(h, w, cfg)
        assert out.value.tolist() == [[0.5, 1.0, 0.75, 1.0]]

    def test_unit_weights_identity(self):
        cfg = TemporalConfig(in_width=1, hidden_width=6, periods=(1, 2, 4))
        rng = np.random.default_rng(1)
        h = rng.normal(size=(4, 6))
        out = apply_scale_weights(Var(h), Var(np.ones((4, 3))), cfg)
        assert np.array_equal(out.value, h)

    def test_per_row_weights(self):
        cfg = TemporalConfig(in_width=1, hidden_width=2, periods=(1, 2))
        h = Var([[1.0, 1.0], [1.0, 1.0]])
        w = Var([[0.2, 0.4], [0.6, 0.8]])
        out = apply_scale_weights(h, w, cfg)
        assert np.allclose(out.value, [[0.2, 0.4], [0.6, 0.8]])


class TestMtGruStep:
    def numpy_params(self, store):
        return {k.split(".", 1)[1]: v.copy() for k, v in store.params.items()}

    def test_bypass_matches_classic_gru_oracle(self):
        # With scale weights pinned and a single always-eligible part, the
        # cell must reduce to a standard GRU to machine precision.
        cfg = TemporalConfig(in_width=4, hidden_width=6, periods=(1,),
                             bypass_scale_weights=True)
        store = make_params(cfg, seed=3)
        p = self.numpy_params(store)
        rng = np.random.default_rng(4)
        h_var = np.zeros((5, 6))
        h_ref = np.zeros((5, 6))
        for t in range(1, 101):
            x = rng.normal(size=(5, 4))
            h_var = mt_gru_step(Var(x), Var(h_var), t, store.leaves(), cfg, PREFIX).value
            h_ref = classic_gru_step(x, h_ref, p)
            assert np.max(np.abs(h_var - h_ref)) < 1e-12

    def test_bypass_all_parts_eligible_still_classic(self):
        # Multiple parts with period 1..  all eligible at t=lcm keeps the
        # classic update on every column.
        cfg = TemporalConfig(in_width=3, hidden_width=4, periods=(1, 2),
                             bypass_scale_weights=True)
        store = make_params(cfg, seed=5)
        p = self.numpy_params(store)
        rng = np.random.default_rng(6)
        x = rng.normal(size=(2, 3))
        h = rng.normal(size=(2, 4))
        out = mt_gru_step(Var(x), Var(h), 2, store.leaves(), cfg, PREFIX)
        assert np.max(np.abs(out.value - classic_gru_step(x, h, p))) < 1e-12

    def test_ineligible_part_carries_scaled_state(self):
        # At t=1 only part 0 updates; part 1 must equal w_1 * h_prev part 1.
        cfg = TemporalConfig(in_width=2, hidden_width=4, periods=(1, 2))
        store = make_params(cfg, seed=7)
        rng = np.random.default_rng(8)
        x = rng.normal(size=(3, 2))
        h = rng.normal(size=(3, 4))
        leaves = store.leaves()
        weights = dynamic_scale_weights(Var(x), Var(h), leaves, PREFIX).value
        out = mt_gru_step(Var(x), Var(h), 1, leaves, cfg, PREFIX).value
        assert np.allclose(out[:, 2:], weights[:, 1:2] * h[:, 2:])
        assert not np.allclose(out[:, :2], weights[:, 0:1] * h[:, :2])

    def test_bypass_ineligible_part_is_plain_carry(self):
        cfg = TemporalConfig(in_width=2, hidden_width=4, periods=(1, 2),
                             bypass_scale_weights=True)
        store = make_params(cfg, seed=9)
        rng = np.random.default_rng(10)
        x = rng.normal(size=(3, 2))
        h = rng.normal(size=(3, 4))
        out = mt_gru_step(Var(x), Var(h), 1, store.leaves(), cfg, PREFIX).value
        assert np.array_equal(out[:, 2:], h[:, 2:])

    def test_state_stays_bounded(self):
        cfg = TemporalConfig(in_width=2, hidden_width=6, periods=(1, 2, 4))
        store = make_params(cfg, seed=11)
        rng = np.random.default_rng(12)
        h = np.zeros((4, 6))
        for t in range(1, 61):
            x = rng.normal(size=(4, 2))
            h = mt_gru_step(Var(x), Var(h), t, store.leaves(), cfg, PREFIX).value
        assert np.max(np.abs(h)) <= 1.0 + 1e-12

    def test_gradient_reaches_all_parameters(self):
        cfg = TemporalConfig(in_width=2, hidden_width=4, periods=(1, 2))
        store = make_params(cfg, seed=13)
        rng = np.random.default_rng(14)
        leaves = store.leaves()
        h = Var(rng.normal(size=(3, 4)))
        # Two steps so that every part is eligible at least once.
        for t in (1, 2):
            h = mt_gru_step(Var(rng.normal(size=(3, 2))), h, t, leaves, cfg, PREFIX)
        ad.sum_all(ad.elementwise_mul(h, h)).backward()
        for name, leaf in leaves.items():
            assert leaf.grad is not None and np.any(leaf.grad != 0.0), name

    def test_scale_weight_persistence_across_carry(self):
        # A part carried over twice gets its weight applied each step.
        cfg = TemporalConfig(in_width=1, hidden_width=4, periods=(1, 4))
        store = make_params(cfg, seed=15)
        # Zero the gate inputs for part 1 path is hard; instead check the
        # multiplicative shrink: with weights < 1 the carried part's norm
        # cannot grow while it stays ineligible.
        rng = np.random.default_rng(16)
        x1, x2 = rng.normal(size=(2, 1)), rng.normal(size=(2, 1))
        h0 = rng.normal(size=(2, 4))
        leaves = store.leaves()
        h1 = mt_gru_step(Var(x1), Var(h0), 1, leaves, cfg, PREFIX).value
        h2 = mt_gru_step(Var(x2), Var(h1), 2, leaves, cfg, PREFIX).value
        assert np.all(np.abs(h1[:, 2:]) < np.abs(h0[:, 2:]) + 1e-15)
        assert np.all(np.abs(h2[:, 2:]) < np.abs(h1[:, 2:]) + 1e-15)
