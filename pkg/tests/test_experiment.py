import numpy as np
import pytest

from dualscale import experiment
from dualscale.experiment import (
    MetricReport,
    SegmentMetrics,
    TrainConfig,
    default_segments,
    evaluate,
    grid_search_periods,
    metrics_from_errors,
    run_seed_sweep,
    train,
    validation_loss,
    weight_diagnostic,
)
from dualscale.geo import ScaleGraph, normalize_propagation
from dualscale.model import Episode, Forecaster, ModelConfig
from dualscale.pipeline import (
    SplitSpec,
    gen_multiperiod,
    synthetic_stations,
    window_episodes,
    zscore_fit,
)


def make_graphs(s_count, c_count, seed=0):
    rng = np.random.default_rng(seed)

    def graph(n):
        a = rng.integers(0, 2, size=(n, n)).astype(float)
        a = np.triu(a, 1)
        a = a + a.T
        return ScaleGraph([f"n{i}" for i in range(n)], a.copy(), a,
                          normalize_propagation(a))

    gamma = np.zeros((s_count, c_count))
    for i in range(s_count):
        gamma[i, i % c_count] = 1.0
    return graph(s_count), graph(c_count), gamma


def small_setup(seed=1, n_train=6, n_val=2, t_hist=4, tau=3, s_count=4):
    rng = np.random.default_rng(seed)
    gs, gc, gamma = make_graphs(s_count, 2)
    cfg = ModelConfig(met_channels=2, gcn_width=3, fuse_width=3,
                      hidden_width=4, periods=(1, 2))
    model = Forecaster(cfg, gs, gc, gamma)
    model.init_params(seed)

    def episodes(n):
        return [Episode(rng.normal(size=(t_hist, s_count)),
                        rng.normal(size=(t_hist + tau, s_count, 2)),
                        rng.normal(size=(tau, s_count))) for _ in range(n)]

    return model, cfg, episodes(n_train), episodes(n_val), (gs, gc, gamma)


class TestMetrics:
    def test_worked_example(self):
        # Errors 1 and 2 on two cells: MAE = 1.5, RMSE = sqrt(2.5).
        errors = np.array([[[1.0, 2.0]]])
        report = metrics_from_errors(errors, [(1, 1)])
        assert report.segments[0].mae == pytest.approx(1.5)
        assert report.segments[0].rmse == pytest.approx(np.sqrt(2.5))

    def test_rmse_at_least_mae(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            errors = rng.normal(size=(3, 6, 4))
            report = metrics_from_errors(errors, default_segments(6))
            for seg in report.segments:
                assert seg.rmse >= seg.mae - 1e-12

    def test_constant_errors_equalize(self):
        report = metrics_from_errors(np.full((2, 3, 2), -2.0), [(1, 3)])
        assert report.segments[0].mae == pytest.approx(2.0)
        assert report.segments[0].rmse == pytest.approx(2.0)

    def test_invalid_segment_metrics_rejected(self):
        with pytest.raises(AssertionError):
            SegmentMetrics((1, 1), mae=2.0, rmse=1.0)

    def test_default_segments(self):
        assert default_segments(24) == [(1, 8), (9, 16), (17, 24)]
        assert default_segments(7) == [(1, 7)]

    def test_report_csv(self, tmp_path):
        report = MetricReport([SegmentMetrics((1, 8), 1.0, 1.5)])
        path = tmp_path / "metrics.csv"
        report.to_csv(path)
        assert path.read_text().splitlines()[1] == "1,8,1,1.5"


class TestTraining:
    def test_loss_decreases_on_tiny_problem(self):
        model, _, train_eps, val_eps, _ = small_setup()
        cfg = TrainConfig(lr=3e-3, batch_size=4, epochs=8, patience=8, seeds=(1,))
        log = train(model, train_eps, val_eps, cfg, seed=1)
        assert log.rows[-1][1] < log.rows[0][1]
        assert log.best_val <= log.rows[0][2]

    def test_restores_best_validation_params(self):
        model, _, train_eps, val_eps, _ = small_setup()
        cfg = TrainConfig(lr=3e-3, batch_size=4, epochs=6, patience=6, seeds=(1,))
        log = train(model, train_eps, val_eps, cfg, seed=1)
        assert validation_loss(model, val_eps) == pytest.approx(log.best_val, rel=1e-12)

    def test_patience_one_stops_after_first_regression(self):
        model, _, train_eps, val_eps, _ = small_setup()
        cfg = TrainConfig(lr=3e-3, batch_size=4, epochs=50, patience=1, seeds=(1,))
        log = train(model, train_eps, val_eps, cfg, seed=1)
        vals = [row[2] for row in log.rows]
        # Stops at the first epoch whose validation loss fails to improve.
        assert log.stopped_epoch < 50 or all(
            v < min(vals[:i] or [np.inf]) for i, v in enumerate(vals))
        if log.stopped_epoch < 50:
            assert vals[-1] >= min(vals[:-1])

    def test_deterministic_runs(self):
        def run():
            model, _, train_eps, val_eps, _ = small_setup()
            cfg = TrainConfig(lr=3e-3, batch_size=4, epochs=4, patience=4, seeds=(1,))
            log = train(model, train_eps, val_eps, cfg, seed=2)
            return log.rows, {k: v.copy() for k, v in model.store.params.items()}

        rows1, params1 = run()
        rows2, params2 = run()
        assert rows1 == rows2
        for k in params1:
            assert np.array_equal(params1[k], params2[k])

    def test_empty_training_set_rejected(self):
        model, _, _, val_eps, _ = small_setup()
        with pytest.raises(ValueError):
            train(model, [], val_eps, TrainConfig(), seed=1)

    def test_log_csv(self, tmp_path):
        model, _, train_eps, val_eps, _ = small_setup()
        cfg = TrainConfig(lr=3e-3, batch_size=4, epochs=2, patience=2, seeds=(1,))
        log = train(model, train_eps, val_eps, cfg, seed=1)
        path = tmp_path / "log.csv"
        log.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss"
        assert len(lines) == 1 + len(log.rows)


class TestEvaluate:
    def test_denormalization_applied(self):
        model, _, train_eps, _, _ = small_setup()
        from dualscale.pipeline import NormStats
        norm = NormStats(air_mean=10.0, air_std=2.0,
                         met_mean=np.zeros(2), met_std=np.ones(2))
        plain = evaluate(model, train_eps[:2])
        scaled = evaluate(model, train_eps[:2], norm)
        assert scaled.mean_mae == pytest.approx(2.0 * plain.mean_mae, rel=1e-9)

    def test_perfect_predictions_zero_error(self):
        model, _, train_eps, _, _ = small_setup()
        ep = train_eps[0]
        pred_s, _ = model.predict(ep)
        rigged = Episode(ep.air_hist, ep.met, pred_s.copy())
        report = evaluate(model, [rigged])
        assert report.mean_mae == 0.0 and report.mean_rmse == 0.0


class TestSeedSweep:
    def test_aggregation_matches_manual_mean_std(self):
        model, cfg, train_eps, val_eps, graphs = small_setup()
        gs, gc, gamma = graphs

        def make(c):
            return Forecaster(c, gs, gc, gamma)

        tc = TrainConfig(lr=3e-3, batch_size=4, epochs=2, patience=2, seeds=(1, 2, 3))
        sweep = run_seed_sweep(cfg, make, train_eps, val_eps, val_eps, tc)
        assert sorted(sweep.per_seed) == [1, 2, 3]
        agg = sweep.aggregate()
        for i, (steps, mae_m, mae_s, rmse_m, rmse_s) in enumerate(agg):
            maes = [sweep.per_seed[s].segments[i].mae for s in (1, 2, 3)]
            assert mae_m == pytest.approx(np.mean(maes), rel=1e-12)
            assert mae_s == pytest.approx(np.std(maes), rel=1e-12)
        assert sweep.mean_mae == pytest.approx(
            np.mean([r.mean_mae for r in sweep.per_seed.values()]), rel=1e-12)


class TestGridSearch:
    def test_divisibility_skip_and_ranking(self):
        model, cfg, train_eps, val_eps, graphs = small_setup()
        gs, gc, gamma = graphs

        def make(c):
            return Forecaster(c, gs, gc, gamma)

        tc = TrainConfig(lr=3e-3, batch_size=4, epochs=1, patience=1, seeds=(1,))
        # hidden_width=4: a 3-part vector is not divisible and must be skipped.
        rows, skipped = grid_search_periods(
            cfg, [(1, 2), (1, 4), (1, 2, 4)], make, train_eps, val_eps, val_eps, tc)
        assert skipped == [(1, 2, 4)]
        assert [r[0] for r in rows] in ([(1, 2), (1, 4)], [(1, 4), (1, 2)])
        maes = [r[1].mean_mae for r in rows]
        assert maes == sorted(maes)


class TestWeightDiagnostic:
    def test_untrained_agreement_near_chance(self):
        stations = synthetic_stations(4, 2, seed=5)
        synth = gen_multiperiod(stations, seed=5)
        gs, gc, gamma = make_graphs(4, 2)
        cfg = ModelConfig(met_channels=2, gcn_width=3, fuse_width=3,
                          hidden_width=6, periods=(1, 2, 4))
        model = Forecaster(cfg, gs, gc, gamma)
        model.init_params(1)
        diag = weight_diagnostic(model, synth)
        assert diag.weights.shape == (synth.bundle.length, 3)
        assert diag.argmax_part.shape == (synth.bundle.length,)
        assert 0.0 <= diag.agreement <= 1.0

    def test_skip_steps_changes_denominator(self):
        stations = synthetic_stations(4, 2, seed=6)
        synth = gen_multiperiod(stations, seed=6)
        gs, gc, gamma = make_graphs(4, 2)
        cfg = ModelConfig(met_channels=2, gcn_width=3, fuse_width=3,
                          hidden_width=6, periods=(1, 2, 4))
        model = Forecaster(cfg, gs, gc, gamma)
        model.init_params(2)
        full = weight_diagnostic(model, synth, skip_steps=0)
        tail = weight_diagnostic(model, synth, skip_steps=100)
        expect = (full.argmax_part[100:] == synth.period_rank[100:]).mean()
        assert tail.agreement == pytest.approx(float(expect))


class TestEndToEndSynthetic:
    def test_pipeline_to_training_smoke(self):
        stations = synthetic_stations(4, 2, seed=7)
        synth = gen_multiperiod(stations, seed=7)
        bundle = synth.bundle
        spec = SplitSpec.fractions(bundle.length)
        norm = zscore_fit(bundle, spec)
        z = norm.transform(bundle)
        train_eps = window_episodes(z, spec.train, history=6, horizon=3, stride=12)
        val_eps = window_episodes(z, spec.val, history=6, horizon=3, stride=12)
        gs, gc, gamma = make_graphs(4, 2)
        cfg = ModelConfig(met_channels=2, gcn_width=4, fuse_width=4,
                          hidden_width=6, periods=(1, 2, 4))
        model = Forecaster(cfg, gs, gc, gamma)
        model.init_params(1)
        tc = TrainConfig(lr=3e-3, batch_size=8, epochs=3, patience=3, seeds=(1,))
        log = train(model, train_eps, val_eps, tc, seed=1)
        assert log.rows[-1][2] < log.rows[0][2] * 1.5  # no blow-up
        report = evaluate(model, val_eps, norm)
        assert np.isfinite(report.mean_mae)
