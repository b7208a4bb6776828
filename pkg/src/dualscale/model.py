"""Sequence-to-sequence forecaster.

Per step: assemble [previous air | current meteorology] at both scales, run
the spatial block, advance both recurrent cells, and emit per-scale linear
head predictions. During the forecast phase each scale feeds back its own
previous prediction as the next air input.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import spatial, temporal
from .autodiff import Var
from .geo import ScaleGraph, aggregate_to_city

HEAD_W_STATION = "head.W_station"
HEAD_B_STATION = "head.b_station"
HEAD_W_CITY = "head.W_city"
HEAD_B_CITY = "head.b_city"

STATION_GRU = "station_gru"
CITY_GRU = "city_gru"

VARIANTS = ("full", "no_city_scale", "no_station_to_city", "plain_gru", "fixed_scale_weights")


@dataclass(frozen=True)
class ModelConfig:
    met_channels: int
    gcn_width: int = 32
    fuse_width: int = 32
    hidden_width: int = 48
    periods: tuple[int, ...] = (1, 2, 4)
    gcn_activation: str = "relu"
    variant: str = "full"
    # "head": each scale feeds back its own prediction; "aggregate": the city
    # input is re-aggregated from station predictions.
    city_feedback: str = "head"
    include_warmup_loss: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.city_feedback not in ("head", "aggregate"):
            raise ValueError(f"unknown city_feedback {self.city_feedback!r}")

    def resolved(self) -> "ModelConfig":
        """Apply variant rewrites (plain_gru collapses the temporal scales)."""
        if self.variant == "plain_gru":
            return replace(self, periods=(1,))
        return self

    @property
    def spatial_config(self) -> spatial.SpatialConfig:
        return spatial.SpatialConfig(self.met_channels, self.gcn_width,
                                     self.fuse_width, self.gcn_activation)

    @property
    def temporal_config(self) -> temporal.TemporalConfig:
        cfg = self.resolved()
        bypass = cfg.variant in ("plain_gru", "fixed_scale_weights")
        return temporal.TemporalConfig(cfg.spatial_config.fused_width,
                                       cfg.hidden_width, cfg.periods, bypass)


@dataclass
class Episode:
    """One training/evaluation window in normalized units.

    air_hist: (T, S) observed air inputs; met: (T+tau, S, M); targets: (tau, S).
    """

    air_hist: np.ndarray
    met: np.ndarray
    targets: np.ndarray

    @property
    def history_steps(self) -> int:
        return self.air_hist.shape[0]

    @property
    def horizon_steps(self) -> int:
        return self.targets.shape[0]

    @property
    def station_count(self) -> int:
        return self.air_hist.shape[1]


class Forecaster:
    """Model wiring: parameters, graphs, and the autoregressive rollout."""

    def __init__(self, config: ModelConfig, station_graph: ScaleGraph,
                 city_graph: ScaleGraph, gamma: np.ndarray):
        self.config = config.resolved()
        self.station_graph = station_graph
        self.city_graph = city_graph
        self.gamma = np.asarray(gamma, dtype=np.float64)
        counts = self.gamma.sum(axis=0)
        self._agg = self.gamma.T / counts[:, None]  # mean aggregation matrix
        self.store = ad.ParamStore()

    @property
    def has_city_scale(self) -> bool:
        return self.config.variant != "no_city_scale"

    def init_params(self, seed: int) -> None:
        cfg = self.config
        scfg = cfg.spatial_config
        tcfg = cfg.temporal_config
        store = ad.ParamStore()
        base = int(seed) * 1000
        store.add(spatial.STATION_GCN, ad.seeded_init((scfg.in_width, scfg.gcn_width), base + 1))
        temporal.register_params(store, tcfg, STATION_GRU, base + 100)
        store.add(HEAD_W_STATION, ad.seeded_init((tcfg.hidden_width, 1), base + 2))
        store.add(HEAD_B_STATION, ad.seeded_init((1, 1), base, scheme="zeros"))
        if self.has_city_scale:
            store.add(spatial.CITY_GCN, ad.seeded_init((scfg.in_width, scfg.gcn_width), base + 3))
            store.add(spatial.STATION_FUSE, ad.seeded_init((scfg.gcn_width, scfg.fuse_width), base + 4))
            if cfg.variant != "no_station_to_city":
                store.add(spatial.CITY_FUSE, ad.seeded_init((scfg.gcn_width, scfg.fuse_width), base + 5))
            temporal.register_params(store, tcfg, CITY_GRU, base + 200)
            store.add(HEAD_W_CITY, ad.seeded_init((tcfg.hidden_width, 1), base + 6))
            store.add(HEAD_B_CITY, ad.seeded_init((1, 1), base, scheme="zeros"))
        self.store = store

    # -- per-step assembly ---------------------------------------------------

    def _spatial_step(self, x_s: Var, x_c: Var | None, params: dict[str, Var]):
        cfg = self.config
        scfg = cfg.spatial_config
        prop_s = ad.constant(self.station_graph.propagation)
        station_gcn = spatial.gcn_forward(x_s, prop_s, params[spatial.STATION_GCN],
                                          scfg.activation)
        if not self.has_city_scale:
            pad = ad.constant(np.zeros((x_s.shape[0], scfg.fuse_width)))
            return ad.concat_cols(x_s, pad), None
        prop_c = ad.constant(self.city_graph.propagation)
        city_gcn = spatial.gcn_forward(x_c, prop_c, params[spatial.CITY_GCN], scfg.activation)
        gamma = ad.constant(self.gamma)
        to_station = ad.matmul(ad.matmul(gamma, city_gcn), params[spatial.STATION_FUSE])
        fused_s = ad.concat_cols(x_s, to_station)
        if cfg.variant == "no_station_to_city":
            to_city = ad.constant(np.zeros((x_c.shape[0], scfg.fuse_width)))
        else:
            gamma_t = ad.constant(self.gamma.T)
            to_city = ad.matmul(ad.matmul(gamma_t, station_gcn), params[spatial.CITY_FUSE])
        return fused_s, ad.concat_cols(x_c, to_city)

    # -- rollout ---------------------------------------------------------------

    def forward_episode(self, ep: Episode, params: dict[str, Var] | None = None,
                        collect_weights: bool = False):
        """Run warm-up plus forecast; returns per-scale forecast predictions.

        Predictions are lists of Vars, one per horizon step (S x 1 / C x 1).
        With `collect_weights`, the per-step mean station dynamic weights are
        returned as a (T+tau, V) array alongside.
        """
        cfg = self.config
        tcfg = cfg.temporal_config
        if params is None:
            params = self.store.leaves()
        t_hist = ep.history_steps
        tau = ep.horizon_steps
        s_count = ep.station_count
        c_count = self.gamma.shape[1]

        h_s = ad.constant(np.zeros((s_count, tcfg.hidden_width)))
        h_c = ad.constant(np.zeros((c_count, tcfg.hidden_width))) if self.has_city_scale else None
        pred_s_prev: Var | None = None
        pred_c_prev: Var | None = None
        forecast_s: list[Var] = []
        forecast_c: list[Var] = []
        warmup_s: list[Var] = []
        warmup_c: list[Var] = []
        weight_rows: list[np.ndarray] = []

        for t in range(1, t_hist + tau + 1):
            met_t = ep.met[t - 1]
            if t <= t_hist:
                # Observed previous air; the first step reuses the first reading.
                air_s_np = ep.air_hist[max(t - 2, 0)][:, None]
                air_s = ad.constant(air_s_np)
                air_c = ad.constant(self._agg @ air_s_np) if self.has_city_scale else None
            else:
                air_s = pred_s_prev
                if self.has_city_scale:
                    if cfg.city_feedback == "head":
                        air_c = pred_c_prev
                    else:
                        air_c = ad.matmul(ad.constant(self._agg), pred_s_prev)
                else:
                    air_c = None

            x_s = ad.concat_cols(air_s, ad.constant(met_t))
            x_c = None
            if self.has_city_scale:
                x_c = ad.concat_cols(air_c, ad.constant(self._agg @ met_t))

            fused_s, fused_c = self._spatial_step(x_s, x_c, params)

            if collect_weights and not tcfg.bypass_scale_weights:
                w = temporal.dynamic_scale_weights(fused_s, h_s, params, STATION_GRU)
                weight_rows.append(w.value.mean(axis=0))
            h_s = temporal.mt_gru_step(fused_s, h_s, t, params, tcfg, STATION_GRU)
            pred_s_prev = ad.add(ad.matmul(h_s, params[HEAD_W_STATION]), params[HEAD_B_STATION])
            if self.has_city_scale:
                h_c = temporal.mt_gru_step(fused_c, h_c, t, params, tcfg, CITY_GRU)
                pred_c_prev = ad.add(ad.matmul(h_c, params[HEAD_W_CITY]), params[HEAD_B_CITY])

            if t > t_hist:
                forecast_s.append(pred_s_prev)
                if self.has_city_scale:
                    forecast_c.append(pred_c_prev)
            else:
                warmup_s.append(pred_s_prev)
                if self.has_city_scale:
                    warmup_c.append(pred_c_prev)

        result = (forecast_s, forecast_c, warmup_s, warmup_c)
        if collect_weights:
            return result, np.array(weight_rows)
        return result

    def episode_loss(self, ep: Episode, params: dict[str, Var]) -> Var:
        """Two-scale MSE over forecast steps (optionally plus warm-up steps)."""
        forecast_s, forecast_c, warmup_s, warmup_c = self.forward_episode(ep, params)
        tau = ep.horizon_steps
        if tau == 0 and not self.config.include_warmup_loss:
            return ad.constant(np.zeros((1, 1)))
        terms: list[Var] = []
        targets_c = (self._agg @ ep.targets.T).T if self.has_city_scale else None

        def mse_terms(preds: list[Var], targets: np.ndarray, node_count: int) -> None:
            if not preds:
                return
            acc = None
            for k, p in enumerate(preds):
                err = ad.sub(p, ad.constant(targets[k][:, None]))
                sq = ad.sum_all(ad.elementwise_mul(err, err))
                acc = sq if acc is None else ad.add(acc, sq)
            terms.append(ad.scale(acc, 1.0 / (node_count * len(preds))))

        s_count = ep.station_count
        c_count = self.gamma.shape[1]
        mse_terms(forecast_s, ep.targets, s_count)
        if self.has_city_scale:
            mse_terms(forecast_c, targets_c, c_count)
        if self.config.include_warmup_loss and ep.history_steps > 1:
            # Warm-up head at step t estimates reading t; step 1 is skipped
            # because its input is the duplicated first reading.
            warm_targets = ep.air_hist[1:]
            mse_terms(warmup_s[1:], warm_targets, s_count)
            if self.has_city_scale:
                warm_targets_c = (self._agg @ warm_targets.T).T
                mse_terms(warmup_c[1:], warm_targets_c, c_count)
        if not terms:
            return ad.constant(np.zeros((1, 1)))
        total = terms[0]
        for term in terms[1:]:
            total = ad.add(total, term)
        return total

    def batch_loss(self, episodes: list[Episode], params: dict[str, Var]) -> Var:
        losses = [self.episode_loss(ep, params) for ep in episodes]
        total = losses[0]
        for lo in losses[1:]:
            total = ad.add(total, lo)
        return ad.scale(total, 1.0 / len(episodes))

    # -- inference -------------------------------------------------------------

    def predict(self, ep: Episode) -> tuple[np.ndarray, np.ndarray]:
        """Forecast values as arrays: (tau, S) and (tau, C) (city empty if disabled)."""
        forecast_s, forecast_c, _, _ = self.forward_episode(ep, self.store.leaves())
        pred_s = np.array([p.value[:, 0] for p in forecast_s]).reshape(
            ep.horizon_steps, ep.station_count)
        if self.has_city_scale and forecast_c:
            pred_c = np.array([p.value[:, 0] for p in forecast_c])
        else:
            pred_c = np.zeros((ep.horizon_steps, 0))
        return pred_s, pred_c

    def weight_trace(self, ep: Episode) -> np.ndarray:
        """(T+tau, V) mean station-scale dynamic weights along the rollout."""
        _, weights = self.forward_episode(ep, self.store.leaves(), collect_weights=True)
        return weights


def two_scale_mse(pred_s: np.ndarray, pred_c: np.ndarray,
                  targets_s: np.ndarray, targets_c: np.ndarray) -> float:
    """Reference (non-differentiable) loss on arrays, for tests and reports."""
    tau = pred_s.shape[0]
    if tau == 0:
        return 0.0
    s_term = float(((pred_s - targets_s) ** 2).sum()) / (pred_s.shape[1] * tau)
    c_term = 0.0
    if pred_c.size:
        c_term = float(((pred_c - targets_c) ** 2).sum()) / (pred_c.shape[1] * tau)
    return s_term + c_term
