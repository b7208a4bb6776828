"""Training, evaluation, and diagnostic experiment runners."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import Episode, Forecaster, ModelConfig
from .pipeline import NormStats, SyntheticDataset


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 50
    patience: int = 10
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.patience < 1 or self.epochs < 1:
            raise ValueError("batch_size, patience, and epochs must all be >= 1")


@dataclass
class TrainLog:
    rows: list[tuple[int, float, float]] = field(default_factory=list)  # epoch, train, val
    stopped_epoch: int = 0
    best_epoch: int = 0
    best_val: float = float("inf")

    def to_csv(self, path: str | Path) -> None:
        lines = ["epoch,train_loss,val_loss"]
        lines += [f"{e},{tr:.10g},{va:.10g}" for e, tr, va in self.rows]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def train(forecaster: Forecaster, train_eps: list[Episode], val_eps: list[Episode],
          cfg: TrainConfig, seed: int) -> TrainLog:
    """Adam optimization of the two-scale loss with early stopping.

    The forecaster's parameters are left at the best-validation checkpoint.
    """
    if not train_eps:
        raise ValueError("no training episodes")
    rng = np.random.default_rng(seed)
    log = TrainLog()
    best_params: dict[str, np.ndarray] | None = None
    since_best = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_eps))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_eps[i] for i in order[start:start + cfg.batch_size]]
            leaves = forecaster.store.leaves()
            try:
                loss = forecaster.batch_loss(batch, leaves)
                loss.backward()
            except FloatingPointError as exc:
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}: {exc}") from exc
            forecaster.store.accumulate(leaves)
            forecaster.store.adam_step(cfg.lr, cfg.adam_beta1, cfg.adam_beta2,
                                       cfg.adam_eps, cfg.clip_norm)
            epoch_losses.append(float(loss.value[0, 0]))
        val = validation_loss(forecaster, val_eps)
        if not np.isfinite(val):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        log.rows.append((epoch, float(np.mean(epoch_losses)), val))
        if val < log.best_val:
            log.best_val = val
            log.best_epoch = epoch
            best_params = {k: v.copy() for k, v in forecaster.store.params.items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    log.stopped_epoch = log.rows[-1][0]
    if best_params is not None:
        for k, v in best_params.items():
            forecaster.store.params[k][:] = v
    return log


def validation_loss(forecaster: Forecaster, episodes: list[Episode]) -> float:
    if not episodes:
        return float("nan")
    leaves = forecaster.store.leaves()
    return float(forecaster.batch_loss(episodes, leaves).value[0, 0])


# -- metrics -------------------------------------------------------------------

@dataclass(frozen=True)
class SegmentMetrics:
    steps: tuple[int, int]   # 1-based inclusive horizon step range
    mae: float
    rmse: float

    def __post_init__(self):
        if self.rmse < self.mae - 1e-12:
            raise AssertionError(f"RMSE {self.rmse} < MAE {self.mae}")


@dataclass
class MetricReport:
    segments: list[SegmentMetrics]

    @property
    def mean_mae(self) -> float:
        return float(np.mean([s.mae for s in self.segments]))

    @property
    def mean_rmse(self) -> float:
        return float(np.mean([s.rmse for s in self.segments]))

    def to_csv(self, path: str | Path) -> None:
        lines = ["segment_start,segment_end,mae,rmse"]
        lines += [f"{s.steps[0]},{s.steps[1]},{s.mae:.10g},{s.rmse:.10g}"
                  for s in self.segments]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def describe(self) -> str:
        parts = [f"steps {s.steps[0]}-{s.steps[1]}: MAE={s.mae:.4f} RMSE={s.rmse:.4f}"
                 for s in self.segments]
        return "; ".join(parts)


def default_segments(horizon: int) -> list[tuple[int, int]]:
    """Three equal horizon segments (steps are 1-based inclusive)."""
    if horizon % 3 == 0:
        k = horizon // 3
        return [(1, k), (k + 1, 2 * k), (2 * k + 1, horizon)]
    return [(1, horizon)]


def metrics_from_errors(errors: np.ndarray, segments: list[tuple[int, int]]) -> MetricReport:
    """errors: (episodes, horizon, stations) de-normalized prediction errors."""
    segs = []
    for lo, hi in segments:
        sl = errors[:, lo - 1:hi, :]
        mae = float(np.abs(sl).mean())
        rmse = float(np.sqrt((sl ** 2).mean()))
        segs.append(SegmentMetrics((lo, hi), mae, rmse))
    return MetricReport(segs)


def evaluate(forecaster: Forecaster, episodes: list[Episode],
             norm: NormStats | None = None,
             segments: list[tuple[int, int]] | None = None) -> MetricReport:
    """Horizon-segmented MAE/RMSE on de-normalized station predictions."""
    if not episodes:
        raise ValueError("no evaluation episodes")
    horizon = episodes[0].horizon_steps
    if segments is None:
        segments = default_segments(horizon)
    errs = []
    for ep in episodes:
        pred_s, _ = forecaster.predict(ep)
        pred, truth = pred_s, ep.targets
        if norm is not None:
            pred = norm.inverse_air(pred)
            truth = norm.inverse_air(truth)
        errs.append(pred - truth)
    return metrics_from_errors(np.array(errs), segments)


def dump_predictions_csv(forecaster: Forecaster, episodes: list[Episode],
                         station_ids: list[str], norm: NormStats | None,
                         path: str | Path) -> None:
    """`episode,station_id,horizon_step,predicted,actual` in physical units."""
    lines = ["episode,station_id,horizon_step,predicted,actual"]
    for e, ep in enumerate(episodes):
        pred, _ = forecaster.predict(ep)
        truth = ep.targets
        if norm is not None:
            pred = norm.inverse_air(pred)
            truth = norm.inverse_air(truth)
        for k in range(ep.horizon_steps):
            for s, sid in enumerate(station_ids):
                lines.append(f"{e},{sid},{k + 1},{pred[k, s]:.10g},{truth[k, s]:.10g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- seed sweeps -----------------------------------------------------------------

@dataclass
class SweepResult:
    per_seed: dict[int, MetricReport]
    logs: dict[int, TrainLog]

    def aggregate(self) -> list[tuple[tuple[int, int], float, float, float, float]]:
        """Per segment: (steps, mae_mean, mae_std, rmse_mean, rmse_std)."""
        seeds = sorted(self.per_seed)
        out = []
        first = self.per_seed[seeds[0]]
        for i, seg in enumerate(first.segments):
            maes = np.array([self.per_seed[s].segments[i].mae for s in seeds])
            rmses = np.array([self.per_seed[s].segments[i].rmse for s in seeds])
            out.append((seg.steps, float(maes.mean()), float(maes.std()),
                        float(rmses.mean()), float(rmses.std())))
        return out

    @property
    def mean_mae(self) -> float:
        return float(np.mean([r.mean_mae for r in self.per_seed.values()]))

    @property
    def mean_rmse(self) -> float:
        return float(np.mean([r.mean_rmse for r in self.per_seed.values()]))


def run_seed_sweep(model_cfg: ModelConfig, make_forecaster, train_eps, val_eps, test_eps,
                   cfg: TrainConfig, norm: NormStats | None = None,
                   segments: list[tuple[int, int]] | None = None) -> SweepResult:
    """Train and evaluate one model configuration under each seed."""
    per_seed: dict[int, MetricReport] = {}
    logs: dict[int, TrainLog] = {}
    for seed in cfg.seeds:
        forecaster = make_forecaster(model_cfg)
        forecaster.init_params(seed)
        logs[seed] = train(forecaster, train_eps, val_eps, cfg, seed)
        per_seed[seed] = evaluate(forecaster, test_eps, norm, segments)
    return SweepResult(per_seed, logs)


# -- ablations ----------------------------------------------------------------------

ABLATION_VARIANTS = ("no_city_scale", "no_station_to_city", "plain_gru",
                     "fixed_scale_weights")


def ablate(model_cfg: ModelConfig, variant: str, make_forecaster,
           train_eps, val_eps, test_eps, cfg: TrainConfig,
           norm: NormStats | None = None) -> tuple[SweepResult, SweepResult]:
    """Full model vs one ablated variant under identical seeds and data order."""
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}")
    full = run_seed_sweep(replace(model_cfg, variant="full"), make_forecaster,
                          train_eps, val_eps, test_eps, cfg, norm)
    ablated = run_seed_sweep(replace(model_cfg, variant=variant), make_forecaster,
                             train_eps, val_eps, test_eps, cfg, norm)
    return full, ablated


# -- temporal-scale grid search -------------------------------------------------------

def grid_search_periods(model_cfg: ModelConfig, candidates: list[tuple[int, ...]],
                        make_forecaster, train_eps, val_eps, test_eps,
                        cfg: TrainConfig, norm: NormStats | None = None):
    """Train each period vector under identical seeds; rank by mean MAE then RMSE.

    Returns (ranked rows, skipped candidates). Row: (periods, sweep result).
    """
    rows = []
    skipped = []
    for periods in candidates:
        if model_cfg.hidden_width % len(periods) != 0:
            skipped.append(periods)
            continue
        cand_cfg = replace(model_cfg, periods=tuple(periods))
        rows.append((tuple(periods), run_seed_sweep(cand_cfg, make_forecaster,
                                                    train_eps, val_eps, test_eps,
                                                    cfg, norm)))
    rows.sort(key=lambda r: (r[1].mean_mae, r[1].mean_rmse))
    return rows, skipped


# -- dynamic-weight diagnostic ---------------------------------------------------------

@dataclass
class WeightDiagnostic:
    argmax_part: np.ndarray     # (L,) 0-based part index with highest mean weight
    weights: np.ndarray         # (L, V)
    agreement: float


def weight_diagnostic(forecaster: Forecaster, synth: SyntheticDataset,
                      norm: NormStats | None = None,
                      skip_steps: int = 0) -> WeightDiagnostic:
    """Per-step argmax temporal scale vs the labeled dominant-period rank.

    The model is rolled over the whole labeled sequence teacher-forced; the
    agreement score is the fraction of (non-skipped) steps where the argmax
    part's rank (parts are period-ascending) matches the label rank.
    """
    bundle = synth.bundle
    air = bundle.air
    met = bundle.met
    if norm is not None:
        air = (air - norm.air_mean) / norm.air_std
        met = (met - norm.met_mean) / norm.met_std
    ep = Episode(air_hist=air, met=met, targets=air[:0])
    weights = forecaster.weight_trace(ep)
    argmax = weights.argmax(axis=1)
    ranks = synth.period_rank
    valid = slice(skip_steps, None)
    agreement = float((argmax[valid] == ranks[valid]).mean())
    return WeightDiagnostic(argmax, weights, agreement)
