"""Data ingestion, imputation, normalization, windowing, and synthesis.

Time series are kept as dense (L, S) / (L, S, M) arrays with boolean
observation masks. Missing cells are filled by spatio-temporal KNN before
normalization and windowing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .geo import StationRecord, haversine_distance
from .model import Episode


class PipelineError(ValueError):
    pass


@dataclass
class SeriesBundle:
    """Uniformly sampled multi-station series with observation masks."""

    station_ids: list[str]
    timestamps: np.ndarray           # int64 epoch seconds, strictly increasing, uniform
    air: np.ndarray                  # (L, S)
    met: np.ndarray                  # (L, S, M)
    air_mask: np.ndarray             # True where observed
    met_mask: np.ndarray
    met_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        steps = np.diff(self.timestamps)
        if len(steps) and (np.any(steps <= 0) or len(set(steps.tolist())) > 1):
            raise PipelineError("timestamps must be strictly increasing and uniform")

    @property
    def length(self) -> int:
        return self.air.shape[0]

    @property
    def station_count(self) -> int:
        return self.air.shape[1]

    @property
    def met_channels(self) -> int:
        return self.met.shape[2]


@dataclass(frozen=True)
class SplitSpec:
    """Chronological [start, end) index ranges; disjoint, ordered, covering."""

    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]

    def __post_init__(self):
        t, v, e = self.train, self.val, self.test
        if not (0 <= t[0] < t[1] <= v[0] < v[1] <= e[0] < e[1]):
            raise PipelineError(f"split ranges must be ordered and disjoint: {t}, {v}, {e}")

    @classmethod
    def fractions(cls, length: int, train: float = 0.6, val: float = 0.2) -> "SplitSpec":
        n1 = int(length * train)
        n2 = int(length * (train + val))
        return cls((0, n1), (n1, n2), (n2, length))

    @classmethod
    def from_timestamps(cls, timestamps: np.ndarray, train_end: int, val_end: int) -> "SplitSpec":
        n1 = int(np.searchsorted(timestamps, train_end))
        n2 = int(np.searchsorted(timestamps, val_end))
        return cls((0, n1), (n1, n2), (n2, len(timestamps)))

    def range_for(self, name: str) -> tuple[int, int]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


# -- imputation ---------------------------------------------------------------

@dataclass(frozen=True)
class ImputeConfig:
    neighbors: int = 5
    w_time: float = 1.0          # cost per step of temporal offset
    w_space: float = 0.02        # cost per km (default: 50 km equals one step)
    time_window: int = 8         # steps searched on each side
    missing_ceiling: float = 0.15


def _impute_channel(values: np.ndarray, mask: np.ndarray, dist_km: np.ndarray,
                    station_ids: list[str], cfg: ImputeConfig) -> np.ndarray:
    """Fill missing cells of one (L, S) channel; observed cells untouched."""
    length, s_count = values.shape
    for s in range(s_count):
        rate = 1.0 - mask[:, s].mean()
        if rate > cfg.missing_ceiling:
            raise PipelineError(
                f"station {station_ids[s]} missing rate {rate:.2%} exceeds "
                f"ceiling {cfg.missing_ceiling:.2%}")
    out = values.copy()
    missing = np.argwhere(~mask)
    for t, s in missing:
        candidates = []  # (combined distance, |dt|, station_id, value)
        lo = max(0, t - cfg.time_window)
        hi = min(length, t + cfg.time_window + 1)
        for tt in range(lo, hi):
            if tt != t and mask[tt, s]:
                dt = abs(tt - t)
                candidates.append((cfg.w_time * dt, dt, station_ids[s], values[tt, s]))
        for ss in range(values.shape[1]):
            if ss != s and mask[t, ss]:
                candidates.append((cfg.w_space * dist_km[s, ss], 0, station_ids[ss],
                                   values[t, ss]))
        if not candidates:
            raise PipelineError(
                f"no imputation candidates for station {station_ids[s]} at index {t}")
        candidates.sort(key=lambda c: (c[0], c[1], c[2]))
        chosen = candidates[:cfg.neighbors]
        out[t, s] = sum(c[3] for c in chosen) / len(chosen)
    return out


def knn_impute(bundle: SeriesBundle, stations: list[StationRecord],
               cfg: ImputeConfig = ImputeConfig()) -> SeriesBundle:
    """Spatio-temporal KNN fill of air and meteorology channels."""
    order = {s.station_id: s for s in stations}
    recs = [order[sid] for sid in bundle.station_ids]
    n = len(recs)
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = haversine_distance(recs[i].latitude, recs[i].longitude,
                                   recs[j].latitude, recs[j].longitude)
            dist[i, j] = dist[j, i] = d
    air = _impute_channel(bundle.air, bundle.air_mask, dist, bundle.station_ids, cfg)
    met = bundle.met.copy()
    for m in range(bundle.met_channels):
        met[:, :, m] = _impute_channel(bundle.met[:, :, m], bundle.met_mask[:, :, m],
                                       dist, bundle.station_ids, cfg)
    return replace(bundle, air=air, met=met,
                   air_mask=np.ones_like(bundle.air_mask),
                   met_mask=np.ones_like(bundle.met_mask))


# -- normalization --------------------------------------------------------------

@dataclass(frozen=True)
class NormStats:
    air_mean: float
    air_std: float
    met_mean: np.ndarray   # (M,)
    met_std: np.ndarray

    def transform(self, bundle: SeriesBundle) -> SeriesBundle:
        air = (bundle.air - self.air_mean) / self.air_std
        met = (bundle.met - self.met_mean) / self.met_std
        return replace(bundle, air=air, met=met)

    def inverse_air(self, values: np.ndarray) -> np.ndarray:
        return values * self.air_std + self.air_mean


def zscore_fit(bundle: SeriesBundle, split: SplitSpec) -> NormStats:
    """Channel statistics from the training split only."""
    lo, hi = split.train
    if hi <= lo:
        raise PipelineError("training split is empty")
    air = bundle.air[lo:hi]
    air_std = float(air.std())
    if air_std <= 0.0:
        raise PipelineError("air channel has zero variance on the training split")
    met = bundle.met[lo:hi]
    met_mean = met.mean(axis=(0, 1)) if met.size else np.zeros(bundle.met_channels)
    met_std = met.std(axis=(0, 1)) if met.size else np.ones(bundle.met_channels)
    if np.any(met_std <= 0.0):
        bad = [bundle.met_names[i] if bundle.met_names else str(i)
               for i in np.where(met_std <= 0.0)[0]]
        raise PipelineError(f"zero-variance meteorology channels: {bad}")
    return NormStats(float(air.mean()), air_std, met_mean, met_std)


# -- resampling -----------------------------------------------------------------

def resample_mean(bundle: SeriesBundle, factor: int) -> SeriesBundle:
    """Average consecutive groups of `factor` steps (e.g. hourly to 3-hourly).

    Requires masks already complete (impute first, then aggregate).
    """
    if not (bundle.air_mask.all() and bundle.met_mask.all()):
        raise PipelineError("resample requires imputed (complete) data")
    groups = bundle.length // factor
    length = groups * factor
    air = bundle.air[:length].reshape(groups, factor, bundle.station_count).mean(axis=1)
    met = bundle.met[:length].reshape(groups, factor, bundle.station_count,
                                      bundle.met_channels).mean(axis=1)
    ts = bundle.timestamps[:length:factor]
    return replace(bundle, timestamps=ts, air=air, met=met,
                   air_mask=np.ones(air.shape, dtype=bool),
                   met_mask=np.ones(met.shape, dtype=bool))


# -- windowing --------------------------------------------------------------------

def window_episodes(bundle: SeriesBundle, split_range: tuple[int, int],
                    history: int, horizon: int, stride: int = 1) -> list[Episode]:
    """Sliding windows fully inside one split range."""
    lo, hi = split_range
    total = history + horizon
    episodes = []
    start = lo
    while start + total <= hi:
        air = bundle.air[start:start + total]
        episodes.append(Episode(
            air_hist=air[:history].copy(),
            met=bundle.met[start:start + total].copy(),
            targets=air[history:].copy(),
        ))
        start += stride
    return episodes


# -- synthetic multi-period generator ----------------------------------------------

@dataclass(frozen=True)
class Segment:
    period: int        # steps
    amplitude: float
    length: int        # steps


DEFAULT_SEGMENTS = (Segment(16, 1.0, 100), Segment(48, 1.0, 160), Segment(6, 1.0, 90))


@dataclass
class SyntheticDataset:
    stations: list[StationRecord]
    bundle: SeriesBundle
    dominant_period: np.ndarray     # (L,) step labels
    period_rank: np.ndarray         # (L,) 0-based rank of the dominant period (ascending)


def synthetic_stations(station_count: int, city_count: int, seed: int) -> list[StationRecord]:
    """Clustered station geography: one tight cluster of stations per city."""
    rng = np.random.default_rng(seed)
    centers = [(39.0 + 1.5 * k, 116.0 + 1.5 * (k % 3)) for k in range(city_count)]
    stations = []
    for i in range(station_count):
        c = i % city_count
        lat = centers[c][0] + rng.uniform(-0.15, 0.15)
        lon = centers[c][1] + rng.uniform(-0.15, 0.15)
        stations.append(StationRecord(
            station_id=f"st{i:03d}", city_id=f"city{c}",
            latitude=float(lat), longitude=float(lon),
            elevation=float(rng.uniform(0, 100))))
    return stations


def gen_multiperiod(stations: list[StationRecord],
                    segments=DEFAULT_SEGMENTS,
                    noise_sd: float = 0.1,
                    met_channels: int = 2,
                    city_amplitude: float = 0.0,
                    seed: int = 0,
                    step_seconds: int = 3 * 3600) -> SyntheticDataset:
    """Concatenated sinusoidal regimes with per-station phase and labels.

    Each station carries the regime sinusoid with its own random phase; an
    optional city-wide sinusoid (shared by member stations) injects
    city-scale signal. The first meteorology channel leads the regime signal
    by a quarter period; the rest are noise.
    """
    rng = np.random.default_rng(seed)
    s_count = len(stations)
    length = sum(seg.length for seg in segments)
    air = np.zeros((length, s_count))
    dominant = np.zeros(length, dtype=int)
    phases = rng.uniform(0, 2 * math.pi, size=s_count)
    met = rng.normal(0.0, 1.0, size=(length, s_count, met_channels))

    pos = 0
    for seg in segments:
        t = np.arange(seg.length)
        for s in range(s_count):
            air[pos:pos + seg.length, s] = seg.amplitude * np.sin(
                2 * math.pi * t / seg.period + phases[s])
            if met_channels >= 1:
                met[pos:pos + seg.length, s, 0] = seg.amplitude * np.sin(
                    2 * math.pi * (t + seg.period / 4.0) / seg.period + phases[s])
        dominant[pos:pos + seg.length] = seg.period
        pos += seg.length

    if city_amplitude > 0.0:
        city_ids = sorted({s.city_id for s in stations})
        city_phase = {c: rng.uniform(0, 2 * math.pi) for c in city_ids}
        city_level = {c: rng.uniform(-1.0, 1.0) for c in city_ids}
        t = np.arange(length)
        for s_idx, s in enumerate(stations):
            air[:, s_idx] += city_amplitude * (
                np.sin(2 * math.pi * t / 64.0 + city_phase[s.city_id])
                + city_level[s.city_id])

    air += rng.normal(0.0, noise_sd, size=air.shape)

    periods_sorted = sorted({seg.period for seg in segments})
    rank = np.array([periods_sorted.index(p) for p in dominant])
    ts = np.arange(length, dtype=np.int64) * step_seconds
    bundle = SeriesBundle(
        station_ids=[s.station_id for s in stations],
        timestamps=ts, air=air, met=met,
        air_mask=np.ones(air.shape, dtype=bool),
        met_mask=np.ones(met.shape, dtype=bool),
        met_names=[f"synth{m}" for m in range(met_channels)])
    return SyntheticDataset(stations, bundle, dominant, rank)


def dominant_period_by_periodogram(values: np.ndarray, candidates: list[int],
                                   window: int) -> np.ndarray:
    """Per-step argmax-period labels from a windowed periodogram (oracle)."""
    length = len(values)
    labels = np.zeros(length, dtype=int)
    half = window // 2
    for t in range(length):
        lo = max(0, t - half)
        hi = min(length, lo + window)
        lo = max(0, hi - window)
        seg = values[lo:hi] - values[lo:hi].mean()
        powers = []
        for p in candidates:
            k = np.arange(len(seg))
            c = np.exp(-2j * math.pi * k / p)
            powers.append(abs(np.dot(seg, c)) ** 2)
        labels[t] = candidates[int(np.argmax(powers))]
    return labels


# -- CSV interfaces -----------------------------------------------------------------

def load_measurements_csv(path: str | Path, pollutant: str,
                          station_ids: list[str]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Long-format `timestamp,station_id,pollutant,value`; empty value = missing.

    Returns (timestamps epoch seconds, values (L,S), mask (L,S)).
    """
    df = pd.read_csv(path, dtype={"station_id": str, "pollutant": str})
    df = df[df["pollutant"] == pollutant]
    df["timestamp"] = pd.to_datetime(df["timestamp"], utc=True)
    wide = df.pivot_table(index="timestamp", columns="station_id", values="value",
                          aggfunc="first", dropna=False)
    wide = wide.reindex(columns=station_ids)
    ts = np.asarray(wide.index.view(np.int64)) // 10 ** 9
    values = wide.to_numpy(dtype=np.float64)
    mask = ~np.isnan(values)
    values = np.nan_to_num(values)
    return ts, values, mask


def load_meteorology_csv(path: str | Path,
                         station_ids: list[str]) -> tuple[np.ndarray, np.ndarray,
                                                          np.ndarray, list[str]]:
    """Wide-format `timestamp,station_id,<channel...>` meteorology."""
    df = pd.read_csv(path, dtype={"station_id": str})
    df["timestamp"] = pd.to_datetime(df["timestamp"], utc=True)
    channels = [c for c in df.columns if c not in ("timestamp", "station_id")]
    frames = []
    for ch in channels:
        wide = df.pivot_table(index="timestamp", columns="station_id", values=ch,
                              aggfunc="first", dropna=False)
        frames.append(wide.reindex(columns=station_ids))
    ts = np.asarray(frames[0].index.view(np.int64)) // 10 ** 9
    met = np.stack([f.to_numpy(dtype=np.float64) for f in frames], axis=2)
    mask = ~np.isnan(met)
    return ts, np.nan_to_num(met), mask, channels


def load_config_file(path: str | Path) -> dict[str, str]:
    """Flat key=value config; '#' starts a comment."""
    out: dict[str, str] = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise PipelineError(f"bad config line: {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
