"""Multi-period recurrent cell.

The hidden state is split column-wise into V equal parts; part v is gated and
updated only at steps divisible by its period P_v, and is otherwise carried
over after multiplication by its dynamic scale weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TemporalConfig:
    in_width: int               # F_in of the fused spatial features
    hidden_width: int = 48      # C_h
    periods: tuple[int, ...] = (1, 2, 4)
    bypass_scale_weights: bool = False  # pin all dynamic weights to 1

    def __post_init__(self):
        if len(self.periods) < 1 or any(p < 1 for p in self.periods):
            raise ConfigError(f"periods must be positive integers, got {self.periods}")
        if list(self.periods) != sorted(set(self.periods)):
            raise ConfigError(f"periods must be strictly increasing, got {self.periods}")
        if self.hidden_width % len(self.periods) != 0:
            raise ConfigError(
                f"hidden width {self.hidden_width} not divisible by {len(self.periods)} parts")

    @property
    def part_count(self) -> int:
        return len(self.periods)

    @property
    def part_width(self) -> int:
        return self.hidden_width // len(self.periods)


# Parameter name suffixes for one cell instance (prefix distinguishes scales).
W_XP, W_HP, B_P = "W_xp", "W_hp", "b_p"
W_XR, W_HR, B_R = "W_xr", "W_hr", "b_r"
W_XZ, W_HZ, B_Z = "W_xz", "W_hz", "b_z"
W_XH, W_HH, B_H = "W_xh", "W_hh", "b_h"


def register_params(store: ad.ParamStore, cfg: TemporalConfig, prefix: str, seed: int) -> None:
    f, c, v = cfg.in_width, cfg.hidden_width, cfg.part_count
    store.add(f"{prefix}.{W_XP}", ad.seeded_init((f, v), seed))
    store.add(f"{prefix}.{W_HP}", ad.seeded_init((c, v), seed + 1))
    store.add(f"{prefix}.{B_P}", ad.seeded_init((1, v), seed, scheme="zeros"))
    for k, (wx, wh, b) in enumerate(((W_XR, W_HR, B_R), (W_XZ, W_HZ, B_Z), (W_XH, W_HH, B_H))):
        store.add(f"{prefix}.{wx}", ad.seeded_init((f, c), seed + 2 + 2 * k))
        store.add(f"{prefix}.{wh}", ad.seeded_init((c, c), seed + 3 + 2 * k))
        store.add(f"{prefix}.{b}", ad.seeded_init((1, c), seed, scheme="zeros"))


def eligible_parts(t: int, periods) -> set[int]:
    """0-based indices of parts whose period divides step t (t >= 1)."""
    if t < 1:
        raise ConfigError(f"step index must be >= 1, got {t}")
    return {v for v, p in enumerate(periods) if t % p == 0}


def dynamic_scale_weights(x: Var, h_prev: Var, params: dict[str, Var], prefix: str) -> Var:
    """Per-node, per-part sigmoid weights from current input and previous state."""
    pre = ad.add(ad.add(ad.matmul(x, params[f"{prefix}.{W_XP}"]),
                        ad.matmul(h_prev, params[f"{prefix}.{W_HP}"])),
                 params[f"{prefix}.{B_P}"])
    return ad.sigmoid(pre)


def apply_scale_weights(h_prev: Var, weights: Var, cfg: TemporalConfig) -> Var:
    """Scale each hidden part by its weight column (broadcast over channels)."""
    parts = []
    w = cfg.part_width
    for v in range(cfg.part_count):
        col = ad.slice_cols(weights, v, v + 1)
        part = ad.slice_cols(h_prev, v * w, (v + 1) * w)
        parts.append(ad.elementwise_mul(col, part))
    return ad.concat_cols(*parts)


def _gate(x: Var, h: Var, params: dict[str, Var], prefix: str,
          wx: str, wh: str, b: str, act) -> Var:
    return act(ad.add(ad.add(ad.matmul(x, params[f"{prefix}.{wx}"]),
                             ad.matmul(h, params[f"{prefix}.{wh}"])),
                      params[f"{prefix}.{b}"]))


def mt_gru_step(x: Var, h_prev: Var, t: int, params: dict[str, Var],
                cfg: TemporalConfig, prefix: str) -> Var:
    """One recurrent step; returns the new hidden state (N x C_h)."""
    if cfg.bypass_scale_weights:
        h_scaled = h_prev
    else:
        weights = dynamic_scale_weights(x, h_prev, params, prefix)
        h_scaled = apply_scale_weights(h_prev, weights, cfg)

    r = _gate(x, h_scaled, params, prefix, W_XR, W_HR, B_R, ad.sigmoid)
    z = _gate(x, h_scaled, params, prefix, W_XZ, W_HZ, B_Z, ad.sigmoid)
    h_cand = ad.tanh(ad.add(ad.add(
        ad.matmul(x, params[f"{prefix}.{W_XH}"]),
        ad.matmul(ad.elementwise_mul(r, h_scaled), params[f"{prefix}.{W_HH}"])),
        params[f"{prefix}.{B_H}"]))

    w = cfg.part_width
    eligible = eligible_parts(t, cfg.periods)
    parts = []
    for v in range(cfg.part_count):
        lo, hi = v * w, (v + 1) * w
        h_part = ad.slice_cols(h_scaled, lo, hi)
        if v in eligible:
            z_part = ad.slice_cols(z, lo, hi)
            cand_part = ad.slice_cols(h_cand, lo, hi)
            one_minus_z = ad.sub(ad.constant(np.ones(z_part.shape)), z_part)
            parts.append(ad.add(ad.elementwise_mul(z_part, h_part),
                                ad.elementwise_mul(one_minus_z, cand_part)))
        else:
            parts.append(h_part)
    return ad.concat_cols(*parts)
