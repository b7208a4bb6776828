"""Two-scale graph convolution with station/city bidirectional fusion.

One spatial step: graph-convolve features at both scales, then cross-transfer
the convolved features through the assignment matrix and concatenate them
onto the raw inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var

STATION_GCN = "msgcn.W_station_gcn"
CITY_GCN = "msgcn.W_city_gcn"
STATION_FUSE = "msgcn.W_station_fuse"   # transforms city GCN features for stations
CITY_FUSE = "msgcn.W_city_fuse"         # transforms station GCN features for cities


@dataclass(frozen=True)
class SpatialConfig:
    met_channels: int           # M
    gcn_width: int = 32         # graph-convolution output channels
    fuse_width: int = 32        # cross-scale transfer output channels
    activation: str = "relu"

    @property
    def in_width(self) -> int:
        return self.met_channels + 1

    @property
    def fused_width(self) -> int:
        return self.in_width + self.fuse_width


def register_params(store: ad.ParamStore, cfg: SpatialConfig, seed: int) -> None:
    store.add(STATION_GCN, ad.seeded_init((cfg.in_width, cfg.gcn_width), seed))
    store.add(CITY_GCN, ad.seeded_init((cfg.in_width, cfg.gcn_width), seed + 1))
    store.add(STATION_FUSE, ad.seeded_init((cfg.gcn_width, cfg.fuse_width), seed + 2))
    store.add(CITY_FUSE, ad.seeded_init((cfg.gcn_width, cfg.fuse_width), seed + 3))


def gcn_forward(x: Var, propagation: Var, weight: Var, activation: str = "relu") -> Var:
    """activation(S~ X W) for one scale."""
    act = ad.ACTIVATIONS[activation]
    return act(ad.matmul(ad.matmul(propagation, x), weight))


def bidirectional_fuse(x_station: Var, x_city: Var, station_gcn: Var, city_gcn: Var,
                       gamma: Var, w_station_fuse: Var, w_city_fuse: Var) -> tuple[Var, Var]:
    """Cross-scale transfer; raw inputs stay as the leading columns.

    Station side receives its city's convolved features; city side receives
    the sum over member-station convolved features (Gamma^T routing).
    """
    to_station = ad.matmul(ad.matmul(gamma, city_gcn), w_station_fuse)
    # Gamma is a data constant; its transpose needs no gradient path.
    gamma_t = ad.constant(gamma.value.T)
    to_city = ad.matmul(ad.matmul(gamma_t, station_gcn), w_city_fuse)
    return ad.concat_cols(x_station, to_station), ad.concat_cols(x_city, to_city)


def ms_gcn_step(x_station: Var, x_city: Var, prop_station: Var, prop_city: Var,
                gamma: Var, params: dict[str, Var], cfg: SpatialConfig) -> tuple[Var, Var]:
    """Full spatial step: per-scale convolution then bidirectional fusion."""
    station_gcn = gcn_forward(x_station, prop_station, params[STATION_GCN], cfg.activation)
    city_gcn = gcn_forward(x_city, prop_city, params[CITY_GCN], cfg.activation)
    return bidirectional_fuse(x_station, x_city, station_gcn, city_gcn,
                              gamma, params[STATION_FUSE], params[CITY_FUSE])
