"""Two-scale graph + multi-period recurrent forecasting for station networks."""

from .geo import (
    CityRecord,
    GraphConfig,
    ScaleGraph,
    StationRecord,
    aggregate_to_city,
    build_assignment,
    build_scale_graph,
    city_centroids,
    normalize_propagation,
)
from .model import Episode, Forecaster, ModelConfig, two_scale_mse
from .pipeline import ImputeConfig, NormStats, SeriesBundle, SplitSpec

__all__ = [
    "CityRecord",
    "Episode",
    "Forecaster",
    "GraphConfig",
    "ImputeConfig",
    "ModelConfig",
    "NormStats",
    "ScaleGraph",
    "SeriesBundle",
    "SplitSpec",
    "StationRecord",
    "aggregate_to_city",
    "build_assignment",
    "build_scale_graph",
    "city_centroids",
    "normalize_propagation",
    "two_scale_mse",
]

__version__ = "0.1.0"
