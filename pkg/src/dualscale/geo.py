"""Graph construction from station geography.

Builds the station-scale and city-scale graphs (Gaussian distance kernel,
directional elevation screen, renormalized propagation matrix) plus the
one-hot station-to-city assignment matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EARTH_RADIUS_KM = 6371.0

# Kernel weight at 100 km equals 0.5 by default.
DEFAULT_SIGMA_SQ = 100.0 ** 2 / math.log(2.0)
DEFAULT_EPSILON = 0.1
DEFAULT_RIDGE_LIMIT_M = 500.0
DEFAULT_PROFILE_SAMPLES = 64


class InvalidInputError(ValueError):
    pass


@dataclass(frozen=True)
class StationRecord:
    station_id: str
    city_id: str
    latitude: float
    longitude: float
    elevation: float

    def __post_init__(self):
        if not (-90.0 <= self.latitude <= 90.0):
            raise InvalidInputError(f"latitude {self.latitude} out of range for {self.station_id}")
        if not (-180.0 <= self.longitude <= 180.0):
            raise InvalidInputError(f"longitude {self.longitude} out of range for {self.station_id}")


@dataclass(frozen=True)
class CityRecord:
    city_id: str
    latitude: float
    longitude: float
    elevation: float


@dataclass
class ScaleGraph:
    """Adjacency and propagation operator for one spatial scale."""

    node_ids: list[str]
    dist_weights: np.ndarray   # symmetric, zero diagonal
    adjacency: np.ndarray      # binary, possibly asymmetric (elevation screen is directional)
    propagation: np.ndarray    # D~^{-1/2} (A + I) D~^{-1/2}

    @property
    def node_count(self) -> int:
        return len(self.node_ids)


@dataclass(frozen=True)
class GraphConfig:
    sigma_sq: float = DEFAULT_SIGMA_SQ
    epsilon: float = DEFAULT_EPSILON
    ridge_limit_m: float = DEFAULT_RIDGE_LIMIT_M
    profile_samples: int = DEFAULT_PROFILE_SAMPLES


class FlatTerrain:
    """Constant-elevation profile; every pair passes the elevation screen."""

    def __init__(self, elevation: float = 0.0):
        self.elevation = elevation

    def elevation_at(self, latitude: float, longitude: float) -> float:
        return self.elevation


class ElevationGrid:
    """Regular lat/lon raster with bilinear interpolation.

    File format: first line `nrows ncols lat0 lon0 dlat dlon`, then row-major
    elevations in meters (row i is latitude lat0 + i*dlat).
    """

    def __init__(self, lat0: float, lon0: float, dlat: float, dlon: float, values: np.ndarray):
        self.lat0 = lat0
        self.lon0 = lon0
        self.dlat = dlat
        self.dlon = dlon
        self.values = np.asarray(values, dtype=np.float64)
        if self.values.ndim != 2:
            raise InvalidInputError("elevation grid must be 2-D")

    @classmethod
    def from_file(cls, path: str | Path) -> "ElevationGrid":
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().split()
            if len(header) != 6:
                raise InvalidInputError(f"bad elevation grid header in {path}")
            nrows, ncols = int(header[0]), int(header[1])
            lat0, lon0, dlat, dlon = map(float, header[2:])
            flat = np.loadtxt(fh).reshape(nrows, ncols)
        return cls(lat0, lon0, dlat, dlon, flat)

    def elevation_at(self, latitude: float, longitude: float) -> float:
        nrows, ncols = self.values.shape
        i = (latitude - self.lat0) / self.dlat
        j = (longitude - self.lon0) / self.dlon
        # Tolerate round-off at the bounding box edge; beyond that is a data error.
        if i < -1e-9 or i > nrows - 1 + 1e-9 or j < -1e-9 or j > ncols - 1 + 1e-9:
            raise InvalidInputError(
                f"coordinate ({latitude}, {longitude}) outside elevation grid")
        i = min(max(i, 0.0), nrows - 1.0)
        j = min(max(j, 0.0), ncols - 1.0)
        i0, j0 = int(i), int(j)
        i1, j1 = min(i0 + 1, nrows - 1), min(j0 + 1, ncols - 1)
        fi, fj = i - i0, j - j0
        top = self.values[i0, j0] * (1 - fj) + self.values[i0, j1] * fj
        bot = self.values[i1, j0] * (1 - fj) + self.values[i1, j1] * fj
        return float(top * (1 - fi) + bot * fi)


def haversine_distance(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in kilometers (R = 6371 km)."""
    phi1, phi2 = math.radians(lat1), math.radians(lat2)
    dphi = math.radians(lat2 - lat1)
    dlam = math.radians(lon2 - lon1)
    a = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(a)))


def gaussian_edge_weight(d_km: float, sigma_sq: float, epsilon: float) -> float:
    """Thresholded Gaussian kernel exp(-d^2/sigma^2), cut to 0 below epsilon."""
    if sigma_sq <= 0.0:
        raise InvalidInputError(f"sigma_sq must be positive, got {sigma_sq}")
    if not (0.0 < epsilon < 1.0):
        raise InvalidInputError(f"epsilon must lie in (0, 1), got {epsilon}")
    if d_km < 0.0:
        raise InvalidInputError(f"distance must be nonnegative, got {d_km}")
    w = math.exp(-(d_km * d_km) / sigma_sq)
    return w if w >= epsilon else 0.0


def elevation_screen(node_i, node_j, profile, ridge_limit_m: float,
                     samples: int = DEFAULT_PROFILE_SAMPLES) -> bool:
    """True iff no point on the i->j line rises ridge_limit_m above node i.

    The profile is sampled at `samples` equally spaced points (endpoints
    included) on the straight lat/lon segment between the nodes.
    """
    if samples < 2:
        raise InvalidInputError(f"samples must be >= 2, got {samples}")
    if ridge_limit_m <= 0.0:
        raise InvalidInputError(f"ridge limit must be positive, got {ridge_limit_m}")
    h_i = profile.elevation_at(node_i.latitude, node_i.longitude)
    highest = -math.inf
    for k in range(samples):
        g = k / (samples - 1)
        lat = g * node_i.latitude + (1.0 - g) * node_j.latitude
        lon = g * node_i.longitude + (1.0 - g) * node_j.longitude
        highest = max(highest, profile.elevation_at(lat, lon))
    return highest - h_i < ridge_limit_m


def normalize_propagation(adjacency: np.ndarray) -> np.ndarray:
    """Renormalized propagation D~^{-1/2} (A + I) D~^{-1/2}."""
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"adjacency must be square, got shape {a.shape}")
    a_tilde = a + np.eye(a.shape[0])
    d = a_tilde.sum(axis=1)
    # sqrt of the degree product keeps simple cases (e.g. all degrees 2) exact.
    return a_tilde / np.sqrt(np.outer(d, d))


def build_scale_graph(nodes, config: GraphConfig = GraphConfig(),
                      profile=None) -> ScaleGraph:
    """Distance-kernel weights, elevation-screened adjacency, and propagation.

    `nodes` are StationRecord or CityRecord instances; `profile` defaults to
    flat terrain (screen always passes).
    """
    if not nodes:
        raise InvalidInputError("need at least one node")
    ids = [getattr(n, "station_id", None) or n.city_id for n in nodes]
    if len(set(ids)) != len(ids):
        raise InvalidInputError("duplicate node ids")
    if profile is None:
        profile = FlatTerrain()
    n = len(nodes)
    w = np.zeros((n, n))
    adj = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = haversine_distance(nodes[i].latitude, nodes[i].longitude,
                                   nodes[j].latitude, nodes[j].longitude)
            w[i, j] = w[j, i] = gaussian_edge_weight(d, config.sigma_sq, config.epsilon)
    for i in range(n):
        for j in range(n):
            if i != j and w[i, j] > 0.0 and elevation_screen(
                    nodes[i], nodes[j], profile, config.ridge_limit_m, config.profile_samples):
                adj[i, j] = 1.0
    return ScaleGraph(ids, w, adj, normalize_propagation(adj))


def city_centroids(stations: list[StationRecord]) -> list[CityRecord]:
    """City nodes as arithmetic means of their member stations."""
    by_city: dict[str, list[StationRecord]] = {}
    for s in stations:
        by_city.setdefault(s.city_id, []).append(s)
    cities = []
    for cid in sorted(by_city):
        members = by_city[cid]
        cities.append(CityRecord(
            city_id=cid,
            latitude=sum(m.latitude for m in members) / len(members),
            longitude=sum(m.longitude for m in members) / len(members),
            elevation=sum(m.elevation for m in members) / len(members),
        ))
    return cities


def build_assignment(stations: list[StationRecord], cities: list[CityRecord]) -> np.ndarray:
    """One-hot S x C membership matrix (station row order, city list order)."""
    city_index = {c.city_id: k for k, c in enumerate(cities)}
    gamma = np.zeros((len(stations), len(cities)))
    for i, s in enumerate(stations):
        if s.city_id not in city_index:
            raise InvalidInputError(f"station {s.station_id} references unknown city {s.city_id}")
        gamma[i, city_index[s.city_id]] = 1.0
    return gamma


def aggregate_to_city(x_station: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """Per-city mean of member-station rows."""
    counts = gamma.sum(axis=0)
    if np.any(counts < 1):
        raise InvalidInputError("assignment matrix has an empty city column")
    return (gamma.T @ np.asarray(x_station, dtype=np.float64)) / counts[:, None]


# -- file interfaces ---------------------------------------------------------

def load_stations_csv(path: str | Path) -> list[StationRecord]:
    """Header: station_id,city_id,latitude,longitude,elevation."""
    import csv

    stations = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"station_id", "city_id", "latitude", "longitude", "elevation"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise InvalidInputError(f"stations CSV {path} missing columns {required}")
        for row in reader:
            stations.append(StationRecord(
                station_id=row["station_id"],
                city_id=row["city_id"],
                latitude=float(row["latitude"]),
                longitude=float(row["longitude"]),
                elevation=float(row["elevation"]),
            ))
    seen = set()
    for s in stations:
        if s.station_id in seen:
            raise InvalidInputError(f"duplicate station_id {s.station_id}")
        seen.add(s.station_id)
    return stations


def dump_graph_csv(graph: ScaleGraph, out_dir: str | Path, prefix: str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = ",".join(graph.node_ids)
    np.savetxt(out / f"{prefix}_adjacency.csv", graph.adjacency,
               delimiter=",", header=header, comments="")
    np.savetxt(out / f"{prefix}_propagation.csv", graph.propagation,
               delimiter=",", header=header, comments="")
