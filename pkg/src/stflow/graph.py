"""Station distance matrix and the normalised propagation operator.

Distances are great-circle kilometres on a sphere.  Edge weights come from
a thresholded Gaussian kernel of distance, and the spatial convolution uses
the symmetrically normalised, self-looped weight matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ParameterError
from .ingest import StationRegistry

EARTH_RADIUS_KM = 6371.0088


def haversine_km(lat1: float, lng1: float, lat2: float, lng2: float) -> float:
    phi1, phi2 = math.radians(lat1), math.radians(lat2)
    s_lat = math.sin((phi2 - phi1) / 2)
    s_lng = math.sin(math.radians(lng2 - lng1) / 2)
    a = s_lat * s_lat + math.cos(phi1) * math.cos(phi2) * s_lng * s_lng
    return 2 * EARTH_RADIUS_KM * math.asin(math.sqrt(min(1.0, a)))


@dataclass(frozen=True)
class DistanceMatrix:
    d: np.ndarray

    @property
    def n(self) -> int:
        return self.d.shape[0]

    def off_diagonal(self) -> np.ndarray:
        return self.d[~np.eye(self.n, dtype=bool)]


@dataclass(frozen=True)
class WeightedAdjacency:
    w: np.ndarray
    sigma_sq: float
    epsilon: float


@dataclass(frozen=True)
class PropagationOperator:
    p: np.ndarray

    @property
    def n(self) -> int:
        return self.p.shape[0]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


def distance_matrix(registry: StationRegistry) -> DistanceMatrix:
    lat = np.ascontiguousarray(registry.latitudes)
    lng = np.ascontiguousarray(registry.longitudes)
    return DistanceMatrix(_frozen(kernels.haversine_matrix(lat, lng, EARTH_RADIUS_KM)))


def default_sigma_sq(d: DistanceMatrix) -> float:
    """Squared standard deviation of all off-diagonal distances (1.0 if degenerate)."""
    off = d.off_diagonal()
    var = float(off.std()) ** 2 if off.size else 0.0
    return var if var > 0 else 1.0


def gaussian_adjacency(d: DistanceMatrix, sigma_sq: float | None = None,
                       epsilon: float = 0.5) -> WeightedAdjacency:
    """``exp(-d**2 / sigma_sq)`` off the diagonal, zeroed below ``epsilon``."""
    if sigma_sq is None:
        sigma_sq = default_sigma_sq(d)
    if not sigma_sq > 0:
        raise ParameterError(f"sigma_sq must be positive, got {sigma_sq}")
    if not 0 <= epsilon < 1:
        raise ParameterError(f"epsilon must lie in [0, 1), got {epsilon}")
    w = np.exp(-(d.d * d.d) / sigma_sq)
    np.fill_diagonal(w, 0.0)
    w[w < epsilon] = 0.0
    return WeightedAdjacency(_frozen(w), float(sigma_sq), float(epsilon))


def normalize(adj: WeightedAdjacency) -> PropagationOperator:
    a = adj.w + np.eye(adj.w.shape[0])
    inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    p = inv_sqrt[:, None] * a * inv_sqrt[None, :]
    # exact symmetry regardless of summation order
    p = 0.5 * (p + p.T)
    return PropagationOperator(_frozen(p))


def spectral_radius(m: np.ndarray, iters: int = 500, seed: int = 0) -> float:
    """Power-iteration estimate of the largest absolute eigenvalue."""
    n = m.shape[0]
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = m @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        est = norm
        v = w / norm
    return float(est)


def build_graph(registry: StationRegistry, sigma_sq: float | None = None, epsilon: float = 0.5
                ) -> tuple[DistanceMatrix, WeightedAdjacency, PropagationOperator]:
    d = distance_matrix(registry)
    adj = gaussian_adjacency(d, sigma_sq, epsilon)
    return d, adj, normalize(adj)
