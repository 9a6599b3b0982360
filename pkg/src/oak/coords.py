"""Network coordinates and geography.

Vivaldi coordinates live in RTT milliseconds: the embedded distance between two
nodes (Euclidean norm of the position difference plus both heights) predicts
their round-trip time directly.  Great-circle distances are in kilometres.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from oak.errors import (
    DegenerateGeometryError,
    DimensionMismatchError,
    InsufficientAnchorsError,
)

EARTH_RADIUS_KM = 6371.0

DEFAULT_DIMENSIONS = 3
CC = 0.25
CE = 0.25
MIN_ERROR = 1e-6


@dataclass(frozen=True)
class GeoPoint:
    latitude_deg: float
    longitude_deg: float

    def __post_init__(self):
        if not -90.0 <= self.latitude_deg <= 90.0:
            raise ValueError(f"latitude out of range: {self.latitude_deg}")
        if not -180.0 <= self.longitude_deg <= 180.0:
            raise ValueError(f"longitude out of range: {self.longitude_deg}")

    @classmethod
    def parse(cls, text: str) -> "GeoPoint":
        """Parse ``"lat,lon"``."""
        lat, lon = (float(part) for part in text.split(","))
        return cls(lat, lon)

    def to_list(self) -> list[float]:
        return [self.latitude_deg, self.longitude_deg]


@dataclass(frozen=True)
class VivaldiCoordinate:
    position: tuple[float, ...] = (0.0, 0.0, 0.0)
    height: float = 0.0
    error_estimate: float = 1.0

    def __post_init__(self):
        pos = tuple(float(x) for x in self.position)
        object.__setattr__(self, "position", pos)
        if not all(math.isfinite(x) for x in pos):
            raise ValueError("non-finite coordinate component")
        if self.height < 0 or not math.isfinite(self.height):
            raise ValueError(f"height must be >= 0, got {self.height}")
        if not 0.0 < self.error_estimate <= 1.0:
            raise ValueError(f"error_estimate must be in (0, 1], got {self.error_estimate}")

    @property
    def dims(self) -> int:
        return len(self.position)

    @classmethod
    def origin(cls, dims: int = DEFAULT_DIMENSIONS) -> "VivaldiCoordinate":
        return cls((0.0,) * dims, 0.0, 1.0)

    def to_dict(self) -> dict:
        return {"position": list(self.position), "height": self.height, "error": self.error_estimate}

    @classmethod
    def from_dict(cls, data: dict) -> "VivaldiCoordinate":
        return cls(tuple(data["position"]), float(data["height"]), float(data["error"]))


@dataclass(frozen=True)
class RttSample:
    peer_coordinate: VivaldiCoordinate
    measured_rtt_ms: float
    peer_id: str = field(default="", compare=False)

    def __post_init__(self):
        # zero is allowed for co-located anchors; vivaldi_update rejects it
        if not self.measured_rtt_ms >= 0:
            raise ValueError(f"measured RTT must be non-negative, got {self.measured_rtt_ms}")


def dist_euc(a: VivaldiCoordinate, b: VivaldiCoordinate) -> float:
    """Predicted RTT in ms between two coordinates."""
    if a.dims != b.dims:
        raise DimensionMismatchError(f"{a.dims}-d vs {b.dims}-d coordinate")
    return math.dist(a.position, b.position) + a.height + b.height


def dist_gc(a: GeoPoint, b: GeoPoint) -> float:
    """Haversine great-circle distance in km."""
    lat1 = math.radians(a.latitude_deg)
    lat2 = math.radians(b.latitude_deg)
    dlat = lat2 - lat1
    dlon = math.radians(b.longitude_deg - a.longitude_deg)
    h = math.sin(dlat / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def _pair_direction(self_id: str, peer_id: str, dims: int) -> np.ndarray:
    digest = hashlib.sha256(f"{self_id}|{peer_id}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
    v = rng.normal(size=dims)
    return v / np.linalg.norm(v)


def vivaldi_update(
    coord: VivaldiCoordinate,
    sample: RttSample,
    *,
    self_id: str = "",
    cc: float = CC,
    ce: float = CE,
) -> VivaldiCoordinate:
    """Move ``coord`` one adaptive-timestep Vivaldi step against ``sample``.

    The position and height are treated as a single height vector, so a spring
    force ``f`` moves the position by ``f * diff / (|diff| + h_i + h_j)`` and the
    height by ``f * (h_i + h_j) / (|diff| + h_i + h_j)``.
    """
    peer = sample.peer_coordinate
    if coord.dims != peer.dims:
        raise DimensionMismatchError(f"{coord.dims}-d vs {peer.dims}-d coordinate")
    rtt = sample.measured_rtt_ms
    if rtt <= 0:
        raise ValueError("vivaldi_update needs a positive RTT")
    predicted = dist_euc(coord, peer)

    w = coord.error_estimate / (coord.error_estimate + peer.error_estimate)
    rel_err = abs(predicted - rtt) / rtt
    error = rel_err * ce * w + coord.error_estimate * (1.0 - ce * w)
    error = min(1.0, max(MIN_ERROR, error))

    force = cc * w * (rtt - predicted)
    x = np.asarray(coord.position)
    diff = x - np.asarray(peer.position)
    norm = float(np.linalg.norm(diff))
    heights = coord.height + peer.height
    if norm > 0.0:
        span = norm + heights
        x = x + force * diff / span
        height = coord.height + force * heights / span
    else:
        # coincident positions: push along a reproducible pseudo-random axis
        x = x + force * _pair_direction(self_id, sample.peer_id, coord.dims)
        height = coord.height
    return VivaldiCoordinate(tuple(x), max(0.0, height), error)


def _linear_guess(anchors: np.ndarray, radii: np.ndarray) -> np.ndarray:
    # subtracting the first sphere equation from the others yields a linear system
    centre = anchors.mean(axis=0)
    a = anchors - centre
    lhs = 2.0 * (a[1:] - a[0])
    rhs = (radii[0] ** 2 - radii[1:] ** 2) + (a[1:] ** 2).sum(axis=1) - (a[0] ** 2).sum()
    sol, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    return sol + centre


def _residuals(u: np.ndarray, anchors: np.ndarray, radii: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    diff = u - anchors
    norms = np.linalg.norm(diff, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    jac = np.where(norms[:, None] > 0, diff / safe[:, None], 0.0)
    return norms - radii, jac


def trilaterate(
    samples: Sequence[RttSample],
    *,
    tol: float = 1e-6,
    max_iter: int = 500,
) -> VivaldiCoordinate:
    """Estimate the coordinate of an external endpoint from RTTs to known anchors.

    Minimises ``sum((dist_euc(u, anchor_i) - rtt_i)**2)`` over a zero-height
    point ``u`` with a damped Gauss-Newton (Levenberg-Marquardt) descent started
    from the linearised sphere intersection.
    """
    if len(samples) < 3:
        raise InsufficientAnchorsError(f"need at least 3 anchors, got {len(samples)}")
    dims = samples[0].peer_coordinate.dims
    if any(s.peer_coordinate.dims != dims for s in samples):
        raise DimensionMismatchError("anchors of mixed dimensionality")

    anchors = np.array([s.peer_coordinate.position for s in samples], dtype=float)
    rtts = np.array([s.measured_rtt_ms for s in samples], dtype=float)
    radii = np.maximum(rtts - np.array([s.peer_coordinate.height for s in samples]), 0.0)

    spread = anchors - anchors.mean(axis=0)
    rank = np.linalg.matrix_rank(spread, tol=1e-9 * max(1.0, float(np.abs(anchors).max()))) if len(anchors) else 0
    collinear = rank < 2

    u = _linear_guess(anchors, radii)
    res, jac = _residuals(u, anchors, radii)
    cost = float(res @ res)
    damping = 1e-3
    converged = False
    for _ in range(max_iter):
        grad = jac.T @ res
        if float(np.linalg.norm(grad)) <= tol:
            converged = True
            break
        jtj = jac.T @ jac
        improved = False
        while damping < 1e12:
            step = np.linalg.solve(jtj + damping * (np.diag(np.diag(jtj)) + np.eye(dims)), -grad)
            cand = u + step
            cand_res, cand_jac = _residuals(cand, anchors, radii)
            cand_cost = float(cand_res @ cand_res)
            if cand_cost < cost:
                u, res, jac, cost = cand, cand_res, cand_jac, cand_cost
                damping = max(damping / 3.0, 1e-12)
                improved = True
                break
            damping *= 2.0
        if not improved:
            # no descent direction left: a stationary point at working precision
            converged = True
            break
    if collinear and not converged:
        raise DegenerateGeometryError("anchors are collinear and the solver did not converge")

    scale = float(rtts.mean())
    rms = math.sqrt(cost / len(rtts))
    error = rms / scale if scale > 0 else 0.0
    return VivaldiCoordinate(tuple(u), 0.0, min(1.0, max(MIN_ERROR, error)))


def median_ping(ping, worker_id: str, target: str, probes: int = 3) -> float:
    """Median of ``probes`` calls to ``ping(worker_id, target)``."""
    values = sorted(ping(worker_id, target) for _ in range(probes))
    return values[len(values) // 2]
