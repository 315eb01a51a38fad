"""Discrete closed planar curves and the associated finite-element machinery.

A curve is stored as its n node positions; node i sits at parameter i/n on
the periodic unit interval, so the curve is the piecewise-linear (P1)
interpolant of its nodes.  Derivatives of P1 quantities are piecewise
constant (P0) on the n edges.  This module provides the periodic finite
differences, per-edge tangent/normal frames, the mass and stiffness
matrices defining the discrete L2 and H1 inner products on deformation
fields, and arc-length resampling of raw polylines.

Deformation fields ("tangent fields") are plain (n, 2) float arrays holding
the P1 coefficients of the field; they are not wrapped in a class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

# Edges shorter than this fraction of the bounding-box diagonal are treated
# as degenerate (discrete stand-in for a strictly positive parametric speed).
EDGE_SPEED_FACTOR = 1e-12


class DegenerateEdge(ValueError):
    """A curve edge has (numerically) zero length."""


class TooFewPoints(ValueError):
    """Fewer than three distinct points were supplied for a closed curve."""


def bbox_diagonal(points: np.ndarray) -> float:
    """Diagonal length of the axis-aligned bounding box of a point set."""
    points = np.asarray(points, dtype=float)
    extent = points.max(axis=0) - points.min(axis=0)
    return float(np.hypot(extent[0], extent[1]))


@dataclass(frozen=True)
class DiscreteCurve:
    """Closed P1 curve given by its n node positions (periodic indexing).

    Raises:
        ValueError: fewer than 3 nodes or non-finite coordinates.
        DegenerateEdge: some edge is shorter than the degeneracy threshold.
    """

    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float)  # private copy, frozen below
        if nodes.ndim != 2 or nodes.shape[1] != 2:
            raise ValueError(f"nodes must have shape (n, 2), got {nodes.shape}")
        if nodes.shape[0] < 3:
            raise ValueError("a closed curve needs at least 3 nodes")
        if not np.isfinite(nodes).all():
            raise ValueError("curve nodes must be finite")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        speed = np.linalg.norm(forward_diff(nodes), axis=1)
        if np.any(speed <= self.edge_speed_floor()):
            raise DegenerateEdge(
                f"minimal edge speed {speed.min():.3e} below degeneracy threshold"
            )

    @property
    def n(self) -> int:
        return self.nodes.shape[0]

    def edge_speed_floor(self) -> float:
        return EDGE_SPEED_FACTOR * max(bbox_diagonal(self.nodes), 1e-300)


@dataclass(frozen=True)
class EdgeFrame:
    """Per-edge unit tangent, unit normal and parametric speed (P0 data).

    ``tangent[i]`` points from node i to node i+1; ``normal[i]`` is the
    tangent rotated by +90 degrees, (x, y) -> (-y, x); ``speed[i]`` is the
    norm of the forward difference, i.e. n times the edge length.
    """

    tangent: np.ndarray
    normal: np.ndarray
    speed: np.ndarray


@dataclass(frozen=True)
class CurveMetrics:
    """Matrices of the discrete L2 and H1 inner products of a curve.

    ``mass`` (M) and ``stiffness`` (N) act blockwise on the x and y
    coordinates of a P1 field; ``metric`` is U = M + N and ``chol`` is the
    upper-triangular factor W with W^T W = U.
    """

    mass: np.ndarray
    stiffness: np.ndarray
    metric: np.ndarray
    chol: np.ndarray


def rot90(v: np.ndarray) -> np.ndarray:
    """Rotate 2-vectors by +90 degrees: (x, y) -> (-y, x)."""
    v = np.asarray(v, dtype=float)
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def forward_diff(f: np.ndarray) -> np.ndarray:
    """Periodic forward difference, result_i = n (f_{i+1} - f_i)."""
    f = np.asarray(f, dtype=float)
    n = f.shape[0]
    return n * (np.roll(f, -1, axis=0) - f)


def backward_diff(f: np.ndarray) -> np.ndarray:
    """Periodic backward difference, result_i = n (f_i - f_{i-1})."""
    f = np.asarray(f, dtype=float)
    n = f.shape[0]
    return n * (f - np.roll(f, 1, axis=0))


def edge_frame(curve: DiscreteCurve) -> EdgeFrame:
    """Unit tangents/normals and speeds of all edges of `curve`."""
    diff = forward_diff(curve.nodes)
    speed = np.linalg.norm(diff, axis=1)
    if np.any(speed <= curve.edge_speed_floor()):
        raise DegenerateEdge("curve has a degenerate edge")
    tangent = diff / speed[:, None]
    return EdgeFrame(tangent=tangent, normal=rot90(tangent), speed=speed)


def curve_length(curve: DiscreteCurve) -> float:
    """Total length, i.e. the sum of edge lengths sum_i speed_i / n."""
    return float(edge_frame(curve).speed.sum() / curve.n)


def mass_matrix(speed: np.ndarray) -> np.ndarray:
    """Assemble the P1 mass matrix M = sum_i speed_i M^i.

    The local block of M^i on nodes (i, i+1) is (1/(6n)) [[2, 1], [1, 2]].
    """
    n = speed.shape[0]
    mat = np.zeros((n, n))
    idx = np.arange(n)
    nxt = (idx + 1) % n
    w = speed / (6.0 * n)
    np.add.at(mat, (idx, idx), 2.0 * w)
    np.add.at(mat, (nxt, nxt), 2.0 * w)
    np.add.at(mat, (idx, nxt), w)
    np.add.at(mat, (nxt, idx), w)
    return mat


def stiffness_matrix(speed: np.ndarray, node_scaled: bool = False) -> np.ndarray:
    """Assemble the P1/P0 stiffness matrix N = sum_i speed_i N^i.

    With ``node_scaled=False`` (the default) edge i contributes the block
    (n / speed_i^2) [[1, -1], [-1, 1]] on nodes (i, i+1), which is the exact
    integral of the product of the P0 derivative fields against the curve
    measure.  ``node_scaled=True`` instead attaches 1/speed to each *node*
    index, n [[1/s_i^2, -1/(s_i s_{i+1})], [., 1/s_{i+1}^2]]; the two
    conventions agree only when all edge speeds are equal, and the
    node-scaled one does not annihilate constant fields.  It is kept for
    cross-checking, not used in the inner products.
    """
    n = speed.shape[0]
    mat = np.zeros((n, n))
    idx = np.arange(n)
    nxt = (idx + 1) % n
    if node_scaled:
        s_i, s_n = speed, speed[nxt]
        np.add.at(mat, (idx, idx), speed * n / s_i**2)
        np.add.at(mat, (nxt, nxt), speed * n / s_n**2)
        np.add.at(mat, (idx, nxt), -speed * n / (s_i * s_n))
        np.add.at(mat, (nxt, idx), -speed * n / (s_i * s_n))
    else:
        w = n / speed
        np.add.at(mat, (idx, idx), w)
        np.add.at(mat, (nxt, nxt), w)
        np.add.at(mat, (idx, nxt), -w)
        np.add.at(mat, (nxt, idx), -w)
    return mat


def assemble_metrics(curve: DiscreteCurve) -> CurveMetrics:
    """Mass/stiffness/metric matrices and the Cholesky factor of U."""
    speed = edge_frame(curve).speed
    mass = mass_matrix(speed)
    stiffness = stiffness_matrix(speed)
    metric = mass + stiffness
    chol = scipy.linalg.cholesky(metric)  # upper triangular, W^T W = U
    return CurveMetrics(mass=mass, stiffness=stiffness, metric=metric, chol=chol)


def _pairing(phi: np.ndarray, mat: np.ndarray, psi: np.ndarray) -> float:
    """Canonical R^{2n} pairing <phi, mat psi> with mat acting per coordinate."""
    phi = np.asarray(phi, dtype=float)
    psi = np.asarray(psi, dtype=float)
    return float(np.sum(phi * (mat @ psi)))


def inner_l2(curve: DiscreteCurve, phi: np.ndarray, psi: np.ndarray) -> float:
    """Discrete L2(curve) inner product <phi, M psi> of two P1 fields."""
    return _pairing(phi, mass_matrix(edge_frame(curve).speed), psi)


def inner_h1(curve: DiscreteCurve, phi: np.ndarray, psi: np.ndarray) -> float:
    """Discrete H1(curve) inner product <phi, U psi> of two P1 fields."""
    return _pairing(phi, assemble_metrics(curve).metric, psi)


def _closed_polyline(points: np.ndarray) -> np.ndarray:
    """Drop consecutive duplicates and an explicit closing point, if present."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 2:
        raise TooFewPoints(f"expected an (m, 2) point list, got {points.shape}")
    if len(points) > 1 and np.allclose(points[0], points[-1]):
        points = points[:-1]
    keep = [0]
    for i in range(1, len(points)):
        if not np.array_equal(points[i], points[keep[-1]]):
            keep.append(i)
    points = points[keep]
    if len(np.unique(points, axis=0)) < 3:
        raise TooFewPoints("need at least 3 distinct points for a closed curve")
    return points


def resample_arclength(points: np.ndarray, n: int) -> DiscreteCurve:
    """Resample a closed polyline to `n` nodes equispaced in arc length.

    The first input vertex is kept as node 0 and orientation is preserved.
    """
    points = _closed_polyline(points)
    if n < 3:
        raise ValueError("need n >= 3 nodes")
    closed = np.vstack([points, points[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total <= 0.0:
        raise TooFewPoints("polyline has zero length")
    targets = total * np.arange(n) / n
    seg_idx = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, len(seg) - 1)
    local = (targets - cum[seg_idx]) / seg[seg_idx]
    nodes = closed[seg_idx] + local[:, None] * (closed[seg_idx + 1] - closed[seg_idx])
    return DiscreteCurve(nodes)


def regular_polygon(n: int, radius: float = 1.0, center=(0.0, 0.0)) -> DiscreteCurve:
    """Regular n-gon inscribed in a circle (counter-clockwise)."""
    theta = 2.0 * np.pi * np.arange(n) / n
    nodes = np.stack(
        [center[0] + radius * np.cos(theta), center[1] + radius * np.sin(theta)], axis=1
    )
    return DiscreteCurve(nodes)
