"""Discrete rigidity and similarity operators on deformation fields.

For a deformation phi of a curve, the per-edge tangential stretch L and
normal derivative Hn are the components of the P0 derivative of phi in the
edge frame.  Rigid fields are exactly those with L = 0 and Hn constant, so
the total variation of Hn (a jump sum) penalizes deviation from piecewise
rigidity; the joint (L, Hn) pair plays the same role for piecewise
similarities.  The normal projection Pi reduces a P1 field to a P0 field on
the edges and enters the deviation constraint that keeps descent directions
correlated with the Sobolev gradient.

Stacking convention for R^{2n} vectors: all x components first, then all y
components, matching the blockwise action of the metric matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    CurveMetrics,
    DiscreteCurve,
    assemble_metrics,
    edge_frame,
    forward_diff,
)

# Relative slack accepted when testing membership in the deviation set.
MEMBERSHIP_RTOL = 1e-8


def stack(field: np.ndarray) -> np.ndarray:
    """(n, 2) field -> (2n,) vector, x block then y block."""
    field = np.asarray(field, dtype=float)
    return np.concatenate([field[:, 0], field[:, 1]])


def unstack(vec: np.ndarray) -> np.ndarray:
    """(2n,) vector -> (n, 2) field."""
    vec = np.asarray(vec, dtype=float)
    n = vec.shape[0] // 2
    return np.stack([vec[:n], vec[n:]], axis=1)


def op_L(curve: DiscreteCurve, phi: np.ndarray) -> np.ndarray:
    """Tangential stretch per edge: <d+ phi_i / speed_i, tangent_i>."""
    frame = edge_frame(curve)
    return np.einsum("ij,ij->i", forward_diff(phi), frame.tangent) / frame.speed


def op_Hn(curve: DiscreteCurve, phi: np.ndarray) -> np.ndarray:
    """Normal derivative per edge: <d+ phi_i / speed_i, normal_i>."""
    frame = edge_frame(curve)
    return np.einsum("ij,ij->i", forward_diff(phi), frame.normal) / frame.speed


def op_Pi(curve: DiscreteCurve, phi: np.ndarray, convention: str = "midpoint") -> np.ndarray:
    """Edge-wise normal projection of a P1 field, as n coefficient 2-vectors.

    The projection of a P1 field onto the P0 normal frame is not itself P0;
    ``midpoint`` evaluates it at edge midpoints (the default), ``left``
    at the edge's first node.
    """
    frame = edge_frame(curve)
    phi = np.asarray(phi, dtype=float)
    if convention == "midpoint":
        at_edge = 0.5 * (phi + np.roll(phi, -1, axis=0))
    elif convention == "left":
        at_edge = phi
    else:
        raise ValueError(f"unknown projection convention {convention!r}")
    coeff = np.einsum("ij,ij->i", at_edge, frame.normal)
    return coeff[:, None] * frame.normal


def op_K(curve: DiscreteCurve, phi: np.ndarray) -> np.ndarray:
    """Joint per-edge derivative pair (tangential, normal), shape (n, 2)."""
    frame = edge_frame(curve)
    d = forward_diff(phi) / frame.speed[:, None]
    return np.stack(
        [
            np.einsum("ij,ij->i", d, frame.tangent),
            np.einsum("ij,ij->i", d, frame.normal),
        ],
        axis=1,
    )


def penalty_V(curve: DiscreteCurve, phi: np.ndarray) -> float:
    """Total variation of the normal derivative: periodic jump sum of Hn."""
    h = op_Hn(curve, phi)
    return float(np.abs(h - np.roll(h, 1)).sum())


def penalty_TVK(curve: DiscreteCurve, phi: np.ndarray, norm: str = "euclidean") -> float:
    """Total variation of the (tangential, normal) derivative pair.

    Jumps of the 2-vector K are measured in the Euclidean norm by default
    (isotropic in the frame components); ``norm="l1"`` sums the component
    jumps instead.
    """
    k = op_K(curve, phi)
    jumps = k - np.roll(k, 1, axis=0)
    if norm == "euclidean":
        return float(np.linalg.norm(jumps, axis=1).sum())
    if norm == "l1":
        return float(np.abs(jumps).sum())
    raise ValueError(f"unknown jump norm {norm!r}")


def l1_L_gamma(curve: DiscreteCurve, phi: np.ndarray) -> float:
    """L1(curve) norm of the tangential stretch: sum_i |L_i| speed_i / n."""
    speed = edge_frame(curve).speed
    return float(np.sum(np.abs(op_L(curve, phi)) * speed) / curve.n)


def _h1_norm_p0_stack(metrics: CurveMetrics, field: np.ndarray) -> float:
    """Norm |W field| of an (n, 2) P0 coefficient stack, W applied blockwise."""
    return float(np.linalg.norm(metrics.chol @ np.asarray(field, dtype=float)))


def deviation_gap(
    curve: DiscreteCurve,
    phi: np.ndarray,
    grad: np.ndarray,
    rho: float,
    metrics: CurveMetrics | None = None,
    convention: str = "midpoint",
) -> tuple[float, float]:
    """Both sides of the deviation constraint for a candidate direction.

    Returns (lhs, rhs) with lhs = |W (Pi phi - Pi grad)| and
    rhs = rho |W Pi grad|; phi belongs to the constraint set iff
    lhs <= rhs up to a relative slack.
    """
    if metrics is None:
        metrics = assemble_metrics(curve)
    p_phi = op_Pi(curve, phi, convention)
    p_grad = op_Pi(curve, grad, convention)
    lhs = _h1_norm_p0_stack(metrics, p_phi - p_grad)
    rhs = rho * _h1_norm_p0_stack(metrics, p_grad)
    return lhs, rhs


def in_deviation_set(
    curve: DiscreteCurve,
    phi: np.ndarray,
    grad: np.ndarray,
    rho: float,
    metrics: CurveMetrics | None = None,
) -> bool:
    lhs, rhs = deviation_gap(curve, phi, grad, rho, metrics)
    return lhs <= rhs * (1.0 + MEMBERSHIP_RTOL) + MEMBERSHIP_RTOL * abs(rhs)


@dataclass(frozen=True)
class PenaltyValue:
    """Penalty evaluation: TV value, constraint membership, stretch norm."""

    tv: float
    feasible_C: bool
    l1_L: float


def penalty_report(
    curve: DiscreteCurve, phi: np.ndarray, lam: float | None = None
) -> PenaltyValue:
    """Evaluate the rigid penalty (lam None) or the similarity one (budget lam)."""
    l1 = l1_L_gamma(curve, phi)
    if lam is None:
        tv = penalty_V(curve, phi)
        feasible = bool(np.abs(op_L(curve, phi)).max() <= MEMBERSHIP_RTOL)
    else:
        tv = penalty_TVK(curve, phi)
        feasible = l1 <= lam * (1.0 + MEMBERSHIP_RTOL) + MEMBERSHIP_RTOL
    return PenaltyValue(tv=tv, feasible_C=feasible, l1_L=l1)


@dataclass(frozen=True)
class RigidityOperators:
    """Matrix forms of the per-edge operators on stacked (2n,) vectors.

    ``L`` and ``Hn`` map R^{2n} -> R^n; ``Pi`` maps R^{2n} -> R^{2n}
    (stacked P0 coefficients of the normal projection).  These are the
    linear maps used to pose the descent-direction program.
    """

    L: np.ndarray
    Hn: np.ndarray
    Pi: np.ndarray

    def apply_L(self, phi: np.ndarray) -> np.ndarray:
        return self.L @ stack(phi)

    def apply_Hn(self, phi: np.ndarray) -> np.ndarray:
        return self.Hn @ stack(phi)

    def apply_Pi(self, phi: np.ndarray) -> np.ndarray:
        return unstack(self.Pi @ stack(phi))


def _edge_difference_rows(n: int, weights: np.ndarray) -> np.ndarray:
    """Rows mapping node values to weighted forward differences per edge."""
    mat = np.zeros((n, n))
    idx = np.arange(n)
    mat[idx, idx] = -weights
    mat[idx, (idx + 1) % n] = weights
    return mat


def rigidity_operators(
    curve: DiscreteCurve, convention: str = "midpoint"
) -> RigidityOperators:
    """Assemble the matrices of op_L, op_Hn and op_Pi for one curve."""
    frame = edge_frame(curve)
    n = curve.n
    scale = n / frame.speed  # forward_diff carries the factor n
    d = _edge_difference_rows(n, scale)
    l_mat = np.hstack([frame.tangent[:, 0:1] * d, frame.tangent[:, 1:2] * d])
    h_mat = np.hstack([frame.normal[:, 0:1] * d, frame.normal[:, 1:2] * d])
    if convention == "midpoint":
        avg = 0.5 * np.eye(n)
        avg[np.arange(n), (np.arange(n) + 1) % n] += 0.5
    elif convention == "left":
        avg = np.eye(n)
    else:
        raise ValueError(f"unknown projection convention {convention!r}")
    coeff = np.hstack([frame.normal[:, 0:1] * avg, frame.normal[:, 1:2] * avg])
    pi_mat = np.vstack([frame.normal[:, 0:1] * coeff, frame.normal[:, 1:2] * coeff])
    return RigidityOperators(L=l_mat, Hn=h_mat, Pi=pi_mat)
