"""Small dense second-order cone programming with KKT certificates.

Programs are linear objectives under affine equalities, componentwise
inequalities and two kinds of conic memberships on the variable vector:
``soc_blocks`` (squared form |z[J]|^2 <= z[t], the natural epigraph of a
squared norm) and ``norm_blocks`` (|z[J]|_2 <= z[t]).  Internally both are
embedded into standard Lorentz cones and solved by a primal-dual
interior-point method with Nesterov-Todd scaling and a Mehrotra
predictor-corrector step.  The solver is deterministic: no randomness, and
a fixed iteration schedule for fixed inputs.

This module also poses the descent-direction program: minimize the total
variation of the normal derivative (rigid variant) or of the joint
tangential/normal derivative pair (similarity variant) over fields whose
normal projection stays within a relative distance rho of the projected
gradient, measured in the curve's H1 metric.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .geometry import CurveMetrics, DiscreteCurve, assemble_metrics, edge_frame
from .penalty import rigidity_operators, stack, unstack

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"


class ZeroGradient(ValueError):
    """The projected gradient vanishes: the curve is critical, stop descent."""


@dataclass(frozen=True)
class KKTResiduals:
    primal: float
    dual: float
    gap: float

    def max(self) -> float:
        return max(self.primal, self.dual, self.gap)


@dataclass
class ConeProgram:
    """Linear-objective conic program over z in R^num_vars.

    Constraints: eq_A z = eq_b; ineq_G z <= ineq_h componentwise;
    |z[J]|^2 <= z[t] for (J, t) in soc_blocks; |z[J]|_2 <= z[t] for (J, t)
    in norm_blocks.  Indices are 0-based; cone blocks must not share their
    t index.  ``names`` is free-form metadata for debugging.
    """

    num_vars: int
    objective: np.ndarray
    eq_A: np.ndarray | None = None
    eq_b: np.ndarray | None = None
    ineq_G: np.ndarray | None = None
    ineq_h: np.ndarray | None = None
    soc_blocks: list = field(default_factory=list)
    norm_blocks: list = field(default_factory=list)
    names: dict = field(default_factory=dict)

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=float)
        if self.objective.shape != (self.num_vars,):
            raise ValueError("objective length must equal num_vars")
        for mat, vec, tag in ((self.eq_A, self.eq_b, "eq"), (self.ineq_G, self.ineq_h, "ineq")):
            if (mat is None) != (vec is None):
                raise ValueError(f"{tag} matrix and rhs must be given together")
            if mat is not None:
                if not np.isfinite(mat).all() or not np.isfinite(vec).all():
                    raise ValueError(f"{tag} constraint data must be finite")
                if mat.shape != (len(vec), self.num_vars):
                    raise ValueError(f"{tag} shapes are inconsistent")
        t_seen = set()
        for idx, t in list(self.soc_blocks) + list(self.norm_blocks):
            if t in t_seen:
                raise ValueError("cone blocks must not share t indices")
            t_seen.add(t)
            for j in list(idx) + [t]:
                if not (0 <= j < self.num_vars):
                    raise ValueError("cone index out of range")


@dataclass
class ConeSolution:
    """Solver output: the point, its certificates and diagnostics.

    ``y``, ``z_cone`` and ``s`` are the equality duals, cone duals and cone
    slacks in the internal standard form; they back the KKT residuals.
    """

    z: np.ndarray
    status: str
    kkt: KKTResiduals
    iterations: int
    objective: float
    y: np.ndarray
    z_cone: np.ndarray
    s: np.ndarray


# ---------------------------------------------------------------------------
# standard-form embedding
# ---------------------------------------------------------------------------


@dataclass
class _Standard:
    """min c.x  s.t.  A x = b,  G x + s = h,  s in R+^lp x prod Lorentz(q)."""

    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    G: np.ndarray
    h: np.ndarray
    lp: int
    soc_dims: list


def _standardize(p: ConeProgram) -> _Standard:
    n = p.num_vars
    A = p.eq_A if p.eq_A is not None else np.zeros((0, n))
    b = p.eq_b if p.eq_b is not None else np.zeros(0)
    rows = []
    rhs = []
    if p.ineq_G is not None:
        rows.append(np.asarray(p.ineq_G, dtype=float))
        rhs.append(np.asarray(p.ineq_h, dtype=float))
    lp = sum(r.shape[0] for r in rows)
    soc_dims = []
    for idx, t in p.norm_blocks:
        # (z_t, z_J) in Lorentz cone
        block = np.zeros((1 + len(idx), n))
        block[0, t] = -1.0
        for k, j in enumerate(idx):
            block[1 + k, j] = -1.0
        rows.append(block)
        rhs.append(np.zeros(1 + len(idx)))
        soc_dims.append(1 + len(idx))
    for idx, t in p.soc_blocks:
        # |z_J|^2 <= z_t  <=>  ((1+z_t)/2, (1-z_t)/2, z_J) in Lorentz cone
        block = np.zeros((2 + len(idx), n))
        block[0, t] = -0.5
        block[1, t] = 0.5
        for k, j in enumerate(idx):
            block[2 + k, j] = -1.0
        rows.append(block)
        rhs.append(np.concatenate([[0.5, 0.5], np.zeros(len(idx))]))
        soc_dims.append(2 + len(idx))
    G = np.vstack(rows) if rows else np.zeros((0, n))
    h = np.concatenate(rhs) if rhs else np.zeros(0)
    return _Standard(
        c=np.asarray(p.objective, dtype=float),
        A=np.asarray(A, dtype=float),
        b=np.asarray(b, dtype=float),
        G=G,
        h=h,
        lp=lp,
        soc_dims=soc_dims,
    )


# ---------------------------------------------------------------------------
# cone algebra (nonnegative orthant x Lorentz cones)
# ---------------------------------------------------------------------------


class _Cone:
    """Product cone R+^lp x prod Lorentz(q), with blocks grouped by dimension.

    Grouping same-sized Lorentz blocks lets every cone operation run as a
    handful of vectorized array expressions instead of per-block Python
    loops; gather/scatter uses precomputed index matrices.
    """

    def __init__(self, lp: int, soc_dims: list):
        self.lp = lp
        self.soc_dims = list(soc_dims)
        self.dim = lp + sum(soc_dims)
        self.degree = lp + len(soc_dims)
        groups = {}
        pos = lp
        for q in soc_dims:
            groups.setdefault(q, []).append(pos)
            pos += q
        # per group: (q, index matrix of shape (k, q))
        self.groups = [
            (q, np.asarray(starts)[:, None] + np.arange(q)[None, :])
            for q, starts in sorted(groups.items())
        ]

    def identity(self) -> np.ndarray:
        e = np.zeros(self.dim)
        e[: self.lp] = 1.0
        for _, idx in self.groups:
            e[idx[:, 0]] = 1.0
        return e

    def min_eig(self, u) -> float:
        vals = [np.inf]
        if self.lp:
            vals.append(float(u[: self.lp].min()))
        for _, idx in self.groups:
            blk = u[idx]
            vals.append(float((blk[:, 0] - np.linalg.norm(blk[:, 1:], axis=1)).min()))
        return min(vals)

    def max_step(self, u, du) -> float:
        """sup alpha >= 0 with u + alpha du still in the cone (u interior)."""
        alpha = np.inf
        if self.lp:
            neg = du[: self.lp] < 0
            if neg.any():
                alpha = float(np.min(-u[: self.lp][neg] / du[: self.lp][neg]))
        for _, idx in self.groups:
            blk, dblk = u[idx], du[idx]
            a = dblk[:, 0] ** 2 - np.einsum("ij,ij->i", dblk[:, 1:], dblk[:, 1:])
            b = 2.0 * (blk[:, 0] * dblk[:, 0] - np.einsum("ij,ij->i", blk[:, 1:], dblk[:, 1:]))
            c = np.maximum(blk[:, 0] ** 2 - np.einsum("ij,ij->i", blk[:, 1:], blk[:, 1:]), 0.0)
            with np.errstate(all="ignore"):
                disc = b * b - 4.0 * a * c
                sq = np.sqrt(np.maximum(disc, 0.0))
                r1 = np.where(np.abs(a) > 1e-300, (-b - sq) / (2 * a), np.inf)
                r2 = np.where(np.abs(a) > 1e-300, (-b + sq) / (2 * a), np.inf)
                rlin = np.where((np.abs(a) <= 1e-300) & (b < 0.0), -c / b, np.inf)
            roots = np.stack([r1, r2, rlin], axis=1)
            ok = (
                (roots > 0.0)
                & np.isfinite(roots)
                & (np.where(np.abs(a)[:, None] > 1e-300, disc[:, None] >= 0.0, True))
                & (blk[:, 0, None] + roots * dblk[:, 0, None] >= -1e-14 * (1 + np.abs(blk[:, 0, None])))
            )
            cand = np.where(ok, roots, np.inf).min(axis=1)
            if cand.size:
                alpha = min(alpha, float(cand.min()))
        return alpha

    def jprod(self, u, v) -> np.ndarray:
        out = np.empty(self.dim)
        out[: self.lp] = u[: self.lp] * v[: self.lp]
        for _, idx in self.groups:
            ub, vb = u[idx], v[idx]
            out[idx[:, 0]] = np.einsum("ij,ij->i", ub, vb)
            out[idx[:, 1:]] = ub[:, :1] * vb[:, 1:] + vb[:, :1] * ub[:, 1:]
        return out

    def jsolve(self, lam, d) -> np.ndarray:
        """Solve lam o x = d for x (lam in the cone interior)."""
        out = np.empty(self.dim)
        out[: self.lp] = d[: self.lp] / lam[: self.lp]
        for _, idx in self.groups:
            lb, db = lam[idx], d[idx]
            det = lb[:, 0] ** 2 - np.einsum("ij,ij->i", lb[:, 1:], lb[:, 1:])
            # rounding near the boundary late in the solve
            det = np.where(det <= 0.0, np.maximum(1e-14 * lb[:, 0] ** 2, 1e-300), det)
            x0 = (lb[:, 0] * db[:, 0] - np.einsum("ij,ij->i", lb[:, 1:], db[:, 1:])) / det
            out[idx[:, 0]] = x0
            out[idx[:, 1:]] = (db[:, 1:] - x0[:, None] * lb[:, 1:]) / lb[:, :1]
        return out


class _Scaling:
    """Nesterov-Todd scaling W with lambda = W z = W^{-1} s.

    For a Lorentz block the scaling point is wbar = (a, q) with
    a^2 - |q|^2 = 1, and W = eta V where V is the structured square root
    [[a, q'], [q, I + q q'/(1+a)]] of the hyperbolic Householder matrix
    2 wbar wbar' - J; V^{-1} is V with q negated.  All blocks of one
    dimension are processed together.
    """

    def __init__(self, cone: _Cone, s, z):
        self.cone = cone
        self.d = np.sqrt(s[: cone.lp] / z[: cone.lp]) if cone.lp else np.zeros(0)
        self.soc = []
        for _, idx in cone.groups:
            sb, zb = s[idx], z[idx]
            # relative floors absorb cancellation when iterates graze the boundary
            det_s = sb[:, 0] ** 2 - np.einsum("ij,ij->i", sb[:, 1:], sb[:, 1:])
            det_z = zb[:, 0] ** 2 - np.einsum("ij,ij->i", zb[:, 1:], zb[:, 1:])
            rs = np.sqrt(np.maximum(det_s, 1e-16 * sb[:, 0] ** 2 + 1e-300))
            rz = np.sqrt(np.maximum(det_z, 1e-16 * zb[:, 0] ** 2 + 1e-300))
            sbar, zbar = sb / rs[:, None], zb / rz[:, None]
            gamma = np.sqrt(np.maximum((1.0 + np.einsum("ij,ij->i", sbar, zbar)) / 2.0, 1e-8))
            w = sbar.copy()
            w[:, 0] += zbar[:, 0]
            w[:, 1:] -= zbar[:, 1:]
            w /= 2.0 * gamma[:, None]
            self.soc.append((np.sqrt(rs / rz), w))
        self.lam = self.apply(z)

    @staticmethod
    def _v_apply(a, q, u, eta):
        """eta * V u blockwise; a (k,), q (k, d-1), u (k, d), eta (k,)."""
        qu = np.einsum("ij,ij->i", q, u[:, 1:])
        out = np.empty_like(u)
        out[:, 0] = a * u[:, 0] + qu
        out[:, 1:] = u[:, 1:] + q * (u[:, 0] + qu / (1.0 + a))[:, None]
        return out * eta[:, None]

    def apply(self, u) -> np.ndarray:
        """W u (symmetric)."""
        out = np.empty(self.cone.dim)
        out[: self.cone.lp] = self.d * u[: self.cone.lp]
        for (eta, w), (_, idx) in zip(self.soc, self.cone.groups):
            out[idx] = self._v_apply(w[:, 0], w[:, 1:], u[idx], eta)
        return out

    def apply_inv(self, u) -> np.ndarray:
        """W^{-1} u."""
        out = np.empty(self.cone.dim)
        out[: self.cone.lp] = u[: self.cone.lp] / self.d
        for (eta, w), (_, idx) in zip(self.soc, self.cone.groups):
            out[idx] = self._v_apply(w[:, 0], -w[:, 1:], u[idx], 1.0 / eta)
        return out

    def apply_inv_matrix(self, mat) -> np.ndarray:
        """W^{-1} applied to every column of an (m, k) matrix."""
        out = np.empty_like(mat)
        lp = self.cone.lp
        out[:lp] = mat[:lp] / self.d[:, None] if lp else mat[:lp]
        for (eta, w), (_, idx) in zip(self.soc, self.cone.groups):
            a, qv = w[:, 0], -w[:, 1:]
            blk = mat[idx]  # (k, d, ncols)
            qu = np.einsum("ij,ijc->ic", qv, blk[:, 1:, :])
            res = np.empty_like(blk)
            res[:, 0, :] = a[:, None] * blk[:, 0, :] + qu
            res[:, 1:, :] = blk[:, 1:, :] + qv[:, :, None] * (
                blk[:, 0, :] + qu / (1.0 + a)[:, None]
            )[:, None, :]
            out[idx] = res / eta[:, None, None]
        return out


class _Identity(_Scaling):
    def __init__(self, cone: _Cone):
        self.cone = cone
        self.d = np.ones(cone.lp)
        self.soc = []
        for q, idx in cone.groups:
            k = idx.shape[0]
            w = np.zeros((k, q))
            w[:, 0] = 1.0
            self.soc.append((np.ones(k), w))


# ---------------------------------------------------------------------------
# interior-point solver
# ---------------------------------------------------------------------------


class _EqBasis:
    """Orthogonal machinery for the equality constraints A x = b.

    Precomputed once per solve from a pivoted QR of A^T: an orthonormal
    basis Z of null(A), minimum-norm particular solutions of A x = v, and
    minimum-norm least-squares solutions of A^T y = v for dual recovery.
    Rank deficiency of A is tolerated (consistent right-hand sides only,
    which holds for the residual systems solved here).
    """

    def __init__(self, a_mat: np.ndarray, nv: int, g_mat: np.ndarray | None = None):
        self.p = a_mat.shape[0]
        if self.p == 0:
            self.z = np.eye(nv)
            self.rank = 0
        else:
            q, r, perm = scipy.linalg.qr(a_mat.T, pivoting=True)
            diag = np.abs(np.diag(r)) if r.size else np.zeros(0)
            tol = max(a_mat.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
            self.rank = int(np.sum(diag > tol))
            self.q1 = np.ascontiguousarray(q[:, : self.rank])
            self.z = np.ascontiguousarray(q[:, self.rank :])
            self.r = r[: self.rank, : self.rank]
            self.perm = perm
        # G Z is constant across interior-point iterations
        self.gz = g_mat @ self.z if g_mat is not None else None

    def particular(self, by: np.ndarray) -> np.ndarray:
        """Minimum-norm x with A x = by (by assumed consistent)."""
        if self.p == 0:
            return np.zeros(self.z.shape[0])
        w = scipy.linalg.solve_triangular(self.r, by[self.perm][: self.rank], trans="T", check_finite=False)
        return self.q1 @ w

    def dual(self, v: np.ndarray) -> np.ndarray:
        """Minimum-norm y minimizing |A^T y - v|."""
        if self.p == 0:
            return np.zeros(0)
        w = scipy.linalg.solve_triangular(self.r, self.q1.T @ v, check_finite=False)
        y = np.zeros(self.p)
        y[self.perm[: self.rank]] = w
        return y


class _KKT:
    """Null-space reduction of [[G' W^-2 G, A'], [A, 0]].

    Directions are found by Cholesky on Z' G' W^-2 G Z (Z spanning
    null(A)) and refined against the full Newton system, assembled from
    well-conditioned applications of A, G and W, to recover the accuracy
    lost by forming normal equations explicitly.
    """

    def __init__(self, std: _Standard, scaling: _Scaling, basis: _EqBasis):
        self.std = std
        self.scaling = scaling
        self.basis = basis
        self.gwz = scaling.apply_inv_matrix(basis.gz)
        m = self.gwz.T @ self.gwz
        reg = 1e-11 * max(1.0, float(np.abs(np.diag(m)).max(initial=0.0)))
        m[np.diag_indices_from(m)] += reg
        self.cho = scipy.linalg.cho_factor(m, check_finite=False)

    def _winv2(self, v):
        sc = self.scaling
        return sc.apply_inv(sc.apply_inv(v))

    def _reduced(self, bx, by, bz_mod):
        sc, std, basis = self.scaling, self.std, self.basis
        x_p = basis.particular(by)
        r = bx + std.G.T @ self._winv2(bz_mod)
        rhs = basis.z.T @ r - self.gwz.T @ sc.apply_inv(std.G @ x_p)
        u = scipy.linalg.cho_solve(self.cho, rhs, check_finite=False)
        dx = x_p + basis.z @ u
        dy = basis.dual(r - std.G.T @ self._winv2(std.G @ dx))
        dz = self._winv2(std.G @ dx - bz_mod)
        return dx, dy, dz

    def solve(self, bx, by, bz_mod):
        """Return (dx, dy, dz) with Adx = by, A'dy + G'dz = bx, Gdx - W^2 dz = bz_mod."""
        std, sc = self.std, self.scaling
        dx, dy, dz = self._reduced(bx, by, bz_mod)
        prev = np.inf
        for _ in range(4):
            r1 = bx - (std.A.T @ dy + std.G.T @ dz)
            r2 = by - std.A @ dx
            r3 = bz_mod - (std.G @ dx - sc.apply(sc.apply(dz)))
            resid = max(np.abs(r1).max(initial=0.0), np.abs(r2).max(initial=0.0),
                        np.abs(r3).max(initial=0.0))
            if not np.isfinite(resid) or resid >= 0.5 * prev:
                break
            prev = resid
            cx, cy, cz = self._reduced(r1, r2, r3)
            dx = dx + cx
            dy = dy + cy
            dz = dz + cz
        return dx, dy, dz


def _certificates(std, cone, x, y, z, tol):
    """Return a terminal status if an (in)feasibility certificate emerged."""
    hz_by = std.h @ z + std.b @ y
    if hz_by < -1e-12:
        res = np.linalg.norm(std.A.T @ y + std.G.T @ z) / (-hz_by)
        if res <= tol * max(1.0, np.linalg.norm(std.c)):
            return INFEASIBLE
    ctx = std.c @ x
    if ctx < -1e-12:
        eq = np.linalg.norm(std.A @ x) if std.A.size else 0.0
        sl = -std.G @ x
        cone_gap = max(0.0, -cone.min_eig(sl)) if std.G.size else 0.0
        if max(eq, cone_gap) <= tol * (-ctx):
            return UNBOUNDED
    return None


def _solve_standard(std: _Standard, tol: float, max_iter: int):
    cone = _Cone(std.lp, std.soc_dims)
    n = std.c.shape[0]
    m, p = std.G.shape[0], std.A.shape[0]
    if m == 0:
        raise ValueError("programs without inequality/cone constraints are not supported")

    e = cone.identity()
    basis = _EqBasis(std.A, n, std.G)
    kkt0 = _KKT(std, _Identity(cone), basis)
    # primal start: argmin |s| subject to the affine constraints
    x, _, zt = kkt0.solve(np.zeros(n), std.b.copy(), std.h.copy())
    shat = -(std.G @ x - std.h)
    alpha = -cone.min_eig(shat)
    s = shat if alpha < 0 else shat + (1.0 + alpha) * e
    # dual start: argmin |z| subject to dual feasibility
    _, y, zhat = kkt0.solve(-std.c, np.zeros(p), np.zeros(m))
    alpha = -cone.min_eig(zhat)
    z = zhat if alpha < 0 else zhat + (1.0 + alpha) * e
    y = np.asarray(y)

    status = MAX_ITER
    iters = 0
    best = (np.inf, x, y, s, z)
    stall = 0
    for it in range(1, max_iter + 1):
        iters = it
        rx = std.A.T @ y + std.G.T @ z + std.c
        ry = std.A @ x - std.b
        rz = std.G @ x + s - std.h
        gap = float(s @ z)
        pcost = float(std.c @ x)
        pres = max(
            np.linalg.norm(ry) / max(1.0, np.linalg.norm(std.b)),
            np.linalg.norm(rz) / max(1.0, np.linalg.norm(std.h)),
        )
        dres = np.linalg.norm(rx) / max(1.0, np.linalg.norm(std.c))
        relgap = gap / max(1.0, abs(pcost))
        merit = max(pres, dres, relgap)
        if merit < best[0]:
            best = (merit, x.copy(), y.copy(), s.copy(), z.copy())
            stall = 0
        else:
            stall += 1
        if merit <= tol:
            status = OPTIMAL
            break
        cert = _certificates(std, cone, x, y, z, tol)
        if cert is not None:
            status = cert
            break
        if stall >= 8:
            break  # double precision exhausted; best iterate is kept

        try:
            scaling = _Scaling(cone, s, z)
            lam = scaling.lam
            mu = gap / cone.degree
            kkt = _KKT(std, scaling, basis)

            # predictor
            dx_a, dy_a, dz_a = kkt.solve(-rx, -ry, -rz + s)
            ds_a = -rz - std.G @ dx_a
            alpha_aff = min(1.0, cone.max_step(s, ds_a), cone.max_step(z, dz_a))
            mu_aff = float((s + alpha_aff * ds_a) @ (z + alpha_aff * dz_a)) / cone.degree
            sigma = min(1.0, max(0.0, (mu_aff / mu) ** 3))

            # corrector
            corr = cone.jprod(scaling.apply_inv(ds_a), scaling.apply(dz_a))
            d_target = -cone.jprod(lam, lam) - corr + sigma * mu * e
            g_c = cone.jsolve(lam, d_target)
            dx, dy, dz = kkt.solve(-rx, -ry, -rz - scaling.apply(g_c))
            ds = -rz - std.G @ dx
        except (ValueError, scipy.linalg.LinAlgError):
            break  # numerical breakdown: return the last (best) iterate

        step_fields = np.concatenate([dx, dy, dz, ds])
        if not np.isfinite(step_fields).all():
            break
        alpha = min(1.0, 0.99 * min(cone.max_step(s, ds), cone.max_step(z, dz)))
        if not np.isfinite(alpha) or alpha <= 1e-13:
            break
        x = x + alpha * dx
        y = y + alpha * dy
        s = s + alpha * ds
        z = z + alpha * dz

    if status in (MAX_ITER, OPTIMAL):
        merit, x, y, s, z = best
        if merit <= tol:
            status = OPTIMAL
    return x, y, z, s, status, iters


def solve(program: ConeProgram, tol: float = 1e-8, max_iter: int = 200) -> ConeSolution:
    """Solve the cone program; `optimal` status carries tight KKT residuals."""
    std = _standardize(program)
    if std.G.shape[0] == 0:
        # no inequalities or cones: linear objective over an affine set
        if np.linalg.norm(std.c) == 0.0:
            x = np.zeros(program.num_vars)
            if std.A.size:
                x, *_ = np.linalg.lstsq(std.A, std.b, rcond=None)
            sol = ConeSolution(
                z=x, status=OPTIMAL, kkt=KKTResiduals(0.0, 0.0, 0.0), iterations=0,
                objective=0.0, y=np.zeros(std.A.shape[0]), z_cone=np.zeros(0), s=np.zeros(0),
            )
            return sol
        return ConeSolution(
            z=np.zeros(program.num_vars), status=UNBOUNDED,
            kkt=KKTResiduals(np.inf, np.inf, np.inf), iterations=0,
            objective=-np.inf, y=np.zeros(std.A.shape[0]), z_cone=np.zeros(0), s=np.zeros(0),
        )
    x, y, z, s, status, iters = _solve_standard(std, tol, max_iter)
    sol = ConeSolution(
        z=x, status=status, kkt=KKTResiduals(np.inf, np.inf, np.inf),
        iterations=iters, objective=float(std.c @ x), y=y, z_cone=z, s=s,
    )
    sol.kkt = check_kkt(program, sol)
    return sol


def check_kkt(program: ConeProgram, sol: ConeSolution) -> KKTResiduals:
    """Recompute KKT residuals of a solution from the program semantics."""
    std = _standardize(program)
    x = sol.z
    eq_res = 0.0
    if std.A.size:
        eq_res = float(np.abs(std.A @ x - std.b).max()) / max(1.0, np.abs(std.b).max())
    cone_res = 0.0
    if program.ineq_G is not None:
        viol = program.ineq_G @ x - program.ineq_h
        cone_res = max(cone_res, float(viol.max()) / max(1.0, np.abs(program.ineq_h).max()))
    for idx, t in program.soc_blocks:
        cone_res = max(cone_res, float(x[list(idx)] @ x[list(idx)] - x[t]))
    for idx, t in program.norm_blocks:
        cone_res = max(cone_res, float(np.linalg.norm(x[list(idx)]) - x[t]))
    primal = max(eq_res, cone_res, 0.0)
    dual_vec = std.c.copy()
    if std.A.size:
        dual_vec += std.A.T @ sol.y
    if std.G.size and sol.z_cone.size:
        dual_vec += std.G.T @ sol.z_cone
    cone = _Cone(std.lp, std.soc_dims)
    dual_cone_viol = max(0.0, -cone.min_eig(sol.z_cone)) if sol.z_cone.size else 0.0
    dual = max(
        float(np.linalg.norm(dual_vec, np.inf)) / max(1.0, np.abs(std.c).max()),
        dual_cone_viol,
    )
    gap = float(abs(sol.s @ sol.z_cone)) / max(1.0, abs(std.c @ x)) if sol.s.size else 0.0
    return KKTResiduals(primal=primal, dual=dual, gap=gap)


def dump_program(program: ConeProgram) -> str:
    """Plain-text dump (objective, equalities, inequalities, cone blocks)."""
    out = io.StringIO()
    out.write(f"vars {program.num_vars}\n")
    out.write("objective " + " ".join(repr(v) for v in program.objective) + "\n")

    def write_rows(tag, mat, vec):
        if mat is None:
            return
        for row, rhs in zip(mat, vec):
            nz = " ".join(f"{j}:{row[j]!r}" for j in np.nonzero(row)[0])
            out.write(f"{tag} {nz} | {rhs!r}\n")

    write_rows("eq", program.eq_A, program.eq_b)
    write_rows("ineq", program.ineq_G, program.ineq_h)
    for idx, t in program.soc_blocks:
        out.write("soc2 " + " ".join(map(str, idx)) + f" <= {t}\n")
    for idx, t in program.norm_blocks:
        out.write("soc " + " ".join(map(str, idx)) + f" <= {t}\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# the descent-direction program
# ---------------------------------------------------------------------------

RIGID = "rigid"
SIMILARITY = "similarity"


def _jump_matrix(n: int) -> np.ndarray:
    d = np.eye(n)
    d[np.arange(n), (np.arange(n) - 1) % n] -= 1.0
    return d


def build_finsler_program(
    curve: DiscreteCurve,
    grad: np.ndarray,
    rho: float,
    variant: str = RIGID,
    lam: float = 0.0,
    metrics: CurveMetrics | None = None,
    convention: str = "midpoint",
) -> ConeProgram:
    """Pose the constrained direction program for one descent step.

    ``grad`` is the field whose normal projection anchors the deviation
    constraint (the Sobolev gradient during matching, or a synthetic drive
    field).  The rigid variant minimizes the jump sum of the normal
    derivative under exact zero tangential stretch; the similarity variant
    minimizes the Euclidean jump sum of the (tangential, normal) pair under
    the L1(curve) stretch budget ``lam``.

    Variable layout (blocks of size n unless noted): phi_x, phi_y, s_x, s_y,
    jump bound z, cone slack t, then for the similarity variant the jump
    components jl, jh and the stretch split p, q.
    """
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    if variant not in (RIGID, SIMILARITY):
        raise ValueError(f"unknown variant {variant!r}")
    if metrics is None:
        metrics = assemble_metrics(curve)
    n = curve.n
    ops = rigidity_operators(curve, convention)
    w = metrics.chol
    wb = scipy.linalg.block_diag(w, w)
    w_pi = wb @ ops.Pi  # 2n x 2n, maps stacked phi to W (Pi phi)
    target = w_pi @ stack(np.asarray(grad, dtype=float))
    norm_target = float(np.linalg.norm(target))
    if norm_target <= 1e-13 * max(1.0, float(np.linalg.norm(stack(grad)))):
        raise ZeroGradient("projected gradient vanishes; curve is critical")

    # The program is positively homogeneous in (phi, grad, lam) jointly, so
    # normalize by the deviation radius scale to keep the data well
    # conditioned; the objective carries the scale back to original units.
    scale = norm_target
    target = target / scale
    lam_scaled = lam / scale

    jump = _jump_matrix(n)
    jump_h = jump @ ops.Hn
    nv = 6 * n if variant == RIGID else 10 * n
    sl = {
        "phi": slice(0, 2 * n),
        "s": slice(2 * n, 4 * n),
        "z": slice(4 * n, 5 * n),
        "t": slice(5 * n, 6 * n),
    }
    if variant == SIMILARITY:
        sl["jl"] = slice(6 * n, 7 * n)
        sl["jh"] = slice(7 * n, 8 * n)
        sl["p"] = slice(8 * n, 9 * n)
        sl["q"] = slice(9 * n, 10 * n)

    c = np.zeros(nv)
    c[sl["z"]] = scale

    eq_rows = []
    eq_rhs = []
    # s = W(Pi phi - Pi grad)
    block = np.zeros((2 * n, nv))
    block[:, sl["phi"]] = -w_pi
    block[:, sl["s"]] = np.eye(2 * n)
    eq_rows.append(block)
    eq_rhs.append(-target)
    if variant == RIGID:
        block = np.zeros((n, nv))
        block[:, sl["phi"]] = ops.L
        eq_rows.append(block)
        eq_rhs.append(np.zeros(n))
    else:
        jump_l = jump @ ops.L
        for mat, name in ((jump_l, "jl"), (jump_h, "jh")):
            block = np.zeros((n, nv))
            block[:, sl["phi"]] = mat
            block[:, sl[name]] = -np.eye(n)
            eq_rows.append(block)
            eq_rhs.append(np.zeros(n))
        block = np.zeros((n, nv))
        block[:, sl["phi"]] = ops.L
        block[:, sl["p"]] = -np.eye(n)
        block[:, sl["q"]] = np.eye(n)
        eq_rows.append(block)
        eq_rhs.append(np.zeros(n))

    g_rows = []
    g_rhs = []
    if variant == RIGID:
        # -z <= jump(Hn phi) <= z, the linear absolute-value split
        block = np.zeros((n, nv))
        block[:, sl["phi"]] = jump_h
        block[:, sl["z"]] = -np.eye(n)
        g_rows.append(block)
        g_rhs.append(np.zeros(n))
        block = -block.copy()
        block[:, sl["z"]] = -np.eye(n)
        g_rows.append(block)
        g_rhs.append(np.zeros(n))
    else:
        for name in ("p", "q"):
            block = np.zeros((n, nv))
            block[:, sl[name]] = -np.eye(n)
            g_rows.append(block)
            g_rhs.append(np.zeros(n))
        speed = edge_frame(curve).speed
        row = np.zeros((1, nv))
        row[0, sl["p"]] = speed / n
        row[0, sl["q"]] = speed / n
        g_rows.append(row)
        g_rhs.append(np.array([lam_scaled]))
    row = np.zeros((1, nv))
    row[0, sl["t"]] = 1.0
    g_rows.append(row)
    g_rhs.append(np.array([rho**2]))

    soc_blocks = [([2 * n + i, 3 * n + i], 5 * n + i) for i in range(n)]
    norm_blocks = []
    if variant == SIMILARITY:
        norm_blocks = [([6 * n + i, 7 * n + i], 4 * n + i) for i in range(n)]

    return ConeProgram(
        num_vars=nv,
        objective=c,
        eq_A=np.vstack(eq_rows),
        eq_b=np.concatenate(eq_rhs),
        ineq_G=np.vstack(g_rows),
        ineq_h=np.concatenate(g_rhs),
        soc_blocks=soc_blocks,
        norm_blocks=norm_blocks,
        names={
            "variant": variant,
            "n": n,
            "rho": rho,
            "lam": lam,
            "slices": sl,
            "scale": scale,
            "deviation_radius": rho * norm_target,
        },
    )


def extract_field(program: ConeProgram, z: np.ndarray) -> np.ndarray:
    """Recover the (n, 2) deformation field from a solution vector."""
    scale = program.names.get("scale", 1.0)
    return scale * unstack(z[program.names["slices"]["phi"]])
