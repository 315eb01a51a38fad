import itertools

import numpy as np
import pytest

from finslerflow.energy import KernelParams, energy_report
from finslerflow.geometry import DiscreteCurve, assemble_metrics
from finslerflow.penalty import (
    deviation_gap,
    l1_L_gamma,
    op_L,
    penalty_TVK,
    penalty_V,
)
from finslerflow.socp import (
    ConeProgram,
    ZeroGradient,
    build_finsler_program,
    check_kkt,
    dump_program,
    extract_field,
    solve,
)
from conftest import random_polygon, rigid_field


def grid_refine_minimum(program, lo, hi, levels=9, pts=13, slack=1e-9):
    """Brute-force oracle: nested grid refinement over the feasible box."""
    lo = np.full(program.num_vars, float(lo))
    hi = np.full(program.num_vars, float(hi))

    def feasible(zs):
        ok = np.ones(zs.shape[0], dtype=bool)
        if program.eq_A is not None:
            ok &= np.abs(zs @ program.eq_A.T - program.eq_b).max(axis=1) <= 1e-7
        if program.ineq_G is not None:
            ok &= (zs @ program.ineq_G.T - program.ineq_h).max(axis=1) <= slack
        for idx, t in program.soc_blocks:
            ok &= np.sum(zs[:, idx] ** 2, axis=1) <= zs[:, t] + slack
        for idx, t in program.norm_blocks:
            ok &= np.linalg.norm(zs[:, idx], axis=1) <= zs[:, t] + slack
        return ok

    best = None
    for _ in range(levels):
        axes = [np.linspace(lo[i], hi[i], pts) for i in range(program.num_vars)]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, program.num_vars)
        ok = feasible(mesh)
        if not ok.any():
            return best
        vals = mesh[ok] @ program.objective
        z = mesh[ok][np.argmin(vals)]
        best = float(vals.min()) if best is None else min(best, float(vals.min()))
        span = (hi - lo) / (pts - 1)
        lo = z - 1.5 * span
        hi = z + 1.5 * span
    return best


def wavy_curve(n, amp=0.3, lobes=3):
    theta = 2.0 * np.pi * np.arange(n) / n
    r = 1.0 + amp * np.cos(lobes * theta)
    return DiscreteCurve(np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1))


def test_lp_active_bound():
    prog = ConeProgram(
        num_vars=1, objective=np.array([1.0]),
        ineq_G=np.array([[-1.0]]), ineq_h=np.array([-3.0]),
    )
    sol = solve(prog)
    assert sol.status == "optimal"
    assert sol.z[0] == pytest.approx(3.0, abs=1e-7)
    assert sol.kkt.max() <= 1e-8


def test_forced_equality_squared_cone():
    # min t subject to x = q and |x - p|^2 <= t, via the shift u = x - p
    q = np.array([1.0, 2.0])
    p = np.array([-0.5, 0.5])
    c = np.zeros(5)
    c[4] = 1.0
    a = np.zeros((4, 5))
    b = np.zeros(4)
    a[0, 0] = a[1, 1] = 1.0
    b[:2] = q
    a[2, 0] = a[3, 1] = 1.0
    a[2, 2] = a[3, 3] = -1.0
    b[2:] = p
    prog = ConeProgram(
        num_vars=5, objective=c, eq_A=a, eq_b=b,
        ineq_G=np.zeros((1, 5)), ineq_h=np.array([100.0]),
        soc_blocks=[([2, 3], 4)],
    )
    sol = solve(prog)
    assert sol.status == "optimal"
    assert sol.z[4] == pytest.approx(float(np.sum((q - p) ** 2)), abs=1e-6)


def test_infeasible_detection():
    prog = ConeProgram(
        num_vars=1, objective=np.array([1.0]),
        ineq_G=np.array([[-1.0], [1.0]]), ineq_h=np.array([-1.0, 0.0]),
    )
    assert solve(prog).status == "infeasible"


def test_unbounded_detection():
    prog = ConeProgram(
        num_vars=1, objective=np.array([1.0]),
        ineq_G=np.array([[1.0]]), ineq_h=np.array([5.0]),
    )
    assert solve(prog).status == "unbounded"


def test_random_small_programs_match_grid_oracle(rng):
    hits = 0
    for trial in range(12):
        nv = int(rng.integers(3, 5))
        c = rng.normal(size=nv)
        rows = [np.eye(nv), -np.eye(nv)]
        rhs = [np.full(nv, 2.0), np.full(nv, 2.0)]
        extra = rng.normal(size=(2, nv))
        rows.append(extra)
        rhs.append(np.abs(extra).sum(axis=1) * 0.8 + 0.2)  # keeps 0 feasible
        prog = ConeProgram(
            num_vars=nv, objective=c,
            ineq_G=np.vstack(rows), ineq_h=np.concatenate(rhs),
            soc_blocks=[([0, 1], 2)],
            norm_blocks=[([0], 3)] if nv >= 4 else [],
        )
        sol = solve(prog)
        assert sol.status == "optimal"
        oracle = grid_refine_minimum(prog, -2.0, 2.0)
        assert oracle is not None
        assert sol.objective <= oracle + 1e-6  # solver at least as good
        assert abs(sol.objective - oracle) <= 1e-4 * (1.0 + abs(oracle))
        hits += 1
    assert hits == 12


def test_check_kkt_flags_bad_point():
    prog = ConeProgram(
        num_vars=1, objective=np.array([1.0]),
        ineq_G=np.array([[-1.0]]), ineq_h=np.array([-3.0]),
    )
    sol = solve(prog)
    good = check_kkt(prog, sol)
    assert good.max() <= 1e-8
    sol.z = np.array([1.0])  # violates z >= 3
    assert check_kkt(prog, sol).primal > 0.5


def test_dump_program_roundtrip_text():
    prog = ConeProgram(
        num_vars=3, objective=np.array([0.0, 0.0, 1.0]),
        ineq_G=np.array([[-1.0, 0.0, 0.0]]), ineq_h=np.array([-1.0]),
        soc_blocks=[([0, 1], 2)],
    )
    text = dump_program(prog)
    assert "vars 3" in text
    assert "soc2 0 1 <= 2" in text


def test_cone_program_validation():
    with pytest.raises(ValueError):
        ConeProgram(num_vars=2, objective=np.zeros(3))
    with pytest.raises(ValueError):
        ConeProgram(num_vars=3, objective=np.zeros(3), soc_blocks=[([0], 5)])
    with pytest.raises(ValueError):
        ConeProgram(
            num_vars=4, objective=np.zeros(4),
            soc_blocks=[([0], 3)], norm_blocks=[([1], 3)],
        )


def finsler_instance(n, seed, rho=0.3, noise=1.0):
    # rough targets and a small rho make the optimum penalty strictly
    # positive, so the minimizer is unique (no rigid field is feasible)
    rng = np.random.default_rng(seed)
    curve = wavy_curve(n)
    target = DiscreteCurve(
        curve.nodes * 0.8 + noise * rng.normal(size=(n, 2)) / np.sqrt(n) + 0.3
    )
    metrics = assemble_metrics(curve)
    rep = energy_report(curve, target, KernelParams(sigma=0.8, delta=0.2), metrics)
    return curve, rep.grad_h1, metrics, rho


def test_finsler_rigid_certified_by_penalty_ops(rng):
    curve, grad, metrics, rho = finsler_instance(32, seed=11)
    prog = build_finsler_program(curve, grad, rho, metrics=metrics)
    sol = solve(prog)
    assert sol.status == "optimal" and sol.kkt.max() <= 1e-8
    phi = extract_field(prog, sol.z)
    # independently re-verified through the penalty operators
    assert np.abs(op_L(curve, phi)).max() <= 1e-6
    lhs, rhs = deviation_gap(curve, phi, grad, rho, metrics)
    assert lhs <= rhs * (1.0 + 1e-6)
    assert sol.objective == pytest.approx(penalty_V(curve, phi), abs=1e-6 * (1 + sol.objective))


def test_finsler_scaling_covariance():
    curve, grad, metrics, rho = finsler_instance(24, seed=3)
    prog1 = build_finsler_program(curve, grad, rho, metrics=metrics)
    sol1 = solve(prog1)
    assert sol1.objective > 1.0  # non-degenerate instance
    scale = 3.7
    prog2 = build_finsler_program(curve, scale * grad, rho, metrics=metrics)
    sol2 = solve(prog2)
    assert sol2.objective == pytest.approx(scale * sol1.objective, rel=1e-5)
    phi1 = extract_field(prog1, sol1.z)
    phi2 = extract_field(prog2, sol2.z)
    np.testing.assert_allclose(phi2, scale * phi1, atol=1e-3 * np.abs(scale * phi1).max())


def test_finsler_rigid_target_reached(rng):
    # when the drive field is itself rigid the optimum is that rigid field
    curve = wavy_curve(16)
    metrics = assemble_metrics(curve)
    g = rigid_field(curve, a=0.8, b=np.array([0.2, -0.1]))
    prog = build_finsler_program(curve, g, rho=0.9, metrics=metrics)
    sol = solve(prog)
    assert sol.status == "optimal"
    assert sol.objective <= 1e-6
    phi = extract_field(prog, sol.z)
    assert penalty_V(curve, phi) <= 1e-6
    assert np.abs(op_L(curve, phi)).max() <= 1e-6


def test_similarity_relaxes_rigid():
    curve, grad, metrics, rho = finsler_instance(24, seed=5)
    rigid_obj = solve(build_finsler_program(curve, grad, rho, metrics=metrics)).objective
    for lam in (1e3, 1e5):
        sim = solve(
            build_finsler_program(curve, grad, rho, variant="similarity", lam=lam, metrics=metrics)
        )
        assert sim.status == "optimal"
        assert sim.objective <= rigid_obj * (1.0 + 1e-6) + 1e-8


def test_similarity_budget_certified():
    curve, grad, metrics, rho = finsler_instance(24, seed=9)
    lam = 0.05
    prog = build_finsler_program(curve, grad, rho, variant="similarity", lam=lam, metrics=metrics)
    sol = solve(prog)
    assert sol.status == "optimal"
    phi = extract_field(prog, sol.z)
    assert l1_L_gamma(curve, phi) <= lam * (1.0 + 1e-6) + 1e-9
    assert sol.objective == pytest.approx(penalty_TVK(curve, phi), abs=1e-6 * (1 + sol.objective))
    lhs, rhs = deviation_gap(curve, phi, grad, rho, metrics)
    assert lhs <= rhs * (1.0 + 1e-6)


def test_zero_gradient_raises():
    curve = wavy_curve(12)
    with pytest.raises(ZeroGradient):
        build_finsler_program(curve, np.zeros((12, 2)), rho=0.5)


def brute_force_rigid_objective(curve, grad, rho, metrics):
    """Search the 3-parameter rigid space for a feasible zero-penalty field."""
    best = None
    for a in np.linspace(-3.0, 3.0, 61):
        for bx in np.linspace(-2.0, 2.0, 41):
            for by in np.linspace(-2.0, 2.0, 41):
                phi = rigid_field(curve, a, np.array([bx, by]))
                lhs, rhs = deviation_gap(curve, phi, grad, rho, metrics)
                if lhs <= rhs:
                    return 0.0
    return best


def test_square_toy_matches_rigid_brute_force():
    square = DiscreteCurve(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]))
    metrics = assemble_metrics(square)
    g = rigid_field(square, a=-0.6, b=np.array([0.3, 0.4]))
    g = g + 0.05 * np.array([[1.0, -1.0], [0.5, 0.2], [-0.3, 0.8], [0.1, -0.6]])
    rho = 0.9
    oracle = brute_force_rigid_objective(square, g, rho, metrics)
    assert oracle == 0.0  # a feasible globally rigid field exists
    prog = build_finsler_program(square, g, rho, metrics=metrics)
    sol = solve(prog)
    assert sol.status == "optimal"
    assert sol.objective <= oracle + 1e-4
    phi = extract_field(prog, sol.z)
    assert np.abs(op_L(square, phi)).max() <= 1e-6
