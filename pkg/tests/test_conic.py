import math

import numpy as np
import pytest

from cavcoord import conic
from cavcoord.conic import (ConicProgram, ProgramBuilder, SocConstraint,
                            SolveSettings, dump_program, solve)


def soc_full(A, b, c, d):
    return SocConstraint(A=np.asarray(A, float), b=np.asarray(b, float),
                         c=np.asarray(c, float), d=float(d))


def test_norm_of_constant():
    # minimize x s.t. ||(1,)|| <= x
    p = ConicProgram(num_vars=1, objective=np.array([1.0]),
                     soc_constraints=[soc_full(np.zeros((1, 1)), [1.0], [1.0], 0.0)])
    sol = solve(p)
    assert sol.status == conic.OPTIMAL
    assert abs(sol.x[0] - 1.0) < 1e-7


def test_3_4_5_triangle():
    # minimize x s.t. ||(y,z)|| <= x, y = 3, z = 4
    A = np.array([[0.0, 1, 0], [0, 0, 1]])
    p = ConicProgram(
        num_vars=3,
        objective=np.array([1.0, 0, 0]),
        eq_constraints=[(np.array([0.0, 1, 0]), 3.0), (np.array([0.0, 0, 1]), 4.0)],
        soc_constraints=[soc_full(A, [0.0, 0.0], [1.0, 0, 0], 0.0)],
    )
    sol = solve(p)
    assert sol.status == conic.OPTIMAL
    assert abs(sol.x[0] - 5.0) < 1e-6


def _random_socp(rng):
    # 3 variables, a couple of random SOC rows anchored to a known feasible point.
    x0 = rng.uniform(-1, 1, 3)
    socs = []
    for _ in range(3):
        A = rng.normal(size=(2, 3))
        b = rng.normal(size=2)
        c = rng.normal(size=3)
        slack = rng.uniform(0.1, 1.0)
        d = np.linalg.norm(A @ x0 + b) - c @ x0 + slack
        socs.append(soc_full(A, b, c, d))
    obj = rng.normal(size=3)
    lb, ub = np.full(3, -2.0), np.full(3, 2.0)
    return ConicProgram(num_vars=3, objective=obj, soc_constraints=socs,
                        bounds=(lb, ub))


def _grid_oracle(p, lo=-2.0, hi=2.0):
    """Coarse-to-fine grid search over the 3-var box; independent of solve()."""
    best = None
    center = np.zeros(3)
    half = hi - lo
    pts = 41
    for _ in range(40):
        axes = [np.linspace(center[i] - half / 2, center[i] + half / 2, pts) for i in range(3)]
        X, Y, Z = np.meshgrid(*axes, indexing="ij")
        cand = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
        ok = np.all((cand >= lo - 1e-12) & (cand <= hi + 1e-12), axis=1)
        for s in p.soc_constraints:
            lhs = np.linalg.norm(cand @ s.A.T + s.b, axis=1)
            rhs = cand @ s.c + s.d
            ok &= lhs <= rhs + 1e-9
        vals = cand @ p.objective
        vals[~ok] = np.inf
        i = int(np.argmin(vals))
        if not np.isfinite(vals[i]):
            return None
        if best is None or vals[i] < best:
            best = vals[i]
        center = cand[i]
        half *= 0.7
    return best


def test_random_socp_matches_grid_oracle():
    rng = np.random.default_rng(7)
    checked = 0
    for _ in range(6):
        p = _random_socp(rng)
        sol = solve(p)
        if sol.status != conic.OPTIMAL:
            continue
        oracle = _grid_oracle(p)
        if oracle is None:
            continue
        checked += 1
        # grid point is feasible so oracle >= optimum; refinement brings it close
        assert sol.objective_value <= oracle + 1e-6
        assert oracle - sol.objective_value <= 1e-4
    assert checked >= 3


def test_infeasible_and_unbounded_are_statuses():
    p = ConicProgram(num_vars=1, objective=np.array([1.0]),
                     eq_constraints=[(np.array([1.0]), 1.0), (np.array([1.0]), 2.0)])
    assert solve(p).status == conic.INFEASIBLE
    p2 = ConicProgram(num_vars=1, objective=np.array([1.0]))
    assert solve(p2).status == conic.UNBOUNDED


def test_malformed_rejected_before_solving():
    p = ConicProgram(num_vars=2, objective=np.array([1.0]))
    with pytest.raises(ValueError):
        solve(p)
    bad = ConicProgram(num_vars=2, objective=np.array([1.0, 0.0]),
                       soc_constraints=[soc_full(np.zeros((2, 2)), [0.0], [1.0, 0.0], 0.0)])
    with pytest.raises(ValueError, match="offset dimension"):
        solve(bad)


def test_deterministic_bitwise():
    rng = np.random.default_rng(3)
    p = _random_socp(rng)
    s1 = solve(p)
    s2 = solve(p)
    assert s1.x.tobytes() == s2.x.tobytes()
    assert s1.objective_value == s2.objective_value


def test_optimal_solutions_refeasible_within_tol():
    rng = np.random.default_rng(11)
    for _ in range(5):
        p = _random_socp(rng)
        sol = solve(p)
        if sol.status != conic.OPTIMAL:
            continue
        for s in p.soc_constraints:
            lhs, rhs = s.lhs_rhs(sol.x)
            assert lhs - rhs <= 1e-8 * (1 + abs(lhs) + abs(rhs))
        assert sol.primal_residual <= 1e-8


def test_objective_scaling_leaves_argmin():
    rng = np.random.default_rng(5)
    p = _random_socp(rng)
    tight = SolveSettings(feas_tol=1e-11)
    s1 = solve(p, tight)
    p2 = ConicProgram(num_vars=p.num_vars, objective=37.0 * p.objective,
                      soc_constraints=p.soc_constraints, bounds=p.bounds)
    s2 = solve(p2, tight)
    assert s1.status == s2.status == conic.OPTIMAL
    assert np.max(np.abs(s1.x - s2.x)) < 1e-6


# epigraph_of_squared_norm ---------------------------------------------------

def test_epigraph_scalar_zero_argument():
    # expr = x, weight 1, minimize t: optimum t=0 at x=0
    b = ProgramBuilder()
    x = b.new_vars(1)
    b.epigraph_of_squared_norm(np.array([[1.0]]), x, np.zeros(1))
    sol = solve(b.build())
    assert sol.status == conic.OPTIMAL
    assert abs(sol.objective_value) < 1e-6
    assert abs(sol.x[0]) < 1e-3  # flat minimum, loose on x


def test_epigraph_perfect_square_minimum():
    # expr = x - 2 -> optimum t = 0 at x = 2
    b = ProgramBuilder()
    x = b.new_vars(1)
    b.epigraph_of_squared_norm(np.array([[1.0]]), x, np.array([-2.0]))
    sol = solve(b.build())
    assert sol.status == conic.OPTIMAL
    assert abs(sol.objective_value) < 1e-6
    assert abs(sol.x[0] - 2.0) < 1e-3


def test_epigraph_vector_psd_minimum_at_origin():
    # expr = (x, 2x): optimal t = 0 at x = 0
    b = ProgramBuilder()
    x = b.new_vars(1)
    b.epigraph_of_squared_norm(np.array([[1.0], [2.0]]), x, np.zeros(2))
    sol = solve(b.build())
    assert sol.status == conic.OPTIMAL
    assert abs(sol.objective_value) < 1e-6
    assert abs(sol.x[0]) < 1e-3


def test_epigraph_equals_quadratic_value():
    # minimize ||W^(1/2)(Fx+g)||^2 over free x equals lstsq optimum
    rng = np.random.default_rng(2)
    F = rng.normal(size=(4, 3))
    g = rng.normal(size=4)
    b = ProgramBuilder()
    x = b.new_vars(3)
    b.epigraph_of_squared_norm(F, x, g)
    sol = solve(b.build())
    xs, res, *_ = np.linalg.lstsq(F, -g, rcond=None)
    opt = float(np.linalg.norm(F @ xs + g) ** 2)
    assert sol.status == conic.OPTIMAL
    assert abs(sol.objective_value - opt) < 1e-6


def test_epigraph_rejects_non_psd_weight():
    b = ProgramBuilder()
    x = b.new_vars(1)
    with pytest.raises(ValueError, match="PSD"):
        b.epigraph_of_squared_norm(np.array([[1.0]]), x, np.zeros(1),
                                   weight_sqrt=np.array([[-1.0]]))


def test_dump_program_roundtrip_header(tmp_path):
    p = ConicProgram(num_vars=1, objective=np.array([1.0]),
                     soc_constraints=[soc_full(np.zeros((1, 1)), [1.0], [1.0], 0.0)])
    out = tmp_path / "prog.txt"
    dump_program(p, out)
    text = out.read_text().splitlines()
    assert text[0] == conic.DUMP_HEADER
    assert text[1].startswith("nvars 1")
