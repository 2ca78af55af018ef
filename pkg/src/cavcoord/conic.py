"""Second-order cone program container and solve contract.

A program is a linear objective over ``num_vars`` variables subject to
equality rows, second-order cone constraints ``||A x + b|| <= c.x + d``
and optional per-variable bounds.  Quadratic costs are lifted into this
form with :meth:`ProgramBuilder.epigraph_of_squared_norm`.

The solve backend is Clarabel (a primal-dual interior-point method);
everything upstream sees only :class:`ConicProgram` / :class:`ConicSolution`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import sparse

import clarabel

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
MAX_ITER = "max_iter"
NUMERICAL_ERROR = "numerical_error"


@dataclass(frozen=True)
class SolveSettings:
    feas_tol: float = 1e-8
    max_iter: int = 200


@dataclass
class SocConstraint:
    """``||A x + b|| <= c.x + d``.

    ``A`` is either a full-width dense matrix (``cols is None``) or a dense
    block over the column subset ``cols``.  ``c`` follows the same convention
    via ``c_cols``.  Rows of ``A`` may be structurally zero with nonzero
    offsets in ``b`` (constants inside the norm).
    """

    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: float
    cols: Optional[np.ndarray] = None
    c_cols: Optional[np.ndarray] = None

    def lhs_rhs(self, x: np.ndarray) -> tuple[float, float]:
        xa = x[self.cols] if self.cols is not None else x
        xc = x[self.c_cols] if self.c_cols is not None else x
        lhs = float(np.linalg.norm(self.A @ xa + self.b)) if self.A.shape[0] else float(np.linalg.norm(self.b))
        rhs = float(self.c @ xc + self.d)
        return lhs, rhs

    def violation(self, x: np.ndarray) -> float:
        lhs, rhs = self.lhs_rhs(x)
        return max(lhs - rhs, 0.0)


@dataclass
class ConicProgram:
    num_vars: int
    objective: np.ndarray
    eq_constraints: list[tuple[np.ndarray, float]] = field(default_factory=list)
    soc_constraints: list[SocConstraint] = field(default_factory=list)
    bounds: Optional[tuple[np.ndarray, np.ndarray]] = None

    def validate(self) -> None:
        n = self.num_vars
        if n <= 0:
            raise ValueError("program has no variables")
        obj = np.asarray(self.objective, dtype=float)
        if obj.shape != (n,) or not np.all(np.isfinite(obj)):
            raise ValueError("objective must be a finite length-%d vector" % n)
        for i, (row, rhs) in enumerate(self.eq_constraints):
            row = np.asarray(row, dtype=float)
            if row.shape != (n,):
                raise ValueError(f"eq_constraints[{i}] row has wrong width")
            if not (np.all(np.isfinite(row)) and math.isfinite(rhs)):
                raise ValueError(f"eq_constraints[{i}] has non-finite entries")
        for i, s in enumerate(self.soc_constraints):
            width = len(s.cols) if s.cols is not None else n
            cwidth = len(s.c_cols) if s.c_cols is not None else n
            if s.A.ndim != 2 or s.A.shape[1] != width:
                raise ValueError(f"soc_constraints[{i}]: affine map column count mismatch")
            if s.b.shape != (s.A.shape[0],):
                raise ValueError(f"soc_constraints[{i}]: offset dimension must equal map row count")
            if np.asarray(s.c).shape != (cwidth,):
                raise ValueError(f"soc_constraints[{i}]: affine row has wrong width")
            for arr in (s.A, s.b, s.c):
                if not np.all(np.isfinite(arr)):
                    raise ValueError(f"soc_constraints[{i}] has non-finite entries")
            if not math.isfinite(s.d):
                raise ValueError(f"soc_constraints[{i}] has non-finite entries")
        if self.bounds is not None:
            lb, ub = self.bounds
            if np.asarray(lb).shape != (n,) or np.asarray(ub).shape != (n,):
                raise ValueError("bounds must be per-variable length-%d vectors" % n)


@dataclass
class ConicSolution:
    status: str
    x: np.ndarray
    objective_value: float
    primal_residual: float
    dual_residual: float


def _scatter(rows, cols, vals, A, col_idx, row0, n):
    """Append triplets for dense block A placed at rows row0.. over col_idx."""
    m, k = A.shape
    if m == 0 or k == 0:
        return
    rr = np.repeat(np.arange(row0, row0 + m), k)
    cc = np.tile(np.asarray(col_idx), m)
    vv = np.asarray(A, dtype=float).ravel()
    nz = vv != 0.0
    rows.append(rr[nz])
    cols.append(cc[nz])
    vals.append(vv[nz])


def _row_triplets(rows, cols, vals, coeffs, col_idx, row, n, scale=1.0):
    coeffs = np.asarray(coeffs, dtype=float)
    nz = coeffs != 0.0
    if not np.any(nz):
        return
    idx = (np.asarray(col_idx) if col_idx is not None else np.arange(n))[nz]
    rows.append(np.full(idx.shape, row))
    cols.append(idx)
    vals.append(scale * coeffs[nz])


def solve(p: ConicProgram, settings: SolveSettings = SolveSettings(),
          check: bool = True) -> ConicSolution:
    """Solve the program; infeasible/unbounded are statuses, never raises.

    Deterministic for fixed inputs and settings (single-threaded backend).
    ``check=False`` skips the well-formedness validation (for callers that
    construct programs through the builder).
    """
    if check:
        p.validate()
    n = p.num_vars
    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    b_parts: list[np.ndarray] = []
    cones = []
    row0 = 0

    # Zero cone: row.x = rhs  ->  row.x + s = rhs, s = 0.
    if p.eq_constraints:
        for (row, rhs) in p.eq_constraints:
            _row_triplets(rows, cols, vals, row, None, row0, n)
            b_parts.append(np.array([rhs]))
            row0 += 1
        cones.append(clarabel.ZeroConeT(len(p.eq_constraints)))

    # Nonnegative cone: bounds and degenerate (rowless) SOCs.
    nn0 = row0
    if p.bounds is not None:
        lb, ub = p.bounds
        for j in range(n):
            if np.isfinite(lb[j]):
                rows.append(np.array([row0])); cols.append(np.array([j])); vals.append(np.array([-1.0]))
                b_parts.append(np.array([-float(lb[j])]))
                row0 += 1
            if np.isfinite(ub[j]):
                rows.append(np.array([row0])); cols.append(np.array([j])); vals.append(np.array([1.0]))
                b_parts.append(np.array([float(ub[j])]))
                row0 += 1
    lin_socs = [s for s in p.soc_constraints if s.A.shape[0] == 0]
    for s in lin_socs:
        # ||b|| <= c.x + d as the linear row c.x + d - ||b|| >= 0
        _row_triplets(rows, cols, vals, s.c, s.c_cols, row0, n, scale=-1.0)
        b_parts.append(np.array([s.d - float(np.linalg.norm(s.b))]))
        row0 += 1
    if row0 > nn0:
        cones.append(clarabel.NonnegativeConeT(row0 - nn0))

    # Second-order cones: s = (c.x + d, A x + b).
    for s in p.soc_constraints:
        m = s.A.shape[0]
        if m == 0:
            continue
        _row_triplets(rows, cols, vals, s.c, s.c_cols, row0, n, scale=-1.0)
        b_parts.append(np.array([s.d]))
        _scatter(rows, cols, vals, -s.A, s.cols if s.cols is not None else np.arange(n), row0 + 1, n)
        b_parts.append(np.asarray(s.b, dtype=float))
        cones.append(clarabel.SecondOrderConeT(m + 1))
        row0 += m + 1

    m_total = row0
    if rows:
        G = sparse.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(m_total, n),
        )
    else:
        G = sparse.csc_matrix((m_total, n))
    h = np.concatenate(b_parts) if b_parts else np.zeros(0)

    cl = clarabel.DefaultSettings()
    cl.verbose = False
    cl.max_iter = settings.max_iter
    cl.max_threads = 1
    # aim one order below the contract tolerance so the post-solve residual
    # check at feas_tol is robust to unscaling
    cl.tol_feas = 0.1 * settings.feas_tol
    cl.tol_gap_abs = 0.1 * settings.feas_tol
    cl.tol_gap_rel = 0.1 * settings.feas_tol
    P = sparse.csc_matrix((n, n))
    q = np.asarray(p.objective, dtype=float)
    solver = clarabel.DefaultSolver(P, q, G, h, cones, cl)
    res = solver.solve()

    st = res.status
    S = clarabel.SolverStatus
    if st == S.Solved:
        status = OPTIMAL
    elif st in (S.PrimalInfeasible, S.AlmostPrimalInfeasible):
        status = INFEASIBLE
    elif st in (S.DualInfeasible, S.AlmostDualInfeasible):
        status = UNBOUNDED
    elif st == S.MaxIterations:
        status = MAX_ITER
    else:
        status = NUMERICAL_ERROR

    x = np.asarray(res.x, dtype=float)
    obj = float(q @ x) if x.size else 0.0
    dual = float(res.r_dual)
    prim = float(res.r_prim)
    if status in (OPTIMAL, NUMERICAL_ERROR) and x.size:
        prim = _stacked_residual(G, h, x, cones)
        if status == OPTIMAL and prim > settings.feas_tol:
            status = NUMERICAL_ERROR
    return ConicSolution(status=status, x=x, objective_value=obj,
                         primal_residual=prim, dual_residual=dual)


def _stacked_residual(G, h, x, cones) -> float:
    """Max scaled violation straight off the stacked cone rows."""
    s = h - G @ x
    worst = 0.0
    row = 0
    for cone in cones:
        if isinstance(cone, clarabel.ZeroConeT):
            m = cone.dim
            seg = s[row:row + m]
            worst = max(worst, float(np.max(np.abs(seg) / (1.0 + np.abs(h[row:row + m])),
                                            initial=0.0)))
        elif isinstance(cone, clarabel.NonnegativeConeT):
            m = cone.dim
            seg = s[row:row + m]
            worst = max(worst, float(np.max(-seg / (1.0 + np.abs(h[row:row + m])),
                                            initial=0.0)))
        else:
            m = cone.dim
            seg = s[row:row + m]
            lhs = float(np.linalg.norm(seg[1:]))
            worst = max(worst, (lhs - seg[0]) / (1.0 + abs(lhs) + abs(seg[0])))
        row += m
    return worst


def primal_residual(p: ConicProgram, x: np.ndarray) -> float:
    """Max scaled constraint violation of x (eq, SOC and bounds)."""
    worst = 0.0
    for (row, rhs) in p.eq_constraints:
        worst = max(worst, abs(float(np.asarray(row) @ x - rhs)) / (1.0 + abs(rhs)))
    for s in p.soc_constraints:
        lhs, rhs = s.lhs_rhs(x)
        worst = max(worst, (lhs - rhs) / (1.0 + abs(lhs) + abs(rhs)))
    if p.bounds is not None:
        lb, ub = p.bounds
        worst = max(worst, float(np.max(np.maximum(lb - x, 0.0), initial=0.0)))
        worst = max(worst, float(np.max(np.maximum(x - ub, 0.0), initial=0.0)))
    return worst


class ProgramBuilder:
    """Incremental construction of a :class:`ConicProgram`."""

    def __init__(self) -> None:
        self.num_vars = 0
        self._obj_cols: list[np.ndarray] = []
        self._obj_vals: list[np.ndarray] = []
        self._eqs: list[tuple[np.ndarray, float]] = []
        self._socs: list[SocConstraint] = []
        self.cost_constant = 0.0

    def new_vars(self, k: int) -> np.ndarray:
        idx = np.arange(self.num_vars, self.num_vars + k)
        self.num_vars += k
        return idx

    def add_objective(self, cols: Sequence[int], coeffs: Sequence[float]) -> None:
        self._obj_cols.append(np.asarray(cols, dtype=int))
        self._obj_vals.append(np.asarray(coeffs, dtype=float))

    def add_eq(self, cols, coeffs, rhs: float) -> None:
        self._eqs.append((np.asarray(cols, dtype=int), np.asarray(coeffs, dtype=float), float(rhs)))

    def add_soc(self, A: np.ndarray, cols, b: np.ndarray, c: np.ndarray, c_cols, d: float) -> None:
        self._socs.append(SocConstraint(
            A=np.atleast_2d(np.asarray(A, dtype=float)) if np.size(A) else np.zeros((0, len(cols) if cols is not None else 0)),
            b=np.asarray(b, dtype=float),
            c=np.asarray(c, dtype=float),
            d=float(d),
            cols=None if cols is None else np.asarray(cols, dtype=int),
            c_cols=None if c_cols is None else np.asarray(c_cols, dtype=int),
        ))

    def add_linear(self, c: np.ndarray, c_cols, d: float) -> None:
        """c.x + d >= 0 as a rowless SOC."""
        k = len(c_cols) if c_cols is not None else self.num_vars
        self.add_soc(np.zeros((0, k)), c_cols, np.zeros(0), c, c_cols, d)

    def epigraph_of_squared_norm(self, expr_map: np.ndarray, expr_cols,
                                 expr_offset: np.ndarray,
                                 weight_sqrt: Optional[np.ndarray] = None,
                                 obj_coeff: float = 1.0) -> int:
        """Add t >= ||W^{1/2}(F x + g)||^2, put obj_coeff*t in the objective.

        Returns the index of the epigraph variable t.  Uses the norm-epigraph
        form ||(v, (t-1)/2)|| <= (t+1)/2.  Rejects non-PSD weights.
        """
        F = np.atleast_2d(np.asarray(expr_map, dtype=float))
        g = np.asarray(expr_offset, dtype=float)
        if weight_sqrt is not None:
            W = np.asarray(weight_sqrt, dtype=float)
            if W.shape[0] != W.shape[1] or not np.allclose(W, W.T, atol=1e-10):
                raise ValueError("weight square root must be symmetric")
            if np.min(np.linalg.eigvalsh((W + W.T) / 2)) < -1e-10:
                raise ValueError("weight square root must be PSD")
            F = W @ F
            g = W @ g
        t = int(self.new_vars(1)[0])
        m = F.shape[0]
        cols = None if expr_cols is None else np.asarray(list(expr_cols) + [t], dtype=int)
        if expr_cols is None:
            # full-width map: widen with a t column at build time via cols trick
            cols = np.arange(F.shape[1] + 1)
            cols[-1] = t
        A = np.zeros((m + 1, F.shape[1] + 1))
        A[:m, :-1] = F
        A[m, -1] = -0.5
        b = np.concatenate([g, [0.5]])
        c = np.zeros(F.shape[1] + 1)
        c[-1] = 0.5
        self.add_soc(A, cols, b, c, cols, 0.5)
        self.add_objective([t], [obj_coeff])
        return t

    def build(self, bounds=None) -> ConicProgram:
        n = self.num_vars
        obj = np.zeros(n)
        for cols, vals in zip(self._obj_cols, self._obj_vals):
            np.add.at(obj, cols, vals)
        eqs = []
        for cols, coeffs, rhs in self._eqs:
            row = np.zeros(n)
            row[cols] = coeffs
            eqs.append((row, rhs))
        return ConicProgram(num_vars=n, objective=obj, eq_constraints=eqs,
                            soc_constraints=self._socs, bounds=bounds)


DUMP_HEADER = "%%cavcoord-conic v1"


def dump_program(p: ConicProgram, path) -> None:
    """Write a plain-text dump of the program for offline inspection."""
    lines = [DUMP_HEADER,
             f"nvars {p.num_vars} neq {len(p.eq_constraints)} nsoc {len(p.soc_constraints)}"]
    for j, v in enumerate(np.asarray(p.objective)):
        if v != 0.0:
            lines.append(f"c {j} {v!r}")
    for i, (row, rhs) in enumerate(p.eq_constraints):
        row = np.asarray(row)
        for j in np.nonzero(row)[0]:
            lines.append(f"e {i} {j} {row[j]!r}")
        lines.append(f"erhs {i} {rhs!r}")
    for k, s in enumerate(p.soc_constraints):
        lines.append(f"soc {k} rows {s.A.shape[0]}")
        col_idx = s.cols if s.cols is not None else np.arange(p.num_vars)
        for i in range(s.A.shape[0]):
            for jj in np.nonzero(s.A[i])[0]:
                lines.append(f"sA {k} {i} {col_idx[jj]} {s.A[i, jj]!r}")
        for i, v in enumerate(s.b):
            if v != 0.0:
                lines.append(f"sb {k} {i} {v!r}")
        ccol_idx = s.c_cols if s.c_cols is not None else np.arange(p.num_vars)
        for jj in np.nonzero(np.asarray(s.c))[0]:
            lines.append(f"sc {k} {ccol_idx[jj]} {s.c[jj]!r}")
        lines.append(f"sd {k} {s.d!r}")
    if p.bounds is not None:
        lb, ub = p.bounds
        for j in range(p.num_vars):
            if np.isfinite(lb[j]) or np.isfinite(ub[j]):
                lines.append(f"b {j} {lb[j]!r} {ub[j]!r}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
