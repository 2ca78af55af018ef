"""Joint robust cooperative trajectory planner.

Per iteration, assembles one convex program over the coupled vehicles'
policies (feedforward Ubar, initial-deviation feedback H, innovation
feedback L): the quadratic tracking cost lifted via norm epigraphs,
pairwise collision SOC rows, per-half-plane input chance SOC rows, jerk
mean rows and jerk covariance rows, plus mean-level road and velocity
rows.  The pair-coupling graph splits the joint program into connected
components solved independently (the objective is separable; constraints
couple only paired vehicles).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.special
from scipy import linalg as sla

from . import conic
from .conic import ProgramBuilder, SolveSettings
from .dynamics import NU, NX, LinearizedDynamics
from .estimation import Belief, FilterSchedule
from .horizon import (HorizonBlocks, HorizonPolicy, control_cov,
                      predicted_cov, predicted_mean)
from .linalg import psd_sqrt

STATUS_OPTIMAL = "optimal"
STATUS_SOFTENED = "softened"
STATUS_BRAKING = "fallback_braking"

_STATUS_ORDER = {STATUS_OPTIMAL: 0, STATUS_SOFTENED: 1, STATUS_BRAKING: 2}


def erf_inv(y: float) -> float:
    """Inverse error function; rejects |y| >= 1."""
    if not -1.0 < y < 1.0:
        raise ValueError("erf_inv argument must lie in (-1, 1)")
    return float(scipy.special.erfinv(y))


@dataclass
class PlannerConfig:
    M: int = 20
    tau: float = 0.1
    wheelbase: float = 2.7
    xi_coll: float = 0.1
    xi_fail_u: float = 0.05
    d_min: float = 4.0
    kappa_max: float = 30.0
    sigma_max: float = 0.5
    Q: np.ndarray = field(default_factory=lambda: np.diag([10.0, 10.0, 1.0, 1.0]))
    Q_M: np.ndarray = field(default_factory=lambda: np.diag([50.0, 50.0, 1.0, 1.0]))
    R: np.ndarray = field(default_factory=lambda: np.diag([20.0, 20.0]))
    pair_radius: float = 30.0
    a_max: float = 5.0
    delta_max: float = 0.78
    v_max: float = 20.0
    road_halfwidth: float = 10.0
    enforce_boundary: bool = True
    slack_penalty: float = 1e4
    boundary_penalty: float = 200.0
    feas_tol: float = 1e-7
    accept_residual: float = 1e-4
    max_iter: int = 200

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.Q_M = np.asarray(self.Q_M, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        if not 0.0 < self.xi_coll < 0.5:
            raise ValueError("xi_coll must lie in (0, 0.5)")
        if not 0.0 < self.xi_fail_u < 1.0:
            raise ValueError("xi_fail_u must lie in (0, 1)")
        if sum(self.xi_q_fail) > self.xi_fail_u + 1e-12:
            raise ValueError("per-half-plane thresholds must sum to at most xi_fail_u")
        if np.min(np.linalg.eigvalsh(self.R)) <= 0:
            raise ValueError("R must be positive definite")
        for name, Qm in (("Q", self.Q), ("Q_M", self.Q_M)):
            if np.min(np.linalg.eigvalsh(Qm)) < -1e-12:
                raise ValueError(f"{name} must be PSD")

    @property
    def xi_q_fail(self) -> tuple[float, float]:
        """Failure budget per input dimension (q = 1, 2)."""
        return (self.xi_fail_u / 2.0, self.xi_fail_u / 2.0)

    @property
    def coll_mult(self) -> float:
        return math.sqrt(2.0) * erf_inv(1.0 - 2.0 * self.xi_coll)

    def input_mult(self, q: int) -> float:
        return math.sqrt(2.0) * erf_inv(1.0 - 2.0 * self.xi_q_fail[q])

    def q_scale(self, arr: np.ndarray) -> np.ndarray:
        """Left-multiply a stacked ((M+1)nx x *) array by blockdiag(Q^{1/2})."""
        a2 = arr.reshape(arr.shape[0], -1)
        qs, qms = self._q_sqrts()
        out = np.empty_like(a2, dtype=float)
        head = a2[:self.M * NX].reshape(self.M, NX, -1)
        out[:self.M * NX] = (qs @ head).reshape(self.M * NX, -1)
        out[self.M * NX:] = qms @ a2[self.M * NX:]
        return out.reshape(arr.shape)

    def _q_sqrts(self):
        cache = getattr(self, "_q_sqrt_cache", None)
        if cache is None:
            cache = (psd_sqrt(self.Q), psd_sqrt(self.Q_M))
            object.__setattr__(self, "_q_sqrt_cache", cache)
        return cache

    def r_blkdiag_sqrt(self) -> np.ndarray:
        cache = getattr(self, "_r_sqrt_cache", None)
        if cache is None:
            cache = np.kron(np.eye(self.M), psd_sqrt(self.R))
            object.__setattr__(self, "_r_sqrt_cache", cache)
        return cache


@dataclass
class VehiclePlanInput:
    id: int
    belief: Belief                  # IM-side estimate belief (mu_t, Sigma-hat_t)
    blocks: HorizonBlocks
    schedule: FilterSchedule
    reference: np.ndarray           # (M+1, 4)
    nominal_x: np.ndarray           # (M+1, 4)
    nominal_u: np.ndarray           # (M, 2)
    updated: bool = False
    dyns: Optional[list] = None     # per-step LinearizedDynamics (fixed-gain mode)

    def __post_init__(self):
        M = self.blocks.M
        self.reference = np.asarray(self.reference, float)
        self.nominal_x = np.asarray(self.nominal_x, float)
        self.nominal_u = np.asarray(self.nominal_u, float)
        if self.reference.shape != (M + 1, NX):
            raise ValueError("reference must have M+1 states")
        if self.nominal_u.shape != (M, NU):
            raise ValueError("nominal control must have M entries")


@dataclass
class PlanResult:
    policies: dict
    means: dict                      # id -> (M+1, 4) predicted estimate mean
    covs: dict                       # id -> stacked estimate covariance
    pos_covs: dict                   # id -> (M+1, 2, 2) position covariance
    statuses: dict                   # id -> optimal | softened | fallback_braking
    objective: float
    alphas: dict                     # (i, j, k) -> unit separation direction
    slack: float = 0.0

    @property
    def status(self) -> str:
        if not self.statuses:
            return STATUS_OPTIMAL
        return max(self.statuses.values(), key=lambda s: _STATUS_ORDER.get(s, 3))

    def first_control(self, vid: int, xhat: np.ndarray, mu: np.ndarray) -> np.ndarray:
        p = self.policies[vid]
        return p.Ubar[:NU] + p.H[0] @ (np.asarray(xhat, float) - np.asarray(mu, float))


# A "row group" of an SOC's norm content: (A_block, cols, offset) with
# A_block possibly None for pure-constant rows.
RowGroup = tuple[Optional[np.ndarray], Optional[np.ndarray], np.ndarray]


def _emit_soc(b: ProgramBuilder, groups: list[RowGroup],
              c_coeffs: np.ndarray, c_cols: np.ndarray, d: float) -> None:
    var_groups = [(A, cols, g) for (A, cols, g) in groups if A is not None and A.size]
    const_vecs = [g for (A, cols, g) in groups if A is None or not A.size]
    const_vecs = [g for g in const_vecs if np.any(g)]
    if not var_groups:
        # constant norm content: ||b|| <= c.x + d is the linear row
        # c.x + (d - ||b||) >= 0
        off = float(np.linalg.norm(np.concatenate(const_vecs))) if const_vecs else 0.0
        b.add_linear(c_coeffs, c_cols, d - off)
        return
    widths = [g[1].shape[0] for g in var_groups]
    offs = np.concatenate([[0], np.cumsum(widths)]).astype(int)
    rows = [g[0].shape[0] for g in var_groups]
    roffs = np.concatenate([[0], np.cumsum(rows)]).astype(int)
    n_const = sum(len(g) for g in const_vecs)
    A = np.zeros((roffs[-1] + n_const, offs[-1]))
    bvec = np.zeros(roffs[-1] + n_const)
    for i, (Ab, cols, g) in enumerate(var_groups):
        A[roffs[i]:roffs[i + 1], offs[i]:offs[i + 1]] = Ab
        bvec[roffs[i]:roffs[i + 1]] = g
    if const_vecs:
        bvec[roffs[-1]:] = np.concatenate(const_vecs)
    all_cols = np.concatenate([g[1] for g in var_groups])
    b.add_soc(A, all_cols, bvec, c_coeffs, c_cols, d)


class _Work:
    """Per-vehicle assembly context inside one component program."""

    def __init__(self, vin: VehiclePlanInput, cfg: PlannerConfig,
                 fixed_gain: Optional[np.ndarray] = None):
        self.vin = vin
        self.cfg = cfg
        self.M = vin.blocks.M
        self.nz = vin.blocks.nz
        self.sigma0 = np.zeros((NX, NX)) if vin.updated else np.asarray(vin.belief.cov, float)
        self.sig0_sqrt = psd_sqrt(self.sigma0)
        self.sigz_sqrt = [psd_sqrt(S) for S in vin.blocks.sigma_z_blocks]
        self.err_sqrt = [psd_sqrt(S) for S in vin.schedule.post_err_covs]
        self.mean_const = vin.blocks.Amat @ vin.belief.mean + vin.blocks.Rvec
        self.fixed_gain = fixed_gain
        if fixed_gain is None:
            self.H_fix = self.L_fix = None
            self.has_h = float(np.trace(self.sigma0)) > 1e-14
            self.has_l = any(float(np.trace(S)) > 1e-14
                             for S in vin.blocks.sigma_z_blocks[1:self.M])
        else:
            self.H_fix, self.L_fix = fixed_feedback_blocks(vin, fixed_gain)
            self.has_h = self.has_l = False
        self.u_idx: Optional[np.ndarray] = None
        self.h_idx: Optional[np.ndarray] = None
        self.l_idx: Optional[np.ndarray] = None

    def allocate(self, b: ProgramBuilder) -> None:
        self.u_idx = b.new_vars(self.M * NU)
        if self.has_h:
            self.h_idx = b.new_vars(self.M * NU * NX)
        if self.has_l:
            self.l_idx = b.new_vars((self.M - 1) * NU * self.nz)

    def h_cols(self, k: int) -> np.ndarray:
        return self.h_idx[k * NU * NX:(k + 1) * NU * NX]

    def l_cols(self, j: int) -> np.ndarray:
        """Variable columns of the innovation feedback block L^j, j in 1..M-1."""
        return self.l_idx[(j - 1) * NU * self.nz:j * NU * self.nz]

    def policy_from_solution(self, x: np.ndarray) -> HorizonPolicy:
        M, nz = self.M, self.nz
        Ubar = x[self.u_idx].copy()
        if self.fixed_gain is not None:
            H = self.H_fix.reshape(M, NU, NX).copy()
            L = (np.stack([self.L_fix[k * NU:(k + 1) * NU, k * nz:(k + 1) * nz]
                           for k in range(1, M)]) if M > 1
                 else np.zeros((0, NU, nz)))
        else:
            H = (x[self.h_idx].reshape(M, NU, NX).copy() if self.has_h
                 else np.zeros((M, NU, NX)))
            L = (x[self.l_idx].reshape(M - 1, NU, nz).copy() if self.has_l
                 else np.zeros((max(M - 1, 0), NU, nz)))
        return HorizonPolicy(Ubar=Ubar, H=H, L=L)

    def chi_groups(self, e: np.ndarray, kappa: float, k: int) -> list[RowGroup]:
        """Rows of kappa * chi for direction e = E_x^k' Gamma' alpha: the
        initial-covariance feedback block, the innovation blocks, and the
        estimation-error block."""
        blocks = self.vin.blocks
        beta = blocks.Bmat.T @ e
        groups: list[RowGroup] = []
        if self.fixed_gain is not None:
            cv = [kappa * self.sig0_sqrt @ ((blocks.Amat + blocks.Bmat @ self.H_fix).T @ e)]
            vec = (blocks.Kmat + blocks.Bmat @ self.L_fix).T @ e
            for j in range(min(k, self.M) + 1):
                cv.append(kappa * self.sigz_sqrt[j] @ vec[j * self.nz:(j + 1) * self.nz])
            groups.append((None, None, np.concatenate(cv)))
        else:
            if self.has_h:
                groups.append((kappa * _kron(beta, self.sig0_sqrt), self.h_idx,
                               kappa * self.sig0_sqrt @ (blocks.Amat.T @ e)))
            kvec = blocks.Kmat.T @ e
            consts = []
            for j in range(min(k, self.M) + 1):
                const_j = kappa * self.sigz_sqrt[j] @ kvec[j * self.nz:(j + 1) * self.nz]
                beta_j = beta[j * NU:(j + 1) * NU]
                if self.has_l and 1 <= j <= self.M - 1 and np.any(beta_j):
                    groups.append((kappa * _kron(beta_j, self.sigz_sqrt[j]),
                                   self.l_cols(j), const_j))
                elif np.any(const_j):
                    consts.append(const_j)
            if consts:
                groups.append((None, None, np.concatenate(consts)))
        groups.append((None, None, kappa * self.err_sqrt[k][:, :2] @ e[k * NX:k * NX + 2]))
        return groups


def fixed_feedback_blocks(vin: VehiclePlanInput, K_fb: np.ndarray):
    """Stacked (H, L) induced by the fixed feedback u^k = ubar^k +
    K (xhat^k - xbar^k): the deviation obeys e^{k+1} = (A+BK) e^k +
    K^{k+1} ztil^{(k+1)-}, so H^k = K Phi_cl(k,0), L(k,j) = K Phi_cl(k,j) K^j.

    Raises when a per-step closed loop fails the spectral-radius check.
    """
    if vin.dyns is None:
        raise ValueError("fixed-gain planning needs the per-step dynamics on the input")
    blocks, sched = vin.blocks, vin.schedule
    M, nz = blocks.M, blocks.nz
    H = np.zeros((M * NU, NX))
    L = np.zeros((M * NU, (M + 1) * nz))
    phi = np.eye(NX)
    innov_prop: dict[int, np.ndarray] = {}
    for k in range(M):
        H[k * NU:(k + 1) * NU] = K_fb @ phi
        for j, mat in innov_prop.items():
            L[k * NU:(k + 1) * NU, j * nz:(j + 1) * nz] = K_fb @ mat
        Acl = vin.dyns[k].A + vin.dyns[k].B @ K_fb
        rho = max(abs(np.linalg.eigvals(Acl)))
        if rho >= 1.0 + 1e-9:
            raise ValueError(f"fixed gain does not stabilize step {k} (rho={rho:.4f})")
        for j in list(innov_prop):
            innov_prop[j] = Acl @ innov_prop[j]
        innov_prop[k + 1] = sched.gains[k + 1].copy()
        phi = Acl @ phi
    return H, L


def default_smpc_gain(dyn: LinearizedDynamics,
                      q_diag=(1.0, 1.0, 1.0, 1.0), r_diag=(10.0, 10.0)) -> np.ndarray:
    """Discrete LQR feedback for the fixed-gain baseline (u = ubar + H e)."""
    Qw, Rw = np.diag(q_diag), np.diag(r_diag)
    P = sla.solve_discrete_are(dyn.A, dyn.B, Qw, Rw)
    return -np.linalg.solve(Rw + dyn.B.T @ P @ dyn.B, dyn.B.T @ P @ dyn.A)


# --- cost ---------------------------------------------------------------

def _add_sq_cost(b: ProgramBuilder, F: np.ndarray, cols: np.ndarray,
                 g: np.ndarray) -> None:
    """Lift ||F x_cols + g||^2 into the objective; constant-only rows move
    to the cost constant (the squared norm is row separable).

    Tall factors are compressed through the Gram matrix first:
    ||F x + g||^2 = ||R x + c||^2 + (g'g - c'c) with R'R = F'F and
    R c = F'g, which caps the cone size at the variable count.
    """
    F = np.atleast_2d(F)
    mask = np.any(F != 0.0, axis=1)
    if np.any(~mask):
        b.cost_constant += float(np.sum(g[~mask] ** 2))
    if not np.any(mask):
        return
    F, g = F[mask], g[mask]
    if F.shape[0] > F.shape[1] + 1:
        gram = F.T @ F
        lin = F.T @ g
        R = psd_sqrt(gram)
        c = np.linalg.lstsq(R, lin, rcond=None)[0]
        b.cost_constant += float(g @ g - c @ c)
        F, g = R, c
    b.epigraph_of_squared_norm(F, cols, g)


def assemble_cost(b: ProgramBuilder, w: _Work) -> None:
    """One vehicle's tracking + effort cost (mean and trace terms) as
    squared-norm epigraphs; the updated flag has already zeroed the
    initial-covariance term through w.sigma0."""
    cfg, blocks = w.cfg, w.vin.blocks
    M, nz = w.M, w.nz
    QsB = cfg.q_scale(blocks.Bmat)
    g_track = cfg.q_scale(w.mean_const - w.vin.reference.ravel())
    _add_sq_cost(b, np.vstack([QsB, cfg.r_blkdiag_sqrt()]), w.u_idx,
                 np.concatenate([g_track, np.zeros(M * NU)]))

    if w.fixed_gain is not None:
        _fixed_gain_cost_constants(b, w)
        return
    if w.has_h:
        # tr((A+BH)' Q (A+BH) Sigma0) + tr(H' R H Sigma0), both as
        # Frobenius factors over the H variables
        _add_sq_cost(b, np.vstack([_kron(QsB, w.sig0_sqrt),
                                   _kron(cfg.r_blkdiag_sqrt(), w.sig0_sqrt)]),
                     w.h_idx,
                     np.concatenate([(cfg.q_scale(blocks.Amat) @ w.sig0_sqrt).ravel(),
                                     np.zeros(M * NU * NX)]))
    QsK = cfg.q_scale(blocks.Kmat)
    if w.has_l:
        # tr((K+BL)' Q (K+BL) SigmaZ), column block by column block,
        # plus tr(L' R L SigmaZ)
        rows_F, g_parts = [], []
        for j in range(1, M):
            sel = slice((j + 1) * NX, (M + 1) * NX)
            Fj = _kron(QsB[sel, j * NU:(j + 1) * NU], w.sigz_sqrt[j])
            block = np.zeros((Fj.shape[0], (M - 1) * NU * nz))
            block[:, (j - 1) * NU * nz:j * NU * nz] = Fj
            rows_F.append(block)
            g_parts.append((QsK[sel, j * nz:(j + 1) * nz] @ w.sigz_sqrt[j]).ravel())
            cj = QsK[j * NX:(j + 1) * NX, j * nz:(j + 1) * nz] @ w.sigz_sqrt[j]
            b.cost_constant += float(np.sum(cj ** 2))
        cM = QsK[M * NX:, M * nz:] @ w.sigz_sqrt[M]
        b.cost_constant += float(np.sum(cM ** 2))
        Rs = psd_sqrt(cfg.R)
        Fr = np.zeros(((M - 1) * NU * nz, (M - 1) * NU * nz))
        for j in range(1, M):
            s = slice((j - 1) * NU * nz, j * NU * nz)
            Fr[s, s] = _kron(Rs, w.sigz_sqrt[j])
        rows_F.append(Fr)
        g_parts.append(np.zeros((M - 1) * NU * nz))
        _add_sq_cost(b, np.vstack(rows_F), w.l_idx, np.concatenate(g_parts))
    else:
        # no innovation feedback: the K-driven trace term is a constant
        for j in range(1, M + 1):
            cj = QsK[:, j * nz:(j + 1) * nz] @ w.sigz_sqrt[j]
            b.cost_constant += float(np.sum(cj ** 2))


def _fixed_gain_cost_constants(b: ProgramBuilder, w: _Work) -> None:
    cfg, blocks = w.cfg, w.vin.blocks
    AH = cfg.q_scale(blocks.Amat + blocks.Bmat @ w.H_fix) @ w.sig0_sqrt
    b.cost_constant += float(np.sum(AH ** 2))
    b.cost_constant += float(np.sum((cfg.r_blkdiag_sqrt() @ w.H_fix @ w.sig0_sqrt) ** 2))
    KL = cfg.q_scale(blocks.Kmat + blocks.Bmat @ w.L_fix)
    RL = cfg.r_blkdiag_sqrt() @ w.L_fix
    for j in range(w.M + 1):
        s = slice(j * w.nz, (j + 1) * w.nz)
        b.cost_constant += float(np.sum((KL[:, s] @ w.sigz_sqrt[j]) ** 2))
        b.cost_constant += float(np.sum((RL[:, s] @ w.sigz_sqrt[j]) ** 2))


# --- constraints ----------------------------------------------------------

def collision_soc_row(b: ProgramBuilder, wi: _Work, wj: _Work, k: int,
                      alpha: np.ndarray, cfg: PlannerConfig,
                      slack_idx: Optional[int] = None) -> None:
    """alpha' Gamma E_k (mean_i - mean_j) - d_min >= sqrt(2) erfinv(1-2 xi)
    ||chi||, with chi stacking both vehicles' covariance square-root rows."""
    if abs(np.linalg.norm(alpha) - 1.0) > 1e-9:
        raise ValueError("alpha must be a unit vector")
    M = wi.M
    e = np.zeros((M + 1) * NX)
    e[k * NX:k * NX + 2] = alpha
    kappa = cfg.coll_mult
    groups = wi.chi_groups(e, kappa, k) + wj.chi_groups(e, kappa, k)
    beta_i = wi.vin.blocks.Bmat.T @ e
    beta_j = wj.vin.blocks.Bmat.T @ e
    d = float(e @ wi.mean_const - e @ wj.mean_const) - cfg.d_min
    c_cols = np.concatenate([wi.u_idx, wj.u_idx])
    c_coeffs = np.concatenate([beta_i, -beta_j])
    if slack_idx is not None:
        c_cols = np.concatenate([c_cols, [slack_idx]])
        c_coeffs = np.concatenate([c_coeffs, [1.0]])
    _emit_soc(b, groups, c_coeffs, c_cols.astype(int), d)


def input_soc_rows(b: ProgramBuilder, w: _Work, cfg: PlannerConfig) -> None:
    """Per-half-plane tightened input rows: beta_q' u_bar^k <= b_q -
    sqrt(2) erfinv(1-2 xi_q) || [Sigma0^(1/2) H' E_u' ; SigmaZ^(1/2) L' E_u'] beta_q ||."""
    M = w.M
    halfplanes = [(0, 1.0, cfg.a_max), (0, -1.0, cfg.a_max),
                  (1, 1.0, cfg.delta_max), (1, -1.0, cfg.delta_max)]
    for k in range(M):
        ucols = w.u_idx[k * NU:(k + 1) * NU]
        for dim, sign, bound in halfplanes:
            kappa = cfg.input_mult(dim)
            beta_q = np.zeros(NU)
            beta_q[dim] = sign
            groups: list[RowGroup] = []
            if w.fixed_gain is not None:
                ev = np.zeros(M * NU)
                ev[k * NU + dim] = sign
                cv = [kappa * w.sig0_sqrt @ (w.H_fix.T @ ev)]
                vec = w.L_fix.T @ ev
                for j in range(M + 1):
                    block = vec[j * w.nz:(j + 1) * w.nz]
                    if np.any(block):
                        cv.append(kappa * w.sigz_sqrt[j] @ block)
                groups.append((None, None, np.concatenate(cv)))
            else:
                if w.has_h:
                    groups.append((kappa * _kron(beta_q, w.sig0_sqrt),
                                   w.h_cols(k), np.zeros(NX)))
                if w.has_l and 1 <= k <= M - 1:
                    groups.append((kappa * _kron(beta_q, w.sigz_sqrt[k]),
                                   w.l_cols(k), np.zeros(w.nz)))
            _emit_soc(b, groups, -beta_q, ucols, bound)


def jerk_rows(b: ProgramBuilder, w: _Work, cfg: PlannerConfig) -> None:
    """Mean jerk as per-component box rows; jerk covariance as the stacked
    square-root-factor norm row <= sqrt(sigma_max)."""
    M, tau = w.M, cfg.tau
    for k in range(M - 1):
        u_now = w.u_idx[k * NU:(k + 1) * NU]
        u_nxt = w.u_idx[(k + 1) * NU:(k + 2) * NU]
        for dim in range(NU):
            cols = np.array([u_nxt[dim], u_now[dim]])
            for sign in (1.0, -1.0):
                # sign*(u^{k+1} - u^k)/tau <= kappa_max
                b.add_linear(np.array([-sign / tau, sign / tau]), cols, cfg.kappa_max)
        groups: list[RowGroup] = []
        if w.fixed_gain is None:
            for t in range(NU):
                et = np.zeros(NU)
                et[t] = 1.0
                if w.has_h:
                    block = _kron(et, w.sig0_sqrt) / tau
                    groups.append((np.hstack([block, -block]),
                                   np.concatenate([w.h_cols(k + 1), w.h_cols(k)]),
                                   np.zeros(NX)))
                if w.has_l:
                    if 1 <= k <= M - 1:
                        groups.append((-_kron(et, w.sigz_sqrt[k]) / tau,
                                       w.l_cols(k), np.zeros(w.nz)))
                    if k + 1 <= M - 1:
                        groups.append((_kron(et, w.sigz_sqrt[k + 1]) / tau,
                                       w.l_cols(k + 1), np.zeros(w.nz)))
        if groups:
            _emit_soc(b, groups, np.zeros(0), np.zeros(0, dtype=int),
                      math.sqrt(cfg.sigma_max))


def mean_state_rows(b: ProgramBuilder, w: _Work, cfg: PlannerConfig,
                    slack_idx: Optional[int] = None) -> None:
    """Mean-level state-space rows: velocity box and the active road-boundary
    convex region (strip along the travel road or the central rectangle)."""
    blocks = w.vin.blocks
    hw = cfg.road_halfwidth
    for k in range(1, w.M + 1):
        row_v = blocks.Bmat[k * NX + 3]
        const_v = w.mean_const[k * NX + 3]
        nzc = np.nonzero(row_v)[0]
        # 0 <= vbar_k <= v_max
        b.add_linear(row_v[nzc], w.u_idx[nzc], const_v)
        b.add_linear(-row_v[nzc], w.u_idx[nzc], cfg.v_max - const_v)
        if not cfg.enforce_boundary:
            continue
        px, py = w.vin.nominal_x[k, 0], w.vin.nominal_x[k, 1]
        comps = []
        if abs(px) <= hw and abs(py) <= hw:
            comps = [0, 1]
        elif abs(py) <= hw:
            comps = [1]
        else:
            comps = [0]
        for comp in comps:
            row_p = blocks.Bmat[k * NX + comp]
            const_p = w.mean_const[k * NX + comp]
            nzp = np.nonzero(row_p)[0]
            cols = w.u_idx[nzp]
            if slack_idx is not None:
                cols = np.concatenate([cols, [slack_idx]])
                b.add_linear(np.concatenate([row_p[nzp], [1.0]]), cols, const_p + hw)
                b.add_linear(np.concatenate([-row_p[nzp], [1.0]]), cols, hw - const_p)
            else:
                b.add_linear(row_p[nzp], cols, const_p + hw)
                b.add_linear(-row_p[nzp], cols, hw - const_p)


# --- plan -------------------------------------------------------------------

def _pair_alpha(vi: VehiclePlanInput, vj: VehiclePlanInput, k: int,
                prev_alphas: Optional[dict]) -> np.ndarray:
    dp = vi.nominal_x[k, :2] - vj.nominal_x[k, :2]
    nrm = float(np.linalg.norm(dp))
    if nrm > 1e-6:
        return dp / nrm
    if prev_alphas:
        prev = prev_alphas.get((vi.id, vj.id, k))
        if prev is not None:
            return np.asarray(prev, float)
    dr = vi.reference[0, :2] - vj.reference[0, :2]
    nrm = float(np.linalg.norm(dr))
    if nrm > 1e-6:
        return dr / nrm
    return np.array([1.0, 0.0])


def _braking_policy(vin: VehiclePlanInput, cfg: PlannerConfig) -> HorizonPolicy:
    M = vin.blocks.M
    Ubar = np.zeros(M * NU)
    v = float(vin.belief.mean[3])
    delta_prev = float(vin.nominal_u[0, 1])
    for k in range(M):
        a = max(-cfg.a_max, -max(v, 0.0) / cfg.tau)
        Ubar[k * NU] = a
        Ubar[k * NU + 1] = delta_prev
        v = max(v + cfg.tau * a, 0.0)
    return HorizonPolicy(Ubar=Ubar, H=np.zeros((M, NU, NX)),
                         L=np.zeros((max(M - 1, 0), NU, vin.blocks.nz)))


def _kron(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """np.kron for small dense blocks without its shape-juggling overhead."""
    A = np.atleast_2d(A)
    m, n = A.shape
    p, q = B.shape
    return (A[:, None, :, None] * B[None, :, None, :]).reshape(m * p, n * q)


def _usable(sol, cfg: PlannerConfig) -> bool:
    """A solution steers the vehicles if it is optimal, or stopped slightly
    short of tolerance on a well-posed program (large tracking objectives
    limit the achievable relative residual)."""
    if sol.status == conic.OPTIMAL:
        return True
    return sol.status == conic.NUMERICAL_ERROR and \
        sol.primal_residual <= cfg.accept_residual


def _components(ids: list[int], pairs: list[tuple[int, int]]) -> list[list[int]]:
    parent = {i: i for i in ids}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in pairs:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
    comp: dict[int, list[int]] = {}
    for i in ids:
        comp.setdefault(find(i), []).append(i)
    return [sorted(v) for _, v in sorted(comp.items())]


def _gated_ks(D: float, cfg: PlannerConfig) -> list[int]:
    """Horizon steps whose collision row could possibly bind for a pair
    currently D apart: planned means move at most ~v_max per step and the
    covariance tightening is bounded at these noise scales.  Rows gated out
    here are re-checked on the solution and lazily re-added if violated."""
    out = []
    for k in range(1, cfg.M + 1):
        reach = 2.0 * cfg.v_max * k * cfg.tau + 2.5
        if D - reach <= cfg.d_min:
            out.append(k)
    return out


def _assemble_component(works: dict[int, _Work], comp: list[int],
                        pairs: list[tuple[int, int]], ks_map: dict,
                        alphas: dict, cfg: PlannerConfig, soften: bool):
    b = ProgramBuilder()
    slack_idx = bnd_idx = None
    if soften:
        slack_idx = int(b.new_vars(1)[0])
        b.add_objective([slack_idx], [cfg.slack_penalty])
        b.add_linear(np.array([1.0]), np.array([slack_idx]), 0.0)  # slack >= 0
        if cfg.enforce_boundary:
            # road-boundary rows get their own, cheaper slack: a vehicle
            # knocked off the road must still be able to drive home through
            # the tracking cost rather than freeze against the rows
            bnd_idx = int(b.new_vars(1)[0])
            b.add_objective([bnd_idx], [cfg.boundary_penalty])
            b.add_linear(np.array([1.0]), np.array([bnd_idx]), 0.0)
    for vid in comp:
        works[vid].allocate(b)
    for vid in comp:
        w = works[vid]
        assemble_cost(b, w)
        input_soc_rows(b, w, cfg)
        jerk_rows(b, w, cfg)
        mean_state_rows(b, w, cfg, slack_idx=bnd_idx)
    for (i, j) in pairs:
        if i not in comp:
            continue
        for k in sorted(ks_map[(i, j)]):
            collision_soc_row(b, works[i], works[j], k, alphas[(i, j, k)], cfg,
                              slack_idx=slack_idx)
    return b, (slack_idx, bnd_idx)


def _chi_sq_at(w: _Work, policy: HorizonPolicy, AH: np.ndarray, KL: np.ndarray,
               alpha: np.ndarray, k: int) -> float:
    """||chi||^2 of one vehicle's collision stack evaluated at a solution;
    AH = A + B H and KL = K + B L are hoisted per vehicle."""
    rowx, rowy = k * NX, k * NX + 1
    total = 0.0
    if float(np.trace(w.sigma0)) > 1e-14:
        v = w.sig0_sqrt @ (alpha[0] * AH[rowx] + alpha[1] * AH[rowy])
        total += float(v @ v)
    vec = alpha[0] * KL[rowx] + alpha[1] * KL[rowy]
    for j in range(min(k, w.M) + 1):
        vj = w.sigz_sqrt[j] @ vec[j * w.nz:(j + 1) * w.nz]
        total += float(vj @ vj)
    v3 = w.err_sqrt[k][:, :2] @ alpha
    return total + float(v3 @ v3)


def _verify_dropped(works, comp_pairs, ks_map, alphas, cfg, policies,
                    slack: float):
    """Collision rows gated out of the program, re-checked on the solution;
    returns the violated (i, j, k) triples."""
    cache = {}

    def mats(vid):
        if vid not in cache:
            w = works[vid]
            blocks = w.vin.blocks
            pol = policies[vid]
            Hm = w.H_fix if w.fixed_gain is not None else pol.H_mat
            Lm = w.L_fix if w.fixed_gain is not None else pol.L_full(w.nz)
            cache[vid] = (blocks.Amat + blocks.Bmat @ Hm,
                          blocks.Kmat + blocks.Bmat @ Lm,
                          w.mean_const + blocks.Bmat @ pol.Ubar)
        return cache[vid]

    viol = []
    for (i, j) in comp_pairs:
        included = set(ks_map[(i, j)])
        if len(included) == cfg.M:
            continue
        AH_i, KL_i, mean_i = mats(i)
        AH_j, KL_j, mean_j = mats(j)
        for k in range(1, cfg.M + 1):
            if k in included:
                continue
            alpha = alphas[(i, j, k)]
            sep = float(alpha @ (mean_i[k * NX:k * NX + 2] - mean_j[k * NX:k * NX + 2]))
            chi = math.sqrt(_chi_sq_at(works[i], policies[i], AH_i, KL_i, alpha, k)
                            + _chi_sq_at(works[j], policies[j], AH_j, KL_j, alpha, k))
            if sep - cfg.d_min - cfg.coll_mult * chi < -slack - 1e-6:
                viol.append((i, j, k))
    return viol


def make_plan_input(vid: int, belief: Belief, reference: np.ndarray,
                    nominal_u: np.ndarray, noise, sigma_tilde_prior: np.ndarray,
                    cfg: PlannerConfig, updated: bool = False,
                    rotate_process_noise: bool = True) -> VehiclePlanInput:
    """Glue: roll the nominal out of the belief mean with the given control
    sequence, linearize along it, precompute the filter schedule (with the
    process noise rotated to the nominal headings) and build the blocks."""
    from .dynamics import f_step, linearize_arr, rotate_noise
    from .estimation import precompute_schedule
    from .horizon import build_blocks

    M = cfg.M
    nominal_u = np.asarray(nominal_u, float).reshape(M, NU)
    nominal_x = np.empty((M + 1, NX))
    nominal_x[0] = belief.mean
    for k in range(M):
        nominal_x[k + 1] = f_step(nominal_x[k], nominal_u[k], cfg.tau, cfg.wheelbase)
    dyns = [linearize_arr(nominal_x[k], nominal_u[k], cfg.tau, cfg.wheelbase)
            for k in range(M)]
    g_mats = ([rotate_noise(noise.G, float(nominal_x[k, 2])) for k in range(M)]
              if rotate_process_noise else None)
    sched = precompute_schedule(dyns, noise, sigma_tilde_prior, M, g_mats=g_mats)
    blocks = build_blocks(dyns, sched)
    return VehiclePlanInput(id=vid, belief=belief, blocks=blocks, schedule=sched,
                            reference=reference, nominal_x=nominal_x,
                            nominal_u=nominal_u, updated=updated, dyns=dyns)


def _plan_core(vehicles: list[VehiclePlanInput], cfg: PlannerConfig,
               prev_alphas: Optional[dict] = None,
               fixed_gain: Optional[np.ndarray] = None,
               settings: Optional[SolveSettings] = None,
               dump_path=None) -> PlanResult:
    if not vehicles:
        return PlanResult(policies={}, means={}, covs={}, pos_covs={},
                          statuses={}, objective=0.0, alphas={})
    settings = settings or SolveSettings(feas_tol=cfg.feas_tol, max_iter=cfg.max_iter)
    vehicles = sorted(vehicles, key=lambda v: v.id)
    works = {v.id: _Work(v, cfg, fixed_gain=fixed_gain) for v in vehicles}
    ids = [v.id for v in vehicles]
    byid = {v.id: v for v in vehicles}

    pairs = []
    dists = {}
    for a in range(len(ids)):
        for bidx in range(a + 1, len(ids)):
            vi, vj = byid[ids[a]], byid[ids[bidx]]
            D = float(np.linalg.norm(vi.belief.mean[:2] - vj.belief.mean[:2]))
            if D < cfg.pair_radius:
                pairs.append((vi.id, vj.id))
                dists[(vi.id, vj.id)] = D
    alphas = {}
    for (i, j) in pairs:
        for k in range(1, cfg.M + 1):
            alphas[(i, j, k)] = _pair_alpha(byid[i], byid[j], k, prev_alphas)

    policies, statuses = {}, {}
    objective = 0.0
    max_slack = 0.0
    for ci, comp in enumerate(_components(ids, pairs)):
        comp_pairs = [p for p in pairs if p[0] in comp]
        ks_map = {pr: _gated_ks(dists[pr], cfg) for pr in comp_pairs}
        status, sol, const = STATUS_OPTIMAL, None, 0.0
        for round_ in range(3):
            # the shared collision slack rides along in every program; a
            # strictly feasible instance keeps it at zero (linear penalty),
            # so one solve covers both the nominal and the softened case
            b, (slack_idx, bnd_idx) = _assemble_component(
                works, comp, comp_pairs, ks_map, alphas, cfg, soften=True)
            prog = b.build()
            if dump_path is not None:
                conic.dump_program(prog, f"{dump_path}_c{ci}.txt")
            sol = conic.solve(prog, settings, check=False)
            const = b.cost_constant
            slack_val = float(sol.x[slack_idx]) if (slack_idx is not None and sol.x.size) else 0.0
            bnd_val = float(sol.x[bnd_idx]) if (bnd_idx is not None and sol.x.size) else 0.0
            if not _usable(sol, cfg):
                status = STATUS_BRAKING
                break
            status = STATUS_SOFTENED if slack_val > 1e-6 else STATUS_OPTIMAL
            # report the true coordination cost, net of penalty bookkeeping
            const -= cfg.slack_penalty * slack_val + cfg.boundary_penalty * bnd_val
            cand = {vid: works[vid].policy_from_solution(sol.x) for vid in comp}
            missing = _verify_dropped(works, comp_pairs, ks_map, alphas, cfg,
                                      cand, slack_val)
            if not missing:
                max_slack = max(max_slack, slack_val)
                break
            for (i, j, k) in missing:
                ks_map[(i, j)].append(k)
        if status == STATUS_BRAKING:
            for vid in comp:
                policies[vid] = _braking_policy(byid[vid], cfg)
                statuses[vid] = STATUS_BRAKING
        else:
            for vid in comp:
                policies[vid] = works[vid].policy_from_solution(sol.x)
                statuses[vid] = status
            objective += sol.objective_value + const

    means, covs, pos_covs = {}, {}, {}
    for vid in ids:
        vin, w = byid[vid], works[vid]
        pol = policies[vid]
        mean = predicted_mean(vin.blocks, vin.belief.mean, pol.Ubar)
        if w.fixed_gain is not None:
            KL = vin.blocks.Kmat + vin.blocks.Bmat @ w.L_fix
            AH = vin.blocks.Amat + vin.blocks.Bmat @ w.H_fix
            cov = KL @ vin.blocks.SigmaZ @ KL.T + AH @ w.sigma0 @ AH.T
            cov = 0.5 * (cov + cov.T)
        else:
            cov = predicted_cov(vin.blocks, pol, w.sigma0, updated=False)
        means[vid] = mean.reshape(-1, NX)
        covs[vid] = cov
        P = np.empty((cfg.M + 1, 2, 2))
        for k in range(cfg.M + 1):
            P[k] = cov[k * NX:k * NX + 2, k * NX:k * NX + 2] \
                + vin.schedule.post_err_covs[k][:2, :2]
        pos_covs[vid] = P
    return PlanResult(policies=policies, means=means, covs=covs, pos_covs=pos_covs,
                      statuses=statuses, objective=objective, alphas=alphas,
                      slack=max_slack)


def plan(vehicles: list[VehiclePlanInput], cfg: PlannerConfig,
         prev_alphas: Optional[dict] = None,
         settings: Optional[SolveSettings] = None,
         dump_path=None) -> PlanResult:
    """Solve the joint robust coordination problem for one iteration."""
    return _plan_core(vehicles, cfg, prev_alphas=prev_alphas, fixed_gain=None,
                      settings=settings, dump_path=dump_path)


def plan_smpc_baseline(vehicles: list[VehiclePlanInput], cfg: PlannerConfig,
                       fixed_gain: np.ndarray,
                       prev_alphas: Optional[dict] = None,
                       settings: Optional[SolveSettings] = None) -> PlanResult:
    """Fixed-feedback-gain stochastic MPC baseline: the same program with
    (H, L) replaced by the gain-induced constant blocks; only Ubar is
    optimized.  Requires per-step dynamics on each input."""
    return _plan_core(vehicles, cfg, prev_alphas=prev_alphas,
                      fixed_gain=np.asarray(fixed_gain, float), settings=settings)
