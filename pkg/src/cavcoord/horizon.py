"""Stacked horizon quantities for one vehicle.

Unrolls the estimated-state recursion
``xhat^{k+1} = A^k xhat^k + B^k u^k + r^k + K^{k+1} ztil^{(k+1)-}``
into block matrices over the whole horizon, and holds the truncated
affine disturbance-feedback policy ``u^k = ubar^k + H^k (xhat^t - mu^t)
+ L^k ztil^{k-}`` (no innovation term at the first step, innovation
history truncated to length one).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import NU, NX, ControlInput, LinearizedDynamics
from .estimation import FilterSchedule


@dataclass
class HorizonBlocks:
    M: int
    nz: int
    Amat: np.ndarray   # (M+1)nx x nx
    Bmat: np.ndarray   # (M+1)nx x M nu
    Rvec: np.ndarray   # (M+1)nx
    Kmat: np.ndarray   # (M+1)nx x (M+1)nz
    sigma_z_blocks: list[np.ndarray]  # M+1 innovation covariances

    @property
    def SigmaZ(self) -> np.ndarray:
        n = (self.M + 1) * self.nz
        out = np.zeros((n, n))
        for k, S in enumerate(self.sigma_z_blocks):
            out[k * self.nz:(k + 1) * self.nz, k * self.nz:(k + 1) * self.nz] = S
        return out

    def E_x(self, k: int) -> np.ndarray:
        E = np.zeros((NX, (self.M + 1) * NX))
        E[:, k * NX:(k + 1) * NX] = np.eye(NX)
        return E

    def E_u(self, k: int) -> np.ndarray:
        E = np.zeros((NU, self.M * NU))
        E[:, k * NU:(k + 1) * NU] = np.eye(NU)
        return E

    def E_kappa(self, k: int) -> np.ndarray:
        E = np.zeros((NU, (self.M - 1) * NU))
        E[:, k * NU:(k + 1) * NU] = np.eye(NU)
        return E

    @property
    def D_acc(self) -> np.ndarray:
        """(M-1)nu x M nu first-difference map u^{k+1} - u^k."""
        D = np.zeros(((self.M - 1) * NU, self.M * NU))
        for k in range(self.M - 1):
            D[k * NU:(k + 1) * NU, k * NU:(k + 1) * NU] = -np.eye(NU)
            D[k * NU:(k + 1) * NU, (k + 1) * NU:(k + 2) * NU] = np.eye(NU)
        return D


@dataclass
class HorizonPolicy:
    """Feedforward Ubar plus feedback H on the initial-estimate deviation
    and L on the one-step innovation history (no block at the first step)."""

    Ubar: np.ndarray  # (M nu,)
    H: np.ndarray     # (M, nu, nx)
    L: np.ndarray     # (M-1, nu, nz), block k applies to ztil^{(k+1)-}

    @property
    def M(self) -> int:
        return self.H.shape[0]

    @property
    def H_mat(self) -> np.ndarray:
        return self.H.reshape(self.M * NU, NX)

    def L_full(self, nz: int) -> np.ndarray:
        """Dense (M nu) x ((M+1) nz) feedback with blocks on the diagonal
        positions (k, k), k = 1..M-1."""
        M = self.M
        out = np.zeros((M * NU, (M + 1) * nz))
        for k in range(1, M):
            out[k * NU:(k + 1) * NU, k * nz:(k + 1) * nz] = self.L[k - 1]
        return out


def build_blocks(dyns: list[LinearizedDynamics], sched: FilterSchedule) -> HorizonBlocks:
    """Literal unrolling of the recursion into stacked block matrices."""
    M = len(dyns)
    if len(sched) != M + 1:
        raise ValueError(f"schedule must have M+1 = {M + 1} entries, got {len(sched)}")
    nz = sched.gains[0].shape[1]
    Amat = np.zeros(((M + 1) * NX, NX))
    Bmat = np.zeros(((M + 1) * NX, M * NU))
    Rvec = np.zeros((M + 1) * NX)
    Kmat = np.zeros(((M + 1) * NX, (M + 1) * nz))
    Amat[:NX] = np.eye(NX)
    for k in range(1, M + 1):
        Ak = dyns[k - 1].A
        rows, prev = slice(k * NX, (k + 1) * NX), slice((k - 1) * NX, k * NX)
        Amat[rows] = Ak @ Amat[prev]
        Bmat[rows] = Ak @ Bmat[prev]
        Bmat[rows, (k - 1) * NU:k * NU] = dyns[k - 1].B
        Rvec[rows] = Ak @ Rvec[prev] + dyns[k - 1].r
        Kmat[rows] = Ak @ Kmat[prev]
        Kmat[rows, k * nz:(k + 1) * nz] = sched.gains[k]
    return HorizonBlocks(M=M, nz=nz, Amat=Amat, Bmat=Bmat, Rvec=Rvec, Kmat=Kmat,
                         sigma_z_blocks=list(sched.innov_covs))


def policy_to_control(p: HorizonPolicy, xhat_t: np.ndarray, mu_t: np.ndarray,
                      ztil: np.ndarray) -> list[ControlInput]:
    """Evaluate the policy at realized information; first input uses no
    innovation term."""
    dev = np.asarray(xhat_t, float) - np.asarray(mu_t, float)
    M = p.M
    nz = (len(ztil) // (M + 1)) if len(ztil) else 0
    out = []
    for k in range(M):
        u = p.Ubar[k * NU:(k + 1) * NU] + p.H[k] @ dev
        if 1 <= k <= M - 1 and nz:
            u = u + p.L[k - 1] @ ztil[k * nz:(k + 1) * nz]
        out.append(ControlInput(float(u[0]), float(u[1])))
    return out


def stacked_controls(p: HorizonPolicy, xhat_t: np.ndarray, mu_t: np.ndarray,
                     ztil: np.ndarray, nz: int) -> np.ndarray:
    """U = Ubar + H (xhat - mu) + L Ztil as one block expression."""
    return p.Ubar + p.H_mat @ (np.asarray(xhat_t, float) - np.asarray(mu_t, float)) \
        + p.L_full(nz) @ np.asarray(ztil, float)


def predicted_mean(blocks: HorizonBlocks, mu_t: np.ndarray, Ubar: np.ndarray) -> np.ndarray:
    """Stacked mean of the estimated-state process (no-update branch is the
    same expression once the delivered estimate has been folded into mu)."""
    return blocks.Amat @ np.asarray(mu_t, float) + blocks.Bmat @ np.asarray(Ubar, float) + blocks.Rvec


def predicted_cov(blocks: HorizonBlocks, policy: HorizonPolicy,
                  sigma0: np.ndarray, updated: bool) -> np.ndarray:
    """Covariance of the stacked estimated-state process; the initial-
    covariance feedback term carries the (1 - V S) update factor."""
    KL = blocks.Kmat + blocks.Bmat @ policy.L_full(blocks.nz)
    out = KL @ blocks.SigmaZ @ KL.T
    if not updated:
        AH = blocks.Amat + blocks.Bmat @ policy.H_mat
        out = out + AH @ np.asarray(sigma0, float) @ AH.T
    return 0.5 * (out + out.T)


def control_cov(blocks: HorizonBlocks, policy: HorizonPolicy,
                sigma0: np.ndarray, updated: bool) -> np.ndarray:
    L = policy.L_full(blocks.nz)
    out = L @ blocks.SigmaZ @ L.T
    if not updated:
        out = out + policy.H_mat @ np.asarray(sigma0, float) @ policy.H_mat.T
    return 0.5 * (out + out.T)
