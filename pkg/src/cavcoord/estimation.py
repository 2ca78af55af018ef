"""Per-vehicle Kalman filtering along linearized dynamics.

The error-covariance schedule is control-independent, so gains, prior and
posterior error covariances and innovation covariances can be precomputed
for a whole horizon from the linearization alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .dynamics import NX, LinearizedDynamics, NoiseSpec
from .linalg import sym


class SingularInnovation(Exception):
    """Innovation covariance not invertible (numerical_error signal)."""


@dataclass
class Belief:
    """Gaussian state description: mean plus covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = sym(np.asarray(self.cov, dtype=float))

    def copy(self) -> "Belief":
        return Belief(self.mean.copy(), self.cov.copy())


@dataclass
class FilterSchedule:
    """Gains and covariances over one horizon (M+1 entries each)."""

    gains: list[np.ndarray]          # K^k, nx x nz
    prior_err_covs: list[np.ndarray]  # Sigma-tilde^{k-}
    post_err_covs: list[np.ndarray]   # Sigma-tilde^{k}
    innov_covs: list[np.ndarray]      # C Sigma-tilde^{k-} C' + D D'

    def __len__(self) -> int:
        return len(self.gains)


def _gain(prior_cov: np.ndarray, noise: NoiseSpec) -> tuple[np.ndarray, np.ndarray]:
    C, D = noise.C, noise.D
    S = sym(C @ prior_cov @ C.T + D @ D.T)
    # reject a numerically singular innovation covariance
    try:
        S_inv = np.linalg.inv(S)
    except np.linalg.LinAlgError as e:
        raise SingularInnovation(str(e)) from e
    if not np.all(np.isfinite(S_inv)) or np.linalg.cond(S) > 1e14:
        raise SingularInnovation("innovation covariance is singular")
    return prior_cov @ C.T @ S_inv, S


def _joseph(prior_cov: np.ndarray, K: np.ndarray, noise: NoiseSpec) -> np.ndarray:
    I_KC = np.eye(NX) - K @ noise.C
    return sym(I_KC @ prior_cov @ I_KC.T + K @ (noise.D @ noise.D.T) @ K.T)


def filter_update(prior: Belief, z: np.ndarray, dyn: LinearizedDynamics,
                  u: np.ndarray, noise: NoiseSpec,
                  G: Optional[np.ndarray] = None) -> Belief:
    """One predict-correct step from the posterior belief at k to k+1.

    ``prior`` is the posterior at step k; the prediction uses the linearized
    dynamics and process noise G (defaults to ``noise.G``), the correction
    uses measurement ``z`` taken at k+1.
    """
    G = noise.G if G is None else G
    A, B, r = dyn.A, dyn.B, dyn.r
    mean_pred = A @ prior.mean + B @ np.asarray(u, float) + r
    cov_pred = sym(A @ prior.cov @ A.T + G @ G.T)
    K, _ = _gain(cov_pred, noise)
    innov = np.asarray(z, float) - noise.C @ mean_pred
    mean = mean_pred + K @ innov
    cov = _joseph(cov_pred, K, noise)
    return Belief(mean, cov)


def precompute_schedule(dyns: Sequence[LinearizedDynamics], noise: NoiseSpec,
                        init_prior_err_cov: np.ndarray, M: int,
                        g_mats: Optional[Sequence[np.ndarray]] = None) -> FilterSchedule:
    """Error-covariance recursion over the horizon, control independent.

    ``dyns`` supplies A^k for k = 0..M-1; ``g_mats`` optionally supplies the
    per-step (heading-rotated) process noise matrices, defaulting to noise.G.
    Returns M+1 entries per list, for steps k = 0..M.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    if len(dyns) < M:
        raise ValueError(f"need {M} linearized steps, got {len(dyns)}")
    if g_mats is not None and len(g_mats) < M:
        raise ValueError("g_mats length mismatch")
    gains, priors, posts, innovs = [], [], [], []
    prior = sym(np.asarray(init_prior_err_cov, dtype=float))
    for k in range(M + 1):
        K, S = _gain(prior, noise)
        post = _joseph(prior, K, noise)
        gains.append(K)
        priors.append(prior)
        posts.append(post)
        innovs.append(S)
        if k < M:
            A = dyns[k].A
            G = noise.G if g_mats is None else np.asarray(g_mats[k], float)
            prior = sym(A @ post @ A.T + G @ G.T)
    return FilterSchedule(gains=gains, prior_err_covs=priors,
                          post_err_covs=posts, innov_covs=innovs)
