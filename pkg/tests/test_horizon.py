import math

import numpy as np
import pytest

from cavcoord.dynamics import (ControlInput, LinearizedDynamics, NoiseSpec,
                               VehicleState, linearize)
from cavcoord.estimation import FilterSchedule, precompute_schedule
from cavcoord.horizon import (HorizonPolicy, build_blocks, control_cov,
                              policy_to_control, predicted_cov,
                              predicted_mean, stacked_controls)

TAU = 0.1
LW = 2.7
NZ = 4


def random_dyns(M, rng):
    out = []
    for _ in range(M):
        s = VehicleState(rng.uniform(-5, 5), rng.uniform(-5, 5),
                         rng.uniform(-1.0, 1.0), rng.uniform(2, 18))
        u = ControlInput(rng.uniform(-3, 3), rng.uniform(-0.5, 0.5))
        out.append(linearize(s, u, TAU, LW))
    return out


def table_sched(dyns, M):
    noise = NoiseSpec(G=np.diag([0.03, 0.02, math.pi / 180, 0.1]), C=np.eye(4),
                      D=np.diag([0.4, 0.2, math.pi / 150, 0.1]))
    return precompute_schedule(dyns, noise, np.diag([0.02, 0.01, math.pi / 360, 0.02]), M)


def random_policy(M, rng, scale=0.1):
    return HorizonPolicy(Ubar=rng.normal(scale=1.0, size=M * 2),
                         H=rng.normal(scale=scale, size=(M, 2, 4)),
                         L=rng.normal(scale=scale, size=(M - 1, 2, NZ)))


def rollout_recursion(dyns, sched, xhat0, U, Ztil):
    """Step-by-step oracle for the stacked recursion."""
    M = len(dyns)
    xs = [np.asarray(xhat0, float)]
    for k in range(M):
        x = dyns[k].A @ xs[-1] + dyns[k].B @ U[2 * k:2 * k + 2] + dyns[k].r \
            + sched.gains[k + 1] @ Ztil[(k + 1) * NZ:(k + 2) * NZ]
        xs.append(x)
    return np.concatenate(xs)


def test_identity_propagation_m1():
    dyns = [LinearizedDynamics(A=np.eye(4), B=np.zeros((4, 2)), r=np.zeros(4))]
    sched = FilterSchedule(gains=[np.zeros((4, NZ))] * 2,
                           prior_err_covs=[np.zeros((4, 4))] * 2,
                           post_err_covs=[np.zeros((4, 4))] * 2,
                           innov_covs=[np.zeros((NZ, NZ))] * 2)
    blocks = build_blocks(dyns, sched)
    assert np.allclose(blocks.Amat, np.vstack([np.eye(4), np.eye(4)]))
    assert np.allclose(blocks.Bmat, 0)
    assert np.allclose(blocks.Rvec, 0)


def test_blocks_match_recursion_oracle():
    rng = np.random.default_rng(3)
    M = 3
    dyns = random_dyns(M, rng)
    sched = table_sched(dyns, M)
    blocks = build_blocks(dyns, sched)
    for _ in range(50):
        xhat0 = rng.normal(size=4)
        U = rng.normal(size=2 * M)
        Ztil = rng.normal(size=(M + 1) * NZ)
        direct = rollout_recursion(dyns, sched, xhat0, U, Ztil)
        stacked = blocks.Amat @ xhat0 + blocks.Bmat @ U + blocks.Rvec + blocks.Kmat @ Ztil
        assert np.max(np.abs(direct - stacked)) < 1e-12


def test_kmat_first_column_block_zero():
    rng = np.random.default_rng(4)
    M = 4
    dyns = random_dyns(M, rng)
    blocks = build_blocks(dyns, table_sched(dyns, M))
    assert np.allclose(blocks.Kmat[:, :NZ], 0)
    assert np.allclose(blocks.Amat[:4], np.eye(4))
    assert np.allclose(blocks.Bmat[:4], 0)


def test_length_mismatch_rejected():
    rng = np.random.default_rng(5)
    dyns = random_dyns(3, rng)
    sched = table_sched(dyns, 3)
    sched.gains.pop()
    with pytest.raises(ValueError):
        build_blocks(dyns, sched)


def test_policy_nominal_conditions():
    rng = np.random.default_rng(6)
    M = 5
    p = random_policy(M, rng)
    mu = rng.normal(size=4)
    us = policy_to_control(p, mu, mu, np.zeros((M + 1) * NZ))
    for k, u in enumerate(us):
        assert np.allclose(u.as_array(), p.Ubar[2 * k:2 * k + 2])


def test_policy_feedforward_only():
    rng = np.random.default_rng(7)
    M = 4
    p = HorizonPolicy(Ubar=rng.normal(size=2 * M), H=np.zeros((M, 2, 4)),
                      L=np.zeros((M - 1, 2, NZ)))
    us = policy_to_control(p, rng.normal(size=4), rng.normal(size=4),
                           rng.normal(size=(M + 1) * NZ))
    for k, u in enumerate(us):
        assert np.allclose(u.as_array(), p.Ubar[2 * k:2 * k + 2])


def test_policy_matrix_vs_per_step():
    rng = np.random.default_rng(8)
    M = 6
    p = random_policy(M, rng)
    xh, mu = rng.normal(size=4), rng.normal(size=4)
    zt = rng.normal(size=(M + 1) * NZ)
    block_expr = stacked_controls(p, xh, mu, zt, NZ)
    per_step = np.concatenate([u.as_array() for u in policy_to_control(p, xh, mu, zt)])
    assert np.max(np.abs(block_expr - per_step)) < 1e-12
    # first input must not see the innovation
    zt2 = zt.copy()
    zt2[:NZ] = rng.normal(size=NZ)  # ztil^{t-} unused anywhere
    assert np.allclose(stacked_controls(p, xh, mu, zt2, NZ), block_expr)


def test_mean_propagation_no_update_branch():
    rng = np.random.default_rng(9)
    M = 5
    dyns = random_dyns(M, rng)
    blocks = build_blocks(dyns, table_sched(dyns, M))
    mu = rng.normal(size=4)
    Ubar = rng.normal(size=2 * M)
    mean = predicted_mean(blocks, mu, Ubar)
    direct = rollout_recursion(dyns, table_sched(dyns, M), mu, Ubar,
                               np.zeros((M + 1) * NZ))
    assert np.max(np.abs(mean - direct)) < 1e-12


def _mc_rollout(blocks, policy, mu, sigma0, n, rng):
    """Monte Carlo of the stacked process under the policy."""
    M, nz = blocks.M, blocks.nz
    xhat0 = mu + rng.standard_normal((n, 4)) @ np.linalg.cholesky(
        sigma0 + 1e-12 * np.eye(4)).T
    Zt = np.zeros((n, (M + 1) * nz))
    for k in range(M + 1):
        S = blocks.sigma_z_blocks[k]
        Zt[:, k * nz:(k + 1) * nz] = rng.standard_normal((n, nz)) @ np.linalg.cholesky(
            S + 1e-12 * np.eye(nz)).T
    dev = xhat0 - mu
    U = policy.Ubar + dev @ policy.H_mat.T + Zt @ policy.L_full(nz).T
    X = xhat0 @ blocks.Amat.T + U @ blocks.Bmat.T + blocks.Rvec + Zt @ blocks.Kmat.T
    return X, U


def test_covariance_propagation_monte_carlo():
    rng = np.random.default_rng(10)
    M = 5
    dyns = random_dyns(M, rng)
    blocks = build_blocks(dyns, table_sched(dyns, M))
    policy = random_policy(M, rng, scale=0.2)
    mu = np.array([0.0, 0.0, 0.1, 10.0])
    sigma0 = np.diag([0.1, 0.05, math.pi / 180, 0.02])
    X, U = _mc_rollout(blocks, policy, mu, sigma0, 10_000, rng)
    emp = np.cov(X.T)
    ana = predicted_cov(blocks, policy, sigma0, updated=False)
    assert np.linalg.norm(emp - ana) / np.linalg.norm(ana) < 0.10
    emp_u = np.cov(U.T)
    ana_u = control_cov(blocks, policy, sigma0, updated=False)
    assert np.linalg.norm(emp_u - ana_u) / np.linalg.norm(ana_u) < 0.10


def test_updated_flag_zeroes_initial_feedback_term():
    rng = np.random.default_rng(11)
    M = 4
    dyns = random_dyns(M, rng)
    blocks = build_blocks(dyns, table_sched(dyns, M))
    policy = random_policy(M, rng)
    sigma0 = np.diag([0.1, 0.05, 0.01, 0.02])
    full = predicted_cov(blocks, policy, sigma0, updated=False)
    upd = predicted_cov(blocks, policy, sigma0, updated=True)
    KL = blocks.Kmat + blocks.Bmat @ policy.L_full(blocks.nz)
    assert np.allclose(upd, 0.5 * ((KL @ blocks.SigmaZ @ KL.T) +
                                   (KL @ blocks.SigmaZ @ KL.T).T))
    assert np.trace(full) > np.trace(upd)
