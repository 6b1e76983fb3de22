import numpy as np
import pytest

from conftest import zero_channels
from riscf.asym_ao import (AsymAoOptions, AsymExpectations, algorithm1,
                           asym_rates, compute_expectations, psm_gradient,
                           psm_objective, psm_weight_matrices, solve_all_aps,
                           update_A_asym, update_theta_asym, update_V_asym,
                           update_W_asym)
from riscf.config import SystemConfig
from riscf.detection import (block_diag_w, identity_state, mc_moments,
                             mse_from_moments, rates_from_moments)
from riscf.freeprob import CauchySolver, SolverConfig
from riscf.scenario import make_scenario
from riscf.wmmse_mc import update_A_from_moments, update_V


@pytest.fixture(scope="module")
def setup(small_cfg, small_csi):
    state = identity_state(small_cfg)
    solvers = [CauchySolver(small_csi, l) for l in range(small_cfg.L)]
    sols = solve_all_aps(solvers, state.W, state.theta, -small_cfg.sigma2)
    exp = compute_expectations(sols, small_cfg)
    return state, solvers, sols, exp


def test_expectations_zero_channels(small_cfg, small_csi):
    csi = zero_channels(small_csi)
    state = identity_state(small_cfg)
    solvers = [CauchySolver(csi, l) for l in range(small_cfg.L)]
    sols = solve_all_aps(solvers, state.W, state.theta, -small_cfg.sigma2)
    exp = compute_expectations(sols, small_cfg)
    assert np.abs(exp.psi).max() <= 1e-10
    assert np.abs(exp.q_tilde).max() <= 1e-10


def test_expectations_single_ap_diag(small_csi):
    cfg = SystemConfig(L=1, N=2, K=1, R=4, T=2, L_k=(8,), seed=3)
    csi = make_scenario(cfg)
    state = identity_state(cfg)
    sols = solve_all_aps([CauchySolver(csi, 0)], state.W, state.theta, -cfg.sigma2)
    exp = compute_expectations(sols, cfg)
    for n in range(cfg.N):
        assert np.allclose(exp.q_tilde[n], exp.psi[n][:cfg.T, :])


def test_expectations_diag_identity(setup, small_cfg):
    state, solvers, sols, exp = setup
    T = small_cfg.T
    for n in range(small_cfg.N):
        for l in range(small_cfg.L):
            blk = exp.q_tilde[n][l * T:(l + 1) * T, l * T:(l + 1) * T]
            assert np.allclose(blk, exp.psi[n][l * T:(l + 1) * T, :])


def test_psi_matches_mc(setup, small_cfg, small_csi):
    # Psi blocks against E(Phi_nn) W_n sampled with 1e4 draws
    state, solvers, sols, exp = setup
    mom = mc_moments(small_csi, state.W, state.theta, 10000,
                     np.random.default_rng(41))
    for n in range(small_cfg.N):
        want = mom.phi_nn[n] @ state.W[n]
        got = exp.psi[n]
        assert np.linalg.norm(got - want) / np.linalg.norm(want) <= 0.02


def test_q_tilde_matches_mc(setup, small_cfg, small_csi):
    state, solvers, sols, exp = setup
    mom = mc_moments(small_csi, state.W, state.theta, 10000,
                     np.random.default_rng(43))
    for n in range(small_cfg.N):
        err = np.linalg.norm(exp.q_tilde[n] - mom.q[n]) / np.linalg.norm(mom.q[n])
        assert err <= 0.02


def test_update_A_identity_q(setup, small_cfg):
    state, solvers, sols, exp = setup
    LT = small_cfg.L * small_cfg.T
    fake = AsymExpectations(psi=exp.psi,
                            q_tilde=np.tile(np.eye(LT), (small_cfg.N, 1, 1)),
                            r_bar=exp.r_bar, b_tilde=exp.b_tilde)
    A = update_A_asym(fake)
    assert np.allclose(A, exp.psi)


def test_update_A_perturbation_optimality(setup, small_cfg):
    state, solvers, sols, exp = setup
    A = update_A_asym(exp)

    def asym_sum_mse(Amat):
        total = 0.0
        for n in range(small_cfg.N):
            cross = exp.psi[n].conj().T @ Amat[n]
            E = (np.eye(small_cfg.T) - cross - cross.conj().T
                 + Amat[n].conj().T @ exp.q_tilde[n] @ Amat[n])
            total += np.real(np.trace(E))
        return total

    base = asym_sum_mse(A)
    rng = np.random.default_rng(11)
    for _ in range(50):
        d = rng.standard_normal(A.shape) + 1j * rng.standard_normal(A.shape)
        assert asym_sum_mse(A + 1e-3 * d / np.abs(d).max()) >= base - 1e-12


def test_asym_mse_matches_mc(setup, small_cfg, small_csi):
    # Tr(E_n) at the respective optimal combiners, asymptotic vs sampled
    state, solvers, sols, exp = setup
    A = update_A_asym(exp)
    asym_tr = []
    for n in range(small_cfg.N):
        cross = exp.psi[n].conj().T @ A[n]
        E = (np.eye(small_cfg.T) - cross - cross.conj().T
             + A[n].conj().T @ exp.q_tilde[n] @ A[n])
        asym_tr.append(np.real(np.trace(E)))
    mom = mc_moments(small_csi, state.W, state.theta, 10000,
                     np.random.default_rng(47))
    st = state.copy()
    st.A = update_A_from_moments(mom, state.W, small_cfg.sigma2)
    mc_tr = [np.real(np.trace(E)) for E in mse_from_moments(st, mom)]
    for a, m in zip(asym_tr, mc_tr):
        assert abs(a - m) / abs(m) <= 0.03


def test_update_V_trivial_cases(setup, small_cfg):
    state, solvers, sols, exp = setup
    N, T, LT = small_cfg.N, small_cfg.T, small_cfg.L * small_cfg.T
    fake = AsymExpectations(psi=np.zeros((N, LT, T), dtype=complex),
                            q_tilde=np.tile(np.eye(LT), (N, 1, 1)),
                            r_bar=exp.r_bar, b_tilde=exp.b_tilde)
    assert np.allclose(update_V_asym(fake), np.eye(T))
    # psi^H q^-1 psi = I/2  ->  V = 2I
    psi = np.zeros((N, LT, T), dtype=complex)
    psi[:, :T, :] = np.eye(T) / np.sqrt(2.0)
    fake = AsymExpectations(psi=psi, q_tilde=np.tile(np.eye(LT), (N, 1, 1)),
                            r_bar=exp.r_bar, b_tilde=exp.b_tilde)
    assert np.allclose(update_V_asym(fake), 2.0 * np.eye(T))


def test_update_V_hermitian_pd(setup):
    state, solvers, sols, exp = setup
    V = update_V_asym(exp)
    for Vn in V:
        assert np.abs(Vn - Vn.conj().T).max() <= 1e-10 * np.abs(Vn).max()
        assert np.linalg.eigvalsh(Vn).min() > 0


def test_update_W_ridge_dominance(setup, small_cfg):
    # the precoder formula shrinks to zero as the multiplier grows
    state, solvers, sols, exp = setup
    A = update_A_asym(exp)
    V = update_V_asym(exp)
    mu = small_cfg.mu_arr
    Winv = np.linalg.inv(state.W[0])
    rows = slice(0, small_cfg.T)
    J = np.zeros((small_cfg.T, small_cfg.T), dtype=complex)
    for m in range(small_cfg.N):
        C = np.zeros((small_cfg.T, small_cfg.T), dtype=complex)
        for l in range(small_cfg.L):
            C += exp.r_bar[l][rows, m * small_cfg.T:(m + 1) * small_cfg.T] \
                @ A[m, l * small_cfg.T:(l + 1) * small_cfg.T]
        J += mu[m] * C @ V[m] @ C.conj().T
    J = Winv.conj().T @ J @ Winv
    rhs = Winv.conj().T @ exp.psi[0].conj().T @ A[0] @ V[0]
    norms = []
    for lam in (1e3, 1e6):
        Wn = mu[0] * np.linalg.solve(J + lam * np.eye(small_cfg.T), rhs)
        norms.append(np.linalg.norm(Wn))
    assert norms[1] < norms[0]
    assert norms[1] < 1e-5 * max(np.linalg.norm(state.W[0]), 1.0)


def test_update_W_kkt_and_slack(setup, small_cfg):
    state, solvers, sols, exp = setup
    A = update_A_asym(exp)
    V = update_V_asym(exp)
    W, lam = update_W_asym(exp, state.W, A, V, small_cfg.mu_arr, small_cfg.p)
    for n in range(small_cfg.N):
        used = np.real(np.trace(W[n] @ W[n].conj().T))
        assert lam[n] >= 0
        assert used <= small_cfg.p[n] * (1 + 1e-9)
        assert lam[n] * (small_cfg.p[n] - used) <= 1e-6 * small_cfg.p[n] * max(lam[n], 1.0)
    # a generous budget makes the unconstrained solution feasible
    W2, lam2 = update_W_asym(exp, state.W, A, V, small_cfg.mu_arr,
                             small_cfg.p * 1e9)
    assert np.all(lam2 == 0.0)


def test_lagrangian_cross_engine(setup, small_cfg, small_csi):
    # asymptotic Lagrangian objective vs its sampled counterpart at a
    # common trial precoder (multiplier terms dropped on both sides)
    state, solvers, sols, exp = setup
    A = update_A_asym(exp)
    V = update_V_asym(exp)
    mu = small_cfg.mu_arr
    T, N, L = small_cfg.T, small_cfg.N, small_cfg.L
    rng = np.random.default_rng(53)
    Wtrial = state.W + 0.05 * np.sqrt(small_cfg.p[0] / T) * (
        rng.standard_normal(state.W.shape) + 1j * rng.standard_normal(state.W.shape))

    Winv = [np.linalg.inv(state.W[n]) for n in range(N)]
    asym_val = 0.0
    for m in range(N):
        cross = np.trace(V[m] @ Wtrial[m].conj().T @ Winv[m].conj().T
                         @ exp.psi[m].conj().T @ A[m])
        asym_val += mu[m] * (np.real(np.trace(V[m])) - 2.0 * np.real(cross))
    for n in range(N):
        J = np.zeros((T, T), dtype=complex)
        for m in range(N):
            C = np.zeros((T, T), dtype=complex)
            for l in range(L):
                C += exp.r_bar[l][n * T:(n + 1) * T, m * T:(m + 1) * T] \
                    @ A[m, l * T:(l + 1) * T]
            J += mu[m] * C @ V[m] @ C.conj().T
        J = Winv[n].conj().T @ J @ Winv[n]
        asym_val += np.real(np.trace(Wtrial[n].conj().T @ J @ Wtrial[n]))

    mom = mc_moments(small_csi, state.W, state.theta, 10000,
                     np.random.default_rng(59))
    from riscf.wmmse_mc import IterationBatch
    batch = IterationBatch(small_csi, state.W, state.theta, 10000,
                           np.random.default_rng(59))
    j_w = batch.w_moment(A, V, mu)
    mc_val = 0.0
    for m in range(N):
        cross = np.trace(V[m] @ Wtrial[m].conj().T @ mom.phi_nn[m].conj().T @ A[m])
        mc_val += mu[m] * (np.real(np.trace(V[m])) - 2.0 * np.real(cross))
    for n in range(N):
        mc_val += np.real(np.trace(Wtrial[n].conj().T @ j_w[n] @ Wtrial[n]))
    assert abs(asym_val - mc_val) / abs(mc_val) <= 0.03


# -- phase-shift updates -------------------------------------------------------

def test_theta_zero_gradient_fixed_point(setup, small_cfg, small_csi):
    state, solvers, sols, exp = setup
    st = state.copy()
    st.A = np.zeros_like(st.A)
    g = psm_gradient(solvers, sols, exp, st.A, st.V, small_cfg.mu_arr, small_cfg)
    assert np.abs(g).max() == 0.0
    theta, _, _, _, _ = update_theta_asym(solvers, sols, st, small_cfg,
                                          AsymAoOptions(psm_steps=2))
    assert np.array_equal(theta, st.theta)


def test_asym_gradient_matches_finite_differences():
    # 4-element instance; finite differences re-solve the fixed point
    cfg = SystemConfig(L=2, N=2, K=1, R=3, T=2, L_k=(4,), seed=5)
    csi = make_scenario(cfg)
    state = identity_state(cfg)
    z = -cfg.sigma2
    scfg = SolverConfig(tol=1e-13)
    solvers = [CauchySolver(csi, l, scfg) for l in range(cfg.L)]
    rng = np.random.default_rng(7)
    theta = np.exp(1j * rng.uniform(0, 2 * np.pi, cfg.L_R))
    sols = solve_all_aps(solvers, state.W, theta, z)
    exp = compute_expectations(sols, cfg)
    A = update_A_asym(exp)
    V = update_V_asym(exp)
    mu = cfg.mu_arr
    g = psm_gradient(solvers, sols, exp, A, V, mu, cfg)

    def f(th):
        s = solve_all_aps(solvers, state.W, th, z, warm=sols)
        return psm_objective(compute_expectations(s, cfg), A, V, mu)

    h = 1e-6
    fd = np.zeros(cfg.L_R, dtype=complex)
    for j in range(cfg.L_R):
        for d, w in ((h, 1), (-h, -1), (1j * h, 1j), (-1j * h, -1j)):
            th = theta.copy()
            th[j] = th[j] + d
            fd[j] += w * f(th)
    fd = fd / (4 * h) * 2.0
    assert np.abs(g - fd).max() / np.abs(fd).max() <= 1e-4


def test_theta_descent_nonincreasing(setup, small_cfg):
    state, solvers, sols, exp = setup
    st = state.copy()
    st.A = update_A_asym(exp)
    st.V = update_V_asym(exp)
    f0 = psm_objective(exp, st.A, st.V, small_cfg.mu_arr)
    theta, sols2, exp2, f1, stalled = update_theta_asym(
        solvers, sols, st, small_cfg, AsymAoOptions(psm_steps=5))
    assert f1 <= f0 + 1e-12
    assert np.abs(np.abs(theta) - 1.0).max() <= 1e-12


# -- the outer loop -------------------------------------------------------------

def test_algorithm1_single_iteration(small_cfg, small_csi):
    cfg = small_cfg.replace(ao_iters=1)
    csi = make_scenario(cfg)
    state, trace = algorithm1(csi, opts=AsymAoOptions(psm_steps=2))
    assert len(trace.sum_rate) == 1


def test_algorithm1_monotone_and_cross_validates(small_cfg, small_csi):
    cfg = small_cfg.replace(ao_iters=8)
    csi = make_scenario(cfg)
    opts = AsymAoOptions(psm_steps=5, record_states=True)
    state, trace = algorithm1(csi, opts=opts)
    diffs = np.diff(trace.sum_rate)
    assert np.all(diffs >= -1e-6 * np.abs(trace.sum_rate[0]))
    # sampled rate at every visited state within 5% of the reported trace
    for i, st in enumerate(trace.states):
        mom = mc_moments(csi, st.W, st.theta, 10000, np.random.default_rng(61 + i))
        mc_rate = float(cfg.mu_arr @ rates_from_moments(st, mom))
        assert abs(trace.sum_rate[i] - mc_rate) / mc_rate <= 0.05
    for diag in trace.diagnostics:
        assert diag["theta_dev"] <= 1e-12
        assert diag["fp_residual"] <= 1e-10
        for n in range(cfg.N):
            assert diag["power_used"][n] <= cfg.p[n] * (1 + 1e-9)
            assert diag["v_min_eig"][n] > 0


def test_algorithm1_converges_fast(small_cfg):
    cfg = small_cfg.replace(ao_iters=15)
    csi = make_scenario(cfg)
    state, trace = algorithm1(csi)
    r5, r15 = trace.sum_rate[4], trace.sum_rate[14]
    assert abs(r15 - r5) / r15 <= 0.01
