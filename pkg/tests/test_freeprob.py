import numpy as np
import pytest

from conftest import zero_channels, zero_profiles
from riscf.channel import sample_channels, stacked_h, theta_hat
from riscf.config import SystemConfig
from riscf.detection import block_diag_w, identity_state
from riscf.freeprob import (CauchySolver, SolverConfig, cauchy_transform,
                            solve_fixed_point, spectral_range)
from riscf.scenario import make_scenario


def rand_theta(rng, n):
    return np.exp(1j * rng.uniform(0, 2 * np.pi, n))


def psd(rng, d):
    a = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
    return a @ a.conj().T


@pytest.fixture(scope="module")
def solved(small_cfg, small_csi):
    state = identity_state(small_cfg)
    Wh = block_diag_w(state.W)
    rng = np.random.default_rng(17)
    theta = rand_theta(rng, small_cfg.L_R)
    solver = CauchySolver(small_csi, 0, SolverConfig(tol=1e-12))
    sol = solver.solve(Wh, theta, -small_cfg.sigma2)
    return solver, sol, Wh, theta


def test_zero_statistics_resolvent(small_cfg, small_csi):
    csi = zero_channels(small_csi)
    state = identity_state(small_cfg)
    z = -small_cfg.sigma2
    sol = solve_fixed_point(csi, 0, block_diag_w(state.W), state.theta, z)
    assert np.allclose(sol.b_tilde, np.eye(small_cfg.T_t) / z)
    assert sol.residual <= 1e-10


def test_deterministic_limit_matches_direct_resolvent(small_cfg, small_csi, rng):
    csi = zero_profiles(small_csi)
    state = identity_state(small_cfg)
    z = -small_cfg.sigma2
    theta = rand_theta(rng, small_cfg.L_R)
    Wh = block_diag_w(state.W)
    from riscf.channel import mean_stacked
    Fbar, Gbar = mean_stacked(csi)
    for l in range(small_cfg.L):
        sol = solve_fixed_point(csi, l, Wh, theta, z)
        th = theta_hat(small_cfg, theta)
        Hbar = Gbar[l] @ (th[:, None] * Fbar[l])
        Bbar = Wh.conj().T @ Hbar.conj().T @ Hbar @ Wh
        direct = np.linalg.inv(z * np.eye(small_cfg.T_t) - Bbar)
        Xi = psd(rng, small_cfg.T_t)
        got = cauchy_transform(Xi, sol)
        want = np.trace(Xi @ direct) / small_cfg.T_t
        assert abs(got - want) / abs(want) <= 1e-8


def test_mc_resolvent_oracle(small_cfg, small_csi):
    # (1/Tt) Tr Bt vs the sampled resolvent trace, 1e4 draws
    state = identity_state(small_cfg)
    rng = np.random.default_rng(23)
    theta = rand_theta(rng, small_cfg.L_R)
    Wh = block_diag_w(state.W)
    z = -small_cfg.sigma2
    batch = sample_channels(small_csi, rng, 10000)
    H = stacked_h(small_cfg, batch, theta)
    for l in range(small_cfg.L):
        HW = H[:, l] @ Wh
        B = HW.conj().swapaxes(-2, -1) @ HW
        res = np.linalg.inv(z * np.eye(small_cfg.T_t) - B)
        mc = np.trace(res, axis1=-2, axis2=-1).mean() / small_cfg.T_t
        sol = solve_fixed_point(small_csi, l, Wh, theta, z)
        got = np.trace(sol.b_tilde) / small_cfg.T_t
        assert abs(got - mc) / abs(mc) <= 0.02


def test_cauchy_transform_trivial_and_linear(small_cfg, small_csi, rng, solved):
    solver, sol, Wh, theta = solved
    Tt = small_cfg.T_t
    assert cauchy_transform(np.zeros((Tt, Tt)), sol) == 0
    x1, x2 = psd(rng, Tt), psd(rng, Tt)
    a, b = 1.7, -0.4
    lhs = cauchy_transform(a * x1 + b * x2, sol)
    rhs = a * cauchy_transform(x1, sol) + b * cauchy_transform(x2, sol)
    assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), abs(rhs))
    csi0 = zero_channels(small_csi)
    z = -small_cfg.sigma2
    sol0 = solve_fixed_point(csi0, 0, Wh, np.ones(small_cfg.L_R), z)
    assert cauchy_transform(np.eye(Tt), sol0) == pytest.approx(1.0 / z)


def test_residual_decreases_under_damping(solved):
    solver, sol, Wh, theta = solved
    trace = sol.residual_trace
    # after a short burn-in the damped iteration contracts monotonically
    peak = int(np.argmax(trace[2:])) + 2
    assert peak < len(trace) // 2
    tail = trace[peak:]
    assert np.all(np.diff(tail) <= 1e-6 * tail[:-1])
    assert sol.residual <= 1e-10


def test_spectral_sanity(solved, small_cfg):
    solver, sol, Wh, theta = solved
    lo, hi = spectral_range(sol, small_cfg.sigma2)
    assert lo >= -1e-9
    assert hi < 1.0


def test_btilde_hermitian_negative_definite(solved):
    solver, sol, Wh, theta = solved
    B = sol.b_tilde
    assert np.abs(B - B.conj().T).max() <= 1e-10 * np.abs(B).max()
    assert np.linalg.eigvalsh(B).max() < 0


def test_proposition_block_formulas_match_joint_inverse(solved, small_cfg):
    # cascaded Schur-complement forms reproduce the jointly inverted blocks
    solver, sol, Wh, theta = solved
    th = sol.th_hat
    Gb = solver.Gbar * th[None, :]
    S2 = sol.gamma - (th.conj()[:, None] * solver.Gbar.conj().T) \
        @ np.linalg.solve(sol.gamma_tilde, Gb)
    Om = sol.upsilon_tilde - np.linalg.inv(S2)
    FW = solver.Fbar @ Wh
    Bt = np.linalg.inv(sol.upsilon - FW.conj().T @ np.linalg.solve(Om, FW))
    assert np.abs(Bt - sol.b_tilde).max() <= 1e-10 * np.abs(Bt).max()

    S4 = sol.upsilon_tilde - FW @ np.linalg.solve(sol.upsilon, FW.conj().T)
    G3 = np.linalg.inv(sol.gamma_tilde - Gb @ np.linalg.solve(
        sol.gamma - np.linalg.inv(S4), Gb.conj().T))
    assert np.abs(G3 - sol.g_x3).max() <= 1e-10 * np.abs(G3).max()

    G2full = np.linalg.inv(sol.gamma
                           - (th.conj()[:, None] * solver.Gbar.conj().T)
                           @ np.linalg.solve(sol.gamma_tilde, Gb)
                           - np.linalg.inv(S4))
    for k in range(small_cfg.K):
        sl = slice(solver.off[k], solver.off[k + 1])
        assert np.abs(G2full[sl, sl] - sol.g_x2k[k]).max() \
            <= 1e-10 * np.abs(G2full).max()


def test_warm_start_converges_fast(solved, small_cfg, small_csi):
    solver, sol, Wh, theta = solved
    again = solver.solve(Wh, theta, -small_cfg.sigma2, warm=sol)
    assert again.iters <= 5
    # a slightly moved point still reconverges quickly
    theta2 = theta * np.exp(1j * 0.01)
    moved = solver.solve(Wh, theta2, -small_cfg.sigma2, warm=sol)
    assert moved.iters < sol.iters


def test_complex_shifted_z_close_to_real_axis(solved, small_cfg):
    solver, sol, Wh, theta = solved
    z = -small_cfg.sigma2
    shifted = solver.solve(Wh, theta, z * (1 - 1e-9j))
    rel = np.abs(shifted.b_tilde - sol.b_tilde).max() / np.abs(sol.b_tilde).max()
    assert rel <= 1e-6


# -- derivatives --------------------------------------------------------------

def fd_derivative(solver, Wh, theta, z, j, h=1e-6):
    vals = {}
    for lbl, d in (("xp", h), ("xm", -h), ("yp", 1j * h), ("ym", -1j * h)):
        th = theta.copy()
        th[j] = th[j] + d
        vals[lbl] = solver.solve(Wh, th, z).b_tilde
    ddx = (vals["xp"] - vals["xm"]) / (2 * h)
    ddy = (vals["yp"] - vals["ym"]) / (2 * h)
    return 0.5 * (ddx + 1j * ddy)


def test_derivative_matches_finite_differences(tiny_cfg, tiny_csi):
    state = identity_state(tiny_cfg)
    Wh = block_diag_w(state.W)
    rng = np.random.default_rng(29)
    theta = rand_theta(rng, tiny_cfg.L_R)
    z = -tiny_cfg.sigma2
    solver = CauchySolver(tiny_csi, 1, SolverConfig(tol=1e-13))
    sol = solver.solve(Wh, theta, z)
    for j in (0, 3):
        got = solver.solve_derivative(sol, 0, j)
        want = fd_derivative(solver, Wh, theta, z, j)
        assert np.abs(got - want).max() / np.abs(want).max() <= 1e-4


def test_derivative_zero_when_ris_decoupled(tiny_cfg, tiny_csi):
    # no scattering anywhere and a zero RIS-AP mean: the phases cannot matter
    import copy
    csi = zero_profiles(tiny_csi)
    csi.g[(0, 0)].mean = np.zeros_like(csi.g[(0, 0)].mean)
    state = identity_state(tiny_cfg)
    Wh = block_diag_w(state.W)
    solver = CauchySolver(csi, 0)
    sol = solver.solve(Wh, state.theta, -tiny_cfg.sigma2)
    d = solver.solve_derivative(sol, 0, 1)
    assert np.abs(d).max() <= 1e-12 * np.abs(sol.b_tilde).max()


def test_derivative_wirtinger_pair(solved):
    # conjugate-coordinate and plain-coordinate derivatives are adjoints
    solver, sol, Wh, theta = solved
    d_conj = solver.solve_derivative(sol, 0, 2, conjugate=True)
    d_plain = solver.solve_derivative(sol, 0, 2, conjugate=False)
    assert np.abs(d_conj - d_plain.conj().T).max() \
        <= 1e-10 * max(np.abs(d_conj).max(), 1e-300)


def test_derivative_system_residual(solved):
    solver, sol, Wh, theta = solved
    _, rel, iters = solver.solve_derivative(sol, 0, 0, full=True)
    assert rel <= 1e-10


def test_adjoint_traces_match_forward(solved, small_cfg):
    solver, sol, Wh, theta = solved
    rng = np.random.default_rng(31)
    D = rng.standard_normal((small_cfg.T_t,) * 2) \
        + 1j * rng.standard_normal((small_cfg.T_t,) * 2)
    fwd = np.array([np.trace(D @ solver.solve_derivative(sol, 0, j))
                    for j in range(small_cfg.L_k[0])])
    adj = solver.derivative_traces(sol, D)
    assert np.abs(adj - fwd).max() <= 1e-10 * max(np.abs(fwd).max(), 1e-300)
