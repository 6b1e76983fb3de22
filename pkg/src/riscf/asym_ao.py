"""Statistics-only alternating optimizer.

Mirrors the Monte-Carlo engine but replaces every channel expectation by
its deterministic equivalent: per AP, the fixed-point solution at
z = -sigma^2 yields R_l = I + sigma^2 Bt_l, whose (n, m) T-blocks stand in
for E(U_nl^H H_ml W_m). The combiner, weight and precoder updates then
have closed forms; the phase update descends the asymptotic surrogate
with gradients assembled from the derivative of each Bt_l, one adjoint
solve per AP covering all reflecting elements at once.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .detection import TransceiverState, block_diag_w, identity_state
from .freeprob import CauchySolution, CauchySolver, SolverConfig
from .manifold import ArmijoConfig, retract, riemannian_gradient
from .scenario import StatisticalCsi
from .wmmse_mc import AOTrace, bisect_power, feasibility_report


@dataclass
class AsymExpectations:
    """Deterministic-equivalent blocks consumed by the update formulas."""

    psi: np.ndarray      # (N, LT, T)
    q_tilde: np.ndarray  # (N, LT, LT)
    r_bar: np.ndarray    # (L, T_t, T_t) = I + sigma^2 Bt_l
    b_tilde: list        # per-AP Bt_l


@dataclass
class AsymAoOptions:
    psm_steps: int = 10
    armijo: ArmijoConfig = field(default_factory=ArmijoConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    record_states: bool = False


def solve_all_aps(solvers, W, theta, z, warm=None):
    Wh = block_diag_w(W)
    warm = warm or [None] * len(solvers)
    return [s.solve(Wh, theta, z, warm=w) for s, w in zip(solvers, warm)]


def compute_expectations(solutions, cfg) -> AsymExpectations:
    """Stack per-AP deterministic equivalents into the CPU-side blocks."""
    L, N, T = cfg.L, cfg.N, cfg.T
    sigma2 = cfg.sigma2
    r_bar = np.stack([np.eye(cfg.T_t) + sigma2 * sol.b_tilde for sol in solutions])
    psi = np.empty((N, L * T, T), dtype=complex)
    q_tilde = np.empty((N, L * T, L * T), dtype=complex)
    for n in range(N):
        rows = slice(n * T, (n + 1) * T)
        for l in range(L):
            psi[n, l * T:(l + 1) * T] = r_bar[l][rows, rows]
            for q in range(L):
                if l == q:
                    blk = r_bar[l][rows, rows]
                else:
                    blk = (r_bar[l] @ r_bar[q])[rows, rows]
                q_tilde[n, l * T:(l + 1) * T, q * T:(q + 1) * T] = blk
        q_tilde[n] = 0.5 * (q_tilde[n] + q_tilde[n].conj().T)
    return AsymExpectations(psi=psi, q_tilde=q_tilde, r_bar=r_bar,
                            b_tilde=[sol.b_tilde for sol in solutions])


def update_A_asym(exp: AsymExpectations, sigma2: float = 0.0) -> np.ndarray:
    A = np.empty_like(exp.psi)
    for n in range(exp.psi.shape[0]):
        try:
            A[n] = np.linalg.solve(exp.q_tilde[n], exp.psi[n])
        except np.linalg.LinAlgError:
            ridge = exp.q_tilde[n] + sigma2 * 1e-9 * np.eye(exp.q_tilde[n].shape[0])
            A[n] = np.linalg.solve(ridge, exp.psi[n])
    return A


def update_V_asym(exp: AsymExpectations) -> np.ndarray:
    N = exp.psi.shape[0]
    T = exp.psi.shape[2]
    V = np.empty((N, T, T), dtype=complex)
    for n in range(N):
        E = np.eye(T) - exp.psi[n].conj().T @ np.linalg.solve(exp.q_tilde[n], exp.psi[n])
        E = 0.5 * (E + E.conj().T)
        try:
            V[n] = np.linalg.inv(E)
        except np.linalg.LinAlgError as err:
            raise np.linalg.LinAlgError(
                "asymptotic MSE matrix is singular (vanishing MSE)") from err
        V[n] = 0.5 * (V[n] + V[n].conj().T)
    return V


def update_W_asym(exp: AsymExpectations, W_prev: np.ndarray, A, V, mu, p,
                  cond_limit: float = 1e10):
    """Precoders from the asymptotic quadratic form around the previous
    iterate; the previous precoders must be invertible."""
    N, L = A.shape[0], exp.r_bar.shape[0]
    T = W_prev.shape[1]
    W = np.empty_like(W_prev)
    lambdas = np.zeros(N)
    for n in range(N):
        Wn = W_prev[n]
        if np.linalg.cond(Wn) > cond_limit:
            tau = 1e-10 * np.linalg.norm(Wn)
            Wn = Wn + tau * np.eye(T)
        Winv = np.linalg.inv(Wn)
        rows_n = slice(n * T, (n + 1) * T)
        J = np.zeros((T, T), dtype=complex)
        for m in range(N):
            rows_m = slice(m * T, (m + 1) * T)
            C = np.zeros((T, T), dtype=complex)
            for l in range(L):
                C += exp.r_bar[l][rows_n, rows_m] @ A[m, l * T:(l + 1) * T]
            J += mu[m] * C @ V[m] @ C.conj().T
        J = Winv.conj().T @ J @ Winv
        J = 0.5 * (J + J.conj().T)
        rhs = Winv.conj().T @ exp.psi[n].conj().T @ A[n] @ V[n]
        W[n], lambdas[n] = bisect_power(J, rhs, mu[n], p[n])
    return W, lambdas


# ---------------------------------------------------------------------------
# phase-shift sub-problem
# ---------------------------------------------------------------------------

def psm_objective(exp: AsymExpectations, A, V, mu) -> float:
    total = 0.0
    for n in range(A.shape[0]):
        quad = np.real(np.trace(V[n] @ A[n].conj().T @ exp.q_tilde[n] @ A[n]))
        cross = np.real(np.trace(V[n] @ exp.psi[n].conj().T @ A[n]))
        total += mu[n] * (quad - 2.0 * cross)
    return float(total)


def psm_weight_matrices(exp: AsymExpectations, A, V, mu, cfg) -> np.ndarray:
    """(L, T_t, T_t) trace weights D_l such that the derivative of the
    surrogate with respect to a conjugated phase is sum_l Tr(D_l dBt_l)."""
    L, N, T, Tt = cfg.L, cfg.N, cfg.T, cfg.T_t
    sigma2 = cfg.sigma2
    D = np.zeros((L, Tt, Tt), dtype=complex)
    for n in range(N):
        rows = slice(n * T, (n + 1) * T)
        P = A[n] @ V[n] @ A[n].conj().T          # (LT, LT)
        for l in range(L):
            pl = slice(l * T, (l + 1) * T)
            place = np.zeros((Tt, Tt), dtype=complex)
            place[rows, rows] = P[pl, pl]
            acc = place.copy()
            for q in range(L):
                if q == l:
                    continue
                pq = slice(q * T, (q + 1) * T)
                left = np.zeros((Tt, Tt), dtype=complex)
                left[rows, rows] = P[pq, pl]
                right = np.zeros((Tt, Tt), dtype=complex)
                right[rows, rows] = P[pl, pq]
                acc += exp.r_bar[q] @ left + right @ exp.r_bar[q]
            Anl = A[n, pl]
            corr = Anl @ V[n] + V[n] @ Anl.conj().T
            place2 = np.zeros((Tt, Tt), dtype=complex)
            place2[rows, rows] = corr
            D[l] += mu[n] * sigma2 * (acc - place2)
    return D


def psm_gradient(solvers, solutions, exp: AsymExpectations, A, V, mu, cfg) -> np.ndarray:
    """Euclidean gradient 2 df/dtheta^*, one adjoint solve per AP."""
    D = psm_weight_matrices(exp, A, V, mu, cfg)
    dstar = np.zeros(cfg.L_R, dtype=complex)
    for l, (solver, sol) in enumerate(zip(solvers, solutions)):
        dstar += solver.derivative_traces(sol, D[l])
    return 2.0 * dstar


def update_theta_asym(solvers, solutions, state: TransceiverState, cfg,
                      opts: AsymAoOptions):
    """Riemannian descent on the asymptotic surrogate; every trial point
    re-solves the per-AP fixed points (warm-started)."""
    z = -cfg.sigma2
    mu = cfg.mu_arr
    theta = state.theta.copy()
    sols = solutions
    exp = compute_expectations(sols, cfg)
    f0 = psm_objective(exp, state.A, state.V, mu)
    arm = opts.armijo
    stalled = False
    for _ in range(opts.psm_steps):
        egrad = psm_gradient(solvers, sols, exp, state.A, state.V, mu, cfg)
        g = riemannian_gradient(egrad, theta)
        gnorm2 = float(np.real(g.conj() @ g))
        if gnorm2 <= 0.0:
            break
        step = arm.init_step
        accepted = False
        for _ in range(arm.max_halvings):
            cand = retract(theta, -g, step)
            cand_sols = solve_all_aps(solvers, state.W, cand, z, warm=sols)
            cand_exp = compute_expectations(cand_sols, cfg)
            fc = psm_objective(cand_exp, state.A, state.V, mu)
            if fc <= f0 - arm.c1 * step * gnorm2:
                theta, sols, exp, f0 = cand, cand_sols, cand_exp, fc
                accepted = True
                break
            step *= arm.contraction
        if not accepted:
            stalled = True
            break
    return theta, sols, exp, f0, stalled


# ---------------------------------------------------------------------------
# rates and the outer loop
# ---------------------------------------------------------------------------

def asym_rates(exp: AsymExpectations, A) -> np.ndarray:
    """Per-UE rates with deterministic equivalents in place of expectations.

    psi already carries the precoder (it stands in for E(Phi_nn) W_n).
    """
    N = A.shape[0]
    rates = np.zeros(N)
    for n in range(N):
        D = A[n].conj().T @ exp.psi[n]
        total = A[n].conj().T @ exp.q_tilde[n] @ A[n]
        Sig = total - D @ D.conj().T
        Sig = 0.5 * (Sig + Sig.conj().T)
        if np.linalg.norm(D) == 0.0:
            continue
        ev = np.linalg.eigvalsh(Sig)
        if ev.max() > 0 and ev.min() <= ev.max() / 1e12:
            Sig = Sig + 1e-12 * np.trace(Sig).real / Sig.shape[0] * np.eye(Sig.shape[0])
        s_t, ld_t = np.linalg.slogdet(Sig + D @ D.conj().T)
        s_s, ld_s = np.linalg.slogdet(Sig)
        rates[n] = max((ld_t - ld_s) / np.log(2.0), 0.0)
    return rates


def algorithm1(csi: StatisticalCsi, opts: AsymAoOptions | None = None,
               init_state: TransceiverState | None = None):
    """Full asymptotic AO: A -> V -> W -> theta, I_max = cfg.ao_iters."""
    cfg = csi.cfg
    opts = opts or AsymAoOptions()
    z = -cfg.sigma2
    mu = cfg.mu_arr
    state = (init_state or identity_state(cfg)).copy()
    solvers = [CauchySolver(csi, l, opts.solver) for l in range(cfg.L)]
    trace = AOTrace()
    sols = None

    for i in range(cfg.ao_iters):
        t0 = time.perf_counter()
        sols = solve_all_aps(solvers, state.W, state.theta, z, warm=sols)
        exp = compute_expectations(sols, cfg)
        state.A = update_A_asym(exp, cfg.sigma2)
        state.V = update_V_asym(exp)
        W_new, lambdas = update_W_asym(exp, state.W, state.A, state.V, mu, cfg.p)
        state.W = W_new
        # the deterministic equivalents must see the new precoders before
        # the phase step
        sols = solve_all_aps(solvers, state.W, state.theta, z, warm=sols)
        theta, sols, exp, f_val, stalled = update_theta_asym(
            solvers, sols, state, cfg, opts)
        state.theta = theta
        # report the value at the final state of the iteration
        state.A = update_A_asym(exp, cfg.sigma2)
        rates = asym_rates(exp, state.A)
        trace.sum_rate.append(float(mu @ rates))
        trace.objective.append(f_val)
        trace.lambdas.append(lambdas.tolist())
        trace.steps.append(opts.psm_steps)
        trace.wall_time.append(time.perf_counter() - t0)
        diag = feasibility_report(state)
        diag.update({
            "psm_stalled": bool(stalled),
            "fp_iters": [s.iters for s in sols],
            "fp_residual": max(s.residual for s in sols),
        })
        trace.diagnostics.append(diag)
        if opts.record_states:
            trace.states.append(state.copy())
    return state, trace
