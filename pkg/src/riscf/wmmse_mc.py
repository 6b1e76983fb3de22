"""Monte-Carlo WMMSE alternating optimizer.

One iteration cycles the CPU combiners A, the MSE weights V, the UE
precoders W (Lagrange bisection on the power constraint) and the RIS
phases theta (Riemannian descent). All sub-steps of an iteration share
one batch of channel draws, refreshed per iteration, so the weighted
sum-rate trace is monotone up to Monte-Carlo noise. During the phase
step the local detectors are held fixed at their current values; the
other blocks see the phase dependence through the composite channel only.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .channel import sample_channels, stacked_f, stacked_g, theta_hat
from .detection import (McMoments, TransceiverState, block_diag_w, detector_u,
                        identity_state, mc_moments, moments_from_tensors,
                        mse_from_moments, rates_from_moments, tensors_from_u)
from .manifold import ArmijoConfig, descend
from .scenario import StatisticalCsi

BISECT_TOL = 1e-6
BISECT_MAX = 100


@dataclass
class AOTrace:
    """Per-iteration record of either engine."""

    sum_rate: list = field(default_factory=list)
    objective: list = field(default_factory=list)   # weighted sum-MSE surrogate
    lambdas: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    states: list = field(default_factory=list)      # filled when requested


def feasibility_report(state: TransceiverState) -> dict:
    """Constraint diagnostics recorded after every iteration."""
    N = state.W.shape[0]
    return {
        "power_used": [float(np.real(np.trace(state.W[n] @ state.W[n].conj().T)))
                       for n in range(N)],
        "theta_dev": float(np.abs(np.abs(state.theta) - 1.0).max())
        if state.theta.size else 0.0,
        "v_min_eig": [float(np.linalg.eigvalsh(
            0.5 * (state.V[n] + state.V[n].conj().T)).min()) for n in range(N)],
    }


@dataclass
class McAoOptions:
    trials: int = 0             # 0 -> cfg.mc_trials
    eval_trials: int = 0        # 0 -> same as trials
    psm_steps: int = 10
    armijo: ArmijoConfig = field(default_factory=ArmijoConfig)
    eval_seed: int = 0xE7A1     # evaluation draws, reused across iterations
    detector: str = "mmse"
    record_states: bool = False


# ---------------------------------------------------------------------------
# sub-problem solutions
# ---------------------------------------------------------------------------

def update_A_from_moments(mom: McMoments, W: np.ndarray, sigma2: float) -> np.ndarray:
    """CPU combiners minimizing the sum MSE at fixed (W, theta)."""
    N = W.shape[0]
    A = np.empty_like(mom.phi_nn)
    for n in range(N):
        rhs = mom.phi_nn[n] @ W[n]
        try:
            A[n] = np.linalg.solve(mom.q[n], rhs)
        except np.linalg.LinAlgError:
            ridge = mom.q[n] + sigma2 * 1e-9 * np.eye(mom.q[n].shape[0])
            A[n] = np.linalg.solve(ridge, rhs)
    return A


def update_V(E: np.ndarray) -> np.ndarray:
    """Weights are the inverse MSE matrices; raises if an E_n is singular."""
    V = np.empty_like(E)
    for n in range(E.shape[0]):
        En = 0.5 * (E[n] + E[n].conj().T)
        Vn = np.linalg.inv(En)
        V[n] = 0.5 * (Vn + Vn.conj().T)
    return V


def bisect_power(j_mat: np.ndarray, rhs: np.ndarray, mu_n: float, p_n: float):
    """Precoder from the regularized inverse, multiplier from bisection.

    The used power is strictly decreasing in the multiplier, so growing the
    bracket geometrically and bisecting always terminates. Complementary
    slackness holds at the returned point.
    """
    T = j_mat.shape[0]

    def power(lmbda):
        Wn = mu_n * np.linalg.solve(j_mat + lmbda * np.eye(T), rhs)
        return float(np.real(np.trace(Wn @ Wn.conj().T))), Wn

    try:
        used, Wn = power(0.0)
        if used <= p_n * (1 + 1e-12):
            return Wn, 0.0
    except np.linalg.LinAlgError:
        pass

    hi = 1.0
    for _ in range(200):
        used_hi, W_hi = power(hi)
        if used_hi <= p_n:
            break
        hi *= 10.0
    else:
        raise RuntimeError("bisection bracket failure: no feasible multiplier found")
    lo = 0.0
    W_out, lam = W_hi, hi
    for _ in range(BISECT_MAX):
        mid = 0.5 * (lo + hi)
        used, W_mid = power(mid)
        if used > p_n:
            lo = mid
        else:
            # track only feasible iterates so the returned precoder never
            # exceeds the budget
            hi, W_out, lam = mid, W_mid, mid
            if p_n - used <= BISECT_TOL * p_n:
                break
    return W_out, lam


def update_W_from_moments(j_w: np.ndarray, mom: McMoments, A, V, mu, p):
    """Precoders of the quadratic sub-problem under per-UE power budgets."""
    N = A.shape[0]
    T = A.shape[2]
    W = np.empty((N, T, T), dtype=complex)
    lambdas = np.zeros(N)
    for n in range(N):
        rhs = mom.phi_nn[n].conj().T @ A[n] @ V[n]
        W[n], lambdas[n] = bisect_power(j_w[n], rhs, mu[n], p[n])
    return W, lambdas


# ---------------------------------------------------------------------------
# common-random-numbers batch for one AO iteration
# ---------------------------------------------------------------------------

class IterationBatch:
    """One set of channel draws plus detector tensors at (W, theta).

    The raw draws stay fixed for the whole iteration. `refresh_detectors`
    recomputes the local MMSE detectors after a precoder update; the
    phase-step objective and gradient re-stack the composite channel at
    trial phases while keeping the detectors frozen.
    """

    def __init__(self, csi: StatisticalCsi, W, theta, trials, rng, detector="mmse"):
        self.csi = csi
        self.cfg = csi.cfg
        self.batch = sample_channels(csi, rng, trials)
        self.Fst = stacked_f(self.cfg, self.batch)   # (S, L, L_AR, T_t)
        self.Gst = stacked_g(self.cfg, self.batch)   # (S, L, R, L_AR)
        self.detector = detector
        self.refresh_detectors(W, theta)

    def h_at(self, theta):
        th = theta_hat(self.cfg, theta)
        return self.Gst @ (th[None, None, :, None] * self.Fst)

    def refresh_detectors(self, W, theta):
        self.W = np.asarray(W)
        self.theta = np.asarray(theta)
        self.Wh = block_diag_w(self.W)
        self.H = self.h_at(self.theta)
        self.U = detector_u(self.cfg, self.H, self.W, self.detector)
        self._tensors = tensors_from_u(self.H, self.U, self.Wh)
        self._moments = None

    def moments(self) -> McMoments:
        if self._moments is None:
            self._moments = moments_from_tensors(self.cfg, *self._tensors)
        return self._moments

    def w_moment(self, A, V, mu) -> np.ndarray:
        """j_w[n] = sum_m mu_m E(Phi_mn^H A_m V_m A_m^H Phi_mn), (N, T, T)."""
        cfg = self.cfg
        T, N, L = cfg.T, cfg.N, cfg.L
        UH = self._tensors[0]
        S = UH.shape[0]
        out = np.zeros((N, T, T), dtype=complex)
        for m in range(N):
            P = A[m] @ V[m] @ A[m].conj().T
            for n in range(N):
                phi = UH[:, :, m * T:(m + 1) * T, n * T:(n + 1) * T]
                phi = phi.reshape(S, L * T, T)
                out[n] += mu[m] * np.einsum("sit,ij,sjr->tr", phi.conj(), P, phi) / S
        return out

    # -- phase-shift sub-problem (detectors frozen) ------------------------
    def psm_moments(self, theta) -> McMoments:
        H = self.h_at(theta)
        UH, UHW, UU = tensors_from_u(H, self.U, self.Wh)
        return moments_from_tensors(self.cfg, UH, UHW, UU)

    def psm_objective(self, A, V, mu, theta) -> float:
        mom = self.psm_moments(theta)
        total = 0.0
        for n in range(self.cfg.N):
            quad = np.real(np.trace(V[n] @ A[n].conj().T @ mom.q[n] @ A[n]))
            cross = np.real(np.trace(V[n] @ self.W[n].conj().T
                                     @ mom.phi_nn[n].conj().T @ A[n]))
            total += mu[n] * (quad - 2.0 * cross)
        return float(total)

    def psm_gradient(self, A, V, mu, theta) -> np.ndarray:
        """Euclidean gradient 2 df/dtheta^* with frozen detectors."""
        cfg = self.cfg
        T, N, L, R = cfg.T, cfg.N, cfg.L, cfg.R
        H = self.h_at(theta)
        UH = self.U.conj().swapaxes(-2, -1) @ H        # (S, L, T_t, T_t)
        S = UH.shape[0]
        FW = self.Fst @ self.Wh                        # (S, L, L_AR, T_t)
        dstar = np.zeros(cfg.L_AR, dtype=complex)
        for n in range(N):
            rows = slice(n * T, (n + 1) * T)
            An = A[n].reshape(L, T, T)
            # A_n^H Phi_n Wh: (S, T, T_t)
            Zn = np.einsum("lut,slur->str", An.conj(), UH[:, :, rows, :]) @ self.Wh
            for q in range(L):
                UA = self.U[:, q, :, rows] @ An[q]              # (S, R, T) U_nq A_nq
                left = np.einsum("srp,sru->spu", self.Gst[:, q].conj(), UA) @ V[n]
                # Z_n FW_q^H  and  W_n^H F_nq^H, both (S, T, L_AR)
                m1 = np.einsum("stv,spv->stp", Zn, FW[:, q].conj())
                m2 = np.einsum("ut,spu->stp", self.W[n].conj(),
                               self.Fst[:, q, :, rows].conj())
                dstar += mu[n] * np.einsum("spt,stp->p", left, m1 - m2) / S
        return 2.0 * dstar[R:]

    # -- evaluation --------------------------------------------------------
    def rates(self, state: TransceiverState) -> np.ndarray:
        mom = moments_from_tensors(self.cfg, *tensors_from_u(
            self.h_at(state.theta),
            detector_u(self.cfg, self.h_at(state.theta), state.W, self.detector),
            block_diag_w(state.W)))
        return rates_from_moments(state, mom)


# spec-level wrappers sampling their own draws --------------------------------

def update_A(csi: StatisticalCsi, state: TransceiverState, trials: int, rng):
    mom = mc_moments(csi, state.W, state.theta, trials, rng)
    return update_A_from_moments(mom, state.W, csi.cfg.sigma2)


def update_W(csi: StatisticalCsi, state: TransceiverState, trials: int, rng):
    batch = IterationBatch(csi, state.W, state.theta, trials, rng)
    j_w = batch.w_moment(state.A, state.V, csi.cfg.mu_arr)
    return update_W_from_moments(j_w, batch.moments(), state.A, state.V,
                                 csi.cfg.mu_arr, csi.cfg.p)


def update_theta(csi: StatisticalCsi, state: TransceiverState, trials: int, rng,
                 opts: McAoOptions | None = None):
    """Riemannian descent on the frozen-detector Monte-Carlo objective."""
    opts = opts or McAoOptions()
    batch = IterationBatch(csi, state.W, state.theta, trials, rng)
    mu = csi.cfg.mu_arr
    theta, vals, stalled = descend(
        state.theta,
        f=lambda th: batch.psm_objective(state.A, state.V, mu, th),
        grad=lambda th: batch.psm_gradient(state.A, state.V, mu, th),
        steps=opts.psm_steps, cfg=opts.armijo)
    return theta, vals, stalled


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------

def ao_loop(csi: StatisticalCsi, init_state: TransceiverState | None = None,
            opts: McAoOptions | None = None, seed=None):
    """Alternating optimization A -> V -> W -> theta for cfg.ao_iters rounds."""
    cfg = csi.cfg
    opts = opts or McAoOptions()
    trials = opts.trials or cfg.mc_trials
    eval_trials = opts.eval_trials or trials
    state = (init_state or identity_state(cfg)).copy()
    trace = AOTrace()
    root = np.random.SeedSequence(cfg.seed if seed is None else seed)
    iter_seeds = root.spawn(cfg.ao_iters)
    mu = cfg.mu_arr

    for i in range(cfg.ao_iters):
        t0 = time.perf_counter()
        rng = np.random.default_rng(iter_seeds[i])
        batch = IterationBatch(csi, state.W, state.theta, trials, rng,
                               detector=opts.detector)
        mom = batch.moments()
        state.A = update_A_from_moments(mom, state.W, cfg.sigma2)
        E = mse_from_moments(state, mom)
        state.V = update_V(E)
        j_w = batch.w_moment(state.A, state.V, mu)
        state.W, lambdas = update_W_from_moments(j_w, mom, state.A, state.V,
                                                 mu, cfg.p)
        # detectors see the new precoders, then stay frozen for the phase step
        batch.refresh_detectors(state.W, state.theta)
        theta, vals, stalled = descend(
            state.theta,
            f=lambda th: batch.psm_objective(state.A, state.V, mu, th),
            grad=lambda th: batch.psm_gradient(state.A, state.V, mu, th),
            steps=opts.psm_steps, cfg=opts.armijo)
        state.theta = theta

        # rate on draws shared across iterations, with the combiner
        # re-optimized at the current (W, theta) so the trace tracks the
        # value of the outer objective
        mom_eval = mc_moments(csi, state.W, state.theta, eval_trials,
                              np.random.default_rng(opts.eval_seed))
        state.A = update_A_from_moments(mom_eval, state.W, cfg.sigma2)
        sum_rate = float(mu @ rates_from_moments(state, mom_eval))

        trace.sum_rate.append(sum_rate)
        trace.objective.append(vals[-1])
        trace.lambdas.append(lambdas.tolist())
        trace.steps.append(len(vals) - 1)
        trace.wall_time.append(time.perf_counter() - t0)
        diag = feasibility_report(state)
        diag["psm_stalled"] = bool(stalled)
        trace.diagnostics.append(diag)
        if opts.record_states:
            trace.states.append(state.copy())
    return state, trace
