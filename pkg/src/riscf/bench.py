"""Comparison schemes: LSFD combining and fully centralized processing.

LSFD keeps the two-layer structure but fixes precoders and phases at
their unoptimized values; the CPU combiner is still the statistically
optimal one. FCP stacks all AP antennas into a single receiver with
instantaneous CSI and runs a per-realization WMMSE precoder loop, giving
the centralized upper-bound comparator.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import sample_channels, stacked_h
from .detection import identity_state, mc_moments, rates_from_moments
from .scenario import StatisticalCsi
from .wmmse_mc import update_A_from_moments


@dataclass
class BaselineResult:
    scheme: str
    rates: np.ndarray
    weighted_sum_rate: float
    meta: dict = field(default_factory=dict)


def lsfd(csi: StatisticalCsi, detector_kind: str, trials: int, rng,
         theta=None) -> BaselineResult:
    """Local MMSE or MR detection with statistically optimal CPU combining;
    precoders and phases stay at the unoptimized defaults."""
    cfg = csi.cfg
    kind = detector_kind.lower()
    if kind not in ("mmse", "mr"):
        raise ValueError(f"detector_kind must be MMSE or MR, got {detector_kind!r}")
    state = identity_state(cfg)
    if theta is not None:
        state.theta = np.asarray(theta, dtype=complex)
    mom = mc_moments(csi, state.W, state.theta, trials, rng, detector=kind)
    state.A = update_A_from_moments(mom, state.W, cfg.sigma2)
    rates = rates_from_moments(state, mom)
    return BaselineResult(scheme=f"lsfd_{kind}", rates=rates,
                          weighted_sum_rate=float(cfg.mu_arr @ rates),
                          meta={"detector": kind})


# ---------------------------------------------------------------------------
# fully centralized processing
# ---------------------------------------------------------------------------

def _batched_bisect(J, rhs, mu_n, p_n, tol=1e-9, rounds=60):
    """Per-trial power bisection for W = mu (J + lam I)^-1 rhs, vectorized."""
    S, T, _ = J.shape
    eye = np.eye(T)

    def power(lam):
        W = mu_n * np.linalg.solve(J + lam[:, None, None] * eye, rhs)
        used = np.einsum("sij,sij->s", W, W.conj()).real
        return used, W

    try:
        used0, _ = power(np.zeros(S))
        need = used0 > p_n
    except np.linalg.LinAlgError:
        # singular quadratic form at zero multiplier: bisect everywhere
        need = np.ones(S, dtype=bool)
    lam = np.zeros(S)
    if need.any():
        hi = np.ones(S)
        for _ in range(200):
            used_hi, _ = power(hi)
            grow = need & (used_hi > p_n)
            if not grow.any():
                break
            hi[grow] *= 10.0
        lo = np.zeros(S)
        for _ in range(rounds):
            mid = 0.5 * (lo + hi)
            used_mid, _ = power(mid)
            high = used_mid > p_n
            lo = np.where(need & high, mid, lo)
            hi = np.where(need & ~high, mid, hi)
        lam = np.where(need, hi, 0.0)
        # hi stays strictly positive for bisected trials, so this is safe
    _, W = power(lam)
    return W, lam


def fcp_wmmse(csi: StatisticalCsi, trials: int, rng, theta=None,
              wmmse_iters: int = 12) -> BaselineResult:
    """Centralized WMMSE on the stacked LR-antenna array, instantaneous CSI.

    Per realization: MMSE receivers, inverse-MSE weights, precoders via the
    quadratic sub-problem with per-trial power bisection; rates averaged
    over realizations.
    """
    cfg = csi.cfg
    N, T, LR = cfg.N, cfg.T, cfg.L * cfg.R
    mu, p, sigma2 = cfg.mu_arr, cfg.p, cfg.sigma2
    theta = np.ones(cfg.L_R, dtype=complex) if theta is None else np.asarray(theta)

    batch = sample_channels(csi, rng, trials)
    Hst = stacked_h(cfg, batch, theta)                       # (S, L, R, T_t)
    S = Hst.shape[0]
    Hfull = Hst.transpose(0, 2, 1, 3).reshape(S, LR, cfg.T_t)
    H = [Hfull[:, :, n * T:(n + 1) * T] for n in range(N)]   # per-UE (S, LR, T)

    W = [np.broadcast_to(np.sqrt(p[n] / T) * np.eye(T, dtype=complex),
                         (S, T, T)).copy() for n in range(N)]
    eyeR = np.eye(LR)
    for _ in range(wmmse_iters):
        HW = [H[n] @ W[n] for n in range(N)]
        cov = sigma2 * eyeR + sum(hw @ hw.conj().swapaxes(-2, -1) for hw in HW)
        U = [np.linalg.solve(cov, HW[n]) for n in range(N)]
        V = []
        for n in range(N):
            E = np.eye(T) - U[n].conj().swapaxes(-2, -1) @ HW[n]
            E = 0.5 * (E + E.conj().swapaxes(-2, -1))
            V.append(np.linalg.inv(E))
        for n in range(N):
            J = np.zeros((S, T, T), dtype=complex)
            for m in range(N):
                UVU = U[m] @ V[m] @ U[m].conj().swapaxes(-2, -1)
                J += mu[m] * H[n].conj().swapaxes(-2, -1) @ UVU @ H[n]
            J = 0.5 * (J + J.conj().swapaxes(-2, -1))
            rhs = H[n].conj().swapaxes(-2, -1) @ U[n] @ V[n]
            W[n], _ = _batched_bisect(J, rhs, mu[n], p[n])

    HW = [H[n] @ W[n] for n in range(N)]
    total = sigma2 * eyeR + sum(hw @ hw.conj().swapaxes(-2, -1) for hw in HW)
    rates = np.zeros(N)
    for n in range(N):
        interf = total - HW[n] @ HW[n].conj().swapaxes(-2, -1)
        G = HW[n].conj().swapaxes(-2, -1) @ np.linalg.solve(interf, HW[n])
        sign, ld = np.linalg.slogdet(np.eye(T) + G)
        rates[n] = float(np.mean(ld) / np.log(2.0))
    return BaselineResult(scheme="fcp", rates=rates,
                          weighted_sum_rate=float(mu @ rates),
                          meta={"wmmse_iters": wmmse_iters, "trials": trials})
