"""Two-layer receiver and Monte-Carlo estimators.

Layer one is a per-AP MMSE detector built from local instantaneous CSI;
layer two is a one-shot weighted combining at the CPU. Channel
expectations are estimated by sample averages over channel draws only;
the noise enters analytically through sigma^2 terms, never by sampling.

Estimators work on chunks of draws and merge partial sums, so a trial
budget can be partitioned and reduced associatively.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import SystemConfig
from .scenario import StatisticalCsi
from .channel import (ChannelBatch, ContractError, sample_channels, stacked_h,
                      theta_hat)

COND_LIMIT = 1e12
RIDGE = 1e-12


@dataclass
class TransceiverState:
    """Current iterate of either optimization engine."""

    A: np.ndarray      # (N, L*T, T) CPU combining, A_n stacked over APs
    V: np.ndarray      # (N, T, T) MSE weights, Hermitian positive definite
    W: np.ndarray      # (N, T, T) UE precoders
    theta: np.ndarray  # (L_R,) unit-modulus RIS phases

    def copy(self) -> "TransceiverState":
        return TransceiverState(self.A.copy(), self.V.copy(), self.W.copy(), self.theta.copy())

    def check_feasible(self, cfg: SystemConfig, p=None):
        p = cfg.p if p is None else p
        for n in range(cfg.N):
            used = np.real(np.trace(self.W[n] @ self.W[n].conj().T))
            if used > p[n] * (1 + 1e-9) + 1e-30:
                raise AssertionError(f"UE {n} power {used} exceeds budget {p[n]}")
            ev = np.linalg.eigvalsh(0.5 * (self.V[n] + self.V[n].conj().T))
            if ev.min() <= 0:
                raise AssertionError(f"V[{n}] is not positive definite")
        if np.abs(np.abs(self.theta) - 1.0).max() > 1e-12:
            raise AssertionError("theta left the unit-modulus manifold")


def identity_state(cfg: SystemConfig) -> TransceiverState:
    """Unoptimized reference point: A_nl = I/L, W_n = sqrt(p_n/T) I, theta = 1."""
    A = np.tile(np.eye(cfg.T, dtype=complex) / cfg.L, (cfg.N, cfg.L, 1))
    V = np.tile(np.eye(cfg.T, dtype=complex), (cfg.N, 1, 1))
    W = np.stack([np.sqrt(cfg.p[n] / cfg.T) * np.eye(cfg.T, dtype=complex)
                  for n in range(cfg.N)])
    theta = np.ones(cfg.L_R, dtype=complex)
    return TransceiverState(A=A, V=V, W=W, theta=theta)


def block_diag_w(W: np.ndarray) -> np.ndarray:
    """(N, T, T) -> block-diagonal (N*T, N*T)."""
    N, T, _ = W.shape
    out = np.zeros((N * T, N * T), dtype=complex)
    for n in range(N):
        out[n * T:(n + 1) * T, n * T:(n + 1) * T] = W[n]
    return out


def local_mmse(H: np.ndarray, W_hat: np.ndarray, sigma2: float) -> np.ndarray:
    """Per-AP MMSE detectors for one realization.

    H is the (R, T_t) composite channel of one AP, W_hat the block-diagonal
    precoder; returns (R, T_t) whose T-column blocks are the per-UE U_n.
    """
    if sigma2 <= 0:
        raise ContractError("sigma2 must be positive")
    HW = H @ W_hat
    cov = HW @ HW.conj().T + sigma2 * np.eye(H.shape[0])
    return np.linalg.solve(cov, HW)


def build_phi(U: np.ndarray, H: np.ndarray, N: int, T: int) -> np.ndarray:
    """(N, N, L*T, T) combining inputs: Phi[n, m] stacks U_nl^H H_ml over APs.

    U and H are (L, R, T_t) detector/channel stacks of one realization.
    """
    L = U.shape[0]
    UH = U.conj().swapaxes(-2, -1) @ H        # (L, T_t, T_t)
    blocks = UH.reshape(L, N, T, N, T)
    return np.ascontiguousarray(blocks.transpose(1, 3, 0, 2, 4)).reshape(N, N, L * T, T)


# ---------------------------------------------------------------------------
# moment estimation
# ---------------------------------------------------------------------------

@dataclass
class McMoments:
    """Channel-expectation estimates shared by the rate/MSE/update formulas."""

    phi_nn: np.ndarray    # (N, LT, T)   E(Phi_nn)
    q: np.ndarray         # (N, LT, LT)  E(Phi_n Wh Wh^H Phi_n^H) + sigma2 E(S_n)
    s: np.ndarray         # (N, L, T, T) E(U_nl^H U_nl)
    trials: int

    def s_blockdiag(self, n: int) -> np.ndarray:
        N, L, T, _ = self.s.shape
        out = np.zeros((L * T, L * T), dtype=complex)
        for l in range(L):
            out[l * T:(l + 1) * T, l * T:(l + 1) * T] = self.s[n, l]
        return out


def detector_u(cfg, H: np.ndarray, W: np.ndarray, detector: str = "mmse") -> np.ndarray:
    """Batched detectors (S, L, R, T_t) from composite channels (S, L, R, T_t)."""
    HW = H @ block_diag_w(W)
    if detector == "mmse":
        cov = HW @ HW.conj().swapaxes(-2, -1) + cfg.sigma2 * np.eye(cfg.R)
        return np.linalg.solve(cov, HW)
    if detector == "mr":
        return HW
    raise ContractError(f"unknown detector {detector!r}")


def tensors_from_u(H: np.ndarray, U: np.ndarray, Wh: np.ndarray):
    """Detector products feeding every moment: UH, UHW, UU (S, L, T_t, T_t)."""
    Udag = U.conj().swapaxes(-2, -1)
    UH = Udag @ H
    return UH, UH @ Wh, Udag @ U


def moments_from_tensors(cfg, UH, UHW, UU) -> McMoments:
    T, N, L = cfg.T, cfg.N, cfg.L
    S = UH.shape[0]

    phi_nn = np.empty((N, L * T, T), dtype=complex)
    q = np.empty((N, L * T, L * T), dtype=complex)
    s = np.empty((N, L, T, T), dtype=complex)
    for n in range(N):
        rows = slice(n * T, (n + 1) * T)
        phi_nn[n] = UH[:, :, rows, rows].mean(axis=0).reshape(L * T, T)
        s[n] = UU[:, :, rows, rows].mean(axis=0)
        phin_w = UHW[:, :, rows, :].reshape(S, L * T, cfg.T_t)
        q[n] = np.einsum("sit,sjt->ij", phin_w, phin_w.conj()) / S
        q[n] += cfg.sigma2 * _embed_blockdiag(s[n])
    return McMoments(phi_nn=phi_nn, q=q, s=s, trials=S)


def moments_from_batch(csi: StatisticalCsi, batch: ChannelBatch, W, theta,
                       detector: str = "mmse") -> McMoments:
    cfg = csi.cfg
    H = stacked_h(cfg, batch, theta)
    U = detector_u(cfg, H, W, detector)
    UH, UHW, UU = tensors_from_u(H, U, block_diag_w(W))
    return moments_from_tensors(cfg, UH, UHW, UU)


def _embed_blockdiag(blocks: np.ndarray) -> np.ndarray:
    L, T, _ = blocks.shape
    out = np.zeros((L * T, L * T), dtype=complex)
    for l in range(L):
        out[l * T:(l + 1) * T, l * T:(l + 1) * T] = blocks[l]
    return out


def merge_moments(parts) -> McMoments:
    """Associative reduction of chunked estimates (weighted by trial count)."""
    total = sum(p.trials for p in parts)
    w = [p.trials / total for p in parts]
    return McMoments(
        phi_nn=sum(wi * p.phi_nn for wi, p in zip(w, parts)),
        q=sum(wi * p.q for wi, p in zip(w, parts)),
        s=sum(wi * p.s for wi, p in zip(w, parts)),
        trials=total)


def mc_moments(csi: StatisticalCsi, W, theta, trials: int, rng,
               detector: str = "mmse", chunk: int = 512) -> McMoments:
    """Streaming moment estimation over `trials` fresh channel draws."""
    parts = []
    left = int(trials)
    while left > 0:
        take = min(chunk, left)
        batch = sample_channels(csi, rng, take)
        parts.append(moments_from_batch(csi, batch, W, theta, detector))
        left -= take
    return merge_moments(parts)


# ---------------------------------------------------------------------------
# MSE matrix and achievable rate
# ---------------------------------------------------------------------------

def mse_from_moments(state: TransceiverState, mom: McMoments) -> np.ndarray:
    """(N, T, T) MSE matrices, symmetrized."""
    N = state.W.shape[0]
    T = state.W.shape[1]
    out = np.empty((N, T, T), dtype=complex)
    for n in range(N):
        A, W = state.A[n], state.W[n]
        cross = W.conj().T @ mom.phi_nn[n].conj().T @ A
        E = np.eye(T) - cross - cross.conj().T + A.conj().T @ mom.q[n] @ A
        out[n] = 0.5 * (E + E.conj().T)
    return out


def mse_matrix_mc(csi: StatisticalCsi, state: TransceiverState, trials: int,
                  rng) -> np.ndarray:
    mom = mc_moments(csi, state.W, state.theta, trials, rng)
    return mse_from_moments(state, mom)


def regularize_cov(S: np.ndarray, diagnostics=None) -> np.ndarray:
    """Symmetrize; ridge the covariance if it is numerically singular."""
    S = 0.5 * (S + S.conj().T)
    ev = np.linalg.eigvalsh(S)
    if ev.max() <= 0:
        return S
    if ev.min() <= ev.max() / COND_LIMIT:
        S = S + (RIDGE * np.trace(S).real / S.shape[0]) * np.eye(S.shape[0])
        if diagnostics is not None:
            diagnostics.append("cov_regularized")
    return S


def rates_from_moments(state: TransceiverState, mom: McMoments, mu=None,
                       diagnostics=None) -> np.ndarray:
    """Per-UE achievable rates (bits/s/Hz, base-2 logs) from moment estimates."""
    N, _, T = state.W.shape
    rates = np.zeros(N)
    for n in range(N):
        A, W = state.A[n], state.W[n]
        D = A.conj().T @ mom.phi_nn[n] @ W
        total = A.conj().T @ mom.q[n] @ A       # Sigma_n + D D^H
        if np.linalg.norm(D) == 0.0:
            continue
        Sig = regularize_cov(total - D @ D.conj().T, diagnostics)
        sign_t, ld_t = np.linalg.slogdet(Sig + D @ D.conj().T)
        sign_s, ld_s = np.linalg.slogdet(Sig)
        rates[n] = max((ld_t - ld_s) / np.log(2.0), 0.0)
    return rates


def achievable_rate_mc(csi: StatisticalCsi, state: TransceiverState, trials: int,
                       rng) -> np.ndarray:
    mom = mc_moments(csi, state.W, state.theta, trials, rng)
    return rates_from_moments(state, mom)


def weighted_sum_rate_mc(csi: StatisticalCsi, state: TransceiverState, trials: int,
                         rng) -> float:
    return float(csi.cfg.mu_arr @ achievable_rate_mc(csi, state, trials, rng))
