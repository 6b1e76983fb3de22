"""Channel sampling and the parameterized one-sided correlation maps.

Every link follows the non-central separably-correlated model

    X = mean + rx_corr (profile o G) tx_corr^H,   G_ij iid CN(0, 1/tx_dim),

and the scattered part induces the linear maps D -> E[X~^H D X~] and
D -> E[X~ D X~^H] used by the deterministic-equivalent solver. Both maps
have the closed form (1/tx_dim) * C diag(pi(D)) C^H with an entrywise
quadratic weight pattern; they are C-linear, Hermitian-preserving and
positivity-preserving.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import SystemConfig
from .scenario import LinkStatistics, StatisticalCsi


class ContractError(ValueError):
    """An argument violates a documented precondition."""


def _crandn(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def _draw(link: LinkStatistics, rng, shape_prefix=()) -> np.ndarray:
    core = _crandn(rng, (*shape_prefix, link.rx_dim, link.tx_dim))
    core *= link.var_profile * np.sqrt(link.entry_var)
    return link.mean + link.rx_corr @ core @ link.tx_corr.conj().T


@dataclass
class ChannelRealization:
    """One joint draw of all links."""

    f0: np.ndarray   # (N, L, R, T)
    f: list          # k -> (N, L_k, T)
    g: list          # k -> (L, R, L_k)


@dataclass
class ChannelBatch:
    """A batch of joint draws, leading axis = trial."""

    f0: np.ndarray   # (S, N, L, R, T)
    f: list          # k -> (S, N, L_k, T)
    g: list          # k -> (S, L, R, L_k)

    @property
    def trials(self) -> int:
        return self.f0.shape[0]


def sample_channel(csi: StatisticalCsi, rng: np.random.Generator) -> ChannelRealization:
    batch = sample_channels(csi, rng, 1)
    return ChannelRealization(f0=batch.f0[0], f=[a[0] for a in batch.f], g=[a[0] for a in batch.g])


def sample_channels(csi: StatisticalCsi, rng: np.random.Generator, trials: int) -> ChannelBatch:
    cfg = csi.cfg
    f0 = np.empty((trials, cfg.N, cfg.L, cfg.R, cfg.T), dtype=complex)
    for (n, l), link in csi.f0.items():
        f0[:, n, l] = _draw(link, rng, (trials,))
    f = []
    for k in range(cfg.K):
        a = np.empty((trials, cfg.N, cfg.L_k[k], cfg.T), dtype=complex)
        for n in range(cfg.N):
            a[:, n] = _draw(csi.f[(n, k)], rng, (trials,))
        f.append(a)
    g = []
    for k in range(cfg.K):
        a = np.empty((trials, cfg.L, cfg.R, cfg.L_k[k]), dtype=complex)
        for l in range(cfg.L):
            a[:, l] = _draw(csi.g[(k, l)], rng, (trials,))
        g.append(a)
    return ChannelBatch(f0=f0, f=f, g=g)


# ---------------------------------------------------------------------------
# stacking
# ---------------------------------------------------------------------------

def theta_hat(cfg: SystemConfig, theta: np.ndarray) -> np.ndarray:
    """Diagonal of the augmented phase matrix: identity over the R direct
    antennas followed by the flattened RIS phases."""
    theta = np.asarray(theta)
    if theta.shape != (cfg.L_R,):
        raise ContractError(f"theta must have length L_R={cfg.L_R}")
    return np.concatenate([np.ones(cfg.R, dtype=complex), theta.astype(complex)])


@dataclass
class StackedChannel:
    """Per-AP stacked quantities for the composite channel H = G ThetaHat F."""

    F: np.ndarray          # (L_AR, T_t)
    G: np.ndarray          # (R, L_AR)
    theta_hat: np.ndarray  # (L_AR,) diagonal
    H: np.ndarray          # (R, T_t)


def stack(cfg: SystemConfig, realization: ChannelRealization, theta: np.ndarray) -> list:
    """Assemble [StackedChannel per AP] from one realization."""
    th = theta_hat(cfg, theta)
    if not np.allclose(np.abs(theta), 1.0, atol=1e-9):
        raise ContractError("theta entries must be unit modulus")
    batch = ChannelBatch(f0=realization.f0[None], f=[a[None] for a in realization.f],
                         g=[a[None] for a in realization.g])
    F = stacked_f(cfg, batch)[0]
    G = stacked_g(cfg, batch)[0]
    out = []
    for l in range(cfg.L):
        H = G[l] @ (th[:, None] * F[l])
        out.append(StackedChannel(F=F[l], G=G[l], theta_hat=th, H=H))
    return out


def stacked_f(cfg: SystemConfig, batch: ChannelBatch) -> np.ndarray:
    """(S, L, L_AR, T_t): rows = [direct-to-AP-l; RIS 1; ...; RIS K] blocks,
    columns grouped by UE."""
    S = batch.trials
    F = np.empty((S, cfg.L, cfg.L_AR, cfg.T_t), dtype=complex)
    # direct block: depends on the AP
    f0 = np.moveaxis(batch.f0, 1, 2)                   # (S, L, N, R, T)
    f0 = np.moveaxis(f0, 2, 3).reshape(S, cfg.L, cfg.R, cfg.T_t)
    F[:, :, :cfg.R, :] = f0
    # RIS blocks: shared by all APs
    off = cfg.R
    for k in range(cfg.K):
        lk = cfg.L_k[k]
        fk = np.moveaxis(batch.f[k], 1, 2).reshape(S, lk, cfg.T_t)   # (S, L_k, N*T)
        F[:, :, off:off + lk, :] = fk[:, None]
        off += lk
    return F


def stacked_g(cfg: SystemConfig, batch: ChannelBatch) -> np.ndarray:
    """(S, L, R, L_AR): [I_R, G_1l, ..., G_Kl]."""
    S = batch.trials
    G = np.empty((S, cfg.L, cfg.R, cfg.L_AR), dtype=complex)
    G[:, :, :, :cfg.R] = np.eye(cfg.R)
    off = cfg.R
    for k in range(cfg.K):
        lk = cfg.L_k[k]
        G[:, :, :, off:off + lk] = batch.g[k]
        off += lk
    return G


def stacked_h(cfg: SystemConfig, batch: ChannelBatch, theta: np.ndarray) -> np.ndarray:
    """(S, L, R, T_t) composite channels at the given phase configuration."""
    th = theta_hat(cfg, theta)
    F = stacked_f(cfg, batch)
    G = stacked_g(cfg, batch)
    return G @ (th[None, None, :, None] * F)


def mean_stacked(csi: StatisticalCsi):
    """Deterministic stacked means: F_bar (L, L_AR, T_t) and G_bar (L, R, L_AR)."""
    cfg = csi.cfg
    Fbar = np.zeros((cfg.L, cfg.L_AR, cfg.T_t), dtype=complex)
    Gbar = np.zeros((cfg.L, cfg.R, cfg.L_AR), dtype=complex)
    for l in range(cfg.L):
        for n in range(cfg.N):
            Fbar[l, :cfg.R, n * cfg.T:(n + 1) * cfg.T] = csi.f0[(n, l)].mean
        off = cfg.R
        for k in range(cfg.K):
            lk = cfg.L_k[k]
            for n in range(cfg.N):
                Fbar[l, off:off + lk, n * cfg.T:(n + 1) * cfg.T] = csi.f[(n, k)].mean
            Gbar[l, :, off:off + lk] = csi.g[(k, l)].mean
            off += lk
        Gbar[l, :, :cfg.R] = np.eye(cfg.R)
    return Fbar, Gbar


# ---------------------------------------------------------------------------
# one-sided correlation maps
# ---------------------------------------------------------------------------

def _quad_diag(corr: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """diag(corr^H Z corr) without forming the full product."""
    return np.einsum("ji,jk,ki->i", corr.conj(), Z, corr)


def map_left(link: LinkStatistics, D: np.ndarray) -> np.ndarray:
    """E[X~^H D X~] for the link's scattered part X~; D is rx_dim x rx_dim."""
    s = _quad_diag(link.rx_corr, D)
    d = (link.var_profile**2).T @ s * link.entry_var
    return (link.tx_corr * d) @ link.tx_corr.conj().T


def map_right(link: LinkStatistics, D: np.ndarray) -> np.ndarray:
    """E[X~ D X~^H]; D is tx_dim x tx_dim."""
    s = _quad_diag(link.tx_corr, D)
    d = (link.var_profile**2) @ s * link.entry_var
    return (link.rx_corr * d) @ link.rx_corr.conj().T


def _require_hermitian(D, name):
    D = np.asarray(D)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ContractError(f"{name} must be a square matrix")
    scale = max(np.abs(D).max(), 1e-300)
    if np.abs(D - D.conj().T).max() > 1e-8 * scale:
        raise ContractError(f"{name} must be Hermitian")
    return D


def _require_blockdiag(Z, sizes, name):
    Z = _require_hermitian(Z, name)
    scale = max(np.abs(Z).max(), 1e-300)
    off = 0
    mask = np.ones_like(Z, dtype=bool)
    for s in sizes:
        mask[off:off + s, off:off + s] = False
        off += s
    if off != Z.shape[0]:
        raise ContractError(f"{name} has size {Z.shape[0]}, expected {off}")
    if Z[mask].size and np.abs(Z[mask]).max() > 1e-8 * scale:
        raise ContractError(f"{name} must be block-diagonal with blocks {sizes}")
    return Z


def eta(csi: StatisticalCsi, k: int, l: int, D: np.ndarray) -> np.ndarray:
    """E[G~_kl^H D G~_kl] for Hermitian D (R x R) -> L_k x L_k."""
    D = _require_hermitian(D, "D")
    return map_left(csi.g[(k, l)], D)


def eta_tilde(csi: StatisticalCsi, k: int, l: int, D: np.ndarray) -> np.ndarray:
    """E[G~_kl D G~_kl^H] for Hermitian D (L_k x L_k) -> R x R."""
    D = _require_hermitian(D, "D")
    return map_right(csi.g[(k, l)], D)


def zeta0(csi: StatisticalCsi, l: int, Z0: np.ndarray) -> np.ndarray:
    """E[F~_0l^H Z0 F~_0l]: R x R -> T_t x T_t, block-diagonal over UEs."""
    Z0 = _require_hermitian(Z0, "Z0")
    cfg = csi.cfg
    out = np.zeros((cfg.T_t, cfg.T_t), dtype=complex)
    for n in range(cfg.N):
        out[n * cfg.T:(n + 1) * cfg.T, n * cfg.T:(n + 1) * cfg.T] = map_left(csi.f0[(n, l)], Z0)
    return out


def zeta0_tilde(csi: StatisticalCsi, l: int, Zt: np.ndarray) -> np.ndarray:
    """E[F~_0l Zt F~_0l^H]: block-diagonal T_t x T_t -> R x R."""
    cfg = csi.cfg
    Zt = _require_blockdiag(Zt, [cfg.T] * cfg.N, "Zt")
    out = np.zeros((cfg.R, cfg.R), dtype=complex)
    for n in range(cfg.N):
        out += map_right(csi.f0[(n, l)], Zt[n * cfg.T:(n + 1) * cfg.T, n * cfg.T:(n + 1) * cfg.T])
    return out


def zeta_k(csi: StatisticalCsi, k: int, Z: np.ndarray) -> np.ndarray:
    """E[F~_k^H Z F~_k]: L_k x L_k -> T_t x T_t, block-diagonal over UEs."""
    Z = _require_hermitian(Z, "Z")
    cfg = csi.cfg
    out = np.zeros((cfg.T_t, cfg.T_t), dtype=complex)
    for n in range(cfg.N):
        out[n * cfg.T:(n + 1) * cfg.T, n * cfg.T:(n + 1) * cfg.T] = map_left(csi.f[(n, k)], Z)
    return out


def zeta_k_tilde(csi: StatisticalCsi, k: int, Zt: np.ndarray) -> np.ndarray:
    """E[F~_k Zt F~_k^H]: block-diagonal T_t x T_t -> L_k x L_k."""
    cfg = csi.cfg
    Zt = _require_blockdiag(Zt, [cfg.T] * cfg.N, "Zt")
    out = np.zeros((cfg.L_k[k], cfg.L_k[k]), dtype=complex)
    for n in range(cfg.N):
        out += map_right(csi.f[(n, k)], Zt[n * cfg.T:(n + 1) * cfg.T, n * cfg.T:(n + 1) * cfg.T])
    return out
