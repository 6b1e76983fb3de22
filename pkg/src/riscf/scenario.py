"""Network geometry and statistical CSI generation.

Produces, for every AP-UE, UE-RIS and RIS-AP link, the statistical
description used everywhere else: a LoS mean matrix, receive/transmit
correlation matrices, an entrywise variance profile, a large-scale gain
and a Rician factor. The mean and the scattered part are normalized so
that for a link with receive dimension R_rx,

    ||mean||_F^2            = R_rx * beta * kappa / (kappa + 1)
    Tr(full scattered corr) = R_rx * beta / (kappa + 1)

which splits the link energy R_rx*beta between LoS and NLoS in the ratio
kappa : 1.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .config import SystemConfig

# pathloss is clamped below this distance to avoid unbounded near-field gains
D_MIN = 1.0

# eigenvalue decay ratio of the randomly drawn correlation matrices
CORR_DECAY = 0.7


@dataclass
class NetworkLayout:
    ap_xy: np.ndarray       # (L, 2)
    ue_xy: np.ndarray       # (N, 2)
    ris_xy: np.ndarray      # (K, 2)
    ris_anchor: np.ndarray  # (K,) index of the UE each RIS is deployed next to


@dataclass
class LinkStatistics:
    """Statistical CSI of a single MIMO link (receive dim x transmit dim)."""

    mean: np.ndarray         # LoS component
    rx_corr: np.ndarray      # receive-side correlation
    tx_corr: np.ndarray      # transmit-side correlation
    var_profile: np.ndarray  # nonnegative entrywise std profile of the iid core
    beta: float              # large-scale gain (linear)
    kappa: float             # Rician factor (linear)

    @property
    def rx_dim(self) -> int:
        return self.mean.shape[0]

    @property
    def tx_dim(self) -> int:
        return self.mean.shape[1]

    @property
    def entry_var(self) -> float:
        """Variance of each iid Gaussian core entry (1/transmit-dimension)."""
        return 1.0 / self.tx_dim

    def scattered_energy(self) -> float:
        """Trace of the full correlation of the scattered part."""
        rr = np.real(np.einsum("ji,ji->i", self.rx_corr.conj(), self.rx_corr))
        tt = np.real(np.einsum("ji,ji->i", self.tx_corr.conj(), self.tx_corr))
        return float(self.entry_var * np.einsum("i,ij,j->", rr, self.var_profile**2, tt))

    def check(self, rtol: float = 1e-10):
        """Verify the Rician energy-split normalization identities."""
        target_los = self.rx_dim * self.beta * self.kappa / (self.kappa + 1.0)
        target_nlos = self.rx_dim * self.beta / (self.kappa + 1.0)
        los = np.linalg.norm(self.mean) ** 2
        nlos = self.scattered_energy()
        scale = self.rx_dim * self.beta
        if abs(los - target_los) > rtol * scale or abs(nlos - target_nlos) > rtol * scale:
            raise AssertionError(
                f"link normalization violated: LoS {los} vs {target_los}, "
                f"NLoS {nlos} vs {target_nlos}")
        if np.any(self.var_profile < 0):
            raise AssertionError("variance profile has negative entries")


@dataclass
class StatisticalCsi:
    """Full statistical CSI set for one network draw."""

    cfg: SystemConfig
    layout: NetworkLayout
    f0: dict      # (n, l) -> LinkStatistics, R x T
    f: dict       # (n, k) -> LinkStatistics, L_k x T
    g: dict       # (k, l) -> LinkStatistics, R x L_k

    def all_links(self):
        yield from self.f0.values()
        yield from self.f.values()
        yield from self.g.values()


def generate_layout(cfg: SystemConfig, rng: np.random.Generator) -> NetworkLayout:
    """Drop APs/UEs uniformly in the square; RIS k near UE (k mod N)."""
    ap_xy = rng.uniform(0.0, cfg.area_side, size=(cfg.L, 2))
    ue_xy = rng.uniform(0.0, cfg.area_side, size=(cfg.N, 2))
    anchor = np.arange(cfg.K) % cfg.N
    radius = cfg.ris_radius * np.sqrt(rng.uniform(0.0, 1.0, size=cfg.K))
    angle = rng.uniform(0.0, 2 * np.pi, size=cfg.K)
    ris_xy = ue_xy[anchor] + radius[:, None] * np.stack([np.cos(angle), np.sin(angle)], axis=1)
    return NetworkLayout(ap_xy=ap_xy, ue_xy=ue_xy, ris_xy=ris_xy, ris_anchor=anchor)


def pathloss_db(d: float, alpha: float) -> float:
    """Large-scale gain in dB at distance d meters, exponent alpha."""
    if d < D_MIN:
        warnings.warn(f"distance {d:.3g} m below {D_MIN} m, clamped", stacklevel=2)
        d = D_MIN
    return -30.0 - 10.0 * alpha * np.log10(d)


def steering_vector(theta: float, phi: float, nh: int, nv: int, delta: float) -> np.ndarray:
    """UPA response: horizontal (azimuth theta) kron vertical (elevation phi)."""
    ah = np.exp(2j * np.pi * delta * np.arange(nh) * np.sin(phi) * np.sin(theta))
    av = np.exp(2j * np.pi * delta * np.arange(nv) * np.cos(phi))
    return np.kron(ah, av)


def build_los_mean(rx_angles, tx_angles, rx_grid, tx_grid, delta, beta, kappa) -> np.ndarray:
    """Rank-one LoS matrix a_r a_t^H scaled to the Rician norm target."""
    a_r = steering_vector(rx_angles[0], rx_angles[1], rx_grid[0], rx_grid[1], delta)
    a_t = steering_vector(tx_angles[0], tx_angles[1], tx_grid[0], tx_grid[1], delta)
    mean = np.outer(a_r, a_t.conj())
    target = a_r.size * beta * kappa / (kappa + 1.0)
    if target == 0.0:
        return np.zeros_like(mean)
    return mean * np.sqrt(target / np.linalg.norm(mean) ** 2)


def random_correlation(rng: np.random.Generator, dim: int) -> np.ndarray:
    """Full-rank Hermitian correlation with geometric eigenvalue decay,
    scaled to unit mean eigenvalue."""
    a = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    q, _ = np.linalg.qr(a)
    lam = CORR_DECAY ** np.arange(dim)
    lam = lam / lam.mean()
    return (q * lam) @ q.conj().T


def _make_link(rng, rx_grid, tx_grid, rx_pos, tx_pos, alpha, kappa, delta) -> LinkStatistics:
    rx_dim = rx_grid[0] * rx_grid[1]
    tx_dim = tx_grid[0] * tx_grid[1]
    d = float(np.linalg.norm(np.asarray(rx_pos) - np.asarray(tx_pos)))
    beta = 10.0 ** (pathloss_db(max(d, D_MIN), alpha) / 10.0)

    dxy = np.asarray(rx_pos) - np.asarray(tx_pos)
    az_rx = float(np.arctan2(dxy[1], dxy[0]))        # AoA seen from the receiver
    az_tx = float(np.arctan2(-dxy[1], -dxy[0]))      # AoD seen from the transmitter
    el_rx = rng.uniform(np.pi / 3, 2 * np.pi / 3)    # planar layout: elevations drawn once
    el_tx = rng.uniform(np.pi / 3, 2 * np.pi / 3)
    mean = build_los_mean((az_rx, el_rx), (az_tx, el_tx), rx_grid, tx_grid, delta, beta, kappa)

    rx_corr = random_correlation(rng, rx_dim)
    tx_corr = random_correlation(rng, tx_dim)
    prof = rng.uniform(0.1, 1.0, size=(rx_dim, tx_dim))
    rr = np.real(np.einsum("ji,ji->i", rx_corr.conj(), rx_corr))
    tt = np.real(np.einsum("ji,ji->i", tx_corr.conj(), tx_corr))
    cur = np.einsum("i,ij,j->", rr, prof**2, tt) / tx_dim
    target = rx_dim * beta / (kappa + 1.0)
    prof = prof * np.sqrt(target / cur)
    return LinkStatistics(mean=mean, rx_corr=rx_corr, tx_corr=tx_corr,
                          var_profile=prof, beta=beta, kappa=kappa)


def generate_statistics(cfg: SystemConfig, layout: NetworkLayout,
                        rng: np.random.Generator) -> StatisticalCsi:
    """Statistical CSI for every link, deterministic in the rng state."""
    f0 = {}
    for n in range(cfg.N):
        for l in range(cfg.L):
            f0[(n, l)] = _make_link(rng, cfg.ap_grid, cfg.ue_grid,
                                    layout.ap_xy[l], layout.ue_xy[n],
                                    cfg.alpha_au, cfg.kappa_au, cfg.delta)
    f = {}
    for n in range(cfg.N):
        for k in range(cfg.K):
            f[(n, k)] = _make_link(rng, cfg.ris_grid[k], cfg.ue_grid,
                                   layout.ris_xy[k], layout.ue_xy[n],
                                   cfg.alpha_ru, cfg.kappa_ru, cfg.delta)
    g = {}
    for k in range(cfg.K):
        for l in range(cfg.L):
            g[(k, l)] = _make_link(rng, cfg.ap_grid, cfg.ris_grid[k],
                                   layout.ap_xy[l], layout.ris_xy[k],
                                   cfg.alpha_ar, cfg.kappa_ar, cfg.delta)
    return StatisticalCsi(cfg=cfg, layout=layout, f0=f0, f=f, g=g)


def make_scenario(cfg: SystemConfig, seed=None) -> StatisticalCsi:
    """Layout + statistics from the config seed (or an explicit override)."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    layout = generate_layout(cfg, rng)
    return generate_statistics(cfg, layout, rng)
