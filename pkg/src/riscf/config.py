"""System configuration for one experiment instance.

All powers are entered in dBm and converted to linear watts once, at
construction time; every downstream computation works in linear units.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
import numpy as np


class ConfigError(ValueError):
    """Invalid configuration value; message carries the offending field."""


def dbm_to_watt(x_dbm: float) -> float:
    return 10.0 ** ((x_dbm - 30.0) / 10.0)


def watt_to_dbm(x_w: float) -> float:
    return 10.0 * np.log10(x_w) + 30.0


def upa_grid(count: int) -> tuple[int, int]:
    """Near-square (horizontal, vertical) factorization of an antenna count."""
    nv = int(np.sqrt(count))
    while count % nv:
        nv -= 1
    return count // nv, nv


@dataclass
class SystemConfig:
    """Dimensions, powers, geometry and algorithm budgets for one network.

    L APs with R antennas each, N UEs with T antennas each, K RIS panels
    with L_k reflecting elements. UPA layouts default to near-square
    factorizations of the antenna counts.
    """

    L: int = 2
    N: int = 2
    K: int = 1
    R: int = 4
    T: int = 2
    L_k: tuple = (8,)
    p_dbm: float = 23.0          # per-UE power budget (scalar or length-N sequence)
    sigma2_dbm: float = -94.0
    mu: tuple | None = None      # UE priority weights, default all-ones

    area_side: float = 1000.0    # m
    ris_radius: float = 10.0     # m, RIS placement disc around its anchor UE
    alpha_au: float = 3.8        # path loss exponents
    alpha_ar: float = 2.0
    alpha_ru: float = 2.2
    kappa_au: float = 3.0        # Rician factors (linear)
    kappa_ar: float = 10.0
    kappa_ru: float = 10.0

    ap_grid: tuple | None = None     # (nh, nv) with nh*nv == R
    ue_grid: tuple | None = None
    ris_grid: tuple | None = None    # list of (nh, nv), one per RIS
    delta: float = 0.5               # normalized antenna spacing

    seed: int = 0
    mc_trials: int = 2000
    ao_iters: int = 10

    def __post_init__(self):
        self.L_k = tuple(int(x) for x in np.atleast_1d(self.L_k))
        if self.ap_grid is None:
            self.ap_grid = upa_grid(self.R)
        if self.ue_grid is None:
            self.ue_grid = upa_grid(self.T)
        if self.ris_grid is None:
            self.ris_grid = tuple(upa_grid(lk) for lk in self.L_k)
        else:
            self.ris_grid = tuple(tuple(g) for g in self.ris_grid)
        if self.mu is None:
            self.mu = tuple(1.0 for _ in range(self.N))
        else:
            self.mu = tuple(float(m) for m in np.atleast_1d(self.mu))
        self.validate()

    # -- derived totals --------------------------------------------------
    @property
    def T_t(self) -> int:
        return self.N * self.T

    @property
    def L_R(self) -> int:
        return int(sum(self.L_k))

    @property
    def L_AR(self) -> int:
        return self.R + self.L_R

    @property
    def p(self) -> np.ndarray:
        """Per-UE power budgets in watts."""
        p = np.broadcast_to(np.atleast_1d(self.p_dbm).astype(float), (self.N,))
        return np.array([dbm_to_watt(x) for x in p])

    @property
    def sigma2(self) -> float:
        """Noise power in watts."""
        return dbm_to_watt(self.sigma2_dbm)

    @property
    def mu_arr(self) -> np.ndarray:
        return np.asarray(self.mu, dtype=float)

    def validate(self):
        for name in ("L", "N", "K", "R", "T"):
            if getattr(self, name) < (0 if name == "K" else 1):
                raise ConfigError(f"{name} must be >= 1 (K >= 0), got {getattr(self, name)}")
        if len(self.L_k) != self.K:
            raise ConfigError(f"L_k has {len(self.L_k)} entries, expected K={self.K}")
        if any(lk < 1 for lk in self.L_k):
            raise ConfigError("all L_k must be >= 1")
        if self.ap_grid[0] * self.ap_grid[1] != self.R:
            raise ConfigError(f"ap_grid {self.ap_grid} does not factor R={self.R}")
        if self.ue_grid[0] * self.ue_grid[1] != self.T:
            raise ConfigError(f"ue_grid {self.ue_grid} does not factor T={self.T}")
        for k, (g, lk) in enumerate(zip(self.ris_grid, self.L_k)):
            if g[0] * g[1] != lk:
                raise ConfigError(f"ris_grid[{k}] {g} does not factor L_k={lk}")
        if np.any(self.p <= 0):
            raise ConfigError("per-UE power must be positive")
        if self.sigma2 <= 0:
            raise ConfigError("noise power must be positive")
        if len(self.mu) != self.N:
            raise ConfigError(f"mu has {len(self.mu)} entries, expected N={self.N}")
        if any(m < 0 for m in self.mu) or not any(m > 0 for m in self.mu):
            raise ConfigError("mu must be nonnegative with at least one positive entry")
        if min(self.kappa_au, self.kappa_ar, self.kappa_ru) < 0:
            raise ConfigError("Rician factors must be nonnegative")
        if self.area_side <= 0 or self.ris_radius < 0:
            raise ConfigError("area_side must be positive, ris_radius nonnegative")
        if self.mc_trials < 1 or self.ao_iters < 1:
            raise ConfigError("mc_trials and ao_iters must be >= 1")

    def replace(self, **kw) -> "SystemConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return SystemConfig(**d)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = list(list(x) if isinstance(x, tuple) else x for x in v)
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SystemConfig":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown system config fields: {sorted(bad)}")
        return cls(**d)
