import numpy as np
import pytest

from riscf.config import SystemConfig
from riscf.scenario import make_scenario


@pytest.fixture(scope="session")
def small_cfg():
    return SystemConfig(L=2, N=2, K=1, R=4, T=2, L_k=(8,), seed=3,
                        mc_trials=2000, ao_iters=10)


@pytest.fixture(scope="session")
def small_csi(small_cfg):
    return make_scenario(small_cfg)


@pytest.fixture(scope="session")
def tiny_cfg():
    return SystemConfig(L=2, N=2, K=1, R=3, T=2, L_k=(4,), seed=5,
                        mc_trials=500, ao_iters=5)


@pytest.fixture(scope="session")
def tiny_csi(tiny_cfg):
    return make_scenario(tiny_cfg)


def zero_profiles(csi):
    """Deterministic copy: all variance profiles set to zero."""
    import copy
    out = copy.deepcopy(csi)
    for link in out.all_links():
        link.var_profile = np.zeros_like(link.var_profile)
    return out


def zero_channels(csi):
    """Copy with zero means and zero profiles (identically zero channels)."""
    out = zero_profiles(csi)
    for link in out.all_links():
        link.mean = np.zeros_like(link.mean)
    return out


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
