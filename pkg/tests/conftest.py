import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gengmm.core_types import RunConfig
from gengmm.gmm_density import GmmBank
from gengmm.synth_bench import ScenarioSpec

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def random_bank(rng, C=3, M=2, D=6, spread=0.05):
    """A fully initialized bank with random unit means and small variances."""
    bank = GmmBank(C, M, D, capacity=64)
    bank.means = unit_rows(rng, C * M, D).reshape(C, M, D)
    bank.variances = rng.uniform(0.5, 1.5, size=(C, M, D)) * spread
    w = rng.uniform(0.2, 1.0, size=(C, M))
    bank.weights = w / w.sum(axis=1, keepdims=True)
    bank.initialized[:] = True
    return bank


def gauss_pdf(x, mu, var):
    """Naive product of 1-D Gaussian densities (no log space)."""
    x, mu, var = (np.asarray(a, dtype=np.float64) for a in (x, mu, var))
    return float(np.prod(np.exp(-((x - mu) ** 2) / (2 * var)) / np.sqrt(2 * np.pi * var)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec():
    return ScenarioSpec(n_source=12, n_target=12, n_heldout=4, H=16, W=16, regions_per_scene=4,
                        label_fraction=0.5, seed=5)


@pytest.fixture
def tiny_cfg():
    return RunConfig(iterations=12, warmup_iters=4, eval_interval=4, bank_capacity=256,
                     labeled_batch=128, pixels_per_scene=64, hidden_dim=32, D=16, seed=5)
