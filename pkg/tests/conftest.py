import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=60, deadline=None,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FD_EPS = 1e-3
FD_REL_TOL = 1e-4
GRAD_SEEDS = range(20)


def numeric_grad(f, x, eps=FD_EPS, coords=None):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size) if coords is None else coords:
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return grad


def rel_error(analytic, numeric):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def away_from_zero(x, gap=0.05):
    """Push entries out of (-gap, gap) so a ReLU kink is never within FD reach."""
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap + x, x)


def distinct_values(rng, shape, gap=0.01):
    """Random values whose pairwise gaps all exceed ``gap`` (no max-pool ties)."""
    n = int(np.prod(shape))
    vals = np.arange(n) * gap * 1.5
    return rng.permutation(vals).reshape(shape) - vals.mean()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth5(tmp_path_factory):
    """The 5-class, 100-per-class synthetic dataset (seed 7)."""
    from resinsort.synth import synth_generate
    out = tmp_path_factory.mktemp("synth5")
    return synth_generate(5, 100, 7, out)
