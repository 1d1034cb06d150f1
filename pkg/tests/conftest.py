import os

# single-threaded BLAS: faster for this package's small matmuls, and lets
# the acceptance sweep parallelize across processes without oversubscription
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from diffopt.kinematics import build_default_skeleton
from diffopt.synthdata import build_corpus
from diffopt.diffusion import make_schedule, train_denoiser


@pytest.fixture(scope="session")
def skel():
    return build_default_skeleton()


@pytest.fixture(scope="session")
def gait_corpus(skel):
    return build_corpus(200, skel, seed=0)


@pytest.fixture(scope="session")
def trained_prior(gait_corpus):
    """Default-budget denoiser shared by the diffusion and acceptance tests.

    Returns (denoiser, schedule, loss curve, training seconds).
    """
    import time

    from diffopt.diffusion import DEFAULT_EPOCHS

    sched = make_schedule(100)
    t0 = time.perf_counter()
    den, curve = train_denoiser(gait_corpus, sched, epochs=DEFAULT_EPOCHS, seed=0)
    return den, sched, curve, time.perf_counter() - t0


@pytest.fixture(scope="session")
def quick_prior(gait_corpus):
    """Tiny low-budget denoiser (16-frame window) for mechanics tests."""
    sched = make_schedule(100)
    windows = np.stack([w.values[:16] for w in gait_corpus[:30]])
    den, _ = train_denoiser(windows, sched, epochs=3, seed=0, width=64, blocks=2)
    return den, sched


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def fd_gradient(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g
