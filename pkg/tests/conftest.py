import functools

import numpy as np
import pytest
from hypothesis import settings

from vpl.synth import SynthConfig, generate
from vpl.training import TrainConfig, train

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

# the four arms compared by the acceptance suite
ARMS = {
    "baseline": dict(lambda_c=0.0, lambda_b=0.0, lambda_vib=0.0),
    "full": {},
    "vib": dict(lambda_c=0.0, lambda_b=0.0),
    "c": dict(lambda_b=0.0, lambda_vib=0.0),
}

# desk-scale rate used only where a test needs a pretrained model that reads the image
FAST_PRETRAIN = dict(lr_base=2.5e-4, lr_cap=1e-3, t0=12, t1=12, t2=12, lambda_c=0.0, lambda_b=0.0)


def numgrad(f, x, eps=1e-6):
    """Plain central differences, written independently of the library."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        fp = f(x)
        x[idx] = old - eps
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


@functools.lru_cache(maxsize=None)
def default_dataset(seed: int = 0):
    return generate(SynthConfig(seed=seed))


@functools.lru_cache(maxsize=None)
def arm_run(seed: int, arm: str):
    ds = default_dataset(seed)
    return train(TrainConfig(seed=seed, **ARMS[arm]), ds)


@functools.lru_cache(maxsize=None)
def fast_pretrained(seed: int = 0):
    return train(TrainConfig(seed=seed, **FAST_PRETRAIN), default_dataset(seed))


@pytest.fixture(scope="session")
def small_ds():
    return generate(SynthConfig(train_size=400, test_size=160, seed=3))


@pytest.fixture(scope="session")
def small_run(small_ds):
    cfg = TrainConfig(t0=2, t1=3, t2=5, lr_base=2.5e-4, lr_cap=1e-3, seed=1)
    return train(cfg, small_ds)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
