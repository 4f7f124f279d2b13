import numpy as np
import pytest
import torch

from longidis.data import PhantomConfig, synthesize_phantoms
from longidis.model import ModelSpec

# one PASS/FAIL line per acceptance criterion, echoed after the test summary
CRITERION_LINES = []


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERION_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_model_spec():
    # smallest extent the encoder accepts: 8 is a power of two
    return ModelSpec(
        input_shape=(8, 8, 8),
        latent_dim=16,
        dynamic_dim=4,
        encoder_channels=(2, 2, 2, 2),
        decoder_channels=(2, 2, 2, 2),
    )


@pytest.fixture(scope="session")
def bench_model_spec():
    return ModelSpec(
        input_shape=(16, 16, 16),
        latent_dim=64,
        dynamic_dim=4,
        encoder_channels=(4, 8, 16, 32),
        decoder_channels=(32, 16, 8, 4),
    )


@pytest.fixture(scope="session")
def small_phantom():
    cfg = PhantomConfig(n_subjects=8, visits_per_subject=3, shape=(16, 16, 16),
                        noise_std=0.01, rng_seed=3)
    return synthesize_phantoms(cfg)


def rand_volume(shape=(8, 8, 8), seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=shape)


def rand_batch(n, shape=(8, 8, 8), seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 1) + shape)
    return torch.tensor(x, dtype=torch.float32)


@pytest.fixture(scope="session")
def small_volumes8(small_phantom):
    # 8^3 views of the 16^3 phantom volumes, z-scored once for reuse
    from longidis.training import prepare_volumes

    return prepare_volumes(
        {k: v[::2, ::2, ::2] for k, v in small_phantom.volumes.items()}
    )
