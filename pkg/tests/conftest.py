"""Shared fixtures and the acceptance-criteria summary hook."""

from contextlib import contextmanager

import numpy as np
import pytest

from manifuse import (
    DenoiserTrainConfig,
    TinyDenoiser,
    add_awgn,
    build_branch_stack,
    clip_unit,
    extract_patches,
    load_toy_dataset,
    train_denoiser,
)

# Populated by tests/test_acceptance.py via record_criterion.  Keyed by
# criterion number; each value is (label, passed).
ACCEPTANCE_RESULTS: dict = {}


@contextmanager
def record_criterion(number: int, label: str):
    """Record a pass/fail outcome for one acceptance criterion.

    The body runs normally; any exception marks the criterion FAIL and
    propagates so pytest still reports the test as failed.
    """
    try:
        yield
    except BaseException:
        ACCEPTANCE_RESULTS[number] = (label, False)
        raise
    ACCEPTANCE_RESULTS[number] = (label, True)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        label, passed = ACCEPTANCE_RESULTS[number]
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {label}: {verdict}")


@pytest.fixture(scope="session")
def toy_set():
    """The bundled 24-image toy dataset as (name, image) pairs."""
    return load_toy_dataset()


@pytest.fixture(scope="session")
def toy_images(toy_set):
    return [img for _, img in toy_set]


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture()
def criterion():
    """The acceptance-criterion recorder, exposed to test modules."""
    return record_criterion


@pytest.fixture(scope="session")
def toy_patches(toy_images):
    """Every 32x32 tile of every toy image, stacked."""
    tiles = []
    for img in toy_images:
        tiles.extend(extract_patches(img, 32, 32).patches)
    return np.array(tiles)


@pytest.fixture(scope="session")
def trained_denoiser(toy_patches):
    """A blind-noise residual CNN trained on the toy patches.

    Expensive (about ten seconds), so trained once per session and shared
    by the denoiser unit tests and the end-to-end acceptance runs.
    """
    model = TinyDenoiser(depth=7, width=24, rng=np.random.default_rng([42, 0]))
    config = DenoiserTrainConfig(epochs=12, batch_size=8, seed=42)
    history = train_denoiser(model, toy_patches, config)
    return model, history


@pytest.fixture(scope="session")
def sigma25_stacks(toy_images, trained_denoiser):
    """13-branch stacks at noise level 25 for every toy image, paired with
    the clean originals."""
    model, _ = trained_denoiser
    samples = []
    for i, clean in enumerate(toy_images):
        noisy = clip_unit(add_awgn(clean, 25.0, seed=777, index=i))
        samples.append((build_branch_stack(noisy, model), clean))
    return samples
