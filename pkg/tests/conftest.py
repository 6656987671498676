"""Shared fixtures: a small synthetic dataset and a tiny model configuration."""

import logging

import numpy as np
import pytest

from rsm_codg.dataio import synthesize
from rsm_codg.models import SynthSpec
from rsm_codg.network import gradcheck_config


@pytest.fixture(autouse=True)
def restore_logging():
    """CLI tests install handlers bound to the captured stdout; drop them afterwards."""
    root = logging.getLogger()
    root_handlers = list(root.handlers)
    yield
    package = logging.getLogger("rsm_codg")
    for handler in list(package.handlers):
        package.removeHandler(handler)
    package.setLevel(logging.NOTSET)
    package.propagate = True
    for handler in list(root.handlers):
        if handler not in root_handlers:
            root.removeHandler(handler)


@pytest.fixture
def small_spec():
    return SynthSpec(subjects=3, classes=3, per_subject=12, window=4, snr=4.0, shift=0.25, seed=1)


@pytest.fixture
def small_dataset(small_spec):
    return synthesize(small_spec)


@pytest.fixture
def tiny_config():
    return gradcheck_config(epochs=2, batch_size=4, patience=5, val_fraction=0.25, lr=1e-3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
