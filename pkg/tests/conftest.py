import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def weighted_sum(out, seed=0):
    """Scalar probe ``sum(out * W)`` with fixed random ``W``; avoids symmetric zero gradients."""
    w = np.random.default_rng([seed, 977]).standard_normal(out.shape)
    return (out * w).sum()


def tiny_run_doc(**overrides) -> dict:
    """A complete run config small enough to pretrain in about a second."""
    doc = {
        "dataset": {"kind": "synthetic", "num_classes": 4, "per_class": 16, "test_per_class": 8,
                    "image_size": 16},
        "model": {
            "base": {"image_size": 16, "patch_size": 4, "embed_width": 16, "depth": 1, "num_heads": 2},
            "heads": [{"id": "conv", "mixer": "depthwise_conv", "depth": 2, "width": 16, "kernel_size": 3,
                       "remove_first_shortcut": True}],
            "supervision": "heterogeneous",
        },
        "objective": {"out_dim": 16, "hidden_dim": 32, "bottleneck_dim": 8},
        "optimizer": {"epochs": 1, "batch_size": 16},
        "augment": {"global_size": 16, "local_count": 1, "local_size": 8},
        "seed": 3,
    }
    for key, value in overrides.items():
        doc[key] = {**doc.get(key, {}), **value} if isinstance(value, dict) else value
    return doc


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
