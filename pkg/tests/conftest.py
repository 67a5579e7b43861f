import sys

import numpy as np
import pytest

from frla.models import Architecture, MockViL, TargetModel

# 8x8 input, kernels 4/2/1 -> 1x1 grid; 16x16 input -> 2x2 grid
TINY_LAYERS = ((4, 4, 4), (6, 2, 2), (6, 1, 1))


def tiny_arch(kind="target", image_size=16, num_classes=3, embed_dim=5, **kw):
    scale = kw.pop("logit_scale", 10.0 if kind == "vil" else 1.0)
    return Architecture(kind=kind, image_size=image_size, channels=3, layers=TINY_LAYERS,
                        embed_dim=embed_dim, num_classes=num_classes, logit_scale=scale, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_target():
    return TargetModel(tiny_arch("target"), seed=3)


@pytest.fixture
def tiny_vil():
    return MockViL(tiny_arch("vil"), seed=4)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
