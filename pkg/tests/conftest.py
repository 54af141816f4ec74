import sys

import numpy as np
import pytest

from locodyn.body import build_body_model, l_sub_from_height
from locodyn.synth import SynthConfig, synthesize_dataset


@pytest.fixture(scope="session")
def human():
    return build_body_model(l_sub_from_height(1.80), total_body_mass=75.0)


@pytest.fixture(scope="session")
def small_dataset():
    cfg = SynthConfig(n_subjects=4, sequences_per_subject=1, duration=0.6, styles=("walk",), seed=3)
    return synthesize_dataset(cfg)


def random_pose(rng, n=None):
    """Locomotion-range configuration(s) of the 24-DOF model."""
    shape = (24,) if n is None else (n, 24)
    q = rng.uniform(-0.6, 0.6, shape)
    q[..., :3] = rng.uniform(-1, 1, q[..., :3].shape)
    return q


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
