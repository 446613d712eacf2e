import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from mpgan.data import ClassSplit, PatchFeatureBank  # noqa: E402

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_bank(rng, n_patches, n_classes, max_samples, dim):
    labels, rows = [], []
    for c in range(n_classes):
        for _ in range(rng.integers(1, max_samples + 1)):
            labels.append(c)
            rows.append(rng.normal(size=(n_patches, dim)) * rng.uniform(0.5, 3) + rng.normal(size=dim) * 3)
    order = rng.permutation(len(labels))
    bank = PatchFeatureBank(np.array(labels)[order], np.array(rows)[order])
    split = ClassSplit(tuple(range(n_classes)), (n_classes,), "synthetic")
    return bank, split


@pytest.fixture
def toy_bank():
    """The two-patch 1-D example: patch 1 separates A/B by 10, patch 2 by 1."""
    labels = np.array([0, 0, 1, 1])
    feats = np.array([
        [[0.0], [0.0]],
        [[2.0], [2.0]],
        [[10.0], [1.0]],
        [[12.0], [3.0]],
    ])
    return PatchFeatureBank(labels, feats), ClassSplit((0, 1), (2,), "synthetic")
