import numpy as np
import pytest

from tabmeta.data import CLASSIFICATION, REGRESSION, EncodedDataset, SplitIndices
from tabmeta.metric import MetricSpec


def random_dataset(rng, n=60, d=4, n_classes=3, task=CLASSIFICATION, integer_grid=False):
    """Encoded dataset with every class present; ``integer_grid`` forces distance ties."""
    if integer_grid:
        X = rng.integers(-2, 3, size=(n, d)).astype(np.float64)
    else:
        X = rng.normal(size=(n, d))
    if task == CLASSIFICATION:
        Y = np.concatenate([np.arange(n_classes), rng.integers(0, n_classes, n - n_classes)])
        rng.shuffle(Y)
        return EncodedDataset(X, Y.astype(np.int64), CLASSIFICATION, n_classes)
    return EncodedDataset(X, rng.normal(size=n), REGRESSION, 1)


def random_spec(rng, kind, d):
    w = rng.random(d) + 0.05
    return MetricSpec(kind, w / w.sum())


def whole_split(n):
    rows = np.arange(n)
    return SplitIndices(rows, rows[:0], rows[:0])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record_acceptance(criterion, passed, detail):
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"{criterion} {'PASS' if passed else 'FAIL'}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[criterion]
        terminalreporter.write_line(f"{criterion} {'PASS' if passed else 'FAIL'}: {detail}")
