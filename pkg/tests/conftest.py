import csv

import numpy as np
import pytest

from collab_assure.data import load_csv


@pytest.fixture(scope="session")
def iris_csv(tmp_path_factory):
    """Iris as a CSV with integer labels, written from scikit-learn's bundled copy."""
    from sklearn.datasets import load_iris

    x, y = load_iris(return_X_y=True)
    path = tmp_path_factory.mktemp("data") / "iris.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sepal_length", "sepal_width", "petal_length", "petal_width", "label"])
        for row, lab in zip(x, y):
            w.writerow([*map(repr, row.tolist()), int(lab)])
    return path


@pytest.fixture(scope="session")
def iris(iris_csv):
    return load_csv(iris_csv, "label", 3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


IRIS_EPSILONS = (0.1, 10.0, 100.0)


@pytest.fixture(scope="session")
def iris_assessment(iris):
    """Ten seeded M1 / M2 / private-M2 runs on Iris; shared by the experiment and acceptance tests."""
    from collab_assure.data import SplitPlan
    from collab_assure.experiments import Hyperparams, run_value_assessment

    return run_value_assessment(iris, SplitPlan(0.30, 0.10, 0.60), IRIS_EPSILONS, Hyperparams(), repetitions=10)


ACCEPTANCE = {}


def record_criterion(number: int, ok: bool, detail: str):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
