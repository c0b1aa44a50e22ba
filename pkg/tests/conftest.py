import csv

import numpy as np
import pytest

from protoforest.data import Dataset

ACCEPTANCE = []


def record_acceptance(criterion, passed, detail=""):
    ACCEPTANCE.append((criterion, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        status = {True: "PASS", False: "FAIL", None: "DECLARED"}[passed]
        terminalreporter.write_line(f"[{status}] criterion {criterion}: {detail}")


@pytest.fixture(scope="session")
def wdbc_csv(tmp_path_factory):
    """The Wisconsin diagnostic breast cancer table written as a plain CSV."""
    from sklearn.datasets import load_breast_cancer

    raw = load_breast_cancer()
    path = tmp_path_factory.mktemp("data") / "wdbc.csv"
    names = [n.replace(" ", "_") for n in raw.feature_names]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([*names, "diagnosis"])
        for row, target in zip(raw.data, raw.target):
            writer.writerow([repr(float(v)) for v in row] + ["M" if target == 0 else "B"])
    return path


@pytest.fixture(scope="session")
def wdbc(wdbc_csv):
    from protoforest.data import ingest_csv

    return ingest_csv(wdbc_csv, "diagnosis")


@pytest.fixture
def blobs():
    """Three well separated Gaussian blobs in 4-d, 20 points each."""
    rng = np.random.default_rng(7)
    centers = np.array([[0, 0, 0, 0], [4, 4, 0, 0], [0, 4, 4, 4]], dtype=float)
    X = np.vstack([c + rng.normal(scale=0.7, size=(20, 4)) for c in centers])
    y = np.repeat([0, 1, 2], 20)
    return Dataset(X, y, class_names=["a", "b", "c"])


@pytest.fixture
def small_csv(tmp_path):
    """Mixed numeric/categorical CSV with three classes."""
    rng = np.random.default_rng(3)
    path = tmp_path / "small.csv"
    colours = ["red", "green", "blue"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["size", "colour", "weight", "kind"])
        for i in range(60):
            kind = i % 3
            writer.writerow([
                f"{kind * 2 + rng.normal():.4f}",
                colours[(kind + (i % 5 == 0)) % 3],
                f"{rng.normal() + kind:.4f}",
                ["apple", "pear", "plum"][kind],
            ])
    return path
