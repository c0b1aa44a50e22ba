"""Exit criteria. Each test records one PASS/FAIL line shown in the pytest summary."""
import time

import numpy as np
import pytest

from conftest import record_acceptance
from oracles import brute_force_greedy, brute_force_step, exact_distances, naive_counts, naive_distance, random_leaves
from protoforest.cli import main
from protoforest.data import Dataset
from protoforest.evaluation import ConfusionMatrix, balanced_accuracy, stratified_split, sweep, weighted_accuracy
from protoforest.forest import LeafAssignment, train_forest
from protoforest.proximity import build_distance_matrix, cooccurrence_counts
from protoforest.selection import STOP_EXHAUSTED, greedy_step, objective_f, select_a_pete, select_sm_a, select_sm_wa

REFERENCE_FOREST_WDBC = 0.93
REFERENCE_A_PETE_WDBC = 0.92
REFERENCE_SM_A_WDBC = 0.92
SURROGATE_TOL = 0.05
FOREST_FLOOR = 0.90
SEED = 42


def random_forest_leaves(rng, max_n, max_t):
    n = int(rng.integers(5, max_n + 1))
    t = int(rng.integers(1, max_t + 1))
    p = int(rng.integers(1, 6))
    X = rng.normal(size=(n, p))
    y = rng.integers(0, 2, size=n)
    y[:2] = [0, 1]
    model = train_forest(Dataset(X, y), t, int(rng.integers(1, p + 1)), seed=int(rng.integers(2**32)))
    return model.leaf_matrix(X)


def test_1_distance_oracle_equivalence():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    ok = True
    for _ in range(50):
        leaves = random_forest_leaves(rng, 40, 20)
        counts = cooccurrence_counts(leaves)
        ok &= bool(np.array_equal(counts, naive_counts(leaves.matrix)))
        diff = np.abs(build_distance_matrix(leaves).values - naive_distance(leaves.matrix)).max()
        worst = max(worst, float(diff))
    elapsed = time.perf_counter() - start
    passed = ok and worst <= 1e-15 and elapsed < 5.0
    record_acceptance(1, passed, f"counts equal={ok}, max |d - naive|={worst:.1e}, {elapsed:.2f}s for 50 forests")
    assert ok and worst <= 1e-15
    assert elapsed < 5.0


def random_selection_problem(rng, max_n):
    n = int(rng.integers(4, max_n + 1))
    t = int(rng.integers(1, 13))
    matrix, tau = random_leaves(rng, n, t, max_leaves=4)
    labels = rng.integers(0, int(rng.integers(2, 4)), size=n)
    return build_distance_matrix(LeafAssignment(matrix, tau)), labels, exact_distances(matrix)


def test_2_greedy_oracle_equivalence():
    rng = np.random.default_rng(2)
    steps = mismatches = 0
    worst = 0.0
    for _ in range(25):
        dm, labels, exact = random_selection_problem(rng, 25)
        P = []
        while len(P) < dm.n:
            x, gain = greedy_step(dm, labels, P)
            ox, ogain = brute_force_step(exact, list(labels), P)
            mismatches += x != ox
            worst = max(worst, abs(gain - float(ogain)))
            steps += 1
            P.append(ox)
        trace = select_sm_a(dm, labels, dm.n)
        oracle, gains, objectives = brute_force_greedy(exact, list(labels), dm.n)
        mismatches += trace.indices != oracle
        worst = max(worst, max(abs(s.reduction - float(g)) for s, g in zip(trace.trace, gains)))
        worst = max(worst, max(abs(s.objective - float(f)) for s, f in zip(trace.trace, objectives)))
    passed = mismatches == 0 and worst <= 1e-12
    record_acceptance(2, passed, f"{steps} greedy steps + 25 SM-A traces, {mismatches} index mismatches, "
                                 f"max value error {worst:.1e}")
    assert mismatches == 0
    assert worst <= 1e-12


def test_3_pseudometric_suite():
    rng = np.random.default_rng(3)
    failures = []
    triples = 0
    for case in range(20):
        n = int(rng.integers(3, 61))
        t = int(rng.integers(1, 30))
        leaves = LeafAssignment(*random_leaves(rng, n, t))
        D = build_distance_matrix(leaves).values
        if not np.array_equal(D, D.T):
            failures.append((case, "symmetry"))
        if not np.all(np.diag(D) == 0.0):
            failures.append((case, "diagonal"))
        if D.min() < 0.0 or D.max() > 1.0:
            failures.append((case, "bounds"))
        # triangle inequality on the exact values k/t the doubles encode
        disagree = np.rint(D * t).astype(np.int64)
        if not np.allclose(disagree / t, D, rtol=0, atol=1e-15):
            failures.append((case, "not a multiple of 1/t"))
        if np.any(disagree[:, None, :] > disagree[:, :, None] + disagree[None, :, :]):
            failures.append((case, "triangle"))
        triples += n ** 3
    record_acceptance(3, not failures, f"20 matrices, {triples} triples enumerated, failures={failures}")
    assert not failures


def test_4_submodular_gains_non_increasing():
    rng = np.random.default_rng(4)
    bad = 0
    runs = [select_sm_a, select_sm_wa, lambda d, y, k: select_a_pete(d, y, 0.01, k)]
    for r in range(50):
        dm, labels, _ = random_selection_problem(rng, 30)
        res = runs[r % 3](dm, labels, dm.n)
        gains = [s.reduction for s in res.trace]
        objectives = [objective_f(dm, labels, [])] + [s.objective for s in res.trace]
        bad += any(b > a + 1e-12 for a, b in zip(gains, gains[1:]))
        bad += any(b > a + 1e-12 for a, b in zip(objectives, objectives[1:]))
        bad += min(gains) < 0.0
    record_acceptance(4, bad == 0, f"50 runs (SM-A/SM-WA/A-PETE), {bad} monotonicity violations at tol 1e-12")
    assert bad == 0


def test_5_a_pete_termination_and_guard():
    rng = np.random.default_rng(5)
    over = 0
    for _ in range(50):
        dm, labels, _ = random_selection_problem(rng, 30)
        cap = int(rng.integers(1, 35))
        alpha = float(rng.uniform(0.001, 0.999))
        res = select_a_pete(dm, labels, alpha, cap)
        over += len(res) > min(cap, dm.n)
    labels = np.repeat([0, 1, 2], [5, 3, 1])
    D = np.where(labels[:, None] == labels[None, :], 0.0, 1.0)
    dup = select_a_pete(D, labels, alpha=0.05)
    guard = dup.stop_reason == STOP_EXHAUSTED and len(dup) == 3
    record_acceptance(5, over == 0 and guard,
                      f"{over} runs exceeded min(cap, n); duplicated points: |P|={len(dup)}, stop={dup.stop_reason}")
    assert over == 0
    assert guard


def test_6_phantom_bounds():
    rng = np.random.default_rng(6)
    fixtures = [random_selection_problem(rng, 40)[:2] for _ in range(20)]
    labels = np.repeat([0, 1, 2], [5, 3, 1])
    fixtures.append((np.where(labels[:, None] == labels[None, :], 0.0, 1.0), labels))
    bad = [i for i, (dm, y) in enumerate(fixtures)
           if objective_f(dm, y, []) != len(y) or objective_f(dm, y, range(len(y))) != 0.0]
    record_acceptance(6, not bad, f"{len(fixtures)} fixtures, f(empty)=n and f(all)=0 exact; failing={bad}")
    assert not bad


@pytest.mark.slow
def test_7_wdbc_desk_reproduction(wdbc):
    start = time.perf_counter()
    plan = stratified_split(wdbc, SEED)
    result = sweep(wdbc, plan, algorithms=["SM-A", "A-PETE"], seed=SEED, num_trees=1000)
    elapsed = time.perf_counter() - start
    forest = result.forest.weighted_accuracy
    apete = result.best["A-PETE"]
    sma = result.best["SM-A"]
    checks = {
        "forest >= 0.90": forest >= FOREST_FLOOR,
        "A-PETE 3..20 prototypes": 3 <= apete.prototype_count <= 20,
        "A-PETE within 0.05 of 0.92": abs(apete.weighted_accuracy - REFERENCE_A_PETE_WDBC) <= SURROGATE_TOL,
        "SM-A within 0.05 of 0.92": abs(sma.weighted_accuracy - REFERENCE_SM_A_WDBC) <= SURROGATE_TOL,
        "runtime <= 600s": elapsed <= 600,
    }
    detail = (f"RF {forest:.3f} (reference {REFERENCE_FOREST_WDBC}), A-PETE {apete.table_cell()} "
              f"[{apete.hyperparameters['feature_grid']}], SM-A {sma.table_cell()} "
              f"[{sma.hyperparameters['feature_grid']}, k={sma.hyperparameters['k']}] (reference 0.92 (7) / 0.92 (8)), "
              f"{elapsed:.0f}s; " + ", ".join(f"{k}: {'ok' if v else 'FAIL'}" for k, v in checks.items()))
    record_acceptance(7, all(checks.values()), detail)
    assert all(checks.values()), detail


def test_8_remaining_table_rows_declared_out_of_scope():
    record_acceptance(8, None, "Compass/RHC/Mnist/Caltech256 need external preprocessing; "
                               "their methodology is covered by criteria 1-6")


def test_9_metric_identities():
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(100):
        q = int(rng.integers(2, 6))
        counts = rng.integers(0, 40, size=(q, q))
        counts[0, 0] += 1
        cm = ConfusionMatrix(counts)
        worst = max(worst, abs(weighted_accuracy(cm) - np.trace(counts) / counts.sum()))
    unequal = 0
    for _ in range(100):
        q = int(rng.integers(2, 6))
        support = int(rng.integers(1, 30))
        y = np.repeat(np.arange(q), support)
        cm = ConfusionMatrix.from_predictions(y, rng.integers(0, q, size=y.size), q)
        unequal += balanced_accuracy(cm) != weighted_accuracy(cm)
    passed = worst <= 1e-12 and unequal == 0
    record_acceptance(9, passed, f"max |weighted - trace/total|={worst:.1e}; "
                                 f"{unequal}/100 balanced != weighted on equal class counts")
    assert worst <= 1e-12
    assert unequal == 0


ARTIFACTS = ["model.json", "split.json", "distances.pfdm", "prototypes.json", "metrics.json", "metrics.csv"]


def pipeline(out, csv_path):
    common = ["--out", str(out), "--data", str(csv_path), "--label", "diagnosis"]
    assert main(["train", *common, "--trees", "1000", "--features", "sqrt", "--seed", str(SEED)]) == 0
    assert main(["distances", *common, "--no-cache"]) == 0
    assert main(["select", *common, "--algorithm", "a-pete", "--alpha", "0.05"]) == 0
    assert main(["evaluate", *common]) == 0


@pytest.mark.slow
def test_10_pipeline_determinism(wdbc_csv, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    pipeline(a, wdbc_csv)
    pipeline(b, wdbc_csv)
    differing = [name for name in ARTIFACTS if (a / name).read_bytes() != (b / name).read_bytes()]
    record_acceptance(10, not differing, f"artifacts compared: {', '.join(ARTIFACTS)}; differing={differing}")
    assert not differing
