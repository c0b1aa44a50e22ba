"""Deliberately naive reference implementations used as test oracles.

Nothing here imports the code paths under test beyond plain data containers.
"""
from fractions import Fraction

import numpy as np


def descend(tree, x):
    """Recursive descent from the root; returns the node index of the leaf."""

    def walk(node):
        f = int(tree.feature[node])
        if f < 0:
            return node
        if x[f] <= tree.threshold[node]:
            return walk(int(tree.left[node]))
        return walk(int(tree.right[node]))

    return walk(0)


def naive_leaf_matrix(model, X):
    out = np.zeros((len(X), len(model.trees)), dtype=np.int64)
    for i, x in enumerate(X):
        for j, tree in enumerate(model.trees):
            out[i, j] = tree.leaf_id[descend(tree, x)]
    return out


def naive_predict(model, x):
    q = len(model.class_names)
    total = [0.0] * q
    for tree in model.trees:
        counts = tree.leaf_counts[tree.leaf_id[descend(tree, x)]]
        s = float(sum(counts))
        for c in range(q):
            total[c] += counts[c] / s
    best = 0
    for c in range(1, q):
        if total[c] > total[best]:
            best = c
    return best


def naive_counts(matrix):
    n, t = matrix.shape
    counts = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        for j in range(n):
            for k in range(t):
                if matrix[i, k] == matrix[j, k]:
                    counts[i, j] += 1
    return counts


def naive_distance(matrix):
    t = matrix.shape[1]
    counts = naive_counts(matrix)
    n = counts.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = 1.0 - counts[i, j] / t
    return out


def exact_distances(matrix):
    """Distances as Fractions straight from leaf agreement counts."""
    t = matrix.shape[1]
    counts = naive_counts(matrix)
    return [[Fraction(t - int(c), t) for c in row] for row in counts]


def exact_objective(D, labels, P, weights=None):
    n = len(D)
    w = weights or [Fraction(1)] * n
    total = Fraction(0)
    for i in range(n):
        best = Fraction(1)
        for p in P:
            if labels[p] == labels[i] and D[i][p] < best:
                best = D[i][p]
        total += w[i] * best
    return total


def exact_weights(labels):
    labels = list(labels)
    n = len(labels)
    classes = sorted(set(labels))
    sizes = {c: labels.count(c) for c in classes}
    return [Fraction(n, len(classes) * sizes[c]) for c in labels]


def brute_force_step(D, labels, P, weights=None):
    """Lowest-index candidate with the largest exact objective reduction."""
    base = exact_objective(D, labels, P, weights)
    best_x, best_gain = None, None
    for x in range(len(D)):
        if x in P:
            continue
        gain = base - exact_objective(D, labels, P + [x], weights)
        if best_gain is None or gain > best_gain:
            best_x, best_gain = x, gain
    return best_x, best_gain


def brute_force_greedy(D, labels, k, weights=None):
    P, gains, objectives = [], [], []
    for _ in range(k):
        x, gain = brute_force_step(D, labels, P, weights)
        P.append(x)
        gains.append(gain)
        objectives.append(exact_objective(D, labels, P, weights))
    return P, gains, objectives


def random_leaves(rng, n, t, max_leaves=6):
    tau = rng.integers(1, max_leaves + 1, size=t)
    matrix = rng.integers(0, tau[None, :], size=(n, t))
    return matrix, tau
