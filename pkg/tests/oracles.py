"""Independent reference computations used to check the library.

None of these import library internals; each re-derives its quantity the
slow, obvious way.
"""

import itertools

import numpy as np


def dense_delta_lstsq(n_nodes, edges, deltas, anchor, anchor_bias):
    """Minimize sum (b_a - b_b - d)^2 with b_anchor fixed, via lstsq on the
    edge-incidence system. Returns (n_nodes, 2) biases."""
    free = [i for i in range(n_nodes) if i != anchor]
    col = {node: c for c, node in enumerate(free)}
    a_mat = np.zeros((len(edges), len(free)))
    rhs = np.array(deltas, dtype=float).copy()
    for e, (a, b) in enumerate(edges):
        if a != anchor:
            a_mat[e, col[a]] += 1.0
        else:
            rhs[e] -= anchor_bias
        if b != anchor:
            a_mat[e, col[b]] -= 1.0
        else:
            rhs[e] += anchor_bias
    sol, *_ = np.linalg.lstsq(a_mat, rhs, rcond=None)
    out = np.empty((n_nodes, 2))
    out[anchor] = anchor_bias
    out[free] = sol
    return out


def objective_c(edges, deltas, biases):
    total = 0.0
    for (a, b), d in zip(edges, deltas):
        total += float(np.sum((biases[a] - biases[b] - d) ** 2))
    return total


def rbf_matrix(a, b, ell, sf2):
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    out = np.empty((len(a), len(b)))
    for i in range(len(a)):
        for j in range(len(b)):
            out[i, j] = sf2 * np.exp(-np.sum((a[i] - b[j]) ** 2) / (2 * ell ** 2))
    return out


def naive_gp(x, y, q, ell, sf2, sn2):
    """Posterior mean/latent variance with an explicit matrix inverse."""
    k = rbf_matrix(x, x, ell, sf2) + sn2 * np.eye(len(x))
    kinv = np.linalg.inv(k)
    ks = rbf_matrix(q, x, ell, sf2)
    mean = ks @ kinv @ y
    var = sf2 - np.einsum("ij,jk,ik->i", ks, kinv, ks)
    return mean, var


def brute_assignment(cost):
    """Lexicographically first permutation reaching the minimum total cost."""
    c = np.asarray(cost)
    n = len(c)
    totals = {p: sum(c[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n))}
    best = min(totals.values())
    for p in itertools.permutations(range(n)):
        if totals[p] <= best + 1e-9 * (1 + abs(best)):
            return np.array(p)


def spearman(x, y):
    """Rank correlation without tie handling beyond average ranks."""
    def ranks(v):
        v = np.asarray(v, dtype=float)
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        r[order] = np.arange(len(v))
        for val in np.unique(v):
            idx = v == val
            r[idx] = r[idx].mean()
        return r
    rx, ry = ranks(x), ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    return float(np.sum(rx * ry) / np.sqrt(np.sum(rx ** 2) * np.sum(ry ** 2)))
