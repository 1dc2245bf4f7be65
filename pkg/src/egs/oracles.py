"""Slow reference implementations used by the test suite and ``egs selfcheck``.

Each one is written as plain loops straight from the definition so it shares
no code path with the vectorized version it checks.
"""
from __future__ import annotations

import math

import numpy as np

from .retrieval import METRIC_NAMES


def naive_matmul(a, b) -> np.ndarray:
    """Row-major triple loop; accumulation order k = 0..K-1."""
    a, b = np.asarray(a), np.asarray(b)
    n, K = a.shape
    m = b.shape[1]
    out = np.zeros((n, m), dtype=np.result_type(a, b))
    for i in range(n):
        for j in range(m):
            acc = out.dtype.type(0)
            for k in range(K):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def brute_propagate(H, A, W, relu: bool) -> np.ndarray:
    """Per-node, per-neighbour message passing with source-degree normalization."""
    H, A, W = np.asarray(H), np.asarray(A), np.asarray(W)
    n, d = H.shape
    deg = A.sum(axis=0)
    agg = np.zeros((n, d))
    for i in range(n):
        acc = np.zeros(d)
        for j in range(n):
            if A[i, j]:
                acc = acc + (A[i, j] / deg[j]) * H[j]
        agg[i] = acc
    out = np.zeros((n, W.shape[1]))
    for i in range(n):
        for o in range(W.shape[1]):
            s = 0.0
            for k in range(d):
                s += agg[i, k] * W[k, o]
            out[i, o] = max(s, 0.0) if relu else s
    return out


def brute_metrics(Q, qids, G, gids) -> dict[str, list[float]]:
    """Per-query AP and hit-based recalls by explicit distance loops and a hand-written sort key."""
    M = len(G)
    cutoff = max(1, math.ceil(0.01 * M))
    out = {k: [] for k in METRIC_NAMES}
    for q, qid in zip(np.asarray(Q, dtype=np.float64), qids):
        dist = [math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(q, g)))
                for g in np.asarray(G, dtype=np.float64)]
        order = sorted(range(M), key=lambda j: (dist[j], j))
        hits = [pos + 1 for pos, j in enumerate(order) if gids[j] == qid]
        out["AP"].append(math.fsum((i + 1) / r for i, r in enumerate(hits)) / len(hits))
        for k, name in ((1, "R@1"), (5, "R@5"), (10, "R@10"), (cutoff, "R@1%")):
            out[name].append(1.0 if hits[0] <= k else 0.0)
    return out
