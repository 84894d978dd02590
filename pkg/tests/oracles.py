"""Slow, obviously-correct reference implementations used only by the tests."""

import itertools
import math

import numpy as np


def conv2d_naive(x, w, b):
    """Zero-padded stride-1 cross-correlation, one output value at a time."""
    D, T, C = x.shape
    co, kh, kw, _ = w.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((D, T, co))
    for i, j, o in itertools.product(range(D), range(T), range(co)):
        acc = b[o]
        for a, bb, c in itertools.product(range(kh), range(kw), range(C)):
            ii, jj = i + a - ph, j + bb - pw
            if 0 <= ii < D and 0 <= jj < T:
                acc += w[o, a, bb, c] * x[ii, jj, c]
        out[i, j, o] = acc
    return out


def depthwise_naive(x, w, b):
    D, T, C = x.shape
    _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros_like(x)
    for i, j, c in itertools.product(range(D), range(T), range(C)):
        acc = b[c]
        for a, bb in itertools.product(range(kh), range(kw)):
            ii, jj = i + a - ph, j + bb - pw
            if 0 <= ii < D and 0 <= jj < T:
                acc += w[c, a, bb] * x[ii, jj, c]
        out[i, j, c] = acc
    return out


def maxpool_naive(x, region):
    pd, pt = region
    D, T, C = x.shape
    out = np.zeros((D // pd, T // pt, C))
    for i, j, c in itertools.product(range(D // pd), range(T // pt), range(C)):
        out[i, j, c] = max(x[i * pd + a, j * pt + bb, c] for a in range(pd) for bb in range(pt))
    return out


def spearman_naive(pred, truth):
    """Pearson correlation of the two position vectors (no ties)."""
    ids = sorted(truth)
    p = [pred[s] for s in ids]
    t = [truth[s] for s in ids]
    n = len(ids)
    mp, mt = sum(p) / n, sum(t) / n
    cov = sum((a - mp) * (b - mt) for a, b in zip(p, t))
    vp = math.sqrt(sum((a - mp) ** 2 for a in p))
    vt = math.sqrt(sum((b - mt) ** 2 for b in t))
    return cov / (vp * vt)


def precision_naive(pred, truth, k):
    top_p = [s for s in pred if pred[s] <= k]
    return sum(1 for s in top_p if truth[s] <= k) / k
