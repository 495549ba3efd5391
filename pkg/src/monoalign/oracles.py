"""Slow, literal reference implementations used to validate the fast paths.

Nothing here shares code with the implementations it checks.
"""

from __future__ import annotations

import itertools
import math
from typing import Sequence

import numpy as np


def naive_cumsum(x):
    return np.array([sum(x[:n + 1]) for n in range(len(x))], dtype=np.float64)


def naive_cumprod_clamped(x, eps):
    out = []
    for n in range(len(x)):
        acc = 1.0
        for m in range(n + 1):
            acc *= min(max(x[m], eps), 1.0)
        out.append(acc)
    return np.array(out, dtype=np.float64)


def naive_movsum(x, back, forward):
    n_x = len(x)
    out = np.zeros(n_x)
    for n in range(n_x):
        acc = 0.0
        for m in range(n - (back - 1), n + forward):
            if 0 <= m < n_x:
                acc += x[m]
        out[n] = acc
    return out


def _collapse(path, blank):
    out = []
    prev = None
    for k in path:
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def brute_force_ctc(log_posteriors, labels: Sequence[int], blank: int = 0):
    """``(log P(y|x), best log-prob, best path)`` by enumerating every path."""
    lp = np.asarray(log_posteriors, dtype=np.float64)
    n_t, vocab = lp.shape
    target = list(labels)
    total = []
    best, best_path = -math.inf, None
    for path in itertools.product(range(vocab), repeat=n_t):
        if _collapse(path, blank) != target:
            continue
        score = sum(lp[t, k] for t, k in enumerate(path))
        total.append(score)
        if score > best:
            best, best_path = score, path
    if not total:
        return -math.inf, -math.inf, None
    m = max(total)
    return m + math.log(sum(math.exp(s - m) for s in total)), best, best_path


def brute_force_alignment(p, alpha_init=None):
    """Expected alignments by summing over every monotonic sequence of stop frames.

    Row ``i`` stops at ``t_i >= t_{i-1}``; the scan for row ``i`` passes
    frames ``t_{i-1}..t_i - 1`` without stopping. ``alpha_init`` is the
    distribution of the virtual row-0 position (default: frame 1).
    """
    p = np.asarray(p, dtype=np.float64)
    n_rows, n_frames = p.shape
    init = np.zeros(n_frames) if alpha_init is None else np.asarray(alpha_init, dtype=np.float64)
    if alpha_init is None:
        init[0] = 1.0
    alpha = np.zeros_like(p)

    def walk(i, prev_t, weight):
        if i == n_rows:
            return
        for t in range(prev_t, n_frames):
            w = weight * p[i, t]
            for l in range(prev_t, t):
                w *= 1.0 - p[i, l]
            alpha[i, t] += w
            walk(i + 1, t, w)

    for t0 in range(n_frames):
        if init[t0] != 0.0:
            walk(0, t0, init[t0])
    return alpha


def nested_chunk_attention(alpha, u, width):
    """Chunkwise weights evaluated with the literal nested double sum."""
    alpha = np.asarray(alpha, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    n_rows, n_frames = alpha.shape
    beta = np.zeros_like(alpha)
    for i in range(n_rows):
        for j in range(n_frames):
            acc = 0.0
            for k in range(j, min(j + width, n_frames)):
                denom = sum(math.exp(u[i, l]) for l in range(max(0, k - width + 1), k + 1))
                acc += alpha[i, k] * math.exp(u[i, j]) / denom
            beta[i, j] = acc
    return beta


def scalar_monotonic_energy(h, s, w_h, w_s, bias, v, gain=None, offset=None):
    """Energy for a single (frame, state) pair, one scalar term at a time."""
    att = len(bias)
    hidden = []
    for a in range(att):
        z = bias[a]
        for d in range(len(h)):
            z += w_h[a][d] * h[d]
        for d in range(len(s)):
            z += w_s[a][d] * s[d]
        hidden.append(max(z, 0.0))
    if gain is None:
        return sum(v[a] * hidden[a] for a in range(att))
    norm = math.sqrt(sum(x * x for x in v))
    return gain * sum(v[a] / norm * hidden[a] for a in range(att)) + offset


def naive_levenshtein(a, b):
    if not a:
        return len(b)
    if not b:
        return len(a)
    if a[0] == b[0]:
        return naive_levenshtein(a[1:], b[1:])
    return 1 + min(naive_levenshtein(a[1:], b), naive_levenshtein(a, b[1:]),
                   naive_levenshtein(a[1:], b[1:]))
