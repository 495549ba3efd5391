"""Oracle-equivalence checks shared by the ``selftest`` command and the test suite.

Each check draws random instances, compares a fast implementation with its
naive reference and reports the worst absolute discrepancy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import oracles
from .attention import (chunk_attention_train, expected_alignment, expected_alignment_parallel,
                        expected_alignment_recurrence)
from .ctc import collapse, ctc_loss, ctc_viterbi_batch, extract_boundaries
from .metrics import edit_distance
from .numerics import CUMPROD_EPS, cumprod_clamped, cumsum, movsum


@dataclass
class CheckResult:
    name: str
    max_error: float
    tol: float
    n_cases: int

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def to_json(self) -> dict:
        return {"name": self.name, "max_error": float(self.max_error), "tol": self.tol,
                "n_cases": self.n_cases, "passed": bool(self.passed)}


def _np(x) -> np.ndarray:
    return x.detach().numpy() if torch.is_tensor(x) else np.asarray(x)


def check_scans(rng, n_cases: int = 100) -> CheckResult:
    """cumsum, clamped cumprod and moving sums against loops; exact equality.

    Inputs are integers and multiples of 1/8 so that every partial result is
    exactly representable and summation order cannot matter.
    """
    worst = 0.0
    for _ in range(n_cases):
        n = int(rng.integers(1, 65))
        x = rng.integers(-20, 20, size=n).astype(np.float64)
        q = rng.integers(0, 9, size=n) / 8.0
        back, fwd = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        worst = max(worst,
                    float(np.max(np.abs(cumsum(x) - oracles.naive_cumsum(x)))),
                    float(np.max(np.abs(cumprod_clamped(q) - oracles.naive_cumprod_clamped(q, CUMPROD_EPS)))),
                    float(np.max(np.abs(movsum(x, back, fwd) - oracles.naive_movsum(x, back, fwd)))))
    return CheckResult("scans_vs_loops", worst, 0.0, n_cases)


def random_ctc_instance(rng, max_t=6, max_u=3, max_v=4):
    """Log-posteriors over ``vocab <= max_v`` symbols (blank included) and a feasible label sequence."""
    vocab = int(rng.integers(2, max_v + 1))
    n_t = int(rng.integers(1, max_t + 1))
    logits = rng.normal(scale=2.0, size=(n_t, vocab))
    lp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
    while True:
        labels = [int(v) for v in rng.integers(1, vocab, size=int(rng.integers(1, max_u + 1)))]
        if len(labels) + sum(a == b for a, b in zip(labels, labels[1:])) <= n_t:
            return lp, labels


def check_ctc(rng, n_cases: int = 50) -> CheckResult:
    """CTC loss and Viterbi score against path enumeration."""
    worst = 0.0
    for _ in range(n_cases):
        lp, labels = random_ctc_instance(rng)
        log_total, best, _ = oracles.brute_force_ctc(lp, labels)
        loss, _ = ctc_loss(lp, labels)
        (path, score), = ctc_viterbi_batch([lp], [labels])
        if collapse(path) != labels:
            return CheckResult("ctc_vs_enumeration", math.inf, 1e-10, n_cases)
        worst = max(worst, abs(loss + log_total), abs(float(score) - best))
    return CheckResult("ctc_vs_enumeration", worst, 1e-10, n_cases)


def check_alignment_enumeration(rng, n_cases: int = 50) -> CheckResult:
    """Every expected-alignment form against monotonic path enumeration (U <= 3, T' <= 5)."""
    worst = 0.0
    for _ in range(n_cases):
        p = rng.uniform(0.01, 0.99, size=(int(rng.integers(1, 4)), int(rng.integers(1, 6))))
        brute = oracles.brute_force_alignment(p)
        for fast in (expected_alignment_recurrence(p), _np(expected_alignment_parallel(p)),
                     _np(expected_alignment(p))):
            worst = max(worst, float(np.max(np.abs(fast - brute))))
    return CheckResult("alignment_vs_enumeration", worst, 1e-10, n_cases)


def check_alignment_forms(rng, n_cases: int = 200) -> CheckResult:
    """Recurrence against the parallel forms at U <= 8, T' <= 32."""
    worst = 0.0
    for _ in range(n_cases):
        p = rng.uniform(0.01, 0.99, size=(int(rng.integers(1, 9)), int(rng.integers(1, 33))))
        rec = expected_alignment_recurrence(p)
        worst = max(worst, float(np.max(np.abs(_np(expected_alignment_parallel(p)) - rec))),
                    float(np.max(np.abs(_np(expected_alignment(p)) - rec))))
    return CheckResult("alignment_recurrence_vs_parallel", worst, 1e-10, n_cases)


def check_chunk_identity(rng, n_cases: int = 50) -> CheckResult:
    """Width-1 chunk attention returns alpha unchanged."""
    worst = 0.0
    for _ in range(n_cases):
        shape = (int(rng.integers(1, 6)), int(rng.integers(1, 20)))
        alpha = torch.as_tensor(rng.uniform(0, 0.5, size=shape))
        beta = chunk_attention_train(alpha, torch.as_tensor(rng.normal(size=shape)), 1)
        worst = max(worst, float(torch.max(torch.abs(beta - alpha))))
    return CheckResult("chunk_width_one_identity", worst, 0.0, n_cases)


def check_chunk_nested(rng) -> CheckResult:
    """Moving-sum chunk attention against the nested double sum, T' <= 8, w <= 4."""
    worst, n = 0.0, 0
    for n_frames in range(1, 9):
        for width in range(1, 5):
            for _ in range(3):
                alpha = rng.uniform(0, 0.4, size=(3, n_frames))
                u = rng.normal(scale=2.0, size=(3, n_frames))
                fast = _np(chunk_attention_train(torch.as_tensor(alpha), torch.as_tensor(u), width))
                worst = max(worst, float(np.max(np.abs(fast - oracles.nested_chunk_attention(alpha, u, width)))))
                n += 1
    return CheckResult("chunk_movsum_vs_nested", worst, 1e-10, n)


def check_mass(rng, n_cases: int = 200) -> list[CheckResult]:
    """Row masses of alpha stay <= 1 and never increase; beta preserves them."""
    bound = increase = beta_gap = 0.0
    for _ in range(n_cases):
        shape = (int(rng.integers(1, 9)), int(rng.integers(1, 33)))
        p = rng.uniform(0.01, 0.99, size=shape)
        alpha = expected_alignment(p)
        rows = alpha.sum(-1)
        bound = max(bound, float(torch.max(rows - 1.0)))
        if shape[0] > 1:
            increase = max(increase, float(torch.max(rows[1:] - rows[:-1])))
        u = torch.as_tensor(rng.normal(scale=3.0, size=shape))
        beta = chunk_attention_train(alpha, u, int(rng.integers(1, 6)))
        beta_gap = max(beta_gap, float(torch.max(torch.abs(beta.sum(-1) - rows))))
    return [CheckResult("alpha_row_mass_at_most_one", max(bound, 0.0), 1e-12, n_cases),
            CheckResult("alpha_row_mass_non_increasing", max(increase, 0.0), 1e-12, n_cases),
            CheckResult("beta_mass_equals_alpha_mass", beta_gap, 1e-8, n_cases)]


def check_boundary_example() -> CheckResult:
    """Leftmost-spike boundaries of a hand-made path with eos at the last frame."""
    # [-, c, c, -, a, a, a, -, t, t, -] with c=3, a=1, t=20
    path = [0, 3, 3, 0, 1, 1, 1, 0, 20, 20, 0]
    got = extract_boundaries(path, [3, 1, 20])
    return CheckResult("boundary_extraction_example", 0.0 if got == [2, 5, 9, 11] else math.inf, 0.0, 1)


def check_edit_distance(rng, n_cases: int = 200) -> CheckResult:
    worst = 0.0
    for _ in range(n_cases):
        a = list(rng.integers(0, 4, size=int(rng.integers(0, 7))))
        b = list(rng.integers(0, 4, size=int(rng.integers(0, 7))))
        worst = max(worst, abs(edit_distance(a, b)[0] - oracles.naive_levenshtein(a, b)))
    return CheckResult("edit_distance_vs_recursion", float(worst), 0.0, n_cases)


def run_selftest(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    checks: list[Callable[[], CheckResult | list[CheckResult]]] = [
        lambda: check_scans(rng), lambda: check_ctc(rng),
        lambda: check_alignment_enumeration(rng), lambda: check_alignment_forms(rng),
        lambda: check_chunk_identity(rng), lambda: check_chunk_nested(rng),
        lambda: check_mass(rng), check_boundary_example, lambda: check_edit_distance(rng),
    ]
    results = []
    for check in checks:
        out = check()
        results.extend(out if isinstance(out, list) else [out])
    return results
