"""Token error rate and token emission latency (TEL)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


def edit_distance(hyp: Sequence, ref: Sequence) -> tuple[int, float]:
    """Levenshtein distance and error rate ``distance / len(ref)``.

    An empty reference yields ``rate = distance``.
    """
    hyp, ref = list(hyp), list(ref)
    row = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, 1):
        prev_diag, row[0] = row[0], i
        for j, r in enumerate(ref, 1):
            cur = min(row[j] + 1, row[j - 1] + 1, prev_diag + (h != r))
            prev_diag, row[j] = row[j], cur
    dist = row[-1]
    return dist, (dist / len(ref) if ref else float(dist))


def corpus_token_error(hyps: Iterable[Sequence], refs: Iterable[Sequence]) -> float:
    errors = total = 0
    for h, r in zip(hyps, refs):
        errors += edit_distance(h, r)[0]
        total += len(r)
    return errors / max(total, 1)


@dataclass(frozen=True)
class LatencyRecord:
    utt_id: str
    token_index: int
    token_id: int
    ref_frame: int
    pred_frame: int
    frame_ms: float

    @property
    def delta_ms(self) -> float:
        return (self.pred_frame - self.ref_frame) * self.frame_ms


def token_emission_latency(pred: Sequence[int], ref: Sequence[int], frame_ms: float,
                           utt_id: str = "", token_ids: Sequence[int] | None = None) -> list[LatencyRecord]:
    """Signed per-token latency; both boundary lists exclude eos.

    Negative values mean the token was emitted before its reference boundary.
    """
    if len(pred) != len(ref):
        raise ValueError(f"boundary count mismatch ({len(pred)} predicted vs {len(ref)} "
                         "reference); predicted boundaries must come from teacher forcing")
    ids = list(token_ids) if token_ids is not None else [-1] * len(ref)
    return [LatencyRecord(utt_id, i, int(ids[i]), int(r), int(p), float(frame_ms))
            for i, (p, r) in enumerate(zip(pred, ref))]


def nearest_rank(values: Sequence[float], pct: float) -> float:
    """Nearest-rank percentile: the ``ceil(pct/100 * n)``-th smallest value."""
    if len(values) == 0:
        raise ValueError("percentile of an empty set")
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(1, math.ceil(pct * len(ordered) / 100.0))
    return float(ordered[rank - 1])


def latency_percentiles(records: Sequence[LatencyRecord] | Sequence[float]) -> tuple[float, float]:
    """Corpus-level ``(PT@50, PT@90)`` in ms."""
    deltas = [r.delta_ms if isinstance(r, LatencyRecord) else float(r) for r in records]
    return nearest_rank(deltas, 50), nearest_rank(deltas, 90)
