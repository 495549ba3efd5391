"""CTC loss, forward-backward gradient, Viterbi forced alignment and boundary extraction.

Posteriors are always log-probabilities (post log-softmax) of shape ``[T', V]``
with the blank at id 0. Log-space lattices use ``NEG`` instead of ``-inf`` so
that max/add never produce NaN.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from itertools import groupby
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

logger = logging.getLogger(__name__)

BLANK = 0
NEG = -1e30


class InfeasibleAlignmentError(ValueError):
    """Raised when a label sequence cannot fit into the available frames."""


def extend_labels(labels: Sequence[int], blank: int = BLANK) -> np.ndarray:
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    return ext


def min_frames(labels: Sequence[int]) -> int:
    """Shortest input length a CTC path for ``labels`` can have."""
    repeats = sum(1 for a, b in zip(labels[:-1], labels[1:]) if a == b)
    return len(labels) + repeats


def _check_labels(labels, n_frames: int, blank: int) -> list[int]:
    labels = [int(v) for v in labels]
    if any(v == blank for v in labels):
        raise ValueError("label sequence must not contain the blank id")
    if not labels:
        raise ValueError("label sequence must not be empty")
    if n_frames < min_frames(labels):
        raise InfeasibleAlignmentError(
            f"{n_frames} frames cannot hold {len(labels)} labels "
            f"(needs at least {min_frames(labels)})")
    return labels


@dataclass
class CtcTrellis:
    """Log-space forward/backward lattices for a batch, shape ``[B, T', S]``.

    ``forward[b, t, s]`` includes the emission at ``t``; ``backward[b, t, s]``
    covers frames ``t+1..`` only, so ``forward + backward`` is the log-mass of
    all paths through ``(t, s)``.
    """

    forward: np.ndarray
    backward: np.ndarray
    ext: np.ndarray
    ext_lens: np.ndarray
    frame_lens: np.ndarray
    log_likelihood: np.ndarray


def _pad_batch(log_posteriors: Sequence[np.ndarray], labels: Sequence[Sequence[int]], blank: int):
    batch = len(log_posteriors)
    frame_lens = np.array([lp.shape[0] for lp in log_posteriors])
    ext_lens = np.array([2 * len(y) + 1 for y in labels])
    t_max, s_max = int(frame_lens.max()), int(ext_lens.max())
    vocab = log_posteriors[0].shape[1]
    lp = np.full((batch, t_max, vocab), NEG)
    ext = np.full((batch, s_max), blank, dtype=np.int64)
    for b, (x, y) in enumerate(zip(log_posteriors, labels)):
        lp[b, :x.shape[0]] = x
        ext[b, :ext_lens[b]] = extend_labels(y, blank)
    # emission log-probs along the extended labels, padded states made unreachable
    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (batch, t_max, s_max)), axis=2)
    emit = np.where(np.arange(s_max)[None, None, :] < ext_lens[:, None, None], emit, NEG)
    skip = np.zeros((batch, s_max), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    skip &= np.arange(s_max)[None, :] < ext_lens[:, None]
    return emit, ext, ext_lens, frame_lens, skip


def _shift(a: np.ndarray, k: int) -> np.ndarray:
    """Shift along the last axis by ``k`` (positive: towards higher indices)."""
    out = np.full_like(a, NEG)
    if k > 0:
        out[..., k:] = a[..., :-k]
    else:
        out[..., :k] = a[..., -k:]
    return out


def ctc_trellis(log_posteriors: Sequence[np.ndarray], labels: Sequence[Sequence[int]],
                blank: int = BLANK) -> CtcTrellis:
    """Batched forward-backward over the extended label sequences."""
    log_posteriors = [np.asarray(x, dtype=np.float64) for x in log_posteriors]
    labels = [_check_labels(y, x.shape[0], blank) for x, y in zip(log_posteriors, labels)]
    emit, ext, ext_lens, frame_lens, skip = _pad_batch(log_posteriors, labels, blank)
    batch, t_max, s_max = emit.shape
    rows = np.arange(batch)

    fwd = np.full((batch, t_max, s_max), NEG)
    fwd[:, 0, :2] = emit[:, 0, :2]
    for t in range(1, t_max):
        prev = fwd[:, t - 1]
        acc = np.logaddexp(prev, _shift(prev, 1))
        acc = np.where(skip, np.logaddexp(acc, _shift(prev, 2)), acc)
        fwd[:, t] = acc + emit[:, t]

    last = frame_lens - 1
    final = fwd[rows, last]
    loglik = np.logaddexp(final[rows, ext_lens - 1], final[rows, ext_lens - 2])

    bwd = np.full((batch, t_max, s_max), NEG)
    init = np.full((batch, s_max), NEG)
    init[rows, ext_lens - 1] = 0.0
    init[rows, ext_lens - 2] = 0.0
    skip_next = _shift(skip.astype(np.float64), -2) > 0.5
    skip_next[:, -2:] = False
    for t in range(t_max - 1, -1, -1):
        if t == t_max - 1:
            rec = np.full((batch, s_max), NEG)
        else:
            nxt = bwd[:, t + 1] + emit[:, t + 1]
            rec = np.logaddexp(nxt, _shift(nxt, -1))
            rec = np.where(skip_next, np.logaddexp(rec, _shift(nxt, -2)), rec)
        here = (t == last)[:, None]
        valid = (t < last)[:, None]
        bwd[:, t] = np.where(here, init, np.where(valid, rec, NEG))
    return CtcTrellis(fwd, bwd, ext, ext_lens, frame_lens, loglik)


def ctc_loss_batch(log_posteriors: Sequence[np.ndarray], labels: Sequence[Sequence[int]],
                   blank: int = BLANK) -> tuple[np.ndarray, list[np.ndarray]]:
    """Per-utterance losses and gradients wrt the log-posteriors."""
    trellis = ctc_trellis(log_posteriors, labels, blank)
    losses = -trellis.log_likelihood
    grads = []
    for b, x in enumerate(log_posteriors):
        n_t, vocab = np.shape(x)
        s_len = trellis.ext_lens[b]
        occ = trellis.forward[b, :n_t, :s_len] + trellis.backward[b, :n_t, :s_len]
        occ = np.exp(occ - trellis.log_likelihood[b])
        g = np.zeros((n_t, vocab))
        np.add.at(g.T, trellis.ext[b, :s_len], occ.T)
        grads.append(-g)
    return losses, grads


def ctc_loss(log_posteriors, labels: Sequence[int], blank: int = BLANK) -> tuple[float, np.ndarray]:
    """``-log P_ctc(y|x)`` and its gradient wrt ``log_posteriors``.

    >>> lp = np.log(np.full((2, 2), 0.5))
    >>> round(ctc_loss(lp, [1])[0], 4)
    0.2877
    """
    losses, grads = ctc_loss_batch([np.asarray(log_posteriors, dtype=np.float64)], [labels], blank)
    return float(losses[0]), grads[0]


class CtcLossFunction(torch.autograd.Function):
    """Torch wrapper around the numpy forward-backward; returns per-utterance losses."""

    @staticmethod
    def forward(ctx, log_probs, frame_lens, labels, blank=BLANK):
        # log_probs: [B, T', V] padded; labels: tuple of python lists
        lp = log_probs.detach().cpu().double().numpy()
        items = [lp[b, :int(frame_lens[b])] for b in range(lp.shape[0])]
        losses, grads = ctc_loss_batch(items, labels, blank)
        full = np.zeros_like(lp)
        for b, g in enumerate(grads):
            full[b, :g.shape[0]] = g
        ctx.save_for_backward(torch.from_numpy(full).to(log_probs.dtype))
        return torch.from_numpy(losses).to(log_probs.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (full,) = ctx.saved_tensors
        return full * grad_out[:, None, None], None, None, None


def ctc_loss_torch(log_probs: torch.Tensor, frame_lens, labels, blank: int = BLANK) -> torch.Tensor:
    return CtcLossFunction.apply(log_probs, list(frame_lens), tuple(tuple(y) for y in labels), blank)


def ctc_viterbi_batch(log_posteriors: Sequence[np.ndarray], labels: Sequence[Sequence[int]],
                      blank: int = BLANK) -> list[tuple[np.ndarray, float]]:
    """Best constrained path per utterance as ``(path, log_prob)``.

    Ties prefer staying in the current state, then the shortest jump, which
    delays nothing and keeps emissions leftmost.
    """
    log_posteriors = [np.asarray(x, dtype=np.float64) for x in log_posteriors]
    labels = [_check_labels(y, x.shape[0], blank) for x, y in zip(log_posteriors, labels)]
    emit, ext, ext_lens, frame_lens, skip = _pad_batch(log_posteriors, labels, blank)
    batch, t_max, s_max = emit.shape
    score = np.full((batch, s_max), NEG)
    score[:, :2] = emit[:, 0, :2]
    back = np.zeros((batch, t_max, s_max), dtype=np.int8)
    scores = [score]
    for t in range(1, t_max):
        cands = np.stack([score, _shift(score, 1), np.where(skip, _shift(score, 2), NEG)])
        # argmax returns the first maximum, i.e. stay > advance-by-1 > skip
        arg = np.argmax(cands, axis=0)
        best = np.take_along_axis(cands, arg[None], axis=0)[0]
        back[:, t] = arg
        score = best + emit[:, t]
        scores.append(score)
    out = []
    for b in range(batch):
        n_t, s_len = frame_lens[b], ext_lens[b]
        final = scores[n_t - 1][b]
        s = s_len - 1 if final[s_len - 1] >= final[s_len - 2] else s_len - 2
        logp = float(final[s])
        path = np.empty(n_t, dtype=np.int64)
        for t in range(n_t - 1, -1, -1):
            path[t] = ext[b, s]
            s -= back[b, t, s]
        out.append((path, logp))
    return out


def ctc_viterbi(log_posteriors, labels: Sequence[int], blank: int = BLANK) -> np.ndarray:
    return ctc_viterbi_batch([log_posteriors], [labels], blank)[0][0]


def collapse(path: Sequence[int], blank: int = BLANK) -> list[int]:
    return [int(k) for k, _ in groupby(path) if k != blank]


def extract_boundaries(path: Sequence[int], labels: Sequence[int] | None = None,
                       blank: int = BLANK) -> list[int]:
    """1-indexed leftmost frame of every emitted token, plus ``T'`` for eos.

    >>> extract_boundaries([0, 3, 3, 0, 1, 1, 1, 0, 20, 20, 0])
    [2, 5, 9, 11]
    """
    path = [int(v) for v in path]
    if labels is not None and collapse(path, blank) != [int(v) for v in labels]:
        raise ValueError("path does not collapse to the given labels")
    bounds = [t + 1 for t, k in enumerate(path)
              if k != blank and (t == 0 or path[t - 1] != k)]
    bounds.append(len(path))
    return bounds


@dataclass
class BoundaryProvider:
    """Source of CTC teacher boundaries for synchronous training.

    ``on_the_fly`` aligns with the current CTC posteriors every call;
    ``precomputed`` serves a frozen table keyed by utterance id.
    """

    mode: str = "on_the_fly"
    table: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("on_the_fly", "precomputed"):
            raise ValueError(f"unknown boundary mode {self.mode!r}")

    def boundaries(self, utt_ids: Sequence[str], log_posteriors: Sequence[np.ndarray] | None,
                   labels: Sequence[Sequence[int]]) -> list[list[int]]:
        if self.mode == "precomputed":
            missing = [u for u in utt_ids if u not in self.table]
            if missing:
                raise KeyError(f"no precomputed boundaries for {missing[:3]}")
            return [list(self.table[u]) for u in utt_ids]
        paths = ctc_viterbi_batch(log_posteriors, labels)
        return [extract_boundaries(p) for p, _ in paths]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.table, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "BoundaryProvider":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls("precomputed", {str(k): [int(v) for v in vals] for k, vals in raw.items()})
