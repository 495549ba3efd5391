"""Auxiliary alignment losses and composition of the training objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .attention import expected_alignment_recurrence


@dataclass
class LossWeights:
    """Interpolation weights for the total objective.

    ``decot_delta`` is the DeCoT margin in encoder frames (``None`` disables
    masking). ``sync_eos`` keeps the eos row in the CTC-synchronous term.
    Quantity and CTC-synchronous weights are mutually exclusive
    unless ``allow_qua_with_sync`` is set.
    """

    ctc: float = 0.3
    qua: float = 0.0
    sync: float = 0.0
    minlt: float = 0.0
    decot_delta: int | None = None
    allow_qua_with_sync: bool = False
    sync_eos: bool = True

    def __post_init__(self):
        if not 0.0 <= self.ctc <= 1.0:
            raise ValueError("ctc weight must lie in [0, 1]")
        for name in ("qua", "sync", "minlt"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} weight must be non-negative")
        if self.decot_delta is not None and self.decot_delta < 0:
            raise ValueError("DeCoT margin must be non-negative")
        if self.qua > 0 and self.sync > 0 and not self.allow_qua_with_sync:
            raise ValueError("quantity and CTC-synchronous losses are not combined "
                             "unless allow_qua_with_sync is set")


def quantity_loss(alpha, n_tokens, row_mask=None) -> torch.Tensor:
    """``|U - sum(alpha)|`` per utterance; ``alpha`` is ``[..., U, T']``."""
    alpha = torch.as_tensor(alpha)
    rows = alpha.sum(-1)
    if row_mask is not None:
        rows = rows * row_mask
    return (torch.as_tensor(n_tokens, dtype=alpha.dtype) - rows.sum(-1)).abs()


def expected_boundary(alpha) -> torch.Tensor:
    """``sum_j j * alpha_ij`` with 1-indexed ``j``; not renormalised by row mass."""
    alpha = torch.as_tensor(alpha)
    j = torch.arange(1, alpha.shape[-1] + 1, dtype=alpha.dtype, device=alpha.device)
    return alpha @ j


def boundary_l1(targets, alpha, row_mask=None) -> torch.Tensor:
    """Mean absolute gap between target boundaries and expected boundaries.

    ``targets`` is ``[..., U]`` and treated as a constant.
    """
    alpha = torch.as_tensor(alpha)
    targets = torch.as_tensor(targets, dtype=alpha.dtype).detach()
    if targets.shape != alpha.shape[:-1]:
        raise ValueError(f"boundary count {tuple(targets.shape)} does not match "
                         f"alignment rows {tuple(alpha.shape[:-1])}")
    gap = (targets - expected_boundary(alpha)).abs()
    if row_mask is None:
        return gap.mean(-1)
    row_mask = torch.as_tensor(row_mask, dtype=alpha.dtype)
    return (gap * row_mask).sum(-1) / row_mask.sum(-1).clamp_min(1.0)


def ctc_st_loss(ctc_boundaries, alpha, row_mask=None) -> torch.Tensor:
    """CTC-synchronous loss: L1 between CTC Viterbi boundaries and expected boundaries."""
    return boundary_l1(ctc_boundaries, alpha, row_mask)


def minlt_loss(ref_boundaries, alpha, row_mask=None) -> torch.Tensor:
    """Minimum-latency loss against external reference boundaries."""
    return boundary_l1(ref_boundaries, alpha, row_mask)


def decot_mask(ref_boundaries, delta: int | None, n_frames: int) -> np.ndarray:
    """Boolean ``[U, T']`` mask keeping frames ``j <= b_ref_i + delta`` (1-indexed)."""
    b = np.asarray(ref_boundaries, dtype=np.int64)
    j = np.arange(1, n_frames + 1)
    if delta is None:
        return np.ones((len(b), n_frames), dtype=bool)
    return j[None, :] <= (b[:, None] + delta)


def decot_alignment(p, ref_boundaries, delta: int | None, alpha_init=None) -> np.ndarray:
    """Expected alignments with cells beyond the DeCoT margin removed during marginalisation."""
    p = np.asarray(p, dtype=np.float64)
    mask = decot_mask(ref_boundaries, delta, p.shape[1])
    return expected_alignment_recurrence(p, alpha_init, mask)


def total_loss(mocha, ctc, weights: LossWeights, qua=None, sync=None, minlt=None):
    """``(1-l_ctc)*mocha + l_ctc*ctc`` plus every weighted auxiliary term."""
    out = (1.0 - weights.ctc) * mocha + weights.ctc * ctc
    for name, value in (("qua", qua), ("sync", sync), ("minlt", minlt)):
        w = getattr(weights, name)
        if w > 0:
            if value is None:
                raise ValueError(f"{name} weight is active but no {name} loss was given")
            out = out + w * value
    return out
