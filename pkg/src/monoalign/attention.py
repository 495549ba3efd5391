"""Hard monotonic / monotonic chunkwise attention.

Training uses expected alignments (``alpha``) and chunkwise weights (``beta``);
inference scans the selection probabilities and stops at the first frame with
``p >= 0.5``. Frame indices exposed to callers are 1-indexed; tensors are
0-indexed internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import CUMPROD_EPS

R_INIT = -4.0


@dataclass
class AttentionParams:
    """Energy parameters. ``gain``/``offset`` are ``None`` for chunk energies."""

    w_h: torch.Tensor  # [A, Dh]
    w_s: torch.Tensor  # [A, Ds]
    bias: torch.Tensor  # [A]
    v: torch.Tensor  # [A]
    gain: torch.Tensor | None = None
    offset: torch.Tensor | None = None


def _energy(h, s, params: AttentionParams, normalize: bool) -> torch.Tensor:
    h = torch.as_tensor(h)
    s = torch.as_tensor(s)
    hidden = F.relu(h @ params.w_h.T + (s @ params.w_s.T + params.bias).unsqueeze(-2))
    v = params.v
    if normalize:
        norm = v.norm()
        if float(norm.detach()) == 0.0:
            raise ValueError("weight-normalised direction v must be nonzero")
        v = params.gain * v / norm
    out = hidden @ v
    if normalize:
        out = out + params.offset
    return out


def monotonic_energy(h, s, params: AttentionParams) -> torch.Tensor:
    """``g * v^T/||v|| * relu(W_h h + W_s s + b) + r`` for every frame of ``h``.

    ``h`` is ``[..., T', Dh]`` and ``s`` is ``[..., Ds]``; returns ``[..., T']``.
    """
    return _energy(h, s, params, normalize=True)


def chunk_energy(h, s, params: AttentionParams) -> torch.Tensor:
    """Same as :func:`monotonic_energy` without weight normalisation and offset."""
    return _energy(h, s, params, normalize=False)


class EnergyLayer(nn.Module):
    """Trainable energy function; ``monotonic=True`` adds gain, offset and weight norm."""

    def __init__(self, enc_dim: int, dec_dim: int, att_dim: int, monotonic: bool = True):
        super().__init__()
        self.monotonic = monotonic
        self.w_h = nn.Parameter(torch.empty(att_dim, enc_dim))
        self.w_s = nn.Parameter(torch.empty(att_dim, dec_dim))
        self.bias = nn.Parameter(torch.zeros(att_dim))
        self.v = nn.Parameter(torch.empty(att_dim))
        nn.init.xavier_uniform_(self.w_h)
        nn.init.xavier_uniform_(self.w_s)
        nn.init.uniform_(self.v, -1.0 / math.sqrt(att_dim), 1.0 / math.sqrt(att_dim))
        if monotonic:
            self.gain = nn.Parameter(torch.tensor(1.0 / math.sqrt(att_dim)))
            self.offset = nn.Parameter(torch.tensor(R_INIT))

    def params(self) -> AttentionParams:
        if self.monotonic:
            return AttentionParams(self.w_h, self.w_s, self.bias, self.v, self.gain, self.offset)
        return AttentionParams(self.w_h, self.w_s, self.bias, self.v)

    def project_keys(self, h: torch.Tensor) -> torch.Tensor:
        return h @ self.w_h.T

    def from_keys(self, keys: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        """Energy from precomputed ``W_h h`` (``[B, T', A]``) and states ``[B, Ds]``."""
        hidden = F.relu(keys + (s @ self.w_s.T + self.bias).unsqueeze(1))
        if self.monotonic:
            v = self.gain * self.v / self.v.norm()
            return hidden @ v + self.offset
        return hidden @ self.v


def initial_alignment(n_frames: int, dtype=torch.float64) -> torch.Tensor:
    """Alignment of the virtual row 0: all mass on the first frame."""
    a = torch.zeros(n_frames, dtype=dtype)
    a[0] = 1.0
    return a


def expected_alignment_recurrence(p, alpha_init=None, mask=None) -> np.ndarray:
    """Row-by-row scalar recurrence for the expected alignments, ``[U, T']``.

    Written through ``q = alpha / p`` (``q_j = (1 - p_{j-1}) q_{j-1} + alpha_prev_j``)
    so that ``p = 0`` needs no special casing. ``mask`` zeroes cells while
    the recurrence runs, so removed mass never reaches later rows.
    """
    p = np.asarray(p, dtype=np.float64)
    n_rows, n_frames = p.shape
    prev = np.zeros(n_frames) if alpha_init is None else np.asarray(alpha_init, dtype=np.float64)
    if alpha_init is None:
        prev[0] = 1.0
    alpha = np.zeros_like(p)
    for i in range(n_rows):
        q = 0.0
        for j in range(n_frames):
            q = (1.0 - p[i, j - 1]) * q + prev[j] if j > 0 else prev[j]
            alpha[i, j] = p[i, j] * q
            if mask is not None and not mask[i, j]:
                alpha[i, j] = 0.0
                q = 0.0
        prev = alpha[i]
    return alpha


def _exclusive_cumprod(x: torch.Tensor, eps: float) -> torch.Tensor:
    c = torch.cumprod(x.clamp(eps, 1.0), dim=-1)
    return torch.cat([torch.ones_like(c[..., :1]), c[..., :-1]], dim=-1)


def alignment_row_parallel(p_row: torch.Tensor, prev: torch.Tensor,
                           eps: float = CUMPROD_EPS) -> torch.Tensor:
    """One row via cumulative product/sum: ``p * E * cumsum(prev / E)``.

    ``E`` is the exclusive clamped cumulative product of ``1 - p``.
    """
    e = _exclusive_cumprod(1.0 - p_row, eps)
    return p_row * e * torch.cumsum(prev / e, dim=-1)


def expected_alignment_parallel(p, alpha_init=None, mask=None, eps: float = CUMPROD_EPS) -> torch.Tensor:
    p = torch.as_tensor(p, dtype=torch.float64) if not torch.is_tensor(p) else p
    prev = initial_alignment(p.shape[-1], p.dtype) if alpha_init is None else torch.as_tensor(alpha_init, dtype=p.dtype)
    rows = []
    for i in range(p.shape[0]):
        row = alignment_row_parallel(p[i], prev, eps)
        if mask is not None:
            row = row * torch.as_tensor(mask[i], dtype=p.dtype)
        rows.append(row)
        prev = row
    return torch.stack(rows)


def alignment_row_stable(p_row: torch.Tensor, log_1mp: torch.Tensor, prev: torch.Tensor) -> torch.Tensor:
    """One row of expected alignments in a form that never divides.

    ``alpha_j = p_j * sum_{k<=j} prev_k * exp(L_j - L_k)`` where ``L`` is the
    exclusive cumulative sum of ``log(1 - p)``; every exponent is <= 0.
    Batched over leading dims: ``p_row``/``log_1mp``/``prev`` are ``[..., T']``.
    """
    n = p_row.shape[-1]
    cum = torch.cumsum(log_1mp, dim=-1)
    excl = torch.cat([torch.zeros_like(cum[..., :1]), cum[..., :-1]], dim=-1)
    diff = excl.unsqueeze(-1) - excl.unsqueeze(-2)  # [..., j, k]
    lower = torch.ones(n, n, dtype=torch.bool, device=p_row.device).tril()
    trans = torch.where(lower, diff, torch.full_like(diff, -math.inf)).exp()
    return p_row * (trans @ prev.unsqueeze(-1)).squeeze(-1)


def expected_alignment(p, log_1mp=None, alpha_init=None, mask=None) -> torch.Tensor:
    """Expected alignments ``[U, T']`` with the division-free row update."""
    p = torch.as_tensor(p, dtype=torch.float64) if not torch.is_tensor(p) else p
    if log_1mp is None:
        log_1mp = torch.log1p(-p)
    prev = initial_alignment(p.shape[-1], p.dtype) if alpha_init is None else torch.as_tensor(alpha_init, dtype=p.dtype)
    rows = []
    for i in range(p.shape[0]):
        row = alignment_row_stable(p[i], log_1mp[i], prev)
        if mask is not None:
            row = row * torch.as_tensor(mask[i], dtype=p.dtype)
        rows.append(row)
        prev = row
    return torch.stack(rows)


def movsum_torch(x: torch.Tensor, back: int, forward: int) -> torch.Tensor:
    """Zero-padded moving sum over the last axis, ``sum(x[n-back+1 : n+forward])``."""
    padded = F.pad(x, (back - 1, forward - 1))
    return padded.unfold(-1, back + forward - 1, 1).sum(-1)


def chunk_attention_train(alpha, u, width: int, frame_mask=None) -> torch.Tensor:
    """Chunkwise weights ``beta`` from expected alignments and chunk energies.

    ``alpha``, ``u``: ``[..., T']``. ``frame_mask`` (bool, same shape) marks
    real frames; padded frames get zero weight.
    """
    if width < 1:
        raise ValueError("chunk width must be >= 1")
    alpha = torch.as_tensor(alpha)
    if width == 1:
        # a one-frame chunk has softmax weight 1
        return alpha if frame_mask is None else alpha.masked_fill(~frame_mask, 0.0)
    u = torch.as_tensor(u, dtype=alpha.dtype)
    if frame_mask is not None:
        u = u.masked_fill(~frame_mask, -math.inf)
    shift = u.max(dim=-1, keepdim=True).values.detach()
    exp_u = torch.exp(u - shift)
    denom = movsum_torch(exp_u, width, 1).clamp_min(torch.finfo(alpha.dtype).tiny)
    return exp_u * movsum_torch(alpha / denom, 1, width)


def hard_decode_step(p_row, start: int) -> int | None:
    """First 1-indexed frame ``j >= start`` with ``p_j >= 0.5``; ``None`` if there is none."""
    p_row = np.asarray(p_row, dtype=np.float64)
    hits = np.nonzero(p_row[start - 1:] >= 0.5)[0]
    if hits.size == 0:
        return None
    return int(start + hits[0])


def chunk_attention_test(u_row, boundary: int, width: int) -> np.ndarray:
    """Softmax weights over frames ``[max(1, t-w+1), t]`` (1-indexed), zero elsewhere."""
    u_row = np.asarray(u_row, dtype=np.float64)
    lo = max(1, boundary - width + 1)
    weights = np.zeros_like(u_row)
    window = u_row[lo - 1:boundary]
    z = np.exp(window - window.max())
    weights[lo - 1:boundary] = z / z.sum()
    return weights


def context_vector(weights, h) -> np.ndarray:
    return np.asarray(weights, dtype=np.float64) @ np.asarray(h, dtype=np.float64)
