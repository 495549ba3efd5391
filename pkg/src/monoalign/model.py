"""Small recurrent encoder-decoder with monotonic chunkwise attention and a CTC head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import EnergyLayer, alignment_row_stable, chunk_attention_train
from .data import eos_id, output_vocab

# consecutive tokens allowed to stop on one frame during free decoding
MAX_TOKENS_PER_FRAME = 2


@dataclass
class ModelConfig:
    input_dim: int = 16
    vocab_size: int = 10  # symbols, excluding blank and eos
    enc_units: int = 64
    enc_layers: int = 2
    downsample: int = 2
    dec_units: int = 64
    emb_dim: int = 32
    att_dim: int = 64
    chunk_width: int = 4
    noise_std: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name != "noise_std" and value <= 0:
                raise ValueError(f"{name} must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    @property
    def n_outputs(self) -> int:
        return output_vocab(self.vocab_size)

    @property
    def eos(self) -> int:
        return eos_id(self.vocab_size)


@dataclass
class Hypothesis:
    tokens: list[int]
    boundaries: list[int]  # 1-indexed encoder frames, one per token (eos included if emitted)
    score: float = 0.0
    ended_with_eos: bool = False


def pad_features(feats: Sequence[np.ndarray], dtype) -> tuple[torch.Tensor, torch.Tensor]:
    lens = torch.tensor([f.shape[0] for f in feats])
    out = torch.zeros(len(feats), int(lens.max()), feats[0].shape[1], dtype=dtype)
    for b, f in enumerate(feats):
        out[b, :f.shape[0]] = torch.as_tensor(f, dtype=dtype)
    return out, lens


class MonotonicAED(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = c = config
        self.encoder = nn.LSTM(c.input_dim * c.downsample, c.enc_units, num_layers=c.enc_layers,
                               batch_first=True)
        self.ctc_out = nn.Linear(c.enc_units, c.n_outputs)
        self.embed = nn.Embedding(c.n_outputs, c.emb_dim)
        self.dec_cell = nn.LSTMCell(c.emb_dim + c.enc_units, c.dec_units)
        self.mono = EnergyLayer(c.enc_units, c.dec_units, c.att_dim, monotonic=True)
        self.chunk = EnergyLayer(c.enc_units, c.dec_units, c.att_dim, monotonic=False)
        self.out_proj = nn.Linear(c.dec_units + c.enc_units, c.dec_units)
        self.out = nn.Linear(c.dec_units, c.n_outputs)

    # -- encoder -----------------------------------------------------------
    def encode(self, x: torch.Tensor, lens: torch.Tensor):
        """Downsample by concatenating neighbouring frames, then run the LSTM.

        Returns encoder outputs ``[B, T', H]``, lengths ``[B]`` and CTC
        log-posteriors ``[B, T', V]``.
        """
        k = self.config.downsample
        b, t, d = x.shape
        pad = (-t) % k
        if pad:
            x = F.pad(x, (0, 0, 0, pad))
        x = x.reshape(b, (t + pad) // k, d * k)
        enc_lens = (lens + k - 1) // k
        h, _ = self.encoder(x)
        mask = torch.arange(h.shape[1])[None, :] < enc_lens[:, None]
        h = h * mask.unsqueeze(-1).to(h.dtype)
        return h, enc_lens, torch.log_softmax(self.ctc_out(h), dim=-1)

    # -- decoder -----------------------------------------------------------
    def _state(self, batch: int, ref: torch.Tensor):
        z = ref.new_zeros(batch, self.config.dec_units)
        return (z, z.clone()), ref.new_zeros(batch, self.config.enc_units)

    def _step(self, prev_tokens, state, context):
        inp = torch.cat([self.embed(prev_tokens), context], dim=-1)
        return self.dec_cell(inp, state)

    def _logits(self, s, context):
        return self.out(torch.tanh(self.out_proj(torch.cat([s, context], dim=-1))))

    def forward_expected(self, h, enc_lens, targets: torch.Tensor,
                         generator: torch.Generator | None = None,
                         alignment_mask: torch.Tensor | None = None):
        """Teacher-forced pass with expected alignments.

        ``targets`` is ``[B, L]`` (labels followed by eos, padded with eos).
        ``generator`` enables the pre-sigmoid noise; ``None`` means no noise.
        ``alignment_mask`` (``[B, L, T']`` bool) removes cells during
        marginalisation. Returns logits ``[B, L, V]``, alpha and beta
        ``[B, L, T']`` and the noiseless selection probabilities.
        """
        c = self.config
        batch, n_steps = targets.shape
        frame_mask = torch.arange(h.shape[1])[None, :] < enc_lens[:, None]
        keys_m = self.mono.project_keys(h)
        keys_c = self.chunk.project_keys(h)
        state, context = self._state(batch, h)
        prev_alpha = torch.zeros_like(h[..., 0])
        prev_alpha[:, 0] = 1.0
        prev_tok = torch.full((batch,), c.eos, dtype=torch.long)
        logits, alphas, betas, probs = [], [], [], []
        for i in range(n_steps):
            state = self._step(prev_tok, state, context)
            s = state[0]
            e = self.mono.from_keys(keys_m, s)
            probs.append(torch.sigmoid(e).masked_fill(~frame_mask, 0.0))
            if generator is not None and c.noise_std > 0:
                e = e + c.noise_std * torch.randn(e.shape, generator=generator, dtype=e.dtype)
            p = torch.sigmoid(e).masked_fill(~frame_mask, 0.0)
            log_1mp = F.logsigmoid(-e).masked_fill(~frame_mask, 0.0)
            alpha = alignment_row_stable(p, log_1mp, prev_alpha)
            if alignment_mask is not None:
                alpha = alpha * alignment_mask[:, i].to(alpha.dtype)
            u = self.chunk.from_keys(keys_c, s)
            beta = chunk_attention_train(alpha, u, c.chunk_width, frame_mask)
            context = (beta.unsqueeze(1) @ h).squeeze(1)
            logits.append(self._logits(s, context))
            alphas.append(alpha)
            betas.append(beta)
            prev_alpha = alpha
            prev_tok = targets[:, i]
        return (torch.stack(logits, 1), torch.stack(alphas, 1), torch.stack(betas, 1),
                torch.stack(probs, 1))

    def _hard_attend(self, h, keys_m, keys_c, s, start, frame_mask):
        """Boundary search and windowed softmax for a batch of decoder states.

        ``start`` holds 0-indexed resume frames. Returns (boundary or -1,
        context, selection probabilities).
        """
        w = self.config.chunk_width
        p = torch.sigmoid(self.mono.from_keys(keys_m, s))
        j = torch.arange(h.shape[1])[None, :]
        hit = (p >= 0.5) & frame_mask & (j >= start[:, None])
        found = hit.any(-1)
        t = torch.where(found, hit.to(torch.int8).argmax(-1), torch.full_like(start, -1))
        u = self.chunk.from_keys(keys_c, s)
        window = (j <= t[:, None]) & (j > t[:, None] - w) & found[:, None]
        weights = torch.softmax(u.masked_fill(~window, -math.inf), dim=-1)
        weights = torch.nan_to_num(weights, nan=0.0)
        context = (weights.unsqueeze(1) @ h).squeeze(1)
        return t, context, p

    @torch.no_grad()
    def greedy_decode(self, h, enc_lens, max_steps: int | None = None,
                      forced: Sequence[Sequence[int]] | None = None,
                      max_per_frame: int | None = MAX_TOKENS_PER_FRAME):
        """Streaming hard decoding for a batch.

        With ``forced`` token sequences the decoder is teacher-forced and only
        boundaries are of interest; tokens without a boundary get ``T'``.
        Free decoding moves past a frame once ``max_per_frame`` consecutive
        tokens have stopped there (``None`` disables the guard).
        Returns per-utterance ``(tokens, boundaries, p_rows)``.
        """
        c = self.config
        batch = h.shape[0]
        frame_mask = torch.arange(h.shape[1])[None, :] < enc_lens[:, None]
        keys_m, keys_c = self.mono.project_keys(h), self.chunk.project_keys(h)
        state, context = self._state(batch, h)
        prev_tok = torch.full((batch,), c.eos, dtype=torch.long)
        start = torch.zeros(batch, dtype=torch.long)
        alive = torch.ones(batch, dtype=torch.bool)
        tokens = [[] for _ in range(batch)]
        bounds = [[] for _ in range(batch)]
        p_rows = [[] for _ in range(batch)]
        if forced is not None:
            n_steps = max(len(f) for f in forced)
        else:
            n_steps = max_steps or (max_per_frame or 1) * int(enc_lens.max()) + 1
        for i in range(n_steps):
            if forced is not None:
                alive &= torch.tensor([i < len(f) for f in forced])
            if not alive.any():
                break
            state = self._step(prev_tok, state, context)
            t, context, p = self._hard_attend(h, keys_m, keys_c, state[0], start, frame_mask)
            logits = self._logits(state[0], context)
            pred = logits.argmax(-1)
            for b in range(batch):
                if not alive[b]:
                    continue
                if forced is None and t[b] < 0:
                    alive[b] = False
                    continue
                p_rows[b].append(p[b, :int(enc_lens[b])].tolist())
                if forced is not None:
                    bounds[b].append(int(t[b]) + 1 if t[b] >= 0 else int(enc_lens[b]))
                    tokens[b].append(int(forced[b][i]))
                    continue
                tokens[b].append(int(pred[b]))
                bounds[b].append(int(t[b]) + 1)
                if pred[b] == c.eos:
                    alive[b] = False
            if forced is not None:
                prev_tok = torch.tensor([f[i] if i < len(f) else c.eos for f in forced])
                # once a token finds no boundary the rest of the utterance is exhausted
                start = torch.where(t >= 0, t, enc_lens - 1)
            else:
                prev_tok = pred
                start = torch.tensor([resume_frame(bnd, max_per_frame) for bnd in bounds])
        return tokens, bounds, p_rows

    @torch.no_grad()
    def beam_decode(self, h, enc_len: int, beam: int, max_steps: int | None = None,
                    max_per_frame: int | None = MAX_TOKENS_PER_FRAME) -> Hypothesis:
        """Beam search for one utterance with length-normalised scores.

        ``h`` is ``[1, T', H]``. A hypothesis ends on eos or when no frame
        passes the stop threshold.
        """
        c = self.config
        h = h[:, :enc_len]
        n_frames = h.shape[1]
        frame_mask = torch.ones(1, n_frames, dtype=torch.bool)
        keys_m, keys_c = self.mono.project_keys(h), self.chunk.project_keys(h)
        (s0, c0), ctx0 = self._state(1, h)
        live = [(Hypothesis([], []), (s0[0], c0[0]), ctx0[0], 0)]
        done: list[Hypothesis] = []
        norm = lambda hyp: hyp.score / max(len(hyp.tokens), 1)
        for _ in range(max_steps or (max_per_frame or 1) * n_frames + 1):
            if not live:
                break
            n = len(live)
            prev = torch.tensor([hyp.tokens[-1] if hyp.tokens else c.eos for hyp, *_ in live])
            state = (torch.stack([st[0] for _, st, _, _ in live]), torch.stack([st[1] for _, st, _, _ in live]))
            ctx = torch.stack([cx for _, _, cx, _ in live])
            start = torch.tensor([st for *_, st in live])
            state = self._step(prev, state, ctx)
            t, ctx, _ = self._hard_attend(h.expand(n, -1, -1), keys_m.expand(n, -1, -1),
                                          keys_c.expand(n, -1, -1), state[0], start,
                                          frame_mask.expand(n, -1))
            logp = torch.log_softmax(self._logits(state[0], ctx), dim=-1)
            cands = []
            for k, (hyp, *_rest) in enumerate(live):
                if t[k] < 0:
                    done.append(hyp)
                    continue
                top = torch.topk(logp[k], beam)
                for lp, tok in zip(top.values.tolist(), top.indices.tolist()):
                    new = Hypothesis(hyp.tokens + [tok], hyp.boundaries + [int(t[k]) + 1],
                                     hyp.score + lp, tok == c.eos)
                    cands.append((new, (state[0][k], state[1][k]), ctx[k],
                                  resume_frame(new.boundaries, max_per_frame)))
            cands.sort(key=lambda item: norm(item[0]), reverse=True)
            live = []
            for item in cands[:beam]:
                if item[0].ended_with_eos:
                    done.append(item[0])
                else:
                    live.append(item)
        done.extend(hyp for hyp, *_ in live)
        return max(done, key=norm)


def resume_frame(boundaries: Sequence[int], max_per_frame: int | None) -> int:
    """0-indexed frame where the next boundary search starts.

    The search resumes at the last boundary, or just after it once the last
    ``max_per_frame`` tokens all stopped on that frame.
    """
    if not boundaries:
        return 0
    last = boundaries[-1]
    if max_per_frame and len(boundaries) >= max_per_frame and \
            all(b == last for b in boundaries[-max_per_frame:]):
        return last
    return last - 1


def strip_eos(tokens: Sequence[int], eos: int) -> list[int]:
    return [t for t in tokens if t != eos]
