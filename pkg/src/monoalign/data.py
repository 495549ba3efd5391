"""Synthetic monotonic transduction task and SpecAugment-style masking.

Each symbol owns a fixed random embedding; an utterance repeats the embedding
of each of its symbols for a random number of frames and adds Gaussian noise.
Oracle boundaries are the last input frame of every symbol segment, expressed
in (1-indexed) encoder frames after downsampling.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


@dataclass
class SyntheticUtterance:
    utt_id: str
    features: np.ndarray  # [T, D]
    labels: list[int]
    boundaries: list[int]  # one per label, encoder frames, eos not included

    @property
    def n_frames(self) -> int:
        return int(self.features.shape[0])

    def to_json(self) -> dict:
        return {"id": self.utt_id, "features": self.features.tolist(),
                "labels": list(self.labels), "boundaries": list(self.boundaries)}

    @classmethod
    def from_json(cls, obj: dict) -> "SyntheticUtterance":
        return cls(str(obj["id"]), np.asarray(obj["features"], dtype=np.float64),
                   [int(v) for v in obj["labels"]], [int(v) for v in obj["boundaries"]])


def encoder_frames(n_frames: int, downsample: int = 2) -> int:
    return math.ceil(n_frames / downsample)


def symbol_embeddings(vocab_size: int, dim: int, seed: int) -> np.ndarray:
    """Row ``k`` is the embedding of symbol ``k``; row 0 (blank) is unused."""
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 1.0, size=(vocab_size + 1, dim))


def generate_dataset(n_utts: int, u_range: tuple[int, int] = (3, 12),
                     dur_range: tuple[int, int] = (2, 12), vocab_size: int = 10,
                     noise_std: float = 0.1, seed: int = 0, dim: int = 16,
                     embedding_seed: int = 0, downsample: int = 2,
                     prefix: str = "utt") -> list[SyntheticUtterance]:
    """Generate ``n_utts`` utterances, deterministic given ``seed``.

    Symbols are drawn uniformly from ``1..vocab_size`` excluding the previous
    symbol, so that adjacent segments are always distinguishable.
    ``embedding_seed`` fixes the symbol embeddings and must be shared across
    splits of the same task.
    """
    lo_u, hi_u = u_range
    lo_d, hi_d = dur_range
    if not (1 <= lo_u <= hi_u):
        raise ValueError(f"invalid label length range {u_range}")
    if not (2 <= lo_d <= hi_d <= 12):
        raise ValueError(f"duration range {dur_range} must lie within [2, 12]")
    if vocab_size < 2:
        raise ValueError("vocab_size must be at least 2")
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    table = symbol_embeddings(vocab_size, dim, embedding_seed)
    rng = np.random.default_rng(seed)
    out = []
    for n in range(n_utts):
        n_labels = int(rng.integers(lo_u, hi_u + 1))
        labels = [int(rng.integers(1, vocab_size + 1))]
        for _ in range(n_labels - 1):
            nxt = int(rng.integers(1, vocab_size))
            labels.append(nxt + 1 if nxt >= labels[-1] else nxt)
        durs = rng.integers(lo_d, hi_d + 1, size=n_labels)
        feats = np.repeat(table[labels], durs, axis=0)
        if noise_std > 0:
            feats = feats + rng.normal(0.0, noise_std, size=feats.shape)
        ends = np.cumsum(durs)
        bounds = [int(math.ceil(e / downsample)) for e in ends]
        out.append(SyntheticUtterance(f"{prefix}{n:05d}", feats, labels, bounds))
    return out


def apply_spec_masks(features: np.ndarray, freq_width: int, n_freq_masks: int,
                     time_width: int, n_time_masks: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Zero ``n_time_masks`` time bands and ``n_freq_masks`` frequency bands.

    Band widths are uniform integers in ``[0, time_width]`` / ``[0, freq_width]``.
    Returns a copy; the input is not modified.
    """
    feats = np.array(features, dtype=np.float64, copy=True)
    n_t, n_f = feats.shape
    for _ in range(n_freq_masks):
        width = int(rng.integers(0, min(freq_width, n_f) + 1))
        start = int(rng.integers(0, n_f - width + 1))
        feats[:, start:start + width] = 0.0
    for _ in range(n_time_masks):
        width = int(rng.integers(0, min(time_width, n_t) + 1))
        start = int(rng.integers(0, n_t - width + 1))
        feats[start:start + width, :] = 0.0
    return feats


def write_jsonl(utts: Iterable[SyntheticUtterance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u in utts:
            fh.write(json.dumps(u.to_json()) + "\n")


def read_jsonl(path: str | Path) -> list[SyntheticUtterance]:
    with open(path, encoding="utf-8") as fh:
        return [SyntheticUtterance.from_json(json.loads(line)) for line in fh if line.strip()]


def eos_id(vocab_size: int) -> int:
    return vocab_size + 1


def output_vocab(vocab_size: int) -> int:
    """Blank + symbols + eos."""
    return vocab_size + 2


def with_eos(boundaries: Sequence[int], n_enc_frames: int) -> list[int]:
    return list(boundaries) + [n_enc_frames]
