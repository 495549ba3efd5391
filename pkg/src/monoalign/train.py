"""Two-stage curriculum training of the toy MoChA model.

Stage 1 learns the scale of the expected alignments with quantity
regularisation; stage 2 starts from the stage-1 parameters with a fresh
optimizer and learning rate and trains boundary positions (CTC-synchronous,
DeCoT or MinLT). Every run is deterministic given the config seed.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .ctc import BoundaryProvider, ctc_loss_torch
from .data import SyntheticUtterance, apply_spec_masks, encoder_frames
from .model import MAX_TOKENS_PER_FRAME, ModelConfig, MonotonicAED, pad_features
from .objectives import (LossWeights, ctc_st_loss, decot_mask, minlt_loss, quantity_loss,
                         total_loss)

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class SpecAugmentConfig:
    freq_width: int = 4  # F
    n_freq_masks: int = 1  # M_F
    time_width: int = 6  # T_mask
    n_time_masks: int = 2  # M_T


@dataclass
class StageConfig:
    weights: LossWeights = field(default_factory=lambda: LossWeights(ctc=0.3, qua=1.0))
    epochs: int = 10
    lr: float = 1e-3
    lr_decay: float = 0.85  # per epoch
    spec_augment: SpecAugmentConfig | None = None
    boundary_mode: str = "on_the_fly"


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    stages: list[StageConfig] = field(default_factory=lambda: [StageConfig()])
    batch_size: int = 16
    label_smoothing: float = 0.1
    grad_clip: float = 5.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    dtype: str = "float64"
    eval_every: int = 1  # epochs between dev evaluations; 0 disables

    def __post_init__(self):
        if not 1 <= len(self.stages) <= 2:
            raise ValueError("a curriculum has one or two stages")
        if self.batch_size <= 0 or self.grad_clip <= 0:
            raise ValueError("batch_size and grad_clip must be positive")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        model = ModelConfig(**raw.pop("model", {}))
        stages = []
        for st in raw.pop("stages", [{}]):
            st = dict(st)
            weights = LossWeights(**st.pop("weights", {"ctc": 0.3, "qua": 1.0}))
            sa = st.pop("spec_augment", None)
            stages.append(StageConfig(weights=weights,
                                      spec_augment=SpecAugmentConfig(**sa) if sa else None, **st))
        if "adam_betas" in raw:
            raw["adam_betas"] = tuple(raw["adam_betas"])
        return cls(model=model, stages=stages, **raw)


def preset(name: str, epochs: tuple[int, int] = (10, 10), lr: float = 3e-3,
           lr_decay: float = 0.9, **overrides) -> TrainConfig:
    """Named training recipes.

    ``baseline`` keeps quantity regularisation in both stages; ``ctc_st``,
    ``decot`` and ``minlt`` switch stage 2 to the respective objective;
    ``ctc_st_scratch`` skips stage 1. The CTC-synchronous recipe leaves the
    eos row out of the boundary loss (see ``LossWeights.sync_eos``).
    """
    qua = LossWeights(ctc=0.3, qua=1.0)
    sync = LossWeights(ctc=0.3, sync=1.0, sync_eos=False)
    stage2 = {
        "baseline": qua,
        "ctc_st": sync,
        "decot": LossWeights(ctc=0.3, qua=1.0, decot_delta=2),
        "minlt": LossWeights(ctc=0.3, minlt=1.0),
    }
    if name == "ctc_st_scratch":
        stages = [StageConfig(weights=sync, epochs=sum(epochs), lr=lr, lr_decay=lr_decay)]
    elif name in stage2:
        stages = [StageConfig(weights=qua, epochs=epochs[0], lr=lr, lr_decay=lr_decay),
                  StageConfig(weights=stage2[name], epochs=epochs[1], lr=lr, lr_decay=lr_decay)]
    else:
        raise ValueError(f"unknown preset {name!r}")
    return TrainConfig(stages=stages, **overrides)


# -- batching ----------------------------------------------------------------

@dataclass
class Batch:
    utts: list[SyntheticUtterance]
    x: torch.Tensor
    lens: torch.Tensor
    targets: torch.Tensor  # labels + eos, padded with eos
    row_mask: torch.Tensor  # [B, L] real decoder steps (eos included)
    token_mask: torch.Tensor  # [B, L] label steps only


def make_batch(utts: Sequence[SyntheticUtterance], eos: int, dtype,
               feats: Sequence[np.ndarray] | None = None) -> Batch:
    feats = feats if feats is not None else [u.features for u in utts]
    x, lens = pad_features(feats, dtype)
    n_steps = max(len(u.labels) for u in utts) + 1
    targets = torch.full((len(utts), n_steps), eos, dtype=torch.long)
    row_mask = torch.zeros(len(utts), n_steps, dtype=dtype)
    token_mask = torch.zeros(len(utts), n_steps, dtype=dtype)
    for b, u in enumerate(utts):
        targets[b, :len(u.labels)] = torch.tensor(u.labels)
        row_mask[b, :len(u.labels) + 1] = 1.0
        token_mask[b, :len(u.labels)] = 1.0
    return Batch(list(utts), x, lens, targets, row_mask, token_mask)


def _pad_rows(rows: Sequence[Sequence[float]], width: int, fill: float, dtype) -> torch.Tensor:
    out = torch.full((len(rows), width), fill, dtype=dtype)
    for b, r in enumerate(rows):
        out[b, :len(r)] = torch.as_tensor(list(r), dtype=dtype)
    return out


# -- losses --------------------------------------------------------------------

def compute_losses(model: MonotonicAED, batch: Batch, weights: LossWeights,
                   label_smoothing: float = 0.1, generator: torch.Generator | None = None,
                   provider: BoundaryProvider | None = None) -> dict[str, torch.Tensor]:
    """All loss components (batch means) plus ``total`` for one minibatch."""
    eos = model.config.eos
    h, enc_lens, ctc_lp = model.encode(batch.x, batch.lens)
    n_frames = h.shape[1]
    dtype = h.dtype
    align_mask = None
    if weights.decot_delta is not None:
        align_mask = torch.ones(len(batch.utts), batch.targets.shape[1], n_frames, dtype=torch.bool)
        for b, u in enumerate(batch.utts):
            m = decot_mask(u.boundaries, weights.decot_delta, n_frames)
            align_mask[b, :len(u.boundaries)] = torch.from_numpy(m)
    logits, alpha, _beta, _p = model.forward_expected(h, enc_lens, batch.targets, generator, align_mask)

    ce = F.cross_entropy(logits.transpose(1, 2), batch.targets, reduction="none",
                         label_smoothing=label_smoothing)
    out = {"mocha": (ce * batch.row_mask).sum(1).mean()}
    labels = [u.labels for u in batch.utts]
    out["ctc"] = ctc_loss_torch(ctc_lp, enc_lens.tolist(), labels).mean()
    n_steps = batch.row_mask.sum(1)
    token_mask = batch.token_mask
    out["qua"] = quantity_loss(alpha, n_steps - 1, token_mask).mean()
    if weights.sync > 0:
        provider = provider or BoundaryProvider()
        lp_np = ctc_lp.detach().cpu().double().numpy()
        items = [lp_np[b, :int(enc_lens[b])] for b in range(len(batch.utts))]
        b_ctc = provider.boundaries([u.utt_id for u in batch.utts], items, labels)
        target = _pad_rows(b_ctc, batch.targets.shape[1], 0.0, dtype)
        sync_rows = batch.row_mask if weights.sync_eos else token_mask
        out["sync"] = ctc_st_loss(target, alpha, sync_rows).mean()
    if weights.minlt > 0:
        target = _pad_rows([u.boundaries for u in batch.utts], batch.targets.shape[1], 0.0, dtype)
        out["minlt"] = minlt_loss(target, alpha, token_mask).mean()
    out["total"] = total_loss(out["mocha"], out["ctc"], weights,
                              qua=out["qua"] if weights.qua > 0 else None,
                              sync=out.get("sync"), minlt=out.get("minlt"))
    return out


# -- evaluation ----------------------------------------------------------------

def _chunks(seq, size):
    for k in range(0, len(seq), size):
        yield seq[k:k + size]


@torch.no_grad()
def decode(model: MonotonicAED, utts: Sequence[SyntheticUtterance], beam: int = 1,
           batch_size: int = 64, max_per_frame: int | None = MAX_TOKENS_PER_FRAME
           ) -> list[tuple[list[int], list[int]]]:
    """Hypotheses (eos stripped) and their boundaries for every utterance."""
    model.eval()
    eos = model.config.eos
    dtype = next(model.parameters()).dtype
    out = []
    for chunk in _chunks(list(utts), batch_size):
        x, lens = pad_features([u.features for u in chunk], dtype)
        h, enc_lens, _ = model.encode(x, lens)
        if beam == 1:
            toks, bnds, _ = model.greedy_decode(h, enc_lens, max_per_frame=max_per_frame)
            results = list(zip(toks, bnds))
        else:
            results = []
            for b in range(len(chunk)):
                hyp = model.beam_decode(h[b:b + 1], int(enc_lens[b]), beam, max_per_frame=max_per_frame)
                results.append((hyp.tokens, hyp.boundaries))
        for toks, bnds in results:
            keep = [k for k, t in enumerate(toks) if t != eos]
            out.append(([toks[k] for k in keep], [bnds[k] for k in keep]))
    return out


def token_error(model, utts, beam: int = 1) -> float:
    from .metrics import corpus_token_error
    hyps = [h for h, _ in decode(model, utts, beam)]
    return corpus_token_error(hyps, [u.labels for u in utts])


@torch.no_grad()
def teacher_forced_boundaries(model: MonotonicAED, utts: Sequence[SyntheticUtterance],
                              batch_size: int = 64) -> list[list[int]]:
    """Hard-decoded boundaries of the reference tokens (eos excluded)."""
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for chunk in _chunks(list(utts), batch_size):
        x, lens = pad_features([u.features for u in chunk], dtype)
        h, enc_lens, _ = model.encode(x, lens)
        _, bnds, _ = model.greedy_decode(h, enc_lens, forced=[u.labels for u in chunk])
        out.extend(bnds)
    return out


def latency_records(model, utts, frame_ms: float = 20.0):
    from .metrics import token_emission_latency
    records = []
    for u, pred in zip(utts, teacher_forced_boundaries(model, utts)):
        records.extend(token_emission_latency(pred, u.boundaries, frame_ms, u.utt_id, u.labels))
    return records


@torch.no_grad()
def alignment_mass_error(model: MonotonicAED, utts: Sequence[SyntheticUtterance],
                         batch_size: int = 64) -> float:
    """Mean over utterances of ``|U - sum(alpha)|`` over the label rows, noiseless."""
    model.eval()
    dtype = next(model.parameters()).dtype
    errs = []
    for chunk in _chunks(list(utts), batch_size):
        batch = make_batch(chunk, model.config.eos, dtype)
        h, enc_lens, _ = model.encode(batch.x, batch.lens)
        _, alpha, _, _ = model.forward_expected(h, enc_lens, batch.targets)
        errs.extend(quantity_loss(alpha, batch.token_mask.sum(1), batch.token_mask).tolist())
    return float(np.mean(errs))


# -- training ------------------------------------------------------------------

@dataclass
class TrainResult:
    model: MonotonicAED
    log: list[dict]
    stage_params: list[dict[str, np.ndarray]]  # final parameters of each stage


def _param_snapshot(model) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def _finite_or_raise(losses, stage, epoch, step):
    for k, v in losses.items():
        if not torch.isfinite(v):
            raise TrainingDiverged(f"{k} loss became {float(v)} at stage {stage}, "
                                   f"epoch {epoch}, step {step}")


def train_stage(model: MonotonicAED, train: Sequence[SyntheticUtterance], stage: StageConfig,
                config: TrainConfig, stage_index: int, dev: Sequence[SyntheticUtterance] | None = None,
                provider: BoundaryProvider | None = None, log: list[dict] | None = None,
                on_step: Callable[[int, dict], None] | None = None) -> list[dict]:
    """Train one curriculum stage with a fresh Adam optimizer and learning rate."""
    log = [] if log is None else log
    seed = config.seed * 1000 + stage_index
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    if provider is None:
        provider = BoundaryProvider()
    opt = torch.optim.Adam(model.parameters(), lr=stage.lr, betas=config.adam_betas)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=stage.lr_decay)
    dtype = config.torch_dtype
    eos = model.config.eos
    step = 0
    for epoch in range(1, stage.epochs + 1):
        model.train()
        order = rng.permutation(len(train))
        sums: dict[str, float] = {}
        n_batches = 0
        for idx in _chunks(order, config.batch_size):
            utts = [train[k] for k in idx]
            feats = None
            if stage.spec_augment is not None:
                sa = stage.spec_augment
                feats = [apply_spec_masks(u.features, sa.freq_width, sa.n_freq_masks,
                                          sa.time_width, sa.n_time_masks, rng) for u in utts]
            batch = make_batch(utts, eos, dtype, feats)
            losses = compute_losses(model, batch, stage.weights, config.label_smoothing, gen, provider)
            _finite_or_raise(losses, stage_index + 1, epoch, step)
            opt.zero_grad()
            losses["total"].backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            step += 1
            if on_step is not None:
                on_step(step, {k: float(v.detach()) for k, v in losses.items()})
            for k, v in losses.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
            n_batches += 1
        sched.step()
        entry = {"stage": stage_index + 1, "epoch": epoch, "steps": step,
                 "lr": opt.param_groups[0]["lr"]}
        entry.update({f"loss_{k}": v / n_batches for k, v in sorted(sums.items())})
        if dev is not None and config.eval_every and (epoch % config.eval_every == 0 or epoch == stage.epochs):
            entry["dev_mass_error"] = alignment_mass_error(model, dev)
            entry["dev_token_error"] = token_error(model, dev)
        log.append(entry)
        logger.info("stage %d epoch %d: %s", stage_index + 1, epoch, entry)
    return log


def precompute_boundaries(model: MonotonicAED, utts: Sequence[SyntheticUtterance],
                          batch_size: int = 64) -> BoundaryProvider:
    """Freeze CTC Viterbi boundaries of the current model into a lookup table."""
    from .ctc import ctc_viterbi_batch, extract_boundaries
    model.eval()
    dtype = next(model.parameters()).dtype
    table = {}
    with torch.no_grad():
        for chunk in _chunks(list(utts), batch_size):
            x, lens = pad_features([u.features for u in chunk], dtype)
            _, enc_lens, lp = model.encode(x, lens)
            lp = lp.double().numpy()
            paths = ctc_viterbi_batch([lp[b, :int(enc_lens[b])] for b in range(len(chunk))],
                                      [u.labels for u in chunk])
            for u, (path, _) in zip(chunk, paths):
                table[u.utt_id] = extract_boundaries(path)
    return BoundaryProvider("precomputed", table)


def build_model(config: TrainConfig) -> MonotonicAED:
    torch.manual_seed(config.seed)
    return MonotonicAED(config.model).to(config.torch_dtype)


def train_curriculum(train: Sequence[SyntheticUtterance], config: TrainConfig,
                     dev: Sequence[SyntheticUtterance] | None = None,
                     init: MonotonicAED | None = None, start_stage: int = 0) -> TrainResult:
    """Run the configured stages in order.

    ``init``/``start_stage`` resume from an already trained stage-1 model so
    several stage-2 variants can share one stage 1.
    """
    model = build_model(config)
    if init is not None:
        model.load_state_dict(init.state_dict())
    log: list[dict] = []
    snapshots = []
    for k in range(start_stage, len(config.stages)):
        stage = config.stages[k]
        provider = None
        if stage.weights.sync > 0 and stage.boundary_mode == "precomputed":
            provider = precompute_boundaries(model, train)
        train_stage(model, train, stage, config, k, dev, provider, log)
        snapshots.append(_param_snapshot(model))
    return TrainResult(model, log, snapshots)


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(model: MonotonicAED, path: str | Path, extra: dict | None = None) -> None:
    """``.npz`` archive: one array per named parameter plus a JSON ``__meta__`` entry."""
    meta = {"format_version": CHECKPOINT_VERSION, "model_config": asdict(model.config),
            "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
            "extra": extra or {}}
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[MonotonicAED, dict]:
    with np.load(path) as archive:
        meta = json.loads(archive["__meta__"].tobytes().decode("utf-8"))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
        state = {k: torch.from_numpy(archive[k].copy()) for k in archive.files if k != "__meta__"}
    model = MonotonicAED(ModelConfig(**meta["model_config"]))
    model = model.to(getattr(torch, meta["dtype"]))
    model.load_state_dict(state)
    return model, meta
