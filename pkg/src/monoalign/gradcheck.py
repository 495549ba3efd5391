"""Finite-difference gradient suite over every differentiable computation.

Each entry builds a scalar function of a flat float64 vector and a sampler for
random check points. ``run_suite`` evaluates all of them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import attention, objectives
from .ctc import ctc_loss
from .numerics import FunctionOp, TorchOp, finite_difference_check, logsumexp, stable_softmax

MODULE_TOL = 1e-4
PIPELINE_TOL = 1e-3
GRAD_FLOOR = 1e-6


@dataclass
class GradCase:
    name: str
    make: Callable[[np.random.Generator], tuple[object, np.ndarray]]
    tol: float = MODULE_TOL


@dataclass
class GradResult:
    name: str
    max_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol


def _probs(rng, shape, lo=0.05, hi=0.95):
    return rng.uniform(lo, hi, size=shape)


def _case_logsumexp(rng):
    op = FunctionOp(logsumexp, stable_softmax, "logsumexp")
    return op, rng.normal(size=5)


def _case_sigmoid(rng):
    op = TorchOp(lambda e: torch.sigmoid(e).mul(torch.arange(1.0, 5.0, dtype=e.dtype)).sum())
    return op, rng.normal(size=4)


def _case_ctc(rng):
    n_t, vocab = 6, 4
    labels = [int(v) for v in rng.integers(1, vocab, size=3)]
    while len(labels) + sum(a == b for a, b in zip(labels, labels[1:])) > n_t:
        labels = labels[:-1]
    logits = rng.normal(size=(n_t, vocab))
    point = logits - np.log(np.exp(logits).sum(1, keepdims=True))
    op = FunctionOp(lambda x: ctc_loss(x.reshape(n_t, vocab), labels)[0],
                    lambda x: ctc_loss(x.reshape(n_t, vocab), labels)[1], "ctc_loss")
    return op, point.reshape(-1)


def _weighted(shape, rng):
    return torch.as_tensor(rng.normal(size=shape))


def _case_alignment_stable(rng):
    shape = (3, 7)
    w = _weighted(shape, rng)
    op = TorchOp(lambda p: (attention.expected_alignment(p.reshape(shape)) * w).sum())
    return op, _probs(rng, shape).reshape(-1)


def _case_alignment_parallel(rng):
    shape = (3, 7)
    w = _weighted(shape, rng)
    op = TorchOp(lambda p: (attention.expected_alignment_parallel(p.reshape(shape)) * w).sum())
    return op, _probs(rng, shape).reshape(-1)


def _case_decot_alignment(rng):
    shape = (3, 8)
    w = _weighted(shape, rng)
    mask = objectives.decot_mask([2, 4, 6], 1, shape[1])
    op = TorchOp(lambda p: (attention.expected_alignment(p.reshape(shape), mask=mask) * w).sum())
    return op, _probs(rng, shape).reshape(-1)


def _case_chunk_alpha(rng):
    shape = (3, 8)
    u = torch.as_tensor(rng.normal(size=shape))
    w = _weighted(shape, rng)
    op = TorchOp(lambda a: (attention.chunk_attention_train(a.reshape(shape), u, 3) * w).sum())
    return op, rng.uniform(0, 0.5, size=shape).reshape(-1)


def _case_chunk_energy(rng):
    shape = (3, 8)
    alpha = torch.as_tensor(rng.uniform(0, 0.5, size=shape))
    w = _weighted(shape, rng)
    op = TorchOp(lambda u: (attention.chunk_attention_train(alpha, u.reshape(shape), 3) * w).sum())
    return op, rng.normal(size=shape).reshape(-1)


def _case_monotonic_energy(rng):
    enc, dec, att, n_t = 4, 3, 5, 6
    h = torch.as_tensor(rng.normal(size=(n_t, enc)))
    s = torch.as_tensor(rng.normal(size=dec))
    sizes = [att * enc, att * dec, att, att, 1, 1]
    w = _weighted(n_t, rng)

    def fn(theta):
        parts = torch.split(theta, sizes)
        params = attention.AttentionParams(parts[0].reshape(att, enc), parts[1].reshape(att, dec),
                                           parts[2], parts[3], parts[4][0], parts[5][0])
        return (attention.monotonic_energy(h, s, params) * w).sum()

    theta = np.concatenate([rng.normal(size=sum(sizes[:4])), [0.7, -4.0]])
    return TorchOp(fn), theta


def _case_quantity(rng):
    shape = (3, 6)
    op = TorchOp(lambda a: objectives.quantity_loss(a.reshape(shape), 3))
    # keep the total mass well below U so the absolute value stays smooth
    return op, rng.uniform(0.0, 0.25, size=shape).reshape(-1)


def _case_ctc_st(rng):
    shape = (3, 6)
    target = torch.tensor([2.0, 4.0, 6.0]) + torch.as_tensor(rng.uniform(-0.5, 0.5, 3))
    op = TorchOp(lambda a: objectives.ctc_st_loss(target, a.reshape(shape)))
    return op, rng.uniform(0.0, 0.3, size=shape).reshape(-1)


def _case_minlt(rng):
    shape = (2, 6)
    target = torch.tensor([3.0, 5.0])
    op = TorchOp(lambda a: objectives.minlt_loss(target, a.reshape(shape)))
    return op, rng.uniform(0.0, 0.3, size=shape).reshape(-1)


MODULE_CASES = [
    GradCase("logsumexp", _case_logsumexp),
    GradCase("sigmoid", _case_sigmoid),
    GradCase("ctc_loss", _case_ctc),
    GradCase("expected_alignment", _case_alignment_stable),
    GradCase("expected_alignment_parallel", _case_alignment_parallel),
    GradCase("decot_alignment", _case_decot_alignment),
    GradCase("chunk_attention_wrt_alpha", _case_chunk_alpha),
    GradCase("chunk_attention_wrt_energy", _case_chunk_energy),
    GradCase("monotonic_energy", _case_monotonic_energy),
    GradCase("quantity_loss", _case_quantity),
    GradCase("ctc_st_loss", _case_ctc_st),
    GradCase("minlt_loss", _case_minlt),
]


def pipeline_case(mode: str = "ctc_st", n_params: int = 20, seed: int = 0):
    """Total loss of a tiny float64 model as a function of ``n_params`` sampled weights."""
    from .data import generate_dataset
    from .model import ModelConfig, MonotonicAED
    from .train import compute_losses, make_batch
    from .objectives import LossWeights

    weights = {"ctc_st": LossWeights(ctc=0.3, sync=1.0),
               "quantity": LossWeights(ctc=0.3, qua=1.0),
               "decot": LossWeights(ctc=0.3, qua=1.0, decot_delta=1),
               "minlt": LossWeights(ctc=0.3, minlt=1.0)}[mode]
    rng = np.random.default_rng(seed)
    utts = generate_dataset(3, u_range=(2, 4), dur_range=(2, 6), vocab_size=5, seed=seed)
    torch.manual_seed(seed)
    cfg = ModelConfig(input_dim=16, vocab_size=5, enc_units=8, enc_layers=2, dec_units=8,
                      emb_dim=4, att_dim=6, chunk_width=3)
    model = MonotonicAED(cfg).double()
    batch = make_batch(utts, cfg.eos, torch.float64)
    params = dict(model.named_parameters())
    gen = torch.Generator().manual_seed(seed)
    compute_losses(model, batch, weights, 0.1, gen)["total"].backward()
    # coordinates whose gradient sits below the central-difference roundoff
    # floor (~1e-10 here) cannot be checked in relative terms
    flat = [(name, k) for name, prm in model.named_parameters()
            for k in range(prm.numel()) if abs(prm.grad.view(-1)[k].item()) >= GRAD_FLOOR]
    chosen = [flat[k] for k in rng.choice(len(flat), size=n_params, replace=False)]

    def fn(theta):
        with torch.no_grad():
            for (name, k), val in zip(chosen, theta):
                params[name].data.view(-1)[k] = float(val)
        gen = torch.Generator().manual_seed(seed)
        return compute_losses(model, batch, weights, 0.1, gen)["total"]

    class PipelineOp:
        def forward(self, x):
            with torch.no_grad():
                return float(fn(x))

        def gradient(self, x):
            model.zero_grad()
            fn(x).backward()
            return np.array([params[name].grad.view(-1)[k].item() for name, k in chosen])

    point = np.array([params[name].data.view(-1)[k].item() for name, k in chosen])
    return PipelineOp(), point


def run_suite(n_points: int = 10, seed: int = 0, step: float = 1e-5,
              pipeline_modes=("ctc_st", "quantity", "decot", "minlt")) -> list[GradResult]:
    rng = np.random.default_rng(seed)
    results = []
    for case in MODULE_CASES:
        worst = 0.0
        for _ in range(n_points):
            op, point = case.make(rng)
            worst = max(worst, finite_difference_check(op, point, step))
        results.append(GradResult(case.name, worst, case.tol))
    for k, mode in enumerate(pipeline_modes):
        op, point = pipeline_case(mode, seed=seed + k)
        results.append(GradResult(f"pipeline_{mode}", finite_difference_check(op, point, step),
                                  PIPELINE_TOL))
    return results
