"""Scan and activation primitives plus a finite-difference gradient harness.

Everything here works on float64 numpy arrays. The torch-side attention code
mirrors these primitives; the numpy versions are the reference the tests and
the ``selftest`` command compare against.
"""

from __future__ import annotations

from typing import Callable, Protocol

import numpy as np
import torch

CUMPROD_EPS = 1e-10


def cumsum(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.cumsum(x)


def cumprod_clamped(x, eps: float = CUMPROD_EPS) -> np.ndarray:
    """Inclusive cumulative product with every factor clamped to ``[eps, 1]``.

    Used on ``1 - p`` so that dividing by the running product never hits 0/0.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < -eps or x.max() > 1.0 + eps):
        raise ValueError("cumprod_clamped expects factors in [0, 1]")
    return np.cumprod(np.clip(x, eps, 1.0))


def movsum(x, back: int, forward: int) -> np.ndarray:
    """Moving sum ``out[n] = sum(x[n-(back-1) : n+forward])`` with zero padding."""
    if back < 1 or forward < 1:
        raise ValueError("window sizes must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    padded = np.concatenate([np.zeros(back - 1), x, np.zeros(forward - 1)])
    csum = np.concatenate([[0.0], np.cumsum(padded)])
    width = back + forward - 1
    return csum[width:width + len(x)] - csum[:len(x)]


def logsumexp(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("logsumexp of an empty vector")
    m = x.max()
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.exp(x - m).sum()))


def stable_softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("softmax of an empty vector")
    z = np.exp(x - x.max())
    return z / z.sum()


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def noisy_sigmoid(e, noise_std: float = 1.0, rng: np.random.Generator | None = None,
                  training: bool = False):
    """``sigmoid(e + n)`` with ``n ~ N(0, noise_std**2)`` while training, else ``n = 0``."""
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    e = np.asarray(e, dtype=np.float64)
    if training and noise_std > 0:
        if rng is None:
            raise ValueError("training mode needs an explicit rng")
        e = e + rng.normal(0.0, noise_std, size=e.shape)
    return sigmoid(e)


class DifferentiableOp(Protocol):
    """Scalar-valued function of a flat float64 vector with an analytic gradient."""

    def forward(self, x: np.ndarray) -> float: ...

    def gradient(self, x: np.ndarray) -> np.ndarray: ...


class FunctionOp:
    """Adapter building a ``DifferentiableOp`` from two plain callables."""

    def __init__(self, forward: Callable[[np.ndarray], float],
                 gradient: Callable[[np.ndarray], np.ndarray], name: str = ""):
        self._forward = forward
        self._gradient = gradient
        self.name = name

    def forward(self, x):
        return float(self._forward(x))

    def gradient(self, x):
        return np.asarray(self._gradient(x), dtype=np.float64).reshape(np.shape(x))


class TorchOp:
    """``DifferentiableOp`` whose adjoint comes from torch autograd.

    ``fn`` maps a float64 tensor of the point's shape to a scalar tensor.
    """

    def __init__(self, fn: Callable[[torch.Tensor], torch.Tensor], name: str = ""):
        self.fn = fn
        self.name = name

    def forward(self, x):
        with torch.no_grad():
            return float(self.fn(torch.as_tensor(np.asarray(x, dtype=np.float64))))

    def gradient(self, x):
        t = torch.tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
        out = self.fn(t)
        (g,) = torch.autograd.grad(out, t, allow_unused=True)
        if g is None:
            return np.zeros_like(np.asarray(x, dtype=np.float64))
        return g.detach().numpy()


def finite_difference_check(op: DifferentiableOp, point, step: float = 1e-5) -> float:
    """Max relative error between the analytic gradient and central differences.

    The relative error of each coordinate uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``.
    """
    x = np.array(point, dtype=np.float64, copy=True)
    f0 = op.forward(x)
    if not np.isfinite(f0):
        raise FloatingPointError("forward value is not finite at the check point")
    analytic = np.asarray(op.gradient(x), dtype=np.float64).reshape(x.shape)
    flat = x.reshape(-1)
    numeric = np.empty(flat.size)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = op.forward(x)
        flat[k] = orig - step
        fm = op.forward(x)
        flat[k] = orig
        numeric[k] = (fp - fm) / (2.0 * step)
    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
