"""Plain LoRA layer used as the baseline and as the reduction reference.

Kept deliberately independent of the factor-pool code: a static pair
``A`` (r x d_in), ``B`` (d_out x r) and the rule ``h W^T + alpha * h (BA)^T``.
"""

from __future__ import annotations

import copy
import math
from typing import Optional

import numpy as np

from mixlora import linalg, seeding
from mixlora.errors import ConfigError, ShapeError, StateError


class LoraLinear:
    def __init__(self, base_w, a, b, alpha: float, seed: int = 0):
        self.base_w = linalg.as_matrix(base_w)
        self.base_w.setflags(write=False)
        self.a = linalg.as_matrix(a)
        self.b = linalg.as_matrix(b)
        d_out, d_in = self.base_w.shape
        rank = self.a.shape[0]
        if self.a.shape != (rank, d_in) or self.b.shape != (d_out, rank):
            raise ShapeError(f"inconsistent LoRA shapes: W {self.base_w.shape}, A {self.a.shape}, B {self.b.shape}")
        if not alpha > 0:
            raise ConfigError(f"alpha must be positive, got {alpha!r}")
        self.alpha = float(alpha)
        self.seed = int(seed)
        self._cache: Optional[tuple[np.ndarray, np.ndarray]] = None

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def d_in(self) -> int:
        return self.base_w.shape[1]

    @property
    def d_out(self) -> int:
        return self.base_w.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"a": self.a, "b": self.b}

    def set_param(self, name, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != getattr(self, name).shape:
            raise ShapeError(f"{name}: shape {value.shape} does not match {getattr(self, name).shape}")
        setattr(self, name, value)

    def copy(self) -> "LoraLinear":
        clone = copy.deepcopy(self)
        clone._cache = None
        return clone

    def delta_w(self) -> np.ndarray:
        return linalg.matmul(self.b, self.a)

    def forward(self, h, task_id=None, rng=None):
        out, _ = self.forward_batch(linalg.as_matrix(h)[None])
        return out[0], None

    def forward_batch(self, h, task_ids=None, rng=None):
        h = np.asarray(h, dtype=np.float64)
        if h.ndim != 3 or h.shape[-1] != self.d_in:
            raise ShapeError(f"expected input of shape (n, seq, {self.d_in}), got {h.shape}")
        dw = self.delta_w()
        out = linalg.matmul(h, self.base_w.T) + self.alpha * linalg.matmul(h, dw.T)
        self._cache = (h, dw)
        return out, None

    def backward_batch(self, upstream):
        """Gradients of <upstream, output> for the last forward_batch call."""
        if self._cache is None:
            raise StateError("backward called without a matching forward")
        h, dw = self._cache
        g = np.asarray(upstream, dtype=np.float64)
        if g.shape != h.shape[:2] + (self.d_out,):
            raise ShapeError(f"upstream shape {g.shape} does not match output {h.shape[:2] + (self.d_out,)}")
        d_dw = self.alpha * linalg.matmul(np.swapaxes(g, 1, 2), h)
        grads = {
            "a": linalg.matmul(self.b.T, d_dw).sum(axis=0),
            "b": linalg.matmul(d_dw, self.a.T).sum(axis=0),
        }
        dh = linalg.matmul(g, self.base_w) + self.alpha * linalg.matmul(g, dw)
        return grads, dh


def init_lora(d_in: int, d_out: int, rank: int, alpha: Optional[float] = None,
              init_std: Optional[float] = None, seed: int = 0, base_w=None) -> LoraLinear:
    """Gaussian A, zero B. ``alpha`` defaults to ``2 * rank``.

    A is drawn from the same seed stream as a MixLoRA ``a_factors`` pool, so
    a pool with E == r starts from identical factors.
    """
    if rank < 1:
        raise ConfigError(f"rank must be positive, got {rank}")
    alpha = 2.0 * rank if alpha is None else alpha
    sigma = 1.0 / math.sqrt(d_in) if init_std is None else init_std
    if base_w is None:
        base_w = seeding.stream(seed, "base_w").normal(0.0, sigma, size=(d_out, d_in))
    a = seeding.stream(seed, "a_factors").normal(0.0, sigma, size=(rank, d_in))
    return LoraLinear(base_w, a, np.zeros((d_out, rank)), alpha, seed=seed)
