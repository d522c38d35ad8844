"""Hand-derived reverse pass, losses, optimizers and a finite-difference oracle.

Top-k index choices are treated as locally constant: gradients reach the
routers only through the soft gate values. In hard gating mode the router
weights therefore receive exactly zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from mixlora import linalg
from mixlora.adapter import AdaptedLinear
from mixlora.errors import NumericError, ShapeError, StateError

LOSS_KINDS = ("mse", "cross_entropy")


def zero_grads(model) -> dict[str, np.ndarray]:
    """A GradBuffer: one zeroed accumulator per trainable tensor."""
    return {name: np.zeros_like(p) for name, p in model.params().items()}


def _scatter_rows(buffer, idx, rows):
    np.add.at(buffer, idx, rows)


def _gate_backward(grad_gates, gates, sel_sum, idx, num_factors):
    """Map d(loss)/d(gates) back onto the full score vector.

    Gates are ``scores[idx] / sum(scores[idx])``.
    """
    inner = (grad_gates * gates).sum(axis=-1, keepdims=True)
    d_picked = (grad_gates - inner) / sel_sum
    d_scores = np.zeros(gates.shape[:-1] + (num_factors,))
    np.put_along_axis(d_scores, idx, d_picked, axis=-1)
    return d_scores


def backward_batch(adapter: AdaptedLinear, upstream):
    """Gradients of ``<upstream, output>`` for the adapter's last forward.

    Returns ``(grads, dh)`` where ``grads`` maps parameter names to arrays
    shaped like ``adapter.params()`` and ``dh`` is the input gradient.
    """
    rec = adapter.last_record
    if rec is None:
        raise StateError("backward called without a matching forward")
    cfg = adapter.config
    g = np.asarray(upstream, dtype=np.float64)
    n, seq, _ = rec.h.shape
    if g.shape != (n, seq, cfg.d_out):
        raise ShapeError(f"upstream shape {g.shape} does not match output {(n, seq, cfg.d_out)}")
    E = cfg.num_factors
    soft = cfg.gating_mode == "soft" and cfg.routing_mode != "random"
    grads = zero_grads(adapter)
    W = adapter.base_w

    dh = linalg.matmul(g, W) + cfg.alpha * linalg.matmul(g, rec.delta_w)
    d_dw = cfg.alpha * linalg.matmul(np.swapaxes(g, 1, 2), rec.h)
    d_bmat = linalg.matmul(d_dw, np.swapaxes(rec.a_mat, 1, 2))  # n x d_out x r
    d_amat = linalg.matmul(np.swapaxes(rec.b_mat, 1, 2), d_dw)  # n x r x d_in

    # B side
    b_rows = adapter.pool.b_factors[rec.idx_b]  # n x r x d_out
    d_brows = np.swapaxes(d_bmat, 1, 2)
    if soft:
        _scatter_rows(grads["b_factors"], rec.idx_b, d_brows * rec.gates_b[..., None])
        d_gates_b = (d_brows * b_rows).sum(axis=-1)
        d_fused = _gate_backward(d_gates_b, rec.gates_b, rec.sel_sum_b, rec.idx_b, E)
        dz_b = linalg.softmax_backward(rec.p_ifs, d_fused)
        grads["w_b_ifs"] += linalg.matmul(dz_b.T, rec.u_b)
        d_ub = linalg.matmul(dz_b, adapter.routers.w_b_ifs)
        if rec.p_cfs is not None:
            d_sum = linalg.softmax_backward(rec.p_cfs, d_fused)
            d_logits = linalg.softmax_backward(rec.cfs_soft, np.broadcast_to(d_sum[:, None, :], rec.cfs_soft.shape))
            grads["w_ab"] += np.einsum("nri,nre->rie", rec.a_mat, d_logits)
            d_amat = d_amat + np.einsum("nre,rie->nri", d_logits, adapter.routers.w_ab)
    else:
        _scatter_rows(grads["b_factors"], rec.idx_b, d_brows)

    # A side
    if soft:
        a_rows = adapter.pool.a_factors[rec.idx_a]
        _scatter_rows(grads["a_factors"], rec.idx_a, d_amat * rec.gates_a[..., None])
        d_gates_a = (d_amat * a_rows).sum(axis=-1)
        d_pa = _gate_backward(d_gates_a, rec.gates_a, rec.sel_sum_a, rec.idx_a, E)
        dz_a = linalg.softmax_backward(rec.p_a, d_pa)
        grads["w_a"] += linalg.matmul(dz_a.T, rec.u_a)
        d_ua = linalg.matmul(dz_a, adapter.routers.w_a)

        if cfg.routing_mode == "task":
            np.add.at(grads["task_table_a"], rec.task_ids, d_ua)
            np.add.at(grads["task_table_b"], rec.task_ids, d_ub)
        else:
            # u_a = mean(h), u_b = mean(h W^T)
            d_pooled = d_ua + linalg.matmul(d_ub, W)
            dh = dh + d_pooled[:, None, :] / seq
    else:
        _scatter_rows(grads["a_factors"], rec.idx_a, d_amat)

    return grads, dh


def backward(adapter: AdaptedLinear, h, upstream, task_id: Optional[int] = None):
    """Single-instance reverse pass after ``adapter.forward(h, task_id)``."""
    rec = adapter.last_record
    h = linalg.as_matrix(h)
    if rec is None or rec.h.shape[0] != 1 or not np.array_equal(rec.h[0], h):
        raise StateError("backward called without a matching forward for this input")
    if task_id is not None and (rec.task_ids is None or int(rec.task_ids[0]) != task_id):
        raise StateError("backward task id does not match the recorded forward")
    grads, dh = backward_batch(adapter, linalg.as_matrix(upstream)[None])
    return grads, dh[0]


# ----------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossSpec:
    kind: str = "mse"

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")

    def __call__(self, out, target):
        """Mean loss over the batch and its gradient w.r.t. ``out``."""
        out = np.asarray(out, dtype=np.float64)
        if self.kind == "mse":
            target = np.asarray(target, dtype=np.float64)
            diff = out - target
            loss = float(np.mean(diff * diff))
            return loss, 2.0 * diff / diff.size
        # target: integer class per token, shape out.shape[:-1]
        labels = np.asarray(target, dtype=np.int64)
        p = linalg.softmax(out)
        flat_p = p.reshape(-1, p.shape[-1])
        flat_y = labels.reshape(-1)
        count = flat_y.size
        shifted = out - out.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=-1))
        picked = np.take_along_axis(shifted, labels[..., None], axis=-1)[..., 0]
        loss = float(np.mean(logz - picked))
        grad = flat_p.copy()
        grad[np.arange(count), flat_y] -= 1.0
        return loss, grad.reshape(out.shape) / count


# ----------------------------------------------------------------------
# finite differences


def finite_diff(fn: Callable[[np.ndarray], float], theta, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function."""
    theta = np.array(theta, dtype=np.float64)
    flat = theta.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = fn(theta)
        flat[i] = orig - eps
        f_minus = fn(theta)
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad.reshape(theta.shape)


def relative_error(analytic, numeric, floor: float = 1e-10) -> float:
    """Worst absolute deviation scaled by the tensor's largest magnitude.

    Scaling per tensor rather than per entry keeps entries that are exactly
    zero in theory (e.g. router logits of unselected factors) from turning
    round-off into a spurious failure. ``floor`` bounds the scale from below.
    """
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"gradient shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), floor)
    return float(np.max(np.abs(a - b))) / scale


# ----------------------------------------------------------------------
# optimizers


def _check_shapes(params, grads):
    for name, p in params.items():
        if name not in grads:
            raise ShapeError(f"missing gradient for {name}")
        if np.shape(grads[name]) != np.shape(p):
            raise ShapeError(f"{name}: gradient shape {np.shape(grads[name])} != parameter shape {np.shape(p)}")


def sgd_step(params: dict, grads: dict, lr: float) -> dict:
    _check_shapes(params, grads)
    return {name: p - lr * grads[name] for name, p in params.items()}


@dataclass
class AdamState:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One bias-corrected Adam update; mutates ``state`` and returns new params."""
    _check_shapes(params, grads)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        out[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out
