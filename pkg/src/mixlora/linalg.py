"""Dense float64 primitives shared by the adapter, gradient and harness code.

Matrices and vectors are plain ``numpy`` arrays of dtype float64. Every
function here returns a fresh array and never mutates its inputs.
Functions that operate on a trailing axis (``softmax``, ``top_k``) also
accept stacked inputs so the batched training path can reuse them.
"""

import numpy as np

from mixlora.errors import NumericError, ShapeError


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def as_vector(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got shape {v.shape}")
    return v


def matmul(lhs, rhs) -> np.ndarray:
    """Matrix product with shape checking.

    Stacked operands follow ``numpy.matmul`` broadcasting; the inner
    dimensions must agree.
    """
    a = np.asarray(lhs, dtype=np.float64)
    b = np.asarray(rhs, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def outer(u, v) -> np.ndarray:
    u = as_vector(u)
    v = as_vector(v)
    if u.size == 0 or v.size == 0:
        raise ShapeError("outer product of an empty vector")
    return u[:, None] * v[None, :]


def softmax(v) -> np.ndarray:
    """Max-shifted softmax over the last axis."""
    x = np.asarray(v, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("softmax of an empty vector")
    if np.isnan(x).any():
        raise NumericError("softmax input contains NaN")
    if not np.isfinite(x).all():
        raise NumericError("softmax input contains Inf")
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax_backward(p, grad_p) -> np.ndarray:
    """Vector-Jacobian product of softmax, given its output ``p``."""
    return p * (grad_p - (grad_p * p).sum(axis=-1, keepdims=True))


def top_k(v, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries along the last axis.

    Ties go to the lowest index. The result is sorted ascending.
    """
    x = np.asarray(v, dtype=np.float64)
    n = x.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"top_k needs 1 <= k <= {n}, got k={k}")
    # stable sort on the negated scores keeps equal values in index order
    order = np.argsort(-x, axis=-1, kind="stable")
    return np.sort(order[..., :k], axis=-1)


def mean_pool(h) -> np.ndarray:
    """Column-wise mean over the sequence (second to last) axis."""
    x = np.asarray(h, dtype=np.float64)
    if x.ndim < 2:
        raise ShapeError(f"mean_pool needs a matrix, got shape {x.shape}")
    if x.shape[-2] == 0:
        raise ShapeError("mean_pool over an empty sequence")
    return x.mean(axis=-2)
