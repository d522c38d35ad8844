"""MixLoRA adapted linear layer.

A frozen weight ``W`` (d_out x d_in) is adapted by a low-rank update that is
rebuilt for every instance. Two pools of rank-1 factors, ``a_e`` (length
d_in) and ``b_e`` (length d_out) for ``e < E``, are shared by all inputs;
routers pick ``r`` of each per instance and the update is

    dW = sum_i (g_b[i] * b[idx_b[i]]) outer (g_a[i] * a[idx_a[i]])

so the layer computes ``h W^T + alpha * h dW^T`` row-wise.

Routing
-------
* ``instance``: the A router scores ``mean(h)``; the B router scores
  ``mean(h W^T)``, the pooled frozen-layer output.
* ``task``: both routers score a trainable per-task embedding row instead.
* ``random``: ``r`` distinct factors drawn uniformly for each side.

The conditional router (CFS) maps every assembled row ``A[i]`` through its
own ``d_in x E`` matrix, sums the ``r`` softmaxes, renormalises with a
second softmax and adds the result to the B-side router probabilities
before the top-r pick.

All array-valued computations run over a leading instance axis so the
training loop can process a batch at once; the single-instance methods
are thin wrappers.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from mixlora import linalg, seeding
from mixlora.errors import ConfigError, ShapeError, StateError

ROUTING_MODES = ("instance", "task", "random")
GATING_MODES = ("soft", "hard")


@dataclass
class MixLoraConfig:
    d_in: int
    d_out: int
    num_factors: int
    rank: int
    alpha: Optional[float] = None
    routing_mode: str = "instance"
    gating_mode: str = "soft"
    cfs_enabled: bool = True
    init_std: Optional[float] = None
    seed: int = 0
    num_tasks: int = 0

    def __post_init__(self):
        for name in ("d_in", "d_out", "num_factors", "rank"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.rank > self.num_factors:
            raise ConfigError(
                f"rank ({self.rank}) cannot exceed the number of factors ({self.num_factors})"
            )
        if self.routing_mode not in ROUTING_MODES:
            raise ConfigError(f"routing_mode must be one of {ROUTING_MODES}, got {self.routing_mode!r}")
        if self.gating_mode not in GATING_MODES:
            raise ConfigError(f"gating_mode must be one of {GATING_MODES}, got {self.gating_mode!r}")
        if self.alpha is None:
            self.alpha = 2.0 * self.num_factors
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ConfigError(f"alpha must be a positive finite number, got {self.alpha!r}")
        if self.init_std is None:
            self.init_std = 1.0 / math.sqrt(self.d_in)
        if not (self.init_std > 0 and math.isfinite(self.init_std)):
            raise ConfigError(f"init_std must be positive, got {self.init_std!r}")
        if self.routing_mode == "random":
            # no router probabilities exist to scale by
            self.gating_mode = "hard"
        if self.routing_mode == "task" and self.num_tasks < 1:
            raise ConfigError("task routing needs num_tasks >= 1")
        self.alpha = float(self.alpha)
        self.init_std = float(self.init_std)
        self.seed = int(self.seed)
        self.num_tasks = int(self.num_tasks)


@dataclass
class FactorPool:
    a_factors: np.ndarray  # E x d_in, one factor per row
    b_factors: np.ndarray  # E x d_out


@dataclass
class RouterParams:
    w_a: np.ndarray  # E x d_in
    w_b_ifs: np.ndarray  # E x d_out
    w_ab: Optional[np.ndarray] = None  # r x d_in x E
    task_table_a: Optional[np.ndarray] = None  # T x d_in
    task_table_b: Optional[np.ndarray] = None  # T x d_out


@dataclass
class Selection:
    indices_a: np.ndarray
    gates_a: np.ndarray
    indices_b: np.ndarray
    gates_b: np.ndarray
    p_a: np.ndarray
    p_b_ifs: np.ndarray
    p_b_cfs: np.ndarray


@dataclass
class ForwardRecord:
    """Intermediates of one batched forward pass, consumed by backward."""

    h: np.ndarray
    task_ids: Optional[np.ndarray]
    u_a: Optional[np.ndarray]
    u_b: Optional[np.ndarray]
    p_a: Optional[np.ndarray]
    idx_a: np.ndarray
    gates_a: np.ndarray
    sel_sum_a: Optional[np.ndarray]
    a_mat: np.ndarray
    cfs_soft: Optional[np.ndarray]
    p_cfs: Optional[np.ndarray]
    p_ifs: Optional[np.ndarray]
    idx_b: np.ndarray
    gates_b: np.ndarray
    sel_sum_b: Optional[np.ndarray]
    b_mat: np.ndarray
    delta_w: np.ndarray


def _soft_gates(scores: np.ndarray, idx: np.ndarray):
    picked = np.take_along_axis(scores, idx, axis=-1)
    total = picked.sum(axis=-1, keepdims=True)
    return picked / total, total


class AdaptedLinear:
    """Frozen linear layer plus a routed factor-pool adapter."""

    def __init__(self, base_w, pool: FactorPool, routers: RouterParams, config: MixLoraConfig):
        base_w = linalg.as_matrix(base_w)
        if base_w.shape != (config.d_out, config.d_in):
            raise ShapeError(f"base_w has shape {base_w.shape}, expected {(config.d_out, config.d_in)}")
        self.base_w = base_w
        self.base_w.setflags(write=False)
        self.pool = pool
        self.routers = routers
        self.config = config
        self.routing_rng = seeding.stream(config.seed, "routing")
        self.last_record: Optional[ForwardRecord] = None

    # ------------------------------------------------------------------
    # parameters

    def params(self) -> dict[str, np.ndarray]:
        """Trainable tensors in checkpoint order (base weight excluded)."""
        out = {
            "a_factors": self.pool.a_factors,
            "b_factors": self.pool.b_factors,
            "w_a": self.routers.w_a,
            "w_b_ifs": self.routers.w_b_ifs,
        }
        if self.routers.w_ab is not None:
            out["w_ab"] = self.routers.w_ab
        if self.routers.task_table_a is not None:
            out["task_table_a"] = self.routers.task_table_a
            out["task_table_b"] = self.routers.task_table_b
        return out

    def set_param(self, name: str, value: np.ndarray) -> None:
        current = self.params()[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != current.shape:
            raise ShapeError(f"{name}: shape {value.shape} does not match {current.shape}")
        if name in ("a_factors", "b_factors"):
            setattr(self.pool, name, value)
        else:
            setattr(self.routers, name, value)

    def copy(self) -> "AdaptedLinear":
        clone = copy.deepcopy(self)
        clone.last_record = None
        return clone

    # ------------------------------------------------------------------
    # routing pieces (single instance)

    def route_ifs(self, h) -> np.ndarray:
        return linalg.mean_pool(linalg.as_matrix(h))

    def route_task(self, task_id: int, side: str = "a") -> np.ndarray:
        table = self.routers.task_table_a if side == "a" else self.routers.task_table_b
        if table is None:
            raise StateError("adapter has no task table (routing_mode is not 'task')")
        if not (isinstance(task_id, (int, np.integer)) and 0 <= task_id < table.shape[0]):
            raise ValueError(f"unknown task id {task_id!r}; known ids are 0..{table.shape[0] - 1}")
        return table[task_id].copy()

    def route_random(self, rng: Optional[np.random.Generator] = None) -> Selection:
        rng = self.routing_rng if rng is None else rng
        E, r = self.config.num_factors, self.config.rank
        ia = np.sort(rng.choice(E, size=r, replace=False))
        ib = np.sort(rng.choice(E, size=r, replace=False))
        ones = np.ones(r)
        zeros = np.zeros(E)
        return Selection(ia, ones, ib, ones.copy(), zeros, zeros.copy(), zeros.copy())

    def select_a(self, pooled) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns (indices, gates, probabilities) for the A side."""
        p = linalg.softmax(linalg.matmul(self.routers.w_a, linalg.as_vector(pooled)[:, None])[:, 0])
        idx = linalg.top_k(p, self.config.rank)
        gates = self._gates(p, idx)
        return idx, gates, p

    def assemble_a(self, indices, gates) -> np.ndarray:
        rows = self.pool.a_factors[np.asarray(indices)]
        if self.config.gating_mode == "hard":
            return np.ascontiguousarray(rows)
        return np.asarray(gates)[:, None] * rows

    def route_cfs(self, a_mat) -> np.ndarray:
        """Sum over rows i of softmax(A[i] @ W_AB[i]); entries sum to r."""
        if self.routers.w_ab is None:
            raise StateError("conditional factor selection is disabled for this adapter")
        a_mat = linalg.as_matrix(a_mat)
        return self._cfs_soft(a_mat[None])[0].sum(axis=0)

    def select_b(self, pooled_b, p_cfs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns (indices, gates, p_ifs) for the B side.

        ``p_cfs`` is added to the IFS probabilities before the top-r pick
        (pass zeros when CFS is off).
        """
        p_ifs = linalg.softmax(linalg.matmul(self.routers.w_b_ifs, linalg.as_vector(pooled_b)[:, None])[:, 0])
        fused = p_ifs + linalg.as_vector(p_cfs)
        idx = linalg.top_k(fused, self.config.rank)
        gates = self._gates(fused, idx)
        return idx, gates, p_ifs

    def assemble_b(self, indices, gates) -> np.ndarray:
        cols = self.pool.b_factors[np.asarray(indices)].T
        if self.config.gating_mode == "hard":
            return np.ascontiguousarray(cols)
        return cols * np.asarray(gates)[None, :]

    def assemble_delta_w(self, sel: Selection) -> np.ndarray:
        b_mat = self.assemble_b(sel.indices_b, sel.gates_b)
        a_mat = self.assemble_a(sel.indices_a, sel.gates_a)
        return linalg.matmul(b_mat, a_mat)

    def _gates(self, scores, idx):
        if self.config.gating_mode == "hard":
            return np.ones(idx.shape)
        return _soft_gates(scores, idx)[0]

    def _cfs_soft(self, a_mat):
        # a_mat: n x r x d_in -> per-row softmaxes n x r x E
        logits = np.einsum("nri,rie->nre", a_mat, self.routers.w_ab)
        return linalg.softmax(logits)

    # ------------------------------------------------------------------
    # forward

    def forward(self, h, task_id: Optional[int] = None, rng=None):
        """Adapt one instance ``h`` (seq x d_in).

        Returns the adapted output (seq x d_out) and the Selection used.
        """
        h = linalg.as_matrix(h)
        ids = None if task_id is None else [task_id]
        out, sels = self.forward_batch(h[None], ids, rng=rng)
        return out[0], sels[0]

    def forward_batch(self, h, task_ids=None, rng=None):
        """Adapt a batch ``h`` (n x seq x d_in), one Selection per instance."""
        h = np.asarray(h, dtype=np.float64)
        cfg = self.config
        if h.ndim != 3 or h.shape[-1] != cfg.d_in:
            raise ShapeError(f"expected input of shape (n, seq, {cfg.d_in}), got {h.shape}")
        n, seq, _ = h.shape
        if n == 0 or seq == 0:
            raise ShapeError("empty batch")
        tids = self._check_task_ids(task_ids, n)

        base_out = linalg.matmul(h, self.base_w.T)
        soft = cfg.gating_mode == "soft"
        u_a = u_b = p_a = p_ifs = p_cfs = cfs_soft = sum_a = sum_b = None

        if cfg.routing_mode == "random":
            rng = self.routing_rng if rng is None else rng
            picks = [self.route_random(rng) for _ in range(n)]
            idx_a = np.stack([s.indices_a for s in picks])
            idx_b = np.stack([s.indices_b for s in picks])
            gates_a = np.ones(idx_a.shape)
            gates_b = np.ones(idx_b.shape)
            a_mat = np.ascontiguousarray(self.pool.a_factors[idx_a])
        else:
            if cfg.routing_mode == "task":
                u_a = self.routers.task_table_a[tids]
                u_b = self.routers.task_table_b[tids]
            else:
                u_a = linalg.mean_pool(h)
                u_b = linalg.mean_pool(base_out)
            p_a = linalg.softmax(linalg.matmul(u_a, self.routers.w_a.T))
            idx_a = linalg.top_k(p_a, cfg.rank)
            if soft:
                gates_a, sum_a = _soft_gates(p_a, idx_a)
                a_mat = gates_a[..., None] * self.pool.a_factors[idx_a]
            else:
                gates_a = np.ones(idx_a.shape)
                a_mat = np.ascontiguousarray(self.pool.a_factors[idx_a])

            p_ifs = linalg.softmax(linalg.matmul(u_b, self.routers.w_b_ifs.T))
            if cfg.cfs_enabled:
                cfs_soft = self._cfs_soft(a_mat)
                p_cfs = linalg.softmax(cfs_soft.sum(axis=1))
                fused = p_ifs + p_cfs
            else:
                fused = p_ifs
            idx_b = linalg.top_k(fused, cfg.rank)
            if soft:
                gates_b, sum_b = _soft_gates(fused, idx_b)
            else:
                gates_b = np.ones(idx_b.shape)

        b_rows = self.pool.b_factors[idx_b]  # n x r x d_out
        if soft and cfg.routing_mode != "random":
            b_mat = np.swapaxes(b_rows, 1, 2) * gates_b[:, None, :]
        else:
            b_mat = np.ascontiguousarray(np.swapaxes(b_rows, 1, 2))
        delta_w = linalg.matmul(b_mat, a_mat)
        out = base_out + cfg.alpha * linalg.matmul(h, np.swapaxes(delta_w, 1, 2))

        self.last_record = ForwardRecord(
            h=h, task_ids=tids, u_a=u_a, u_b=u_b, p_a=p_a, idx_a=idx_a, gates_a=gates_a,
            sel_sum_a=sum_a, a_mat=a_mat, cfs_soft=cfs_soft, p_cfs=p_cfs, p_ifs=p_ifs,
            idx_b=idx_b, gates_b=gates_b, sel_sum_b=sum_b, b_mat=b_mat, delta_w=delta_w,
        )
        return out, self._selections(self.last_record)

    def _check_task_ids(self, task_ids, n):
        if self.config.routing_mode != "task":
            return None
        if task_ids is None:
            raise ValueError("task routing requires a task_id for every instance")
        tids = np.asarray(task_ids)
        if tids.ndim == 0:
            tids = np.full(n, int(tids))
        if tids.shape != (n,):
            raise ShapeError(f"expected {n} task ids, got shape {tids.shape}")
        T = self.routers.task_table_a.shape[0]
        for t in tids:
            if not 0 <= int(t) < T:
                raise ValueError(f"unknown task id {int(t)}; known ids are 0..{T - 1}")
        return tids.astype(np.int64)

    def _selections(self, rec: ForwardRecord) -> list[Selection]:
        E = self.config.num_factors
        sels = []
        for k in range(rec.idx_a.shape[0]):
            sels.append(
                Selection(
                    indices_a=rec.idx_a[k],
                    gates_a=rec.gates_a[k],
                    indices_b=rec.idx_b[k],
                    gates_b=rec.gates_b[k],
                    p_a=rec.p_a[k] if rec.p_a is not None else np.zeros(E),
                    p_b_ifs=rec.p_ifs[k] if rec.p_ifs is not None else np.zeros(E),
                    p_b_cfs=rec.p_cfs[k] if rec.p_cfs is not None else np.zeros(E),
                )
            )
        return sels


def init_adapter(config: MixLoraConfig, base_w=None) -> AdaptedLinear:
    """Build a fresh adapter with every tensor drawn from its own seed stream.

    ``b_factors`` start at zero so the adapted layer initially reproduces
    the frozen layer exactly. When ``base_w`` is omitted it is drawn from the
    ``base_w`` stream with the same standard deviation.
    """
    E, r, di, do = config.num_factors, config.rank, config.d_in, config.d_out
    sigma = config.init_std

    def gauss(name, shape):
        return seeding.stream(config.seed, name).normal(0.0, sigma, size=shape)

    if base_w is None:
        base_w = gauss("base_w", (do, di))
    pool = FactorPool(a_factors=gauss("a_factors", (E, di)), b_factors=np.zeros((E, do)))
    routers = RouterParams(w_a=gauss("w_a", (E, di)), w_b_ifs=gauss("w_b_ifs", (E, do)))
    if config.cfs_enabled:
        routers.w_ab = gauss("w_ab", (r, di, E))
    if config.routing_mode == "task":
        routers.task_table_a = gauss("task_table_a", (config.num_tasks, di))
        routers.task_table_b = gauss("task_table_b", (config.num_tasks, do))
    return AdaptedLinear(np.array(base_w, dtype=np.float64), pool, routers, config)
