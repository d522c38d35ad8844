"""Task-interference analysis on shared adapter parameters.

For tasks ``i`` and ``j`` and a parameter group ``theta``, a normalised
gradient step on task ``j`` changes task ``i``'s loss, to first order, by

    delta_j L_i(x_i) = lam * mean_{x_j} <g_j(x_j) / |g_j(x_j)|, g_i(x_i)>

and the interference score is the mean over ``x_i`` of
``delta_j L_i(x_i) / delta_i L_i(x_i)``. Positive means aligned gradients,
negative means task ``j``'s updates hurt task ``i``.

The step size ``lam`` cancels in the ratio; scores are computed from the
unscaled inner products so they are bit-identical for every ``lam > 0``.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from mixlora import checkpoint, seeding
from mixlora.errors import DegenerateGradientError, ShapeError

SELECTORS = ("lora_a", "lora_b", "all_adapter")
GRAD_NORM_FLOOR = 1e-12
RATIO_FLOOR = 1e-12

_NAMES = {
    "mixlora": {"lora_a": "a_factors", "lora_b": "b_factors"},
    "lora": {"lora_a": "a", "lora_b": "b"},
}


@dataclass(frozen=True)
class ParamGroup:
    selector: str = "all_adapter"
    layers: Optional[tuple] = None  # None means every layer

    def __post_init__(self):
        if self.selector not in SELECTORS:
            raise ValueError(f"selector must be one of {SELECTORS}, got {self.selector!r}")

    def names(self, model) -> list[str]:
        """Flattened parameter order: all A-side slices, then all B-side slices."""
        family = "mixlora" if model.is_mixlora else "lora"
        layers = range(len(model.layers)) if self.layers is None else self.layers
        parts = ("lora_a", "lora_b") if self.selector == "all_adapter" else (self.selector,)
        names = [f"layer{k}.{_NAMES[family][part]}" for part in parts for k in layers]
        known = model.params()
        missing = [n for n in names if n not in known]
        if missing or not names:
            raise ShapeError(f"parameter group resolves to unknown or empty slice: {missing}")
        return names

    def flatten(self, model, grads: dict) -> np.ndarray:
        return np.concatenate([np.asarray(grads[n]).ravel() for n in self.names(model)])


@dataclass
class InterferenceMatrix:
    task_ids: list
    scores: np.ndarray
    group: ParamGroup
    num_batch_pairs: int
    degenerate: list = field(default_factory=list)  # (i, j) entries set to NaN

    def negative_mean(self) -> float:
        """Mean of the strictly negative finite entries, 0.0 when there are none."""
        vals = self.scores[np.isfinite(self.scores) & (self.scores < 0)]
        return float(vals.mean()) if vals.size else 0.0


def grad_for_task(model, batch, group: ParamGroup, rng=None) -> np.ndarray:
    """Flattened gradient of the mean batch loss over ``group``.

    ``batch`` is ``(h, y, task)`` with ``task`` a SyntheticTask-like object
    exposing ``id`` and ``loss``. Unselected MixLoRA factors contribute
    exact zeros, so the vector always covers all E factors.
    """
    h, y, task = batch
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 3 or h.shape[0] == 0:
        raise ValueError("grad_for_task needs a non-empty batch of instances")
    task_ids = np.full(h.shape[0], task.id)
    _, grads, _ = model.loss_and_grads(h, y, task.loss, task_ids=task_ids, rng=rng)
    return group.flatten(model, grads)


def delta_loss(g_i, g_j, lam: float) -> float:
    """First-order loss change on task i from a unit step along task j's gradient."""
    g_i = np.asarray(g_i, dtype=np.float64)
    g_j = np.asarray(g_j, dtype=np.float64)
    norm = float(np.linalg.norm(g_j))
    if norm <= GRAD_NORM_FLOOR:
        raise DegenerateGradientError(f"gradient norm {norm:.3g} below {GRAD_NORM_FLOOR}")
    return lam * float(np.dot(g_j / norm, g_i))


def _unit_rows(grads: Sequence[np.ndarray]):
    units, bad = [], []
    for k, g in enumerate(grads):
        norm = float(np.linalg.norm(g))
        if norm <= GRAD_NORM_FLOOR:
            bad.append(k)
            units.append(None)
        else:
            units.append(np.asarray(g) / norm)
    return units, bad


def _expected_changes(g_i: Sequence[np.ndarray], units_j) -> np.ndarray:
    """For every x_i: mean over x_j of <unit g_j, g_i> (NaN if any g_j degenerate)."""
    if any(u is None for u in units_j):
        return np.full(len(g_i), np.nan)
    return np.array([np.mean([float(np.dot(u, g)) for u in units_j]) for g in g_i])


def score_from_grads(grads_i: Sequence[np.ndarray], grads_j: Sequence[np.ndarray]) -> float:
    """Interference of task j on task i from per-batch gradients.

    Returns NaN when a gradient norm or a denominator is degenerate.
    """
    units_i, _ = _unit_rows(grads_i)
    units_j, _ = _unit_rows(grads_j)
    num = _expected_changes(grads_i, units_j)
    den = _expected_changes(grads_i, units_i)
    if np.isnan(num).any() or np.isnan(den).any() or (np.abs(den) < RATIO_FLOOR).any():
        return float("nan")
    return float(np.mean(num / den))


def matrix_from_grads(grads_by_task: dict, group: Optional[ParamGroup] = None) -> InterferenceMatrix:
    """All T x T scores from ``{task_id: [gradient per batch, ...]}``."""
    ids = list(grads_by_task)
    if len(ids) < 2:
        raise ValueError("an interference matrix needs at least two tasks")
    units = {t: _unit_rows(grads_by_task[t])[0] for t in ids}
    # changes[t_i][t_j][a] = mean_b <unit g_j[b], g_i[a]>
    changes = {ti: {tj: _expected_changes(grads_by_task[ti], units[tj]) for tj in ids} for ti in ids}
    scores = np.full((len(ids), len(ids)), np.nan)
    degenerate = []
    for a, ti in enumerate(ids):
        den = changes[ti][ti]
        for b, tj in enumerate(ids):
            num = changes[ti][tj]
            if np.isnan(num).any() or np.isnan(den).any() or (np.abs(den) < RATIO_FLOOR).any():
                degenerate.append((ti, tj))
                continue
            scores[a, b] = float(np.mean(num / den))
    pairs = max(len(g) for g in grads_by_task.values()) ** 2
    return InterferenceMatrix(ids, scores, group or ParamGroup(), pairs, degenerate)


def interference_score(model, task_i, task_j, group: ParamGroup, batches: dict, lam: float,
                       rng_seed: int = 0) -> float:
    """Score of ``task_j`` on ``task_i``; ``batches`` maps task id to (h, y) pairs."""
    if not lam > 0:
        raise ValueError("lam must be positive")
    grads = _collect(model, [task_i, task_j], group, batches, rng_seed)
    return score_from_grads(grads[task_i.id], grads[task_j.id])


def _collect(model, tasks, group, batches, rng_seed):
    out = {}
    for task in tasks:
        if task.id in out:
            continue
        task_batches = batches[task.id]
        if not task_batches:
            raise ValueError(f"no batches for task {task.id}")
        rng = seeding.stream(rng_seed, "interference_routing", getattr(task, "stream_key", task.id))
        out[task.id] = [grad_for_task(model, (h, y, task), group, rng=rng) for h, y in task_batches]
    return out


def build_matrix(model, tasks, group: ParamGroup, batches: dict, lam: float,
                 rng_seed: int = 0) -> InterferenceMatrix:
    if len(tasks) < 2:
        raise ValueError("an interference matrix needs at least two tasks")
    if not lam > 0:
        raise ValueError("lam must be positive")
    return matrix_from_grads(_collect(model, tasks, group, batches, rng_seed), group)


def build_layer_averaged(model, tasks, selector: str, batches: dict, lam: float,
                         rng_seed: int = 0) -> InterferenceMatrix:
    """Arithmetic mean of the per-layer matrices for ``selector``."""
    mats = [build_matrix(model, tasks, ParamGroup(selector, (k,)), batches, lam, rng_seed)
            for k in range(len(model.layers))]
    scores = np.mean([m.scores for m in mats], axis=0)
    degenerate = sorted({pair for m in mats for pair in m.degenerate})
    return InterferenceMatrix(mats[0].task_ids, scores, ParamGroup(selector), mats[0].num_batch_pairs,
                              degenerate)


# ----------------------------------------------------------------------
# export


def export_matrix(matrix: InterferenceMatrix, path, metadata: Optional[dict] = None) -> None:
    """Write the scores as CSV plus a ``.meta`` key-value sidecar."""
    path = os.fspath(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["task"] + [str(t) for t in matrix.task_ids])
        for t, row in zip(matrix.task_ids, matrix.scores):
            writer.writerow([str(t)] + [format(float(v), ".17g") for v in row])
    meta = {
        "selector": matrix.group.selector,
        "layers": "all" if matrix.group.layers is None else ",".join(map(str, matrix.group.layers)),
        "num_batch_pairs": matrix.num_batch_pairs,
        "degenerate": ";".join(f"{i}:{j}" for i, j in matrix.degenerate),
    }
    meta.update(metadata or {})
    with open(path + ".meta", "w") as fh:
        fh.write(checkpoint.format_kv(meta))


def load_matrix(path) -> tuple[list, np.ndarray]:
    with open(os.fspath(path), newline="") as fh:
        rows = list(csv.reader(fh))
    ids = [int(t) for t in rows[0][1:]]
    scores = np.array([[float(v) for v in row[1:]] for row in rows[1:]], dtype=np.float64)
    return ids, scores
