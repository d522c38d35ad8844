"""Synthetic multi-task generator, trainer and comparative experiments.

Every task shares a frozen base layer ``W`` and asks for its own weight
adjustment ``D_t``: targets are ``y = (W + D_t) x + noise``. Adjustments are
built from orthonormal atoms so that their pairwise cosine similarities hit
a prescribed Gram matrix exactly, which is what controls how strongly the
tasks' gradients conflict on shared adapter parameters.

Each instance is a short token sequence whose tokens scatter around a
per-task mean, so the mean-pooled input carries the task identity that
instance routing can pick up on.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from mixlora import seeding
from mixlora.adapter import MixLoraConfig, init_adapter
from mixlora.errors import ConfigError, ConstructionError, TrainingError
from mixlora.grad import AdamState, LossSpec, adam_step
from mixlora.lora import init_lora
from mixlora.model import AdapterStack

VARIANTS = ("lora", "mixlora", "lora_specialist")
LAYOUTS = ("equiangular", "paired")


@dataclass
class SyntheticTask:
    id: int
    teacher_delta: np.ndarray  # d_out x d_in, applied to the first layer
    input_mean: np.ndarray
    noise_std: float
    base_ws: tuple  # frozen weights of every layer, first layer first
    loss: LossSpec = field(default_factory=LossSpec)
    # Optional sub-skills: instance k-type uses teacher_delta + skill_deltas[k]
    # and input mean input_mean + skill_offsets[k]. Both average to zero.
    skill_deltas: tuple = ()
    skill_offsets: tuple = ()
    # data streams are keyed by this, so duplicated tasks draw identical samples
    data_key: Optional[int] = None

    @property
    def stream_key(self) -> int:
        return self.id if self.data_key is None else self.data_key

    @property
    def num_skills(self) -> int:
        return max(1, len(self.skill_deltas))

    def delta_for(self, skill: int) -> np.ndarray:
        if not self.skill_deltas:
            return self.teacher_delta
        return self.teacher_delta + self.skill_deltas[skill]

    def teacher(self, h, skills=None):
        """Noise-free targets for inputs ``h`` (n x seq x d_in)."""
        h = np.asarray(h, dtype=np.float64)
        if skills is None:
            skills = np.zeros(h.shape[0], dtype=np.int64)
        deltas = np.stack([self.delta_for(int(k)) for k in skills])
        x = np.matmul(h, np.swapaxes(self.base_ws[0] + deltas, 1, 2))
        for w in self.base_ws[1:]:
            x = np.tanh(x) @ w.T
        return x

    def sample(self, n: int, seq: int, rng: np.random.Generator, with_skills: bool = False):
        d_in = self.input_mean.shape[0]
        skills = rng.integers(0, self.num_skills, size=n)
        means = np.stack([self.input_mean + (self.skill_offsets[k] if self.skill_offsets else 0.0)
                          for k in skills])
        h = means[:, None, :] + rng.standard_normal((n, seq, d_in))
        y = self.teacher(h, skills)
        y = y + self.noise_std * rng.standard_normal(y.shape)
        if with_skills:
            return h, y, skills
        return h, y


@dataclass
class HarnessConfig:
    num_tasks: int = 4
    d_in: int = 16
    d_out: int = 16
    conflict_angle: float = -0.5
    layout: str = "paired"
    num_layers: int = 1
    num_factors: int = 8
    rank: int = 2
    gating_mode: str = "soft"
    cfs_enabled: bool = True
    routing_mode: str = "instance"
    steps: int = 2000
    lr: float = 1e-2
    batch_size: int = 8
    seq_len: int = 8
    noise_std: float = 0.1
    delta_scale: float = 2.0
    mean_scale: float = 3.0
    skills_per_task: int = 2
    skill_spread: float = 2.0
    skill_offset: float = 3.0
    eval_instances: int = 64
    seeds: tuple = (0, 1, 2, 3, 4)

    def __post_init__(self):
        if self.num_tasks < 1:
            raise ConfigError("num_tasks must be >= 1")
        if self.layout not in LAYOUTS:
            raise ConfigError(f"layout must be one of {LAYOUTS}, got {self.layout!r}")
        if self.num_layers > 1 and self.d_in != self.d_out:
            raise ConfigError("stacked layers need d_in == d_out")
        if not -1.0 <= self.conflict_angle <= 1.0:
            raise ConfigError("conflict_angle must lie in [-1, 1]")
        for name in ("num_layers", "steps", "batch_size", "seq_len", "eval_instances"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        self.seeds = tuple(int(s) for s in self.seeds)


# ----------------------------------------------------------------------
# task construction


def conflict_gram(num_tasks: int, angle: float, layout: str = "equiangular") -> np.ndarray:
    """Target cosine-similarity matrix between the tasks' weight adjustments.

    ``equiangular``: every pair has cosine ``angle``.
    ``paired``: tasks (0,1), (2,3), ... have cosine ``angle`` within the
    pair and are orthogonal across pairs.
    """
    if layout == "equiangular":
        gram = np.full((num_tasks, num_tasks), float(angle))
    elif layout == "paired":
        gram = np.zeros((num_tasks, num_tasks))
        for i in range(0, num_tasks - 1, 2):
            gram[i, i + 1] = gram[i + 1, i] = angle
    else:
        raise ConfigError(f"unknown layout {layout!r}")
    np.fill_diagonal(gram, 1.0)
    return gram


def gen_tasks(num_tasks: int, d_in: int, d_out: int, conflict_angle: float, seed: int,
              layout: str = "equiangular", noise_std: float = 0.1, delta_scale: float = 1.0,
              mean_scale: float = 3.0, num_layers: int = 1, skills_per_task: int = 1,
              skill_spread: float = 0.0, skill_offset: float = 0.0) -> list[SyntheticTask]:
    """Tasks whose flattened teacher deltas have the prescribed pairwise cosines.

    The deltas are combinations ``sum_k L[t, k] U M_k V^T`` of orthonormal
    atoms sharing one ``m``-dimensional row and column space, with
    ``L L^T`` equal to the target Gram matrix. ``m`` is the smallest value
    with ``m * m`` at least the Gram rank, so each delta has rank <= m.

    With ``skills_per_task > 1`` every task also gets zero-mean sub-skill
    perturbations of RMS Frobenius norm ``skill_spread`` inside the same rank-m
    space, each tied to its own shift of the input mean (norm
    ``skill_offset``, RMS). The task-level ``teacher_delta`` is the sub-skill
    average, so the cosine structure above still holds for it exactly.
    """
    if num_tasks < 1:
        raise ConstructionError("need at least one task")
    if not -1.0 <= conflict_angle <= 1.0:
        raise ConstructionError(f"conflict_angle {conflict_angle} outside [-1, 1]")
    gram = conflict_gram(num_tasks, conflict_angle, layout)
    evals, evecs = np.linalg.eigh(gram)
    if evals.min() < -1e-12:
        raise ConstructionError(
            f"cosine {conflict_angle} is infeasible for {num_tasks} tasks with layout "
            f"{layout!r} (Gram matrix has eigenvalue {evals.min():.3g})"
        )
    keep = evals > 1e-12
    coeffs = evecs[:, keep] * np.sqrt(evals[keep])  # T x k, coeffs @ coeffs.T == gram
    k = coeffs.shape[1]
    m = math.ceil(math.sqrt(k))
    if m > min(d_in, d_out):
        raise ConstructionError(f"{num_tasks} tasks need rank {m} deltas, more than min(d_in, d_out)")

    rng = seeding.stream(seed, "tasks")
    u, _ = np.linalg.qr(rng.standard_normal((d_out, m)))
    v, _ = np.linalg.qr(rng.standard_normal((d_in, m)))
    # Gram-Schmidt on random m*m matrices gives Frobenius-orthonormal cores
    cores, _ = np.linalg.qr(rng.standard_normal((m * m, m * m)))
    atoms = [u @ cores[:, j].reshape(m, m) @ v.T for j in range(k)]

    sigma = 1.0 / math.sqrt(d_in)
    base_rng = seeding.stream(seed, "base_w")
    base_ws = [base_rng.normal(0.0, sigma, size=(d_out, d_in))]
    for _ in range(1, num_layers):
        base_ws.append(base_rng.normal(0.0, sigma, size=(d_out, d_out)))
    base_ws = tuple(base_ws)
    mean_rng = seeding.stream(seed, "input_means")

    if skills_per_task < 1:
        raise ConstructionError("skills_per_task must be >= 1")
    skill_rng = seeding.stream(seed, "skills")

    tasks = []
    for t in range(num_tasks):
        delta = delta_scale * sum(coeffs[t, j] * atoms[j] for j in range(k))
        mean = mean_scale * _unit(mean_rng.standard_normal(d_in))
        skill_deltas, skill_offsets = (), ()
        if skills_per_task > 1:
            raw = skill_rng.standard_normal((skills_per_task, m, m))
            raw -= raw.mean(axis=0)
            skill_deltas = tuple(skill_spread * u @ c @ v.T for c in _rms_unit(raw))
            shifts = skill_rng.standard_normal((skills_per_task, d_in))
            shifts -= shifts.mean(axis=0)
            skill_offsets = tuple(skill_offset * s for s in _rms_unit(shifts))
        tasks.append(SyntheticTask(t, delta, mean, float(noise_std), base_ws,
                                   skill_deltas=skill_deltas, skill_offsets=skill_offsets))
    return tasks


def _unit(x):
    return x / np.linalg.norm(x)


def _rms_unit(stack):
    # one shared scale keeps the zero mean; RMS norm across the stack becomes 1
    norms = np.sqrt(np.sum(stack.reshape(len(stack), -1) ** 2, axis=1))
    return stack / np.sqrt(np.mean(norms**2))


def duplicate_tasks(tasks) -> list[SyntheticTask]:
    """Copies of the first task under new ids, sharing its data streams."""
    first = tasks[0]
    return [replace(first, id=t.id, data_key=first.stream_key) for t in tasks]


def tasks_for(cfg: HarnessConfig, seed: int, duplicate: bool = False) -> list[SyntheticTask]:
    tasks = _tasks_for(cfg, seed)
    return duplicate_tasks(tasks) if duplicate else tasks


def _tasks_for(cfg: HarnessConfig, seed: int) -> list[SyntheticTask]:
    return gen_tasks(cfg.num_tasks, cfg.d_in, cfg.d_out, cfg.conflict_angle, seed,
                     layout=cfg.layout, noise_std=cfg.noise_std, delta_scale=cfg.delta_scale,
                     mean_scale=cfg.mean_scale, num_layers=cfg.num_layers,
                     skills_per_task=cfg.skills_per_task, skill_spread=cfg.skill_spread,
                     skill_offset=cfg.skill_offset)


def cosine_matrix(tasks) -> np.ndarray:
    flat = np.stack([t.teacher_delta.ravel() for t in tasks])
    norms = np.linalg.norm(flat, axis=1)
    return (flat @ flat.T) / np.outer(norms, norms)


# ----------------------------------------------------------------------
# models and training


def build_model(variant: str, tasks, cfg: HarnessConfig, seed: int, **overrides) -> AdapterStack:
    """A fresh model over the tasks' frozen base layers.

    ``overrides`` adjust the MixLoRA layer config (``num_factors``,
    ``routing_mode``, ...) or, for LoRA, ``rank``/``alpha``.
    """
    base_ws = tasks[0].base_ws
    layers = []
    if variant in ("lora", "lora_specialist"):
        rank = overrides.pop("rank", cfg.rank)
        alpha = overrides.pop("alpha", None)
        if overrides:
            raise ConfigError(f"unknown LoRA overrides {sorted(overrides)}")
        for k, w in enumerate(base_ws):
            layer_seed = _layer_seed(seed, k)
            layers.append(init_lora(w.shape[1], w.shape[0], rank, alpha=alpha, seed=layer_seed, base_w=w))
        return AdapterStack(layers, variant)
    if variant != "mixlora":
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    params = dict(
        num_factors=cfg.num_factors, rank=cfg.rank, routing_mode=cfg.routing_mode,
        gating_mode=cfg.gating_mode, cfs_enabled=cfg.cfs_enabled, num_tasks=len(tasks),
    )
    params.update(overrides)
    for k, w in enumerate(base_ws):
        mcfg = MixLoraConfig(d_in=w.shape[1], d_out=w.shape[0], seed=_layer_seed(seed, k), **params)
        layers.append(init_adapter(mcfg, base_w=w))
    return AdapterStack(layers, variant)


def _layer_seed(seed: int, layer: int) -> int:
    # layer 0 keeps the run seed so single-layer runs are easy to reproduce by hand
    if layer == 0:
        return int(seed)
    return int(seeding.stream(seed, "layer", layer).integers(0, 2**63))


@dataclass
class TrainResult:
    model: object  # AdapterStack, or list of them for specialists
    curves: dict  # task id -> list of training losses, one per step on that task
    variant: str
    seed: int
    optimizer: object = None  # AdamState, or list of them for specialists


def _train_one(model: AdapterStack, tasks, cfg: HarnessConfig, seed: int, steps: int, lr: float):
    state = AdamState(lr=lr)
    curves = {t.id: [] for t in tasks}
    data_rngs = {t.id: seeding.stream(seed, "train_data", t.stream_key) for t in tasks}
    for step in range(steps):
        task = tasks[step % len(tasks)]
        h, y = task.sample(cfg.batch_size, cfg.seq_len, data_rngs[task.id])
        task_ids = np.full(cfg.batch_size, task.id)
        loss, grads, _ = model.loss_and_grads(h, y, task.loss, task_ids=task_ids)
        if not math.isfinite(loss):
            raise TrainingError(
                f"loss diverged at step {step} on task {task.id}",
                diagnostics={"step": step, "task": task.id, "lr": lr,
                             "last_losses": {k: v[-5:] for k, v in curves.items()}},
            )
        curves[task.id].append(loss)
        model.update(adam_step(state, model.params(), grads))
    return curves, state


def train(variant: str, tasks, cfg: HarnessConfig, seed: int, steps: Optional[int] = None,
          lr: Optional[float] = None, **overrides) -> TrainResult:
    """Round-robin training over ``tasks`` with Adam; base weights stay frozen.

    ``lora_specialist`` trains one independent LoRA per task, each on its own
    task only, for ``steps // len(tasks)`` steps so it sees exactly the
    batches the joint models see for that task.
    """
    steps = cfg.steps if steps is None else steps
    lr = cfg.lr if lr is None else lr
    if variant == "lora_specialist":
        models, curves, states = [], {}, []
        per_task = max(1, steps // len(tasks))
        for task in tasks:
            model = build_model("lora_specialist", tasks, cfg, seed, **overrides)
            task_curves, state = _train_one(model, [task], cfg, seed, per_task, lr)
            curves.update(task_curves)
            models.append(model)
            states.append(state)
        return TrainResult(models, curves, variant, seed, states)
    model = build_model(variant, tasks, cfg, seed, **overrides)
    curves, state = _train_one(model, tasks, cfg, seed, steps, lr)
    return TrainResult(model, curves, variant, seed, state)


def eval_data(task: SyntheticTask, cfg: HarnessConfig, seed: int):
    return task.sample(cfg.eval_instances, cfg.seq_len, seeding.stream(seed, "eval_data", task.stream_key))


def evaluate(result_or_model, tasks, cfg: HarnessConfig, seed: int) -> dict[int, float]:
    """Per-task loss on fresh samples from each task's distribution."""
    model = result_or_model.model if isinstance(result_or_model, TrainResult) else result_or_model
    losses = {}
    for k, task in enumerate(tasks):
        m = model[k] if isinstance(model, list) else model
        h, y = eval_data(task, cfg, seed)
        out, _ = m.forward_batch(h, np.full(h.shape[0], task.id),
                                 rng=seeding.stream(seed, "eval_routing", task.stream_key))
        losses[task.id] = task.loss(out, y)[0]
    return losses


# ----------------------------------------------------------------------
# experiments


@dataclass
class ExperimentReport:
    name: str
    config: dict
    seeds: list
    # variant -> seed -> task id -> final eval loss
    losses: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def mean_loss(self, variant: str, seed: int) -> float:
        return float(np.mean(list(self.losses[variant][seed].values())))

    def specialist_gap(self, variant: str, seed: int, reference: str = "lora_specialist") -> float:
        """Mean over tasks of (variant loss - specialist loss)."""
        mine, ref = self.losses[variant][seed], self.losses[reference][seed]
        return float(np.mean([mine[t] - ref[t] for t in mine]))

    def rows(self):
        for variant, by_seed in self.losses.items():
            for seed, by_task in by_seed.items():
                for task, loss in by_task.items():
                    yield variant, seed, task, loss


def _variant_losses(tasks, cfg, seed, variant, **overrides):
    result = train(variant, tasks, cfg, seed, **overrides)
    return evaluate(result, tasks, cfg, seed), result


def compare_experiment(cfg: HarnessConfig) -> ExperimentReport:
    """LoRA(r) vs MixLoRA(E, r) vs per-task LoRA(r) specialists, per seed."""
    report = ExperimentReport("compare", asdict(cfg), list(cfg.seeds))
    for name in ("lora", "mixlora", "lora_specialist"):
        report.losses[name] = {}
    for seed in cfg.seeds:
        tasks = tasks_for(cfg, seed)
        for name in ("lora", "mixlora", "lora_specialist"):
            report.losses[name][seed], _ = _variant_losses(tasks, cfg, seed, name)
    return report


def routing_ablation(cfg: HarnessConfig) -> ExperimentReport:
    """MixLoRA with instance, task and random routing on the same tasks."""
    report = ExperimentReport("routing", asdict(cfg), list(cfg.seeds))
    modes = ("instance", "task", "random")
    for mode in modes:
        report.losses[mode] = {}
    for seed in cfg.seeds:
        tasks = tasks_for(cfg, seed)
        for mode in modes:
            report.losses[mode][seed], _ = _variant_losses(tasks, cfg, seed, "mixlora", routing_mode=mode)
    return report


def cfs_ablation(cfg: HarnessConfig) -> ExperimentReport:
    """Identical seeds with the conditional router switched on and off."""
    report = ExperimentReport("cfs", asdict(cfg), list(cfg.seeds))
    report.losses = {"cfs_on": {}, "cfs_off": {}}
    for seed in cfg.seeds:
        tasks = tasks_for(cfg, seed)
        for name, flag in (("cfs_on", True), ("cfs_off", False)):
            report.losses[name][seed], _ = _variant_losses(tasks, cfg, seed, "mixlora", cfs_enabled=flag)
    return report


def _jaccard(a, b) -> float:
    a, b = set(map(int, a)), set(map(int, b))
    return len(a & b) / len(a | b)


def collect_selections(model, tasks, cfg: HarnessConfig, n_samples: int, seed: int):
    """Per task: (per-layer list of A index arrays, per-layer list of B index arrays)."""
    if not model.is_mixlora:
        raise ValueError("routing statistics need a MixLoRA model")
    out = {}
    for task in tasks:
        h, _ = task.sample(n_samples, cfg.seq_len, seeding.stream(seed, "routing_probe", task.stream_key))
        _, sels = model.forward_batch(h, np.full(n_samples, task.id),
                                      rng=seeding.stream(seed, "routing_probe_rng", task.stream_key))
        out[task.id] = (
            [[s.indices_a for s in layer] for layer in sels],
            [[s.indices_b for s in layer] for layer in sels],
        )
    return out


def routing_similarity(model, tasks, cfg: HarnessConfig, n_samples: int = 50, seed: int = 0,
                       side: str = "a") -> dict:
    """Mean Jaccard similarity of selected factor sets within and across tasks.

    Averaged over layers; ``side`` picks the A or B selections.
    """
    sels = collect_selections(model, tasks, cfg, n_samples, seed)
    pick = 0 if side == "a" else 1
    within, cross = [], []
    ids = [t.id for t in tasks]
    num_layers = len(model.layers)
    for layer in range(num_layers):
        sets = {t: sels[t][pick][layer] for t in ids}
        for a, ta in enumerate(ids):
            xs = sets[ta]
            for i in range(len(xs)):
                for j in range(i + 1, len(xs)):
                    within.append(_jaccard(xs[i], xs[j]))
            for tb in ids[a + 1:]:
                for x in xs:
                    for y in sets[tb]:
                        cross.append(_jaccard(x, y))
    w, c = float(np.mean(within)), float(np.mean(cross))
    return {"within": w, "cross": c, "gap": w - c, "n_within": len(within), "n_cross": len(cross)}


def interference_batches(tasks, cfg: HarnessConfig, seed: int, num_batches: int = 4, batch_size: int = 32):
    out = {}
    for task in tasks:
        rng = seeding.stream(seed, "interference_data", task.stream_key)
        out[task.id] = [task.sample(batch_size, cfg.seq_len, rng) for _ in range(num_batches)]
    return out


def interference_comparison(cfg: HarnessConfig, lam: float = 1e-2, num_batches: int = 4,
                            batch_size: int = 32, lora_rank: Optional[int] = None,
                            selector: str = "all_adapter", duplicate: bool = False) -> ExperimentReport:
    """Layer-averaged all-adapter interference for LoRA vs MixLoRA per seed.

    The LoRA baseline gets rank ``num_factors`` by default, i.e. as many
    rank-1 directions as the MixLoRA pool holds.
    """
    from mixlora import interference

    lora_rank = cfg.num_factors if lora_rank is None else lora_rank
    report = ExperimentReport("interference", asdict(cfg), list(cfg.seeds))
    report.losses = {"lora": {}, "mixlora": {}}
    report.extras = {"matrices": {"lora": {}, "mixlora": {}}, "negative_mean": {"lora": {}, "mixlora": {}},
                     "lora_rank": lora_rank, "lam": lam}
    for seed in cfg.seeds:
        tasks = tasks_for(cfg, seed, duplicate)
        batches = interference_batches(tasks, cfg, seed, num_batches, batch_size)
        for name, overrides in (("lora", {"rank": lora_rank}), ("mixlora", {})):
            losses, result = _variant_losses(tasks, cfg, seed, name, **overrides)
            report.losses[name][seed] = losses
            matrix = interference.build_layer_averaged(result.model, tasks, selector, batches, lam,
                                                       rng_seed=seed)
            report.extras["matrices"][name][seed] = matrix
            report.extras["negative_mean"][name][seed] = matrix.negative_mean()
    return report
