"""Finite-difference verification of the adapter's reverse pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mixlora import seeding
from mixlora.adapter import MixLoraConfig, init_adapter
from mixlora.grad import backward_batch, finite_diff, relative_error

DEFAULT_TOL = 1e-6


@dataclass
class GradCheckResult:
    seed: int
    routing_mode: str
    gating_mode: str
    cfs_enabled: bool
    errors: dict = field(default_factory=dict)  # tensor name -> relative error
    input_error: float = 0.0
    flipped: bool = False  # some +-eps perturbation changed a top-k choice

    def passed(self, tol: float = DEFAULT_TOL) -> bool:
        return self.flipped or (max(self.errors.values()) < tol and self.input_error < tol)


def _selection_key(sels):
    return tuple((tuple(s.indices_a), tuple(s.indices_b)) for s in sels)


def check_instance(seed: int, routing_mode: str = "instance", gating_mode: str = "soft",
                   cfs_enabled: bool = True, d_in: int = 3, d_out: int = 2, num_factors: int = 4,
                   rank: int = 2, seq: int = 2, batch: int = 2, eps: float = 1e-5,
                   num_tasks: int = 3) -> GradCheckResult:
    """Analytic vs central-difference gradients for one random adapter.

    Every trainable tensor is randomised (including ``b_factors``, which
    would otherwise start at zero) so no path is trivially silent.
    """
    cfg = MixLoraConfig(d_in=d_in, d_out=d_out, num_factors=num_factors, rank=rank,
                        routing_mode=routing_mode, gating_mode=gating_mode, cfs_enabled=cfs_enabled,
                        num_tasks=num_tasks, seed=seed)
    adapter = init_adapter(cfg)
    rng = seeding.stream(seed, "gradcheck")
    for name, value in adapter.params().items():
        adapter.set_param(name, rng.standard_normal(value.shape))
    h = rng.standard_normal((batch, seq, d_in))
    upstream = rng.standard_normal((batch, seq, d_out))
    task_ids = rng.integers(0, num_tasks, size=batch) if routing_mode == "task" else None

    def route_rng():
        # random routing must draw the same factors on every evaluation
        return seeding.stream(seed, "gradcheck_routing")

    _, base_sels = adapter.forward_batch(h, task_ids, rng=route_rng())
    reference = _selection_key(base_sels)
    grads, dh = backward_batch(adapter, upstream)
    result = GradCheckResult(seed, routing_mode, gating_mode, cfs_enabled)

    for name, value in adapter.params().items():
        def fn(theta, name=name):
            probe = adapter.copy()
            probe.set_param(name, theta.copy())
            out, sels = probe.forward_batch(h, task_ids, rng=route_rng())
            if _selection_key(sels) != reference:
                result.flipped = True
            return float(np.sum(out * upstream))

        result.errors[name] = relative_error(grads[name], finite_diff(fn, value, eps))

    def fn_h(inputs):
        probe = adapter.copy()
        out, sels = probe.forward_batch(inputs, task_ids, rng=route_rng())
        if _selection_key(sels) != reference:
            result.flipped = True
        return float(np.sum(out * upstream))

    result.input_error = relative_error(dh, finite_diff(fn_h, h, eps))
    return result


MODES = [
    ("instance", "soft", True),
    ("instance", "soft", False),
    ("task", "soft", True),
    ("task", "soft", False),
    ("instance", "hard", True),
    ("random", "hard", False),
]


def run_suite(seeds, modes=MODES, tol: float = DEFAULT_TOL, **kwargs) -> list[GradCheckResult]:
    return [check_instance(seed, *mode, **kwargs) for seed in seeds for mode in modes]
