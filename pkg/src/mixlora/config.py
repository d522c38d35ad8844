"""Run configuration files (YAML) with strict, line-anchored validation.

Schema (every block optional, unknown keys rejected)::

    seed: 0                      # top-level seed; --seed overrides it
    output_dir: runs/example     # --out overrides it
    adapter:
      variant: mixlora           # mixlora | lora | lora_specialist
      num_factors: 8
      rank: 2
      alpha: null                # null -> 2*E for MixLoRA, 2*r for LoRA
      routing_mode: instance     # instance | task | random
      gating_mode: soft          # soft | hard
      cfs_enabled: true
      init_std: null             # null -> 1/sqrt(d_in)
    harness:
      num_tasks: 4
      d_in: 16
      d_out: 16
      conflict_angle: -0.5
      layout: paired             # paired | equiangular
      duplicate_tasks: false     # every task a copy of task 0, same data
      num_layers: 1
      steps: 2000
      lr: 0.01
      batch_size: 8
      seq_len: 8
      noise_std: 0.1
      delta_scale: 2.0
      mean_scale: 3.0
      skills_per_task: 2
      skill_spread: 2.0
      skill_offset: 3.0
      eval_instances: 64
      seeds: [0, 1, 2, 3, 4]
    interference:
      group: all_adapter         # lora_a | lora_b | all_adapter
      lam: 0.01
      num_batches: 4
      batch_size: 32
    gradcheck:
      seeds: 20
      tol: 1.0e-6
      eps: 1.0e-5
    routing:
      n_samples: 50
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from typing import Any

import yaml

from mixlora.errors import ConfigError
from mixlora.harness import HarnessConfig

ADAPTER_KEYS = {
    "variant": str, "num_factors": int, "rank": int, "alpha": (float, type(None)),
    "routing_mode": str, "gating_mode": str, "cfs_enabled": bool, "init_std": (float, type(None)),
}
HARNESS_EXTRA = {"duplicate_tasks": bool}
INTERFERENCE_KEYS = {"group": str, "lam": float, "num_batches": int, "batch_size": int}
GRADCHECK_KEYS = {"seeds": int, "tol": float, "eps": float}
ROUTING_KEYS = {"n_samples": int}
TOP_KEYS = {"seed", "output_dir", "adapter", "harness", "interference", "gradcheck", "routing"}


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    adapter: dict = field(default_factory=lambda: {
        "variant": "mixlora", "alpha": None, "init_std": None,
    })
    harness: HarnessConfig = field(default_factory=HarnessConfig)
    duplicate_tasks: bool = False
    interference: dict = field(default_factory=lambda: {
        "group": "all_adapter", "lam": 1e-2, "num_batches": 4, "batch_size": 32,
    })
    gradcheck: dict = field(default_factory=lambda: {"seeds": 20, "tol": 1e-6, "eps": 1e-5})
    routing: dict = field(default_factory=lambda: {"n_samples": 50})
    source: str = "<defaults>"

    def adapter_overrides(self) -> dict:
        """MixLoRA/LoRA layer overrides derived from the adapter block."""
        a = self.adapter
        if a["variant"] == "mixlora":
            out = {k: a[k] for k in ("num_factors", "rank", "routing_mode", "gating_mode", "cfs_enabled")
                   if k in a}
            if a.get("alpha") is not None:
                out["alpha"] = a["alpha"]
            if a.get("init_std") is not None:
                out["init_std"] = a["init_std"]
            return out
        out = {}
        if "rank" in a:
            out["rank"] = a["rank"]
        if a.get("alpha") is not None:
            out["alpha"] = a["alpha"]
        return out

    def echo(self) -> dict:
        from dataclasses import asdict

        return {
            "seed": self.seed, "output_dir": self.output_dir, "adapter": dict(self.adapter),
            "harness": dict(asdict(self.harness), duplicate_tasks=self.duplicate_tasks),
            "interference": dict(self.interference), "gradcheck": dict(self.gradcheck),
            "routing": dict(self.routing),
        }


def _line(node) -> int:
    return node.start_mark.line + 1


def _mapping(node, where: str, source: str) -> list:
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{source}:{_line(node)}: {where} must be a mapping")
    return node.value


def _coerce(value: Any, expected, key: str, source: str, line: int):
    types = expected if isinstance(expected, tuple) else (expected,)
    if float in types and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if bool not in types and isinstance(value, bool):
        raise ConfigError(f"{source}:{line}: {key} must be {types[0].__name__}, got a boolean")
    if not isinstance(value, types):
        names = " or ".join("null" if t is type(None) else t.__name__ for t in types)
        raise ConfigError(f"{source}:{line}: {key} must be {names}, got {value!r}")
    return value


def _block(node, spec: dict, name: str, source: str, loader) -> dict:
    out = {}
    for key_node, value_node in _mapping(node, name, source):
        key = key_node.value
        if key not in spec:
            raise ConfigError(f"{source}:{_line(key_node)}: unknown key '{name}.{key}'")
        value = loader.construct_object(value_node, deep=True)
        out[key] = (_coerce(value, spec[key], f"{name}.{key}", source, _line(value_node)), _line(value_node))
    return out


def load_config(path) -> RunConfig:
    source = os.fspath(path)
    try:
        with open(source) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{source}:0: cannot read config: {exc}") from exc
    return parse_config(text, source)


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    try:
        loader = yaml.SafeLoader(text)
        root = loader.get_single_node()
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark else 0
        raise ConfigError(f"{source}:{line}: invalid YAML: {exc}") from exc
    cfg = RunConfig(source=source)
    if root is None:
        return cfg

    harness_fields = {f.name: f.type for f in fields(HarnessConfig)}
    harness_spec = {}
    for name in harness_fields:
        default = getattr(HarnessConfig(), name)
        harness_spec[name] = type(default) if not isinstance(default, tuple) else list
    harness_spec.update(HARNESS_EXTRA)

    harness_values = {}
    for key_node, value_node in _mapping(root, "top level", source):
        key = key_node.value
        line = _line(key_node)
        if key not in TOP_KEYS:
            raise ConfigError(f"{source}:{line}: unknown key '{key}'")
        if key == "seed":
            cfg.seed = _coerce(loader.construct_object(value_node), int, "seed", source, _line(value_node))
        elif key == "output_dir":
            cfg.output_dir = _coerce(loader.construct_object(value_node), str, "output_dir", source, line)
        elif key == "adapter":
            block = _block(value_node, ADAPTER_KEYS, "adapter", source, loader)
            cfg.adapter.update({k: v for k, (v, _) in block.items()})
            _check_choice(block, "variant", ("mixlora", "lora", "lora_specialist"), source)
            _check_choice(block, "routing_mode", ("instance", "task", "random"), source)
            _check_choice(block, "gating_mode", ("soft", "hard"), source)
            _check_positive(block, ("num_factors", "rank", "alpha", "init_std"), "adapter", source)
        elif key == "harness":
            harness_values = _block(value_node, harness_spec, "harness", source, loader)
        elif key == "interference":
            block = _block(value_node, INTERFERENCE_KEYS, "interference", source, loader)
            cfg.interference.update({k: v for k, (v, _) in block.items()})
            _check_choice(block, "group", ("lora_a", "lora_b", "all_adapter"), source)
            _check_positive(block, ("lam", "num_batches", "batch_size"), "interference", source)
        elif key == "gradcheck":
            block = _block(value_node, GRADCHECK_KEYS, "gradcheck", source, loader)
            cfg.gradcheck.update({k: v for k, (v, _) in block.items()})
            _check_positive(block, ("seeds", "tol", "eps"), "gradcheck", source)
        elif key == "routing":
            block = _block(value_node, ROUTING_KEYS, "routing", source, loader)
            cfg.routing.update({k: v for k, (v, _) in block.items()})
            _check_positive(block, ("n_samples",), "routing", source)

    if "duplicate_tasks" in harness_values:
        cfg.duplicate_tasks = harness_values.pop("duplicate_tasks")[0]
    kwargs = {k: v for k, (v, _) in harness_values.items()}
    if "seeds" in kwargs:
        kwargs["seeds"] = tuple(kwargs["seeds"])
    try:
        cfg.harness = HarnessConfig(**kwargs)
    except (ConfigError, TypeError, ValueError) as exc:
        line = min((ln for _, ln in harness_values.values()), default=0)
        raise ConfigError(f"{source}:{line}: harness block invalid: {exc}") from exc

    a = cfg.adapter
    if a.get("rank", cfg.harness.rank) > a.get("num_factors", cfg.harness.num_factors) and a["variant"] == "mixlora":
        raise ConfigError(f"{source}:0: adapter.rank cannot exceed adapter.num_factors")
    # adapter block values feed the harness defaults used by every experiment
    for key in ("num_factors", "rank", "routing_mode", "gating_mode", "cfs_enabled"):
        if key in a:
            setattr(cfg.harness, key, a[key])
    return cfg


def _check_choice(block, key, choices, source):
    if key in block:
        value, line = block[key]
        if value not in choices:
            raise ConfigError(f"{source}:{line}: {key} must be one of {list(choices)}, got {value!r}")


def _check_positive(block, keys, name, source):
    for key in keys:
        if key in block:
            value, line = block[key]
            if value is not None and not value > 0:
                raise ConfigError(f"{source}:{line}: {name}.{key} must be positive, got {value!r}")
