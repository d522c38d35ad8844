"""Checkpoint files: a key-value text header followed by raw float64 data.

Layout::

    # mixlora checkpoint
    format_version = 1
    kind = mixlora
    num_layers = 1
    layer0.d_in = 16
    ...
    tensors = layer0.base_w:16x16 layer0.a_factors:8x16 ...
    end_header
    <little-endian float64 payload, tensors in the order listed>

Per layer the payload order is base_w, a_factors, b_factors, w_a, w_b_ifs,
then w_ab and the two task tables when present. Adam moments, if saved,
follow as ``adam.m.<name>`` / ``adam.v.<name>`` entries. Floats in the
header are written with ``repr`` so every value round-trips exactly.
"""

from __future__ import annotations

import os
from typing import Optional

import numpy as np

from mixlora.adapter import AdaptedLinear, FactorPool, MixLoraConfig, RouterParams
from mixlora.errors import ConfigError, StateError
from mixlora.grad import AdamState
from mixlora.lora import LoraLinear
from mixlora.model import AdapterStack

FORMAT_VERSION = 1
MAGIC = "# mixlora checkpoint"
END = "end_header"


def format_kv(items: dict) -> str:
    lines = []
    for key, value in items.items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        out[key.strip()] = value.strip()
    return out


def _layer_header(k: int, layer) -> dict:
    p = f"layer{k}."
    if isinstance(layer, LoraLinear):
        return {p + "d_in": layer.d_in, p + "d_out": layer.d_out, p + "rank": layer.rank,
                p + "alpha": layer.alpha, p + "seed": layer.seed}
    c = layer.config
    return {
        p + "d_in": c.d_in, p + "d_out": c.d_out, p + "num_factors": c.num_factors, p + "rank": c.rank,
        p + "alpha": c.alpha, p + "routing_mode": c.routing_mode, p + "gating_mode": c.gating_mode,
        p + "cfs_enabled": c.cfs_enabled, p + "init_std": c.init_std, p + "seed": c.seed,
        p + "num_tasks": c.num_tasks,
    }


def _tensors(model: AdapterStack, optimizer: Optional[AdamState]):
    out = []
    for k, layer in enumerate(model.layers):
        out.append((f"layer{k}.base_w", layer.base_w))
        for name, value in layer.params().items():
            out.append((f"layer{k}.{name}", value))
    if optimizer is not None:
        for name, value in model.params().items():
            out.append((f"adam.m.{name}", optimizer.m.get(name, np.zeros_like(value))))
            out.append((f"adam.v.{name}", optimizer.v.get(name, np.zeros_like(value))))
    return out


def save(path, model: AdapterStack, optimizer: Optional[AdamState] = None, extra: Optional[dict] = None):
    header = {"format_version": FORMAT_VERSION, "kind": "mixlora" if model.is_mixlora else "lora",
              "num_layers": len(model.layers)}
    for k, layer in enumerate(model.layers):
        header.update(_layer_header(k, layer))
    if optimizer is None:
        header["optimizer"] = "none"
    else:
        header.update({"optimizer": "adam", "adam.step": optimizer.step, "adam.lr": float(optimizer.lr),
                       "adam.beta1": float(optimizer.beta1), "adam.beta2": float(optimizer.beta2),
                       "adam.eps": float(optimizer.eps)})
    for key, value in (extra or {}).items():
        header[f"extra.{key}"] = value
    tensors = _tensors(model, optimizer)
    header["tensors"] = " ".join(f"{n}:{'x'.join(map(str, np.shape(v)))}" for n, v in tensors)
    with open(os.fspath(path), "wb") as fh:
        fh.write((MAGIC + "\n" + format_kv(header) + END + "\n").encode("utf-8"))
        for _, value in tensors:
            fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def read_header(path) -> tuple[dict, int]:
    with open(os.fspath(path), "rb") as fh:
        data = fh.read()
    marker = ("\n" + END + "\n").encode("utf-8")
    cut = data.find(marker)
    if not data.startswith(MAGIC.encode("utf-8")) or cut < 0:
        raise StateError(f"{path}: not a mixlora checkpoint")
    return parse_kv(data[:cut].decode("utf-8")), cut + len(marker)


def _bool(text: str) -> bool:
    if text not in ("true", "false"):
        raise ConfigError(f"expected true/false, got {text!r}")
    return text == "true"


def load(path) -> tuple[AdapterStack, Optional[AdamState], dict]:
    """Returns ``(model, optimizer_state_or_None, header)``."""
    header, offset = read_header(path)
    if int(header["format_version"]) != FORMAT_VERSION:
        raise StateError(f"unsupported checkpoint version {header['format_version']}")
    with open(os.fspath(path), "rb") as fh:
        fh.seek(offset)
        payload = fh.read()
    arrays = {}
    pos = 0
    for entry in header["tensors"].split():
        name, _, shape_text = entry.rpartition(":")
        shape = tuple(int(s) for s in shape_text.split("x")) if shape_text else ()
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if pos + nbytes > len(payload):
            raise StateError(f"{path}: payload truncated at tensor {name}")
        arrays[name] = np.frombuffer(payload[pos:pos + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
        pos += nbytes
    if pos != len(payload):
        raise StateError(f"{path}: {len(payload) - pos} trailing bytes after payload")

    kind = header["kind"]
    layers = []
    for k in range(int(header["num_layers"])):
        p = f"layer{k}."
        base_w = arrays[p + "base_w"]
        if kind == "lora":
            layers.append(LoraLinear(base_w, arrays[p + "a"], arrays[p + "b"], float(header[p + "alpha"]),
                                     seed=int(header[p + "seed"])))
            continue
        cfg = MixLoraConfig(
            d_in=int(header[p + "d_in"]), d_out=int(header[p + "d_out"]),
            num_factors=int(header[p + "num_factors"]), rank=int(header[p + "rank"]),
            alpha=float(header[p + "alpha"]), routing_mode=header[p + "routing_mode"],
            gating_mode=header[p + "gating_mode"], cfs_enabled=_bool(header[p + "cfs_enabled"]),
            init_std=float(header[p + "init_std"]), seed=int(header[p + "seed"]),
            num_tasks=int(header[p + "num_tasks"]),
        )
        pool = FactorPool(arrays[p + "a_factors"], arrays[p + "b_factors"])
        routers = RouterParams(arrays[p + "w_a"], arrays[p + "w_b_ifs"], arrays.get(p + "w_ab"),
                               arrays.get(p + "task_table_a"), arrays.get(p + "task_table_b"))
        layers.append(AdaptedLinear(base_w, pool, routers, cfg))
    model = AdapterStack(layers, kind)

    optimizer = None
    if header.get("optimizer") == "adam":
        optimizer = AdamState(lr=float(header["adam.lr"]), beta1=float(header["adam.beta1"]),
                              beta2=float(header["adam.beta2"]), eps=float(header["adam.eps"]),
                              step=int(header["adam.step"]))
        for name in model.params():
            optimizer.m[name] = arrays[f"adam.m.{name}"]
            optimizer.v[name] = arrays[f"adam.v.{name}"]
    return model, optimizer, header
