"""A small stack of adapted linear layers with a fixed nonlinearity between them."""

from __future__ import annotations

import copy
from typing import Optional

import numpy as np

from mixlora import grad as gradlib
from mixlora.adapter import AdaptedLinear
from mixlora.errors import ShapeError
from mixlora.lora import LoraLinear


class AdapterStack:
    """Layers applied in order, ``tanh`` between consecutive layers.

    Parameter names are prefixed with the layer index, e.g. ``layer0.a_factors``.
    """

    def __init__(self, layers, kind: str):
        if not layers:
            raise ShapeError("an AdapterStack needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.base_w.shape[0] != nxt.base_w.shape[1]:
                raise ShapeError("consecutive layers have mismatched widths")
        self.layers = list(layers)
        self.kind = kind
        self._acts: Optional[list[np.ndarray]] = None

    @property
    def is_mixlora(self) -> bool:
        return isinstance(self.layers[0], AdaptedLinear)

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for k, layer in enumerate(self.layers):
            for name, value in layer.params().items():
                out[f"layer{k}.{name}"] = value
        return out

    def set_param(self, name: str, value) -> None:
        prefix, _, inner = name.partition(".")
        self.layers[int(prefix[len("layer"):])].set_param(inner, value)

    def update(self, new_params: dict) -> None:
        for name, value in new_params.items():
            self.set_param(name, value)

    def copy(self) -> "AdapterStack":
        clone = copy.deepcopy(self)
        clone._acts = None
        for layer in clone.layers:
            if isinstance(layer, AdaptedLinear):
                layer.last_record = None
        return clone

    def forward_batch(self, h, task_ids=None, rng=None):
        """Returns the output and, per layer, the list of Selections (None for LoRA)."""
        x = np.asarray(h, dtype=np.float64)
        selections = []
        acts = []
        for k, layer in enumerate(self.layers):
            if k > 0:
                x = np.tanh(x)
                acts.append(x)
            x, sels = layer.forward_batch(x, task_ids, rng=rng)
            selections.append(sels)
        self._acts = acts
        return x, selections

    def backward_batch(self, upstream):
        grads = {}
        g = np.asarray(upstream, dtype=np.float64)
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            if isinstance(layer, LoraLinear):
                layer_grads, g = layer.backward_batch(g)
            else:
                layer_grads, g = gradlib.backward_batch(layer, g)
            for name, value in layer_grads.items():
                grads[f"layer{k}.{name}"] = value
            if k > 0:
                g = g * (1.0 - self._acts[k - 1] ** 2)
        ordered = {name: grads[name] for name in self.params()}
        return ordered, g

    def loss_and_grads(self, h, target, loss_fn, task_ids=None, rng=None):
        out, sels = self.forward_batch(h, task_ids, rng=rng)
        loss, upstream = loss_fn(out, target)
        grads, _ = self.backward_batch(upstream)
        return loss, grads, sels
