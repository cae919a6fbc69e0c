"""Parameter-tree helpers and the SGD-with-momentum optimizer.

Weights live in nested dataclasses (tuples/lists/dicts allowed). The flatten
helper walks that tree in declared field order and exposes every ndarray leaf
under a dotted name, e.g. ``cfm.2.proj_out.weight``. The returned arrays are
the live objects, so in-place updates through the flat view mutate the model.
Gradient dictionaries use the same names.
"""
from __future__ import annotations

import dataclasses

import numpy as np

Array = np.ndarray


def named_arrays(obj, prefix: str = ""):
    """Yield (dotted_name, ndarray) for every array leaf, deterministic order."""
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_arrays(getattr(obj, f.name), name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            name = f"{prefix}.{i}" if prefix else str(i)
            yield from named_arrays(item, name)
    elif isinstance(obj, dict):
        for key in sorted(obj):
            name = f"{prefix}.{key}" if prefix else str(key)
            yield from named_arrays(obj[key], name)
    # scalars / enums / None are configuration, not parameters


def flatten_params(obj, prefix: str = "") -> dict[str, Array]:
    return dict(named_arrays(obj, prefix))


def zero_grads_like(params: dict[str, Array]) -> dict[str, Array]:
    return {name: np.zeros_like(arr) for name, arr in params.items()}


def accumulate(into: dict[str, Array], grads: dict[str, Array]) -> None:
    for name, g in grads.items():
        into[name] += g


def scale(grads: dict[str, Array], factor: float) -> None:
    for g in grads.values():
        g *= factor


def num_parameters(obj) -> int:
    return sum(arr.size for _, arr in named_arrays(obj))


class SgdMomentum:
    """Plain SGD with momentum over a flat parameter view; updates in place."""

    def __init__(self, params: dict[str, Array], momentum: float = 0.9):
        self.params = params
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(arr) for name, arr in params.items()}

    def step(self, grads: dict[str, Array], lr: float) -> None:
        for name in self.params:
            v = self.velocity[name]
            v *= self.momentum
            v += grads[name]
            self.params[name] -= lr * v
