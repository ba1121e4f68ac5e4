"""Named-parameter store with group tags and freeze flags.

The store is the unit of checkpointing and of warm-bridge surgery: every
trainable (or frozen) tensor in the system lives here under a unique name,
tagged with one of the fixed group labels. Freezing toggles requires_grad,
so frozen tensors cost nothing in backward and are skipped by the optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor

GROUPS = (
    "encoder",
    "predictor",
    "projectors",
    "xattn",
    "lora",
    "heads",
    "base",
    "calibrator",
    "whitening",
)


@dataclass
class Entry:
    tensor: Tensor
    group: str
    frozen: bool


class ParameterStore:
    def __init__(self):
        self.entries: dict[str, Entry] = {}

    def create(self, name, group, data, frozen=False):
        if name in self.entries:
            raise ValueError(f"duplicate parameter name: {name}")
        if group not in GROUPS:
            raise ValueError(f"unknown group {group!r} for {name}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=not frozen)
        self.entries[name] = Entry(t, group, frozen)
        return t

    def __contains__(self, name):
        return name in self.entries

    def __getitem__(self, name) -> Entry:
        return self.entries[name]

    def names(self, group=None):
        if group is None:
            return list(self.entries)
        return [n for n, e in self.entries.items() if e.group == group]

    def tensors(self, group=None):
        return [self.entries[n].tensor for n in self.names(group)]

    def trainable(self):
        return {n: e.tensor for n, e in self.entries.items() if not e.frozen}

    def set_group_frozen(self, group, frozen):
        if group not in GROUPS:
            raise ValueError(f"unknown group {group!r}")
        for e in self.entries.values():
            if e.group == group:
                e.frozen = frozen
                e.tensor.requires_grad = not frozen
                if frozen:
                    e.tensor.grad = None

    def group_counts(self):
        counts: dict[str, int] = {}
        for e in self.entries.values():
            counts[e.group] = counts.get(e.group, 0) + 1
        return counts

    def snapshot(self, group=None):
        """Copy of tensor data, name -> ndarray."""
        return {n: self.entries[n].tensor.data.copy() for n in self.names(group)}

    def zero_grads(self):
        for e in self.entries.values():
            e.tensor.grad = None


# -- initializers -------------------------------------------------------------


def xavier_uniform(shape, gain, rng):
    fan_in, fan_out = shape[-1], shape[-2] if len(shape) > 1 else shape[-1]
    bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def normal_init(shape, std, rng):
    return rng.normal(0.0, std, size=shape)
