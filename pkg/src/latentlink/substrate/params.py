from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from .tensor import Tensor


class ParameterSet:
    """Named, ordered collection of trainable tensors with an update counter."""

    def __init__(self, tensors=None):
        self._tensors: "OrderedDict[str, Tensor]" = OrderedDict()
        self.version = 0
        for name, t in (tensors or {}).items():
            self.add(name, t)

    def add(self, name: str, tensor: Tensor) -> None:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        if not tensor.requires_grad:
            raise ValueError(f"parameter {name!r} must require grad")
        self._tensors[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def values(self):
        return self._tensors.values()

    def names(self) -> list:
        return list(self._tensors)

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def bump(self) -> None:
        self.version += 1

    def snapshot(self) -> dict:
        return {k: t.data.copy() for k, t in self._tensors.items()}

    def assign(self, values: dict) -> None:
        for k, v in values.items():
            t = self._tensors[k]
            if t.data.shape != np.shape(v):
                raise ValueError(f"shape mismatch for {k}: {t.data.shape} vs {np.shape(v)}")
            t.data = np.array(v, dtype=t.data.dtype)
        self.bump()

    def num_values(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def check_compatible(self, other: "ParameterSet") -> None:
        if self.names() != other.names():
            raise ValueError("parameter sets have different names")
        for k in self._tensors:
            if self[k].shape != other[k].shape:
                raise ValueError(f"shape mismatch for {k}: {self[k].shape} vs {other[k].shape}")
