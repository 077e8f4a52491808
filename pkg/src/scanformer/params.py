"""Named parameter store shared by the embedder, selector and model."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .numerics import Tensor, default_dtype


class ParamStore(OrderedDict):
    """Ordered ``name -> Tensor`` mapping with initializer helpers."""

    def __init__(self, rng: np.random.Generator | None = None, prefix: str = ""):
        super().__init__()
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.prefix = prefix

    def _put(self, name: str, arr: np.ndarray) -> Tensor:
        full = self.prefix + name
        t = Tensor(np.asarray(arr, dtype=default_dtype()), requires_grad=True, name=full)
        self[full] = t
        return t

    def normal(self, name: str, shape, std: float = 0.02) -> Tensor:
        return self._put(name, self.rng.normal(0.0, std, size=shape))

    def glorot(self, name: str, fan_in: int, fan_out: int, gain: float = 1.0) -> Tensor:
        bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
        return self._put(name, self.rng.uniform(-bound, bound, size=(fan_in, fan_out)))

    def zeros(self, name: str, shape) -> Tensor:
        return self._put(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Tensor:
        return self._put(name, np.ones(shape))

    def child(self, prefix: str) -> "ParamStore":
        return _Linked(getattr(self, "_root", self), self.prefix + prefix)


class _Linked(ParamStore):
    """A view that writes into its parent store under an extended prefix."""

    def __init__(self, root: ParamStore, prefix: str):
        super().__init__(root.rng, prefix)
        self._root = root

    def _put(self, name: str, arr: np.ndarray) -> Tensor:
        t = super()._put(name, arr)
        self._root[t.name] = t
        return t
