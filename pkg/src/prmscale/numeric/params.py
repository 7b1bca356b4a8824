"""Named parameter storage and the Adam optimizer."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np
from scipy.stats import truncnorm

from .autodiff import Var, param


class ParamStore:
    """Ordered name -> :class:`Var` map with gradient and moment buffers.

    Iteration order is insertion order, which fixes the reduction order of
    every global quantity (gradient norm, checkpoint layout).
    """

    def __init__(self):
        self._params: "OrderedDict[str, Var]" = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def add(self, name: str, value) -> Var:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        p = param(value, name=name)
        p.grad = np.zeros_like(p.data)
        self._params[name] = p
        self.m[name] = np.zeros_like(p.data)
        self.v[name] = np.zeros_like(p.data)
        return p

    def __getitem__(self, name: str) -> Var:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def n_values(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = np.zeros_like(p.data)

    def grad_norm(self, prefix: str | None = None) -> float:
        total = 0.0
        for name, p in self._params.items():
            if prefix is None or name.startswith(prefix):
                total += float(np.sum(p.grad * p.grad))
        return float(np.sqrt(total))

    def clip_grad_norm(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if max_norm > 0 and norm > max_norm:
            factor = max_norm / (norm + 1e-12)
            for p in self._params.values():
                p.grad = p.grad * factor
        return norm

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self._params.items())

    def load_state_dict(self, state) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, p in self._params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()


class Adam:
    def __init__(self, store: ParamStore, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps

    def step(self) -> None:
        s = self.store
        s.t += 1
        c1 = 1.0 - self.b1 ** s.t
        c2 = 1.0 - self.b2 ** s.t
        for name, p in s.items():
            g = p.grad
            m = s.m[name] = self.b1 * s.m[name] + (1.0 - self.b1) * g
            v = s.v[name] = self.b2 * s.v[name] + (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def trunc_normal(gen: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations."""
    return truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=gen)
