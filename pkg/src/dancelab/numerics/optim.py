from __future__ import annotations

from typing import Mapping

import numpy as np


class Adam:
    """Adaptive moment estimation over a dict of named arrays.

    Updates are returned as new arrays; callers own the swap so frozen
    parameter sets are never touched by accident.
    """

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        out = {}
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[name] = m.astype(p.dtype, copy=False)
            self.v[name] = v.astype(p.dtype, copy=False)
            update = self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
            out[name] = (p - update).astype(p.dtype, copy=False)
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"m/{k}": v for k, v in self.m.items()}
        arrays.update({f"v/{k}": v for k, v in self.v.items()})
        return arrays

    def load_state(self, t: int, arrays: Mapping[str, np.ndarray]) -> None:
        self.t = int(t)
        self.m = {k[2:]: np.array(v) for k, v in arrays.items() if k.startswith("m/")}
        self.v = {k[2:]: np.array(v) for k, v in arrays.items() if k.startswith("v/")}
