"""Gradient evaluation and the finite-difference verification harness."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import GradTape, NumericsError, Tensor, precision


def evaluate_with_gradients(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray | Tensor],
) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate scalar ``f(params)`` and its gradient w.r.t. every entry of ``params``."""
    tensors = {k: v if isinstance(v, Tensor) else Tensor(v, name=k) for k, v in params.items()}
    with GradTape() as tape:
        tape.watch(*tensors.values())
        value = f(tensors)
    if not isinstance(value, Tensor) or value.size != 1:
        raise NumericsError("objective must return a scalar Tensor")
    grads = tape.gradient(value, tensors.values())
    return float(value.data), dict(zip(tensors.keys(), grads))


@dataclass
class GradCheckEntry:
    param: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if e.rel_error > self.tolerance]

    def per_param(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for e in self.entries:
            out[e.param] = max(out.get(e.param, 0.0), e.rel_error)
        return out


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    step: float = 1e-4,
    tolerance: float = 1e-5,
    n_samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients against central differences.

    Runs in 64-bit regardless of the ambient precision. With ``n_samples``
    set, that many coordinates are drawn per parameter (without
    replacement); otherwise every coordinate is checked.
    """
    if not 1e-6 <= step <= 1e-3:
        raise ValueError(f"finite-difference step must lie in [1e-6, 1e-3], got {step}")
    report = GradCheckReport(tolerance)
    with precision(64):
        base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        _, grads = evaluate_with_gradients(f, base)

        def value_at(name, idx, delta):
            trial = dict(base)
            arr = base[name].copy()
            arr[idx] += delta
            trial[name] = arr
            return float(f({k: Tensor(v, name=k) for k, v in trial.items()}).data)

        for name, arr in base.items():
            flat = np.arange(arr.size)
            if n_samples is not None and n_samples < arr.size:
                if rng is None:
                    raise ValueError("rng is required when sampling coordinates")
                flat = np.sort(rng.choice(arr.size, size=n_samples, replace=False))
            for k in flat:
                idx = np.unravel_index(int(k), arr.shape)
                numeric = (value_at(name, idx, step) - value_at(name, idx, -step)) / (2 * step)
                analytic = float(grads[name][idx])
                report.entries.append(
                    GradCheckEntry(name, tuple(int(i) for i in idx), analytic, numeric,
                                   relative_error(analytic, numeric))
                )
    return report
