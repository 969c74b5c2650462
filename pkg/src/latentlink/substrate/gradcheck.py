from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .params import ParameterSet
from .tensor import Tensor


class NondeterministicLoss(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: dict = field(default_factory=dict)
    tolerance: float = 1e-3
    checked: int = 0

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance

    def summary(self) -> str:
        lines = [f"{'PASS' if self.passed else 'FAIL'} worst={self.worst:.3e} tol={self.tolerance:g}"]
        for name, err in self.max_rel_error.items():
            lines.append(f"  {name:40s} {err:.3e}")
        return "\n".join(lines)


def relative_error(a, b, floor: float = 1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)


def grad_check(loss_fn: Callable[[], Tensor], params: ParameterSet, epsilon: float = 1e-6,
               tolerance: float = 1e-3, max_entries: int | None = 24,
               rng: np.random.Generator | None = None, floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` must rebuild the loss from scratch on every call (any
    sampling inside it must be re-seeded per call). At most ``max_entries``
    randomly chosen entries are probed per parameter tensor.
    """
    rng = rng or np.random.default_rng(0)
    params.zero_grad()
    loss = loss_fn()
    base = float(loss.data)
    if float(loss_fn().data) != base:
        raise NondeterministicLoss("loss differs between two evaluations under a fixed seed")
    params.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in params.items()}

    report = GradCheckReport(tolerance=tolerance)
    for name, t in params.items():
        flat = t.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if max_entries is None or n <= max_entries else \
            rng.choice(n, size=max_entries, replace=False)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + epsilon
            up = float(loss_fn().data)
            flat[i] = old - epsilon
            down = float(loss_fn().data)
            flat[i] = old
            numeric[j] = (up - down) / (2.0 * epsilon)
        got = analytic[name].reshape(-1)[idx]
        report.max_rel_error[name] = float(relative_error(got, numeric, floor).max()) if len(idx) else 0.0
        report.checked += len(idx)
    params.zero_grad()
    return report
