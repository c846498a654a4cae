"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward, no_grad, record_kinks


@dataclass
class GradCheckReport:
    checked: int = 0
    # elements whose +-step crossed a relu/max-pool kink and were re-measured
    # with a step 1000x smaller
    refined: int = 0
    skipped: int = 0
    max_abs_error: float = 0.0
    max_rel_error: float = 0.0
    failures: list[tuple[str, tuple[int, ...], float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and self.checked > 0

    def summary(self) -> str:
        return (f"checked={self.checked} refined={self.refined} skipped={self.skipped} "
                f"max_abs={self.max_abs_error:.2e} max_rel={self.max_rel_error:.2e} "
                f"failures={len(self.failures)}")


def _evaluate(fn: Callable[[], Tensor]) -> tuple[float, list[bytes]]:
    with no_grad(), record_kinks() as kinks:
        value = fn().item()
    return value, list(kinks)


def gradcheck(fn: Callable[[], Tensor], inputs: Mapping[str, Tensor], step: float = 1e-3,
              rtol: float = 1e-4, atol: float = 1e-6, max_per_input: int | None = None,
              seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn()`` against central differences.

    ``fn`` must rebuild the scalar loss from the current ``.data`` of
    ``inputs`` on every call.  An element passes when its absolute error is
    at most ``atol`` or its relative error is at most ``rtol``.  Inputs must
    be float64.
    """
    for name, t in inputs.items():
        if t.dtype != np.float64:
            raise ValueError(f"gradcheck needs float64 inputs; {name} is {t.dtype}")
        t.grad = None
    loss = fn()
    backward(loss)
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in inputs.items()}
    _, base_kinks = _evaluate(fn)

    report = GradCheckReport()
    rng = np.random.default_rng(seed)
    for name, t in inputs.items():
        flat = t.data.reshape(-1)
        positions = np.arange(flat.size)
        if max_per_input is not None and flat.size > max_per_input:
            positions = np.sort(rng.choice(flat.size, max_per_input, replace=False))
        for pos in positions:
            h = step
            numeric = None
            for _ in range(2):
                orig = flat[pos]
                flat[pos] = orig + h
                fp, kp = _evaluate(fn)
                flat[pos] = orig - h
                fm, km = _evaluate(fn)
                flat[pos] = orig
                if kp == base_kinks and km == base_kinks:
                    numeric = (fp - fm) / (2 * h)
                    break
                h *= 1e-3
                report.refined += 1
            if numeric is None:
                report.skipped += 1
                continue
            a = analytic[name].reshape(-1)[pos]
            abs_err = abs(a - numeric)
            rel_err = abs_err / max(abs(a), abs(numeric), 1e-300)
            report.checked += 1
            report.max_abs_error = max(report.max_abs_error, abs_err)
            if abs_err > atol:
                report.max_rel_error = max(report.max_rel_error, rel_err)
                if rel_err > rtol:
                    idx = np.unravel_index(pos, t.shape)
                    report.failures.append((name, tuple(int(i) for i in idx), float(a), float(numeric)))
    return report
