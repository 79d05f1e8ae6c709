"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


class NonDeterministicFunctionError(RuntimeError):
    """The checked function returned different values on repeated evaluation."""


@dataclass
class GradCheckReport:
    """Per-parameter maximum relative error between analytic and numeric gradients."""
    errors: dict = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def worst(self) -> tuple:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]


def _rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def finite_diff_check(f, params, h: float = 1e-5,
                      samples_per_param: int | None = None,
                      rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` is a deterministic zero-argument callable that runs a fresh forward
    pass and returns a scalar Tensor.  ``params`` is a list of (name, Tensor)
    pairs; each tensor is perturbed in place coordinate by coordinate with
    step ``h``.  When ``samples_per_param`` is given, only that many randomly
    chosen coordinates per parameter are checked (required for whole-model
    checks, where exhaustive differencing is infeasible).
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h must lie in [1e-7, 1e-3], got {h}")
    v1 = f().item()
    v2 = f().item()
    if v1 != v2:
        raise NonDeterministicFunctionError(
            f"function value changed between evaluations: {v1!r} vs {v2!r}")

    for _, p in params:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = {}
    for name, p in params:
        analytic[name] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()

    report = GradCheckReport()
    for name, p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        if samples_per_param is None or samples_per_param >= n:
            indices = range(n)
        else:
            if rng is None:
                rng = np.random.default_rng(0)
            indices = rng.choice(n, size=samples_per_param, replace=False)
        worst = 0.0
        a_flat = analytic[name].reshape(-1)
        for idx in indices:
            orig = flat[idx]
            flat[idx] = orig + h
            fp = f().item()
            flat[idx] = orig - h
            fm = f().item()
            flat[idx] = orig
            numeric = (fp - fm) / (2.0 * h)
            worst = max(worst, _rel_error(a_flat[idx], numeric))
        report.errors[name] = worst
    return report


def check_input_gradient(f, x: Tensor, h: float = 1e-5,
                         samples: int | None = None,
                         rng: np.random.Generator | None = None) -> float:
    """Finite-difference check of df/dx for a non-parameter input tensor."""
    return finite_diff_check(f, [("input", x)], h=h,
                             samples_per_param=samples, rng=rng).max_rel_error
