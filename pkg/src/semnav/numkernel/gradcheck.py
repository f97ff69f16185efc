"""Central finite-difference check of analytic gradients."""
from dataclasses import dataclass, field

import numpy as np

from ..errors import DiagnosticError
from .tensor import backward

# Coordinates whose gradients are both below this magnitude are compared
# absolutely; otherwise finite-difference noise (~1e-10) dominates.
REL_FLOOR = 1e-6


def relative_error(analytic, numeric):
    return np.abs(analytic - numeric) / np.maximum(
        np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR
    )


@dataclass
class GradCheckReport:
    tol: float
    errors: dict = field(default_factory=dict)  # name -> max relative error

    @property
    def passed(self):
        return all(e < self.tol for e in self.errors.values())

    @property
    def failing(self):
        return [n for n, e in self.errors.items() if not e < self.tol]

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    def summary(self):
        status = "PASS" if self.passed else "FAIL " + ",".join(self.failing)
        return f"{status} max_rel_err={self.max_error:.3e} over {len(self.errors)} parameters"


def grad_check(named_params, loss_fn, h=1e-5, tol=1e-4, analytic=None, max_coords=None, rng=None):
    """Compare analytic gradients of ``loss_fn()`` with central differences.

    ``named_params`` is an iterable of (name, Parameter). ``analytic`` may map
    names to precomputed gradient arrays (used to test the checker itself);
    otherwise one backward pass produces them. ``max_coords`` samples that
    many coordinates per parameter with ``rng``; ``None`` checks all of them.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    named_params = list(named_params)
    for _, p in named_params:
        p.grad = None
    loss = loss_fn()
    base = loss.item()
    if loss_fn().item() != base:
        raise DiagnosticError("loss_fn is not deterministic: two evaluations differ")
    if analytic is None:
        backward(loss)
        analytic = {
            n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in named_params
        }

    report = GradCheckReport(tol=tol)
    for name, p in named_params:
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False))
        numeric = np.empty(len(coords))
        for k, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            numeric[k] = (up - down) / (2 * h)
        a = np.asarray(analytic[name]).reshape(-1)[coords]
        report.errors[name] = float(relative_error(a, numeric).max()) if len(coords) else 0.0
    return report
