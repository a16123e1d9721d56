"""Central-difference verification of backward rules."""

from dataclasses import dataclass, field

import numpy as np

from .tensor import no_grad


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict = field(default_factory=dict)  # parameter name -> max relative error

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return self.max_error < self.tolerance

    @property
    def failures(self):
        return {k: v for k, v in self.errors.items() if v >= self.tolerance}

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        lines = [f"{status} max_rel_err={self.max_error:.3e} tol={self.tolerance:.0e}"]
        lines += [f"  {k}: {v:.3e}" for k, v in self.errors.items()]
        return "\n".join(lines)


def relative_error(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def finite_difference_check(loss_fn, params, tolerance=1e-4, step=1e-4, max_entries=None, rng=None):
    """Compare backward() gradients of ``loss_fn()`` against central differences.

    ``params`` maps names to float64 leaf tensors that ``loss_fn`` reads; the
    function must rebuild its graph on every call.  The probe step for entry
    ``w`` is ``step * (|w| + 1)``.  With ``max_entries`` set, a random subset of
    entries per parameter is probed.
    """
    for p in params.values():
        if p.data.dtype != np.float64:
            raise TypeError("gradient checking requires float64 parameters")
        p.data = np.ascontiguousarray(p.data)
        p.requires_grad = True
        p.grad = None
    loss_fn().backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    report = GradCheckReport(tolerance)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        worst = 0.0
        for i in entries:
            orig = flat[i]
            h = step * (abs(orig) + 1.0)
            with no_grad():
                flat[i] = orig + h
                up = float(loss_fn().data)
                flat[i] = orig - h
                down = float(loss_fn().data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            worst = max(worst, float(relative_error(analytic[name].reshape(-1)[i], numeric)))
        report.errors[name] = worst
    return report
