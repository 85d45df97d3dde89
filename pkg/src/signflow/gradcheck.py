"""Finite-difference validation of recorded-tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients against central differences.

    ``max_rel_error`` is the worst deviation |analytic - numeric| /
    max(|analytic|, |numeric|, floor) over all checked coordinates.
    Coordinates where the one-sided differences disagree (kinks of relu /
    max pooling) are excluded from the maximum and listed in ``excluded``.
    """

    max_rel_error: float
    tolerance: float
    passed: bool
    per_input: dict = field(default_factory=dict)
    excluded: list = field(default_factory=list)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"grad_check {status}: max rel error {self.max_rel_error:.3e} "
                f"(tolerance {self.tolerance:.1e}, {len(self.excluded)} kink "
                f"points excluded)")


def grad_check(func, inputs, tolerance=1e-4, step=1e-5, floor=1e-2,
               kink_rtol=1e-2, names=None):
    """Compare analytic gradients of ``func`` with central finite differences.

    func: callable mapping the given tensors to a scalar Tensor.
    inputs: tensors to perturb; only those with requires_grad are checked.
    step: central-difference step h (values are probed at x-h, x, x+h).

    A coordinate is flagged as a non-differentiable point and excluded when
    the forward and backward one-sided differences disagree by more than
    ``kink_rtol`` relative to the gradient scale.
    """
    inputs = list(inputs)
    checked = [(i, t) for i, t in enumerate(inputs) if t.requires_grad]
    if not checked:
        raise ValueError("grad_check: no input requires a gradient")
    if names is None:
        names = [f"input{i}" for i, _ in checked]

    for _, t in checked:
        t.zero_grad()
    out = func(*inputs)
    backward(out)
    analytic = [np.array(t.grad if t.grad is not None else np.zeros_like(t.data))
                for _, t in checked]
    for _, t in checked:
        t.zero_grad()

    with no_grad():
        f0 = func(*inputs).item()
        max_err = 0.0
        per_input = {}
        excluded = []
        for (slot, tensor), name, a_grad in zip(checked, names, analytic):
            flat = tensor.data.reshape(-1)
            worst = 0.0
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                f_plus = func(*inputs).item()
                flat[j] = orig - step
                f_minus = func(*inputs).item()
                flat[j] = orig
                fwd = (f_plus - f0) / step
                bwd = (f0 - f_minus) / step
                scale = max(abs(fwd), abs(bwd), 1.0)
                if abs(fwd - bwd) > kink_rtol * scale:
                    excluded.append((name, np.unravel_index(j, tensor.shape)))
                    continue
                numeric = (f_plus - f_minus) / (2.0 * step)
                a = a_grad.reshape(-1)[j]
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
            per_input[name] = worst
            max_err = max(max_err, worst)

    return GradCheckReport(max_rel_error=max_err, tolerance=tolerance,
                           passed=max_err <= tolerance,
                           per_input=per_input, excluded=excluded)
