"""Central finite-difference verification of backward passes.

The module under test is evaluated through a fixed random projection
loss L = sum(forward(x) * R) so every output element contributes. Each
parameter scalar (and optionally each input scalar) is nudged by
h = cbrt(machine eps) * max(1, |theta|) both ways and the quotient is
compared against the analytic gradient.
"""

from dataclasses import dataclass

import numpy as np

_H0 = float(np.finfo(np.float64).eps) ** (1.0 / 3.0)


@dataclass
class GradCheckReport:
    max_relative_error: float
    worst_parameter: str
    worst_parameter_index: int
    passed: bool
    tolerance: float
    checked: int

    def __str__(self):
        word = "pass" if self.passed else "FAIL"
        return (f"{word}: max rel err {self.max_relative_error:.3e} "
                f"at {self.worst_parameter}[{self.worst_parameter_index}] "
                f"({self.checked} scalars, tol {self.tolerance:g})")


def grad_check(f, params, x, tolerance=1e-5, seed=0, include_input=True):
    """Compare f's analytic gradients against central differences.

    f: module with forward(x, train)/backward(dy)/zero_grads().
    params: iterable of (name, param, grad) triples, or None for all of
    f.named_items(). Run in float64; raises on non-finite gradients.
    """
    if x.dtype != np.float64:
        raise ValueError("grad_check requires float64 inputs")
    # full networks expose the raw tensor head as forward_raw
    fwd = getattr(f, "forward_raw", f.forward)
    rng = np.random.default_rng(seed)
    y0 = fwd(x, train=True)
    r = rng.standard_normal(y0.shape)
    f.zero_grads()
    dx = f.backward(np.ascontiguousarray(r))
    if params is None:
        params = list(f.named_items())
    entries = list(params)
    if include_input:
        entries.append(("input", x, dx))

    def loss():
        return float((fwd(x, train=True) * r).sum())

    worst = (0.0, "", -1)
    checked = 0
    for name, p, g in entries:
        fp = p.reshape(-1)
        fg = g.reshape(-1)
        bad = np.flatnonzero(~np.isfinite(fg))
        if bad.size:
            raise ValueError(f"non-finite gradient in {name} at index {bad[0]}")
        for i in range(fp.size):
            h = _H0 * max(1.0, abs(fp[i]))
            orig = fp[i]
            fp[i] = orig + h
            lp = loss()
            fp[i] = orig - h
            lm = loss()
            fp[i] = orig
            num = (lp - lm) / (2.0 * h)
            ana = float(fg[i])
            rel = abs(ana - num) / max(1.0, abs(ana), abs(num))
            checked += 1
            if rel > worst[0]:
                worst = (rel, name, i)
    err, wname, widx = worst
    return GradCheckReport(err, wname, widx, err < tolerance, tolerance, checked)
