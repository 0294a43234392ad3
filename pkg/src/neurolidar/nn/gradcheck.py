from dataclasses import dataclass

import numpy as np

from .layers import Module
from .tensor import Tensor, backward, mul, no_grad, total


@dataclass
class GradCheckReport:
    errors: dict          # name -> max |analytic - numeric| / max |numeric|
    tolerance: float

    @property
    def passed(self):
        return all(e <= self.tolerance for e in self.errors.values())

    @property
    def worst(self):
        return max(self.errors.values(), default=0.0)


def _scalarize(out, rng):
    if out.data.size == 1:
        return out
    # fixed random projection so every output element contributes
    proj = rng.standard_normal(out.shape)
    return total(mul(out, proj))


def finite_diff_check(module, inputs, tolerance=1e-5, step=1e-6, seed=0):
    """Compare reverse-mode gradients with central differences (float64).

    ``module`` is a Module or any callable; it is called with ``inputs`` (a Tensor
    or list of Tensors) and its output is reduced to a scalar by a fixed random
    projection. Parameters of a Module are checked along with the inputs.
    """
    inputs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    targets = {}
    for i, t in enumerate(inputs):
        t.data = t.data.astype(np.float64)
        t.requires_grad = True
        t.grad = None
        targets[f"input{i}"] = t
    if isinstance(module, Module):
        module.astype(np.float64)
        module.zero_grad()
        for name, p in module.named_parameters():
            targets[name] = p

    def f():
        return _scalarize(module(*inputs), np.random.default_rng(seed))

    backward(f())
    errors = {}
    with no_grad():
        for name, t in targets.items():
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            numeric = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            nflat = numeric.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + step
                up = f().item()
                flat[k] = orig - step
                down = f().item()
                flat[k] = orig
                nflat[k] = (up - down) / (2 * step)
            scale = max(np.abs(numeric).max(initial=0.0), 1e-12)
            errors[name] = float(np.abs(analytic - numeric).max(initial=0.0) / scale)
    return GradCheckReport(errors, tolerance)
