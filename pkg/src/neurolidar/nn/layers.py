import math

import numpy as np

from . import functional as F
from .tensor import Parameter


class Module:
    """Container whose Parameter / Module attributes are discovered in definition order."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self):
        params = []
        for name, p in self.named_parameters():
            p.name = name
            params.append(p)
        return params

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) ^ set(state))
            raise KeyError(f"parameter sets differ: {missing[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad = None

    def astype(self, dtype):
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_uniform(rng, shape, fan_in, a=math.sqrt(5.0), dtype=np.float32):
    """U(-b, b) with b = sqrt(6 / ((1 + a^2) fan_in)); the default a gives b = 1/sqrt(fan_in)."""
    bound = math.sqrt(6.0 / ((1.0 + a * a) * fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0, groups=1, bias=True):
        fan_in = cin // groups * kernel * kernel
        self.weight = Parameter(kaiming_uniform(rng, (cout, cin // groups, kernel, kernel),
                                                fan_in), "weight")
        self.bias = Parameter(np.zeros(cout, np.float32), "bias") if bias else None
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0):
        # fan_in seen by each output pixel of a stride == kernel upsampler
        fan_in = cin * max(1, (kernel // stride) ** 2)
        self.weight = Parameter(kaiming_uniform(rng, (cin, cout, kernel, kernel), fan_in),
                                "weight")
        self.bias = Parameter(np.zeros(cout, np.float32), "bias")
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, fin, fout, rng):
        self.weight = Parameter(kaiming_uniform(rng, (fout, fin), fin), "weight")
        self.bias = Parameter(np.zeros(fout, np.float32), "bias")

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)
