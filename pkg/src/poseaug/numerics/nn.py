"""Minimal module system: parameters, layers, train/eval modes, state dicts."""

from contextlib import contextmanager

import numpy as np

from . import functional as F
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Module:
    """Base class; parameters, buffers and submodules are discovered from attributes."""

    training = True

    def _children(self):
        for key, val in vars(self).items():
            if isinstance(val, (Parameter, Module)):
                yield key, val
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    yield f"{key}.{i}", m

    def named_parameters(self, prefix=""):
        for key, val in self._children():
            if isinstance(val, Parameter):
                yield prefix + key, val
            else:
                yield from val.named_parameters(prefix + key + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for key, val in getattr(self, "_buffers", {}).items():
            yield prefix + key, val
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val.named_buffers(prefix + key + ".")

    def modules(self):
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state, strict=True):
        targets = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(targets) | set(buffers)) - set(state)
        if strict and missing:
            raise KeyError(f"missing entries in state dict: {sorted(missing)}")
        for name, arr in state.items():
            if name in targets:
                dst = targets[name].data
            elif name in buffers:
                dst = buffers[name]
            elif strict:
                raise KeyError(f"unexpected entry in state dict: {name}")
            else:
                continue
            if dst.shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {dst.shape}")
            dst[...] = arr

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


@contextmanager
def frozen(*modules):
    """Temporarily stop gradient recording for every parameter of ``modules``."""
    params = [p for m in modules for p in m.parameters()]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


class Linear(Module):
    """Affine layer with weight ``[out, in]``.

    ``init="kaiming"`` (for layers followed by a (leaky) ReLU) draws from the
    fan-in Kaiming-uniform range ``sqrt(6 / ((1 + slope^2) fan_in))``;
    ``init="uniform"`` uses ``+-1/sqrt(fan_in)``.  Biases always use the latter.
    """

    def __init__(self, n_in, n_out, rng, init="uniform", slope=0.0):
        bound = 1.0 / np.sqrt(n_in)
        if init == "kaiming":
            wb = np.sqrt(6.0 / ((1.0 + slope ** 2) * n_in))
        elif init == "uniform":
            wb = bound
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Parameter(rng.uniform(-wb, wb, size=(n_out, n_in)))
        self.bias = Parameter(rng.uniform(-bound, bound, size=n_out))

    @property
    def in_features(self):
        return self.weight.shape[1]

    @property
    def out_features(self):
        return self.weight.shape[0]

    def zero_(self):
        self.weight.data[...] = 0.0
        self.bias.data[...] = 0.0

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class BatchNorm1d(Module):
    def __init__(self, n, momentum=0.1, eps=1e-5):
        self.weight = Parameter(np.ones(n))
        self.bias = Parameter(np.zeros(n))
        self._buffers = {"running_mean": np.zeros(n), "running_var": np.ones(n)}
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return F.batch_norm(x, self.weight, self.bias, self._buffers["running_mean"],
                            self._buffers["running_var"], self.training,
                            momentum=self.momentum, eps=self.eps)


class Dropout(Module):
    """Dropout drawing its masks from ``rng`` (shared with the owning network)."""

    def __init__(self, rate, rng):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng

    def forward(self, x):
        return F.dropout(x, self.rate, self.training, self.rng)
