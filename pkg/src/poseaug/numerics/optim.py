import numpy as np

from ..errors import NonFiniteError


class Adam:
    """Adam with bias correction.

    ``params`` may be a list of parameters or of ``(name, parameter)`` pairs;
    names are only used in diagnostics.  ``step(lr_scale)`` multiplies the
    base learning rate, which is how the training loop applies its linear
    decay schedule.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        params = list(params)
        if params and isinstance(params[0], tuple):
            self.names = [n for n, _ in params]
            self.params = [p for _, p in params]
        else:
            self.names = [p.name or f"param{i}" for i, p in enumerate(params)]
            self.params = params
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr_scale=1.0):
        grads = []
        for name, p in zip(self.names, self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient in parameter {name!r}")
            grads.append(g)
        self.step_count += 1
        b1, b2 = self.betas
        lr = self.lr * lr_scale
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if lr != 0.0:
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self, prefix=""):
        state = {}
        for name, m, v in zip(self.names, self.m, self.v):
            state[f"{prefix}{name}.m"] = m.copy()
            state[f"{prefix}{name}.v"] = v.copy()
        return state

    def load_state_dict(self, state, step_count, prefix=""):
        for name, m, v in zip(self.names, self.m, self.v):
            m[...] = state[f"{prefix}{name}.m"]
            v[...] = state[f"{prefix}{name}.v"]
        self.step_count = int(step_count)


def linear_decay(epoch, total_epochs):
    """Learning-rate factor ``1 - epoch / total_epochs`` for a 0-based epoch."""
    return 1.0 - epoch / total_epochs
