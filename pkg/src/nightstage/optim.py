"""Adam with bias correction, restricted to an explicit trainable set.

The optimizer is constructed over exactly the tensors a finetuning strategy
marked trainable; passing a gradient for anything else is an error rather
than a silent no-op, which is what makes the freezing contract testable.
Updates are written as `p.data = p.data - step` (never in-place) so graph
nodes built from earlier values keep their buffers.
"""

from __future__ import annotations

import numpy as np


class OptimError(ValueError):
    pass


class Adam:
    def __init__(self, params: dict, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise OptimError(f"learning rate must be positive, got {lr}")
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(t.data) for n, t in self.params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in self.params.items()}

    def step(self, grads: dict | None = None) -> None:
        """Apply one update from `grads` (name → array), or from the
        tensors' own `.grad` buffers when omitted."""
        if grads is None:
            grads = {n: t.grad for n, t in self.params.items()}
        unknown = set(grads) - set(self.params)
        if unknown:
            raise OptimError(
                f"gradient supplied for non-trainable parameter(s): {sorted(unknown)}"
            )
        missing = set(self.params) - set(grads)
        if missing:
            raise OptimError(f"missing gradient for trainable parameter(s): {sorted(missing)}")
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, p in self.params.items():
            g = np.asarray(grads[name])
            if g.shape != p.data.shape:
                raise OptimError(
                    f"gradient shape {g.shape} does not match parameter "
                    f"{name!r} of shape {p.data.shape}"
                )
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - update
