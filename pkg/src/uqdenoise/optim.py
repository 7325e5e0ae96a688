"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

import numpy as np



class NonFiniteGradientError(RuntimeError):
    def __init__(self, param_name):
        super().__init__(f"non-finite gradient for parameter '{param_name}'")
        self.param_name = param_name


class AdamState:
    """First/second moment buffers plus a step counter for one parameter group.

    The update is the standard bias-corrected Adam rule and is fully
    deterministic: identical state, parameters and gradients give
    bit-identical results.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        # params: list of (name, Tensor)
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(t.data) for _, t in self.params]
        self.v = [np.zeros_like(t.data) for _, t in self.params]

    def step(self):
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for i, (name, p) in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(name)
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


def adam_step(state: AdamState):
    """Functional alias: advance ``state`` one step using current gradients."""
    state.step()
