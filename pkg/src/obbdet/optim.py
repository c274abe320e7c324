"""AdamW with decoupled weight decay over a named parameter dict."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor


class AdamW:
    """Adam moment tracking plus weight decay applied directly to the weights.

    The decay term is not folded into the gradient: each step does

        theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta

    with bias-corrected first/second moments.  One global step counter covers
    all parameters, and gradients are cleared after they are consumed.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.05):
        if lr < 0.0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        if not 0.0 <= betas[0] < 1.0 or not 0.0 <= betas[1] < 1.0:
            raise ValueError(f"betas must lie in [0, 1), got {betas}")
        if eps <= 0.0:
            raise ValueError(f"eps must be positive, got {eps}")
        if weight_decay < 0.0:
            raise ValueError(f"weight decay must be non-negative, got {weight_decay}")
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self) -> None:
        if all(p.grad is None for p in self.params.values()):
            raise ValueError("no parameter has a gradient; run backward first")
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        # lr * (m/bc1) / (sqrt(v/bc2) + eps) == scale * m / (sqrt(v) + eps')
        scale = self.lr * math.sqrt(bc2) / bc1
        eps_term = self.eps * math.sqrt(bc2)
        shrink = 1.0 - self.lr * self.weight_decay
        for name, p in self.params.items():
            # A parameter the loss didn't touch this step has grad None: its
            # moments decay and weight decay still applies.
            g = p.grad if p.grad is not None else 0.0
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(v)
            denom += eps_term
            np.divide(m, denom, out=denom)
            p.data *= shrink
            p.data -= scale * denom
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
