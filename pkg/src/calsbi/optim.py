"""AdamW with decoupled weight decay, plus global gradient-norm clipping."""

import math

import numpy as np


def clip_grad_norm(grads, max_norm):
    """Scale gradients so their global L2 norm does not exceed max_norm.

    Returns (scaled gradients, pre-clip norm). No-op on an empty list.
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total <= max_norm or total == 0.0:
        return list(grads), total
    scale = max_norm / total
    return [g * scale for g in grads], total


class AdamW:
    """Standard AdamW over a name -> Value parameter dict.

    Bias-corrected first/second moments; weight decay applied directly to
    parameters (decoupled from the moment update). Deterministic given
    identical inputs and state.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        if not 0.0 < betas[0] < 1.0 or not 0.0 < betas[1] < 1.0:
            raise ValueError(f"betas must lie in (0, 1), got {betas}")
        if lr <= 0 or eps <= 0 or weight_decay < 0:
            raise ValueError("lr and eps must be positive, weight_decay non-negative")
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(v.data) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def gradients(self):
        """Current gradient arrays in parameter order (zeros where unset)."""
        return [p.grad if p.grad is not None else np.zeros_like(p.data)
                for p in self.params.values()]

    def step(self, grads=None):
        """Apply one AdamW update from .grad fields (or explicit grads)."""
        if grads is None:
            grads = self.gradients()
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for (name, p), g in zip(self.params.items(), grads):
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match "
                                 f"parameter {name!r} shape {p.data.shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
