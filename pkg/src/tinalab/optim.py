"""First-order optimizers shared by network training and latent refinement.

Both operate functionally on lists of arrays: ``update(params, grads)``
returns new arrays and advances internal state. Decoupled weight decay is
applied directly to the parameters, outside the moment estimates.
"""

import numpy as np


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self._m = None
        self._v = None
        self._t = 0

    def update(self, params, grads):
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        self._t += 1
        bc1 = 1.0 - self.beta1 ** self._t
        bc2 = 1.0 - self.beta2 ** self._t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * g * g
            m_hat = self._m[i] / bc1
            v_hat = self._v[i] / bc2
            step = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                step = step + self.weight_decay * p
            out.append(p - self.lr * step)
        return out


class GradientDescent:
    """Plain descent x <- x - lr * g."""

    def __init__(self, lr, weight_decay=0.0):
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)

    def update(self, params, grads):
        return [p - self.lr * (g + self.weight_decay * p) for p, g in zip(params, grads)]


OPTIMIZERS = {"adamw": AdamW, "gd": GradientDescent}


def make_optimizer(name, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    if name not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer {name!r}; choose from {sorted(OPTIMIZERS)}")
    if name == "gd":
        return GradientDescent(lr, weight_decay=weight_decay)
    return AdamW(lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
