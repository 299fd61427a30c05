import numpy as np


class NonFiniteGradientError(FloatingPointError):
    pass


class Adam:
    """Bias-corrected Adam.  ``step`` applies the update then zeroes gradients."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for k, p in enumerate(self.params):
            if not np.all(np.isfinite(p.grad)):
                bad = int(np.size(p.grad) - np.count_nonzero(np.isfinite(p.grad)))
                raise NonFiniteGradientError(
                    f"parameter #{k} shape {p.shape}: {bad} non-finite gradient entries; step aborted"
                )
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.values -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.values.dtype)
        self.zero_grad()


def adam_step(state: Adam):
    state.step()
