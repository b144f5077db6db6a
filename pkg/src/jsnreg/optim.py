"""Adam with projection onto box bounds."""
import numpy as np


class Adam:
    def __init__(self, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-12):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, x: np.ndarray, grad: np.ndarray, lower=None, upper=None) -> np.ndarray:
        """Return the updated copy of ``x``, clipped to [lower, upper] when given."""
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        x = x - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        if lower is not None or upper is not None:
            x = np.clip(x, lower, upper)
        return x
