import numpy as np

from peddpg.nn.network import Network

__all__ = ["Adam", "soft_update", "hard_update"]


class Adam:
    """Adam over a network's free parameters, updated in place.

    ``weight_decay`` adds ``weight_decay * theta`` to every gradient (L2
    regularization, not decoupled decay).
    """

    def __init__(self, network: Network, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.network = network
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p) for p in network.params]
        self.v = [np.zeros_like(p) for p in network.params]
        self.t = 0

    def step(self, grads=None):
        grads = self.network.grads if grads is None else grads
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.network.params, grads, self.m, self.v):
            if self.weight_decay:
                g = g + self.weight_decay * p
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, state: dict):
        self.t = int(state["t"])
        for dst, src in zip(self.m, state["m"]):
            dst[...] = src
        for dst, src in zip(self.v, state["v"]):
            dst[...] = src


def soft_update(target: Network, main: Network, rate: float):
    """target <- rate * main + (1 - rate) * target, in place."""
    for t, p in zip(target.params, main.params):
        t *= 1.0 - rate
        t += rate * p


def hard_update(target: Network, main: Network):
    for t, p in zip(target.params, main.params):
        t[...] = p
