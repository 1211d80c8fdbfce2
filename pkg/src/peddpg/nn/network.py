"""Sequential networks and the actor/critic builders.

``hidden_layers`` counts the hidden-to-hidden ``d x d`` weight matrices,
so a network has ``hidden_layers + 2`` weight matrices in total (input,
hidden, output).  With ``hidden_layers=4`` and ``d=600`` the weight counts
match the published FC-DDPG totals.
"""

from __future__ import annotations

import copy

import numpy as np

from peddpg.nn.layers import (
    Dense,
    Flatten,
    Layer,
    PEDense,
    PIDense,
    ReLU,
    ScaledTanh,
    Squeeze,
    layer_from_spec,
)

__all__ = [
    "ARCHITECTURES",
    "Network",
    "build_actor",
    "build_critic",
    "count_free_params",
    "closed_form_counts",
]

ARCHITECTURES = ("fc", "pe")
OUTPUT_INIT = 3e-3


class Network:
    def __init__(self, layers: list[Layer], dtype=np.float32):
        self.layers = layers
        self.dtype = np.dtype(dtype)

    def forward(self, x):
        x = np.asarray(x, dtype=self.dtype)
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, dy, param_grads=True):
        """Backpropagate ``dy``; fills each layer's ``grads`` and returns d(input)."""
        dy = np.asarray(dy, dtype=self.dtype)
        for layer in reversed(self.layers):
            dy = layer.backward(dy, param_grads=param_grads)
        return dy

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                yield f"{i}.{name}", layer, name

    @property
    def params(self) -> list[np.ndarray]:
        return [layer.params[name] for _, layer, name in self.named_params()]

    @property
    def grads(self) -> list[np.ndarray]:
        return [layer.grads[name] for _, layer, name in self.named_params()]

    def count(self, weights_only=True) -> int:
        total = 0
        for layer in self.layers:
            names = layer.weight_names if weights_only else tuple(layer.params)
            total += sum(layer.params[n].size for n in names)
        return total

    def spec(self) -> list[dict]:
        return [layer.spec() for layer in self.layers]

    @classmethod
    def from_spec(cls, spec, dtype=np.float32) -> "Network":
        return cls([layer_from_spec(s, dtype) for s in spec], dtype=dtype)

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Network":
        net = self.copy()
        net.dtype = np.dtype(dtype)
        for layer in net.layers:
            layer.params = {k: v.astype(dtype) for k, v in layer.params.items()}
            layer.zero_grads()
        return net


def _check_blocks(n_users, hidden_width):
    if hidden_width % n_users:
        raise ValueError(
            f"hidden width {hidden_width} is not divisible by the number of users {n_users}; "
            "PE/PI layers need equal-sized per-user blocks"
        )
    return hidden_width // n_users


def build_actor(arch, n_users, state_width, hidden_width, hidden_layers, rng=None, dtype=np.float32):
    """Actor mapping (batch, K, D) states to (batch, K) actions in (0, 1)."""
    layers: list[Layer] = []
    if arch == "fc":
        layers += [Flatten(), Dense(n_users * state_width, hidden_width, rng, dtype), ReLU()]
        for _ in range(hidden_layers):
            layers += [Dense(hidden_width, hidden_width, rng, dtype), ReLU()]
        layers += [Dense(hidden_width, n_users, rng, dtype, init_scale=OUTPUT_INIT), ScaledTanh()]
    elif arch == "pe":
        block = _check_blocks(n_users, hidden_width)
        layers += [PEDense(n_users, state_width, block, rng, dtype), ReLU()]
        for _ in range(hidden_layers):
            layers += [PEDense(n_users, block, block, rng, dtype), ReLU()]
        layers += [PEDense(n_users, block, 1, rng, dtype, init_scale=OUTPUT_INIT), ScaledTanh(), Squeeze()]
    else:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
    return Network(layers, dtype)


def build_critic(arch, n_users, state_width, hidden_width, hidden_layers, rng=None, dtype=np.float32):
    """Critic mapping (batch, K, D+1) state-action stacks to (batch,) values."""
    width = state_width + 1
    layers: list[Layer] = []
    if arch == "fc":
        layers += [Flatten(), Dense(n_users * width, hidden_width, rng, dtype), ReLU()]
        for _ in range(hidden_layers):
            layers += [Dense(hidden_width, hidden_width, rng, dtype), ReLU()]
        layers += [Dense(hidden_width, 1, rng, dtype, init_scale=OUTPUT_INIT), Squeeze()]
    elif arch == "pe":
        block = _check_blocks(n_users, hidden_width)
        layers += [PEDense(n_users, width, block, rng, dtype), ReLU()]
        for _ in range(hidden_layers):
            layers += [PEDense(n_users, block, block, rng, dtype), ReLU()]
        layers += [PIDense(n_users, block, 1, rng, dtype, init_scale=OUTPUT_INIT), Squeeze()]
    else:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
    return Network(layers, dtype)


def count_free_params(
    arch, n_users, state_width, hidden_width, hidden_layers, weights_only=True, include_targets=True
) -> int:
    """Enumerate distinct trainable scalars of actor + critic (and their targets).

    Built with zero-filled parameters, so counting large nets is cheap.
    """
    actor = build_actor(arch, n_users, state_width, hidden_width, hidden_layers, dtype=np.float32)
    critic = build_critic(arch, n_users, state_width, hidden_width, hidden_layers, dtype=np.float32)
    mains = actor.count(weights_only) + critic.count(weights_only)
    return 2 * mains if include_targets else mains


def closed_form_counts(n_users, state_width, hidden_width, hidden_layers, include_targets=True):
    """Weight counts from the block-size algebra, as exact fractions -> int.

    Returns ``(fc, pe)``.
    """
    K, D, d, L = n_users, state_width, hidden_width, hidden_layers
    fc = (L * d * d + d * K * D + d * K) + (L * d * d + d * K * (D + 1) + d)
    pe_num = (2 * L * d * d + 2 * d * K * D + 2 * d * K) + (2 * L * d * d + 2 * d * K * (D + 1) + d * K)
    if pe_num % (K * K):
        raise ValueError("closed form is not integral; hidden width must be divisible by K")
    pe = pe_num // (K * K)
    if include_targets:
        return 2 * fc, 2 * pe
    return fc, pe
