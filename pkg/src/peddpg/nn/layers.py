"""Layers with hand-written backward passes.

Set-structured tensors have shape (batch, n, width): ``n`` users, each with
a ``width``-wide feature block.  A PE layer applies the block matrix whose
diagonal blocks are ``U`` and off-diagonal blocks are ``V``; it never builds
that matrix except through ``materialize`` (used by tests).
"""

import numpy as np

__all__ = [
    "Layer",
    "Dense",
    "PEDense",
    "PIDense",
    "ReLU",
    "ScaledTanh",
    "Identity",
    "Flatten",
    "Squeeze",
    "layer_from_spec",
]


def _user_sum(x):
    # accumulate in float64 so the result does not depend on user order
    return x.sum(axis=1, dtype=np.float64).astype(x.dtype, copy=False)


def _uniform(rng, bound, shape, dtype):
    if rng is None:
        return np.zeros(shape, dtype=dtype)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base class; parameter-free layers only override forward/backward."""

    weight_names: tuple = ()
    bias_names: tuple = ()

    def __init__(self):
        self.params = {}
        self.grads = {}
        self._cache = None

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy, param_grads=True):
        raise NotImplementedError

    def spec(self) -> dict:
        return {"type": type(self).__name__}

    def _cached(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called before forward")
        return self._cache

    def zero_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}


class Dense(Layer):
    weight_names = ("W",)
    bias_names = ("b",)

    def __init__(self, n_in, n_out, rng=None, dtype=np.float32, init_scale=None):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        bound = init_scale if init_scale is not None else 1.0 / np.sqrt(n_in)
        self.params = {
            "W": _uniform(rng, bound, (n_out, n_in), dtype),
            "b": _uniform(rng, bound, (n_out,), dtype),
        }
        self.zero_grads()

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"Dense expects (batch, {self.n_in}), got {x.shape}")
        self._cache = x
        return x @ self.params["W"].T + self.params["b"]

    def backward(self, dy, param_grads=True):
        x = self._cached()
        if param_grads:
            self.grads["W"] = dy.T @ x
            self.grads["b"] = dy.sum(axis=0)
        return dy @ self.params["W"]

    def spec(self):
        return {"type": "Dense", "n_in": self.n_in, "n_out": self.n_out}


class PEDense(Layer):
    """Permutation-equivariant layer: y_i = U x_i + V sum_{j != i} x_j + P."""

    weight_names = ("U", "V")
    bias_names = ("P",)

    def __init__(self, n, d_in, d_out, rng=None, dtype=np.float32, init_scale=None):
        super().__init__()
        self.n, self.d_in, self.d_out = n, d_in, d_out
        # fan-in of one row of the materialized matrix
        bound = init_scale if init_scale is not None else 1.0 / np.sqrt(n * d_in)
        self.params = {
            "U": _uniform(rng, bound, (d_out, d_in), dtype),
            "V": _uniform(rng, bound, (d_out, d_in), dtype),
            "P": _uniform(rng, bound, (d_out,), dtype),
        }
        self.zero_grads()

    def forward(self, x):
        if x.ndim != 3 or x.shape[1:] != (self.n, self.d_in):
            raise ValueError(f"PEDense expects (batch, {self.n}, {self.d_in}), got {x.shape}")
        U, V, P = self.params["U"], self.params["V"], self.params["P"]
        s = _user_sum(x)
        self._cache = (x, s)
        return x @ (U - V).T + (s @ V.T)[:, None, :] + P

    def backward(self, dy, param_grads=True):
        x, s = self._cached()
        U, V = self.params["U"], self.params["V"]
        dy_sum = _user_sum(dy)
        if param_grads:
            d_diff = np.einsum("bno,bni->oi", dy, x)
            self.grads["U"] = d_diff
            self.grads["V"] = dy_sum.T @ s - d_diff
            self.grads["P"] = dy_sum.sum(axis=0)
        return dy @ (U - V) + (dy_sum @ V)[:, None, :]

    def materialize(self):
        """Dense (n*d_out, n*d_in) weight and (n*d_out,) bias."""
        U, V, P = self.params["U"], self.params["V"], self.params["P"]
        eye = np.eye(self.n, dtype=bool)
        W = np.block([[U if eye[i, j] else V for j in range(self.n)] for i in range(self.n)])
        return W, np.tile(P, self.n)

    def spec(self):
        return {"type": "PEDense", "n": self.n, "d_in": self.d_in, "d_out": self.d_out}


class PIDense(Layer):
    """Permutation-invariant output layer: y = sum_i A x_i + b."""

    weight_names = ("A",)
    bias_names = ("b",)

    def __init__(self, n, d_in, d_out, rng=None, dtype=np.float32, init_scale=None):
        super().__init__()
        self.n, self.d_in, self.d_out = n, d_in, d_out
        bound = init_scale if init_scale is not None else 1.0 / np.sqrt(n * d_in)
        self.params = {
            "A": _uniform(rng, bound, (d_out, d_in), dtype),
            "b": _uniform(rng, bound, (d_out,), dtype),
        }
        self.zero_grads()

    def forward(self, x):
        if x.ndim != 3 or x.shape[1:] != (self.n, self.d_in):
            raise ValueError(f"PIDense expects (batch, {self.n}, {self.d_in}), got {x.shape}")
        s = _user_sum(x)
        self._cache = s
        return s @ self.params["A"].T + self.params["b"]

    def backward(self, dy, param_grads=True):
        s = self._cached()
        if param_grads:
            self.grads["A"] = dy.T @ s
            self.grads["b"] = dy.sum(axis=0)
        dx = dy @ self.params["A"]
        return np.repeat(dx[:, None, :], self.n, axis=1)

    def materialize(self):
        return np.tile(self.params["A"], (1, self.n)), self.params["b"].copy()

    def spec(self):
        return {"type": "PIDense", "n": self.n, "d_in": self.d_in, "d_out": self.d_out}


class ReLU(Layer):
    def forward(self, x):
        self._cache = x > 0
        return np.where(self._cache, x, 0).astype(x.dtype, copy=False)

    def backward(self, dy, param_grads=True):
        return dy * self._cached()


class ScaledTanh(Layer):
    """0.5 * (tanh(x) + 1), squashing into (0, 1).

    ``activity_l2`` adds ``activity_l2 * x`` to the input gradient, i.e. the
    gradient of ``activity_l2 / 2 * sum(x**2)``; it keeps x out of saturation.
    """

    activity_l2 = 0.0

    def forward(self, x):
        y = 0.5 * (np.tanh(x) + 1.0)
        self._cache = (x, y)
        return y

    def backward(self, dy, param_grads=True):
        x, y = self._cached()
        # d/dx 0.5 (tanh + 1) = 0.5 (1 - tanh^2) = 2 y (1 - y)
        dx = dy * 2.0 * y * (1.0 - y)
        if self.activity_l2:
            dx = dx + (self.activity_l2 * x).astype(dx.dtype, copy=False)
        return dx


class Identity(Layer):
    def forward(self, x):
        self._cache = True
        return x

    def backward(self, dy, param_grads=True):
        self._cached()
        return dy


class Flatten(Layer):
    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy, param_grads=True):
        return dy.reshape(self._cached())


class Squeeze(Layer):
    """Drop the trailing unit axis: (batch, ..., 1) -> (batch, ...)."""

    def forward(self, x):
        if x.shape[-1] != 1:
            raise ValueError(f"Squeeze expects a trailing axis of 1, got {x.shape}")
        self._cache = x.shape
        return x[..., 0]

    def backward(self, dy, param_grads=True):
        return dy.reshape(self._cached())


_SIMPLE = {cls.__name__: cls for cls in (ReLU, ScaledTanh, Identity, Flatten, Squeeze)}


def layer_from_spec(spec, dtype=np.float32):
    kind = spec["type"]
    if kind in _SIMPLE:
        return _SIMPLE[kind]()
    if kind == "Dense":
        return Dense(spec["n_in"], spec["n_out"], dtype=dtype)
    if kind == "PEDense":
        return PEDense(spec["n"], spec["d_in"], spec["d_out"], dtype=dtype)
    if kind == "PIDense":
        return PIDense(spec["n"], spec["d_in"], spec["d_out"], dtype=dtype)
    raise ValueError(f"unknown layer type {kind!r}")
