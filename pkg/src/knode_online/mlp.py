"""Small tanh MLP with a flat parameter vector."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_LAYER_DIMS = (17, 32, 32, 13)


def param_count(layer_dims) -> int:
    return sum((a + 1) * b for a, b in zip(layer_dims[:-1], layer_dims[1:]))


@dataclass(frozen=True, eq=False)
class Mlp:
    """Feed-forward net: tanh on hidden layers, identity on the output.

    ``params`` packs each layer as the row-major ``(out, in)`` weight matrix
    followed by the bias, layer after layer. The array is made read-only so
    a member stored in an ensemble cannot be edited in place.
    """

    layer_dims: tuple
    params: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError(f"invalid layer dims {dims}")
        p = np.array(self.params, dtype=float).ravel()
        if p.size != param_count(dims):
            raise ValueError(
                f"layer dims {dims} need {param_count(dims)} parameters, got {p.size}"
            )
        if not np.all(np.isfinite(p)):
            raise ValueError("MLP parameters must be finite")
        p.flags.writeable = False
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "params", p)

    @classmethod
    def initialize(cls, layer_dims=DEFAULT_LAYER_DIMS, rng=None, output_scale: float = 1.0) -> "Mlp":
        """Uniform init in ``[-s, s]``, ``s = 1/sqrt(fan_in)``.

        ``output_scale`` multiplies the last layer; 0 makes a fresh net an exact
        zero residual.
        """
        rng = np.random.default_rng(rng)
        dims = tuple(layer_dims)
        chunks = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            s = 1.0 / np.sqrt(a)
            w = rng.uniform(-s, s, size=(b, a))
            bias = rng.uniform(-s, s, size=b)
            if i == len(dims) - 2:
                w = w * output_scale
                bias = bias * output_scale
            chunks += [w.ravel(), bias]
        return cls(dims, np.concatenate(chunks))

    @classmethod
    def from_layers(cls, layers) -> "Mlp":
        dims = [np.shape(layers[0][0])[1]] + [np.shape(w)[0] for w, _ in layers]
        flat = np.concatenate([np.concatenate([np.ravel(w), np.ravel(b)]) for w, b in layers])
        return cls(tuple(dims), flat)

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return unpack(self.params, self.layer_dims)

    def with_params(self, params) -> "Mlp":
        return Mlp(self.layer_dims, params)

    def forward(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != self.input_dim:
            raise ValueError(f"input has trailing dim {z.shape[-1]}, net expects {self.input_dim}")
        h = z
        layers = self.layers()
        for w, b in layers[:-1]:
            h = np.tanh(h @ w.T + b)
        w, b = layers[-1]
        return h @ w.T + b

    __call__ = forward

    def lipschitz_bound(self) -> float:
        """Product of layer spectral norms (tanh is 1-Lipschitz)."""
        return float(np.prod([np.linalg.norm(w, 2) for w, _ in self.layers()]))


def unpack(params, layer_dims) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    k = 0
    for a, b in zip(layer_dims[:-1], layer_dims[1:]):
        w = params[k : k + a * b].reshape(b, a)
        k += a * b
        out.append((w, params[k : k + b]))
        k += b
    return out


def member_forward(net: Mlp, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("member input must be finite")
    return net.forward(z)
