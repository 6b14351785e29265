"""Small dense numeric core.

Matrices are plain ``numpy`` float64 arrays. Everything here is deterministic
given its inputs; randomness always flows through an explicit generator made
by :func:`make_rng`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOG_CLAMP = 1e-12
NORM_EPS = 1e-12

ACTIVATIONS = ("identity", "relu", "sigmoid")


class DimensionError(ValueError):
    """Raised when array shapes do not fit together."""


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def as_matrix(m) -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-d matrix, got shape {arr.shape}")
    return arr


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    m = as_matrix(m)
    if m.size == 0:
        raise DimensionError("softmax of an empty matrix")
    z = np.exp(m - m.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def softmax_cols(m) -> np.ndarray:
    return softmax_rows(as_matrix(m).T).T


def softmax_rows_backward(p: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient of a row softmax w.r.t. its input, given output ``p``."""
    return p * (upstream - (upstream * p).sum(axis=1, keepdims=True))


def softmax_cols_backward(p: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return softmax_rows_backward(p.T, upstream.T).T


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def cosine(a, b) -> float:
    """Cosine similarity; 0.0 if either vector is (numerically) zero."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def normalize_rows(m) -> tuple[np.ndarray, np.ndarray]:
    """Return unit-norm rows and the original row norms.

    Rows with norm below ``NORM_EPS`` are left as zeros.
    """
    m = as_matrix(m)
    norms = np.linalg.norm(m, axis=1)
    safe = np.where(norms < NORM_EPS, 1.0, norms)
    out = m / safe[:, None]
    out[norms < NORM_EPS] = 0.0
    return out, norms


def normalize_rows_backward(unit: np.ndarray, norms: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    safe = np.where(norms < NORM_EPS, np.inf, norms)
    proj = (unit * upstream).sum(axis=1, keepdims=True)
    return (upstream - unit * proj) / safe[:, None]


def cosine_matrix(a, b) -> np.ndarray:
    """Pairwise cosine similarity between rows of ``a`` (n x d) and ``b`` (m x d)."""
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"row dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    ua, _ = normalize_rows(a)
    ub, _ = normalize_rows(b)
    return np.clip(ua @ ub.T, -1.0, 1.0)


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return sigmoid(z)
    raise ValueError(f"unknown activation {name!r}")


def _activation_grad(name: str, z: np.ndarray, out: np.ndarray) -> np.ndarray:
    if name == "identity":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0).astype(np.float64)
    return out * (1.0 - out)


@dataclass
class FeedForwardLayer:
    """Dense layer ``activation(W x + b)``; ``W`` is (out x in)."""

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weight = as_matrix(self.weight)
        self.bias = np.asarray(self.bias, dtype=np.float64).ravel()
        if self.bias.shape[0] != self.weight.shape[0]:
            raise DimensionError(
                f"bias length {self.bias.shape[0]} does not match weight rows {self.weight.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, activation: str = "identity",
             scale: float = 1.0) -> "FeedForwardLayer":
        bound = scale * np.sqrt(6.0 / (n_in + n_out))
        return cls(rng.uniform(-bound, bound, size=(n_out, n_in)), np.zeros(n_out), activation)

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def copy(self) -> "FeedForwardLayer":
        return FeedForwardLayer(self.weight.copy(), self.bias.copy(), self.activation)

    def forward(self, x) -> np.ndarray:
        return ff_forward(self, x)


def _check_input(layer: FeedForwardLayer, x: np.ndarray) -> None:
    if x.shape[-1] != layer.n_in:
        raise DimensionError(f"input has {x.shape[-1]} features, layer expects {layer.n_in}")


def ff_forward(layer: FeedForwardLayer, x) -> np.ndarray:
    """Apply the layer to a vector or to a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    _check_input(layer, x)
    return _activate(layer.activation, x @ layer.weight.T + layer.bias)


def ff_backward(layer: FeedForwardLayer, x, upstream) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Parameter gradients and input gradient for a vector or a batch.

    For a batch the parameter gradients are summed over rows.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    _check_input(layer, x)
    z = x @ layer.weight.T + layer.bias
    if upstream.shape != z.shape:
        raise DimensionError(f"upstream shape {upstream.shape} does not match output {z.shape}")
    out = _activate(layer.activation, z)
    dz = upstream * _activation_grad(layer.activation, z, out)
    if x.ndim == 1:
        grads = {"weight": np.outer(dz, x), "bias": dz.copy()}
    else:
        grads = {"weight": dz.T @ x, "bias": dz.sum(axis=0)}
    return grads, dz @ layer.weight


@dataclass
class Adam:
    """Adaptive-moment optimizer over a dict of named parameter arrays.

    ``step`` updates the arrays in place, so layers that hold references to
    them see the new values.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("moment decays must lie in (0, 1)")

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        if set(grads) - set(params):
            raise DimensionError(f"gradients for unknown parameters: {sorted(set(grads) - set(params))}")
        for name, g in grads.items():
            if g.shape != params[name].shape:
                raise DimensionError(f"{name}: gradient {g.shape} vs parameter {params[name].shape}")
            if name in self.m and self.m[name].shape != g.shape:
                raise DimensionError(f"{name}: moment buffer shape changed")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


def optimizer_step(opt: Adam, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return opt.step(params, grads)


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at array ``x`` (perturbed in place, then restored)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def relative_error(a, b, floor: float = 1e-8) -> float:
    """``||a - b|| / max(||a||, ||b||)`` over the flattened arrays."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
