"""Dense float64 helpers and a seeded counter-based RNG.

Everything is a thin layer over numpy.  Vectors and matrices are plain
``np.ndarray`` values; the functions here only add shape checking and the
numerically safe forms used throughout the package.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Raised when a computation produces non-finite or diverging values."""

    def __init__(self, message: str, head: int | None = None, step: int | None = None):
        super().__init__(message)
        self.head = head
        self.step = step


def as_float(a) -> np.ndarray:
    """Array view of ``a``; floating dtypes are kept, anything else becomes float64."""
    a = np.asarray(a)
    return a if a.dtype.kind == "f" else a.astype(DTYPE)


def as_matrix(a) -> np.ndarray:
    m = as_float(a)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def as_vector(a) -> np.ndarray:
    v = as_float(a)
    if v.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got shape {v.shape}")
    return v


def matvec(W, x) -> np.ndarray:
    W = as_matrix(W)
    x = as_vector(x)
    if W.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec: matrix {W.shape} incompatible with vector {x.shape}")
    return W @ x


def outer(u, v) -> np.ndarray:
    u = as_vector(u)
    v = as_vector(v)
    if u.size == 0 or v.size == 0:
        raise ShapeError(f"outer: empty operand ({u.shape}, {v.shape})")
    return np.multiply.outer(u, v)


def softmax(x, axis: int = -1) -> np.ndarray:
    """Softmax along ``axis`` with max subtraction."""
    x = as_float(x)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of softmax given its output ``p``."""
    return p * (g - (p * g).sum(axis=-1, keepdims=True))


def sigmoid(x):
    # two-branch form keeps exp() from overflowing for large |x|
    x = as_float(x)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else out[()]


def layer_norm(x, gain, bias, eps: float = 1e-5) -> np.ndarray:
    """Normalise over the last axis (population variance), then scale and shift."""
    x, gain, bias = as_float(x), as_float(gain), as_float(bias)
    if gain.shape[-1:] != x.shape[-1:] or bias.shape[-1:] != x.shape[-1:]:
        raise ShapeError(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    return layer_norm_forward(x, gain, bias, eps)[0]


def layer_norm_forward(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def layer_norm_backward(dy, gain, cache):
    """Returns (dx, dgain, dbias); gain/bias grads are summed over leading axes."""
    xhat, inv = cache
    n = xhat.shape[-1]
    dxhat = dy * gain
    dx = inv / n * (
        n * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    lead = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=lead), dy.sum(axis=lead)


@dataclass
class Rng:
    """Philox generator addressed by ``(seed, stream)``.

    Two instances built from the same pair produce the same draws on every
    platform numpy supports.
    """

    seed: int
    stream: int = 0
    gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream & 0xFFFFFFFFFFFFFFFF])
        self.gen = np.random.Generator(np.random.Philox(ss))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self.gen.standard_normal(shape) * std

    def get_state(self) -> dict[str, Any]:
        return {"seed": self.seed, "stream": self.stream, "bit_generator": _jsonable(self.gen.bit_generator.state)}

    def set_state(self, state: dict[str, Any]) -> None:
        bg = state["bit_generator"]
        self.gen.bit_generator.state = {
            "bit_generator": bg["bit_generator"],
            "state": {k: np.asarray(v, dtype=np.uint64) for k, v in bg["state"].items()},
            "buffer": np.asarray(bg["buffer"], dtype=np.uint64),
            "buffer_pos": bg["buffer_pos"],
            "has_uint32": bg["has_uint32"],
            "uinteger": bg["uinteger"],
        }

    @classmethod
    def from_state(cls, state: dict[str, Any]) -> "Rng":
        r = cls(state["seed"], state["stream"])
        r.set_state(state)
        return r


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [int(v) for v in obj.tolist()]
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def rng_normal(rng: Rng, n: int, std: float = 1.0) -> np.ndarray:
    if std < 0:
        raise ValueError("rng_normal: std must be non-negative")
    return rng.normal(n, std)
