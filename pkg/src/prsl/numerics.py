"""Dense float64 arithmetic with paired forward/backward operations.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C order.
Every exported operation validates shapes at call time and refuses to
return non-finite values.  Operations that act on "vectors" also accept
a leading batch axis and work along the last axis, which is what the
models use internally.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterator, Mapping

import numpy as np

from .errors import InvalidDimensionError, NumericError

__all__ = [
    "ParamStore",
    "affine",
    "affine_backward",
    "as_tensor",
    "grad_check",
    "log_softmax",
    "relu",
    "relu_backward",
    "softmax",
    "softmax_backward",
]


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


def _ensure_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} produced non-finite values")
    return arr


def _logits(logits) -> np.ndarray:
    z = np.ascontiguousarray(logits, dtype=np.float64)
    if z.ndim == 0 or z.shape[-1] < 2:
        raise InvalidDimensionError(
            f"logits need at least 2 classes along the last axis, got shape {z.shape}"
        )
    if not np.all(np.isfinite(z)):
        raise NumericError("logits contain non-finite values")
    return z


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax along the last axis (max-subtraction)."""
    z = _logits(logits)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    """``z - max - log(sum(exp(z - max)))`` along the last axis."""
    z = _logits(logits)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_backward(upstream, probs) -> np.ndarray:
    """Vector-Jacobian product of softmax: ``p * (g - <g, p>)``."""
    g = np.asarray(upstream, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    if g.shape != p.shape:
        raise InvalidDimensionError(f"upstream {g.shape} vs probs {p.shape}")
    return p * (g - (g * p).sum(axis=-1, keepdims=True))


def affine(x, weight, bias) -> np.ndarray:
    """``W @ x + b`` for a vector ``x`` or ``x @ W.T + b`` for a batch of rows.

    ``weight`` has shape ``(out, in)`` and ``bias`` shape ``(out,)``.
    """
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(weight, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    if W.ndim != 2 or b.shape != (W.shape[0],):
        raise InvalidDimensionError(f"weight {W.shape} and bias {b.shape} disagree")
    if x.ndim == 0 or x.shape[-1] != W.shape[1]:
        raise InvalidDimensionError(f"input {x.shape} does not match weight {W.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = x @ W.T + b
    return _ensure_finite(out, "affine")


def affine_backward(upstream, x, weight):
    """Gradients of ``affine`` with respect to (input, weight, bias).

    Leading batch axes of ``upstream``/``x`` are summed out for the
    weight and bias gradients.
    """
    g = np.asarray(upstream, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(weight, dtype=np.float64)
    if g.shape[:-1] != x.shape[:-1] or g.shape[-1] != W.shape[0] or x.shape[-1] != W.shape[1]:
        raise InvalidDimensionError(
            f"upstream {g.shape}, input {x.shape}, weight {W.shape} are inconsistent"
        )
    g2 = g.reshape(-1, W.shape[0])
    x2 = x.reshape(-1, W.shape[1])
    return g @ W, g2.T @ x2, g2.sum(axis=0)


def relu(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0)


def relu_backward(upstream, x) -> np.ndarray:
    """Pass ``upstream`` where ``x > 0``; the subgradient at 0 is 0."""
    g = np.asarray(upstream, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if g.shape != x.shape:
        raise InvalidDimensionError(f"upstream {g.shape} vs input {x.shape}")
    return np.where(x > 0.0, g, 0.0)


def grad_check(
    scalar_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    point,
    step: float = 1e-6,
) -> float:
    """Maximum relative error between an analytic gradient and central differences.

    ``scalar_fn(x)`` must return ``(value, gradient)``; only the value is
    used for the finite differences, and it may be any real type supporting
    subtraction (e.g. an ``mpmath.mpf`` for a high-precision oracle).  The
    relative error per coordinate is ``|a - n| / max(1e-12, |a| + |n|)``.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    x0 = as_tensor(point, "point")
    value, analytic = scalar_fn(x0.copy())
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x0.shape:
        raise InvalidDimensionError(f"gradient {analytic.shape} vs point {x0.shape}")
    if not (math.isfinite(float(value)) and np.all(np.isfinite(analytic))):
        raise NumericError("scalar_fn returned non-finite output at the base point")

    flat = x0.ravel()
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        fp = scalar_fn(xp.reshape(x0.shape))[0]
        fm = scalar_fn(xm.reshape(x0.shape))[0]
        if not (math.isfinite(float(fp)) and math.isfinite(float(fm))):
            raise NumericError(f"non-finite evaluation at coordinate {i}")
        numeric[i] = float(fp - fm) / (2.0 * step)

    a = analytic.ravel()
    err = np.abs(a - numeric) / np.maximum(1e-12, np.abs(a) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0


class ParamStore(Mapping):
    """Named float64 parameters with a fixed insertion order.

    Names are unique and a parameter's shape can never change once it is
    created; values may be replaced by arrays of the same shape.
    """

    def __init__(self, items=None):
        self._data: dict[str, np.ndarray] = {}
        if items is not None:
            pairs = items.items() if isinstance(items, Mapping) else items
            for name, value in pairs:
                self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self._data:
            raise KeyError(f"parameter {name!r} already exists")
        self._data[name] = as_tensor(value, name).copy()

    def __setitem__(self, name: str, value) -> None:
        if name not in self._data:
            raise KeyError(f"unknown parameter {name!r}; use add()")
        arr = as_tensor(value, name)
        if arr.shape != self._data[name].shape:
            raise InvalidDimensionError(
                f"parameter {name!r} has shape {self._data[name].shape}, got {arr.shape}"
            )
        self._data[name] = arr.copy()

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def copy(self) -> "ParamStore":
        return ParamStore((k, v.copy()) for k, v in self._data.items())

    def zeros_like(self) -> "ParamStore":
        return ParamStore((k, np.zeros_like(v)) for k, v in self._data.items())

    def flatten(self) -> np.ndarray:
        if not self._data:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._data.values()])

    def unflatten(self, flat) -> "ParamStore":
        """A new store with this store's layout filled from ``flat``."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != sum(v.size for v in self._data.values()):
            raise InvalidDimensionError("flat vector length does not match the store")
        out, offset = ParamStore(), 0
        for k, v in self._data.items():
            out.add(k, flat[offset:offset + v.size].reshape(v.shape))
            offset += v.size
        return out

    def equals(self, other: "ParamStore") -> bool:
        """Bitwise equality of names, order, shapes and values."""
        if list(self) != list(other):
            return False
        return all(
            self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes()
            for k in self
        )

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._data.items())
        return f"ParamStore({shapes})"
