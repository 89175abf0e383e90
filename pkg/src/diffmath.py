"""Dense float64 kernels with hand-derived forward/backward pairs.

Every kernel is a pure function over numpy arrays.  Forward functions return
whatever the matching backward needs (usually the output itself); backward
functions take the upstream gradient first.  Kernels accept any number of
leading batch axes and operate on the last one, which lets the fusion blocks
push ``(n, k, d)`` stacks through the same code as plain ``(n, d)`` matrices.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from typing import TYPE_CHECKING

import numpy as np

from .errors import ConfigError, DegenerateInputError, DimensionError, NumericError

if TYPE_CHECKING:
    import numpy.typing as npt

    Matrix = npt.NDArray[np.float64]

_log = logging.getLogger("laff.diffmath")
_log.addHandler(logging.NullHandler())

DTYPE = np.float64
NORM_FLOOR = 1e-12


class Parameter:
    """A named trainable array with a same-shaped gradient buffer."""

    __slots__ = ("grad", "name", "value")

    def __init__(self, name: str, value: Matrix) -> None:
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_matrix(data: npt.ArrayLike) -> Matrix:
    """Coerce to a float64 array (no copy when already float64)."""
    return np.asarray(data, dtype=DTYPE)


def check_finite(name: str, array: Matrix) -> None:
    """Raise NumericError naming the first non-finite coordinate."""
    if not np.all(np.isfinite(array)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(array))[0])
        raise NumericError(f"{name}: non-finite value at {bad}")


# ── affine ─────────────────────────────────────────────────────────


def affine_forward(inputs: Matrix, weight: Matrix, bias: Matrix | None = None) -> Matrix:
    """``inputs @ weight + bias`` over the last axis of ``inputs``."""
    if weight.ndim != 2 or inputs.shape[-1] != weight.shape[0]:
        raise DimensionError("affine", inputs.shape, weight.shape)
    out = inputs @ weight
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise DimensionError("affine bias", bias.shape, (weight.shape[1],))
        out = out + bias
    return out


def affine_backward(
    upstream: Matrix, inputs: Matrix, weight: Matrix
) -> tuple[Matrix, Matrix, Matrix]:
    """Return (grad_input, grad_weight, grad_bias) for :func:`affine_forward`."""
    expected = (*inputs.shape[:-1], weight.shape[1])
    if upstream.shape != expected:
        raise DimensionError("affine backward", upstream.shape, expected)
    flat_in = inputs.reshape(-1, inputs.shape[-1])
    flat_up = upstream.reshape(-1, upstream.shape[-1])
    grad_input = upstream @ weight.T
    grad_weight = flat_in.T @ flat_up
    grad_bias = flat_up.sum(axis=0)
    return grad_input, grad_weight, grad_bias


# ── elementwise / normalizers ──────────────────────────────────────


def tanh_op(inputs: Matrix) -> Matrix:
    return np.tanh(inputs)


def tanh_backward(upstream: Matrix, out: Matrix) -> Matrix:
    return upstream * (1.0 - out * out)


def softmax_rows(logits: Matrix, axis: int = -1) -> Matrix:
    """Softmax along ``axis`` with max subtraction.

    ``-inf`` entries (masked positions) get exactly zero weight, provided every
    row keeps at least one finite logit.
    """
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    exps = np.exp(shifted)
    return exps / np.sum(exps, axis=axis, keepdims=True)


def softmax_backward(upstream: Matrix, out: Matrix, axis: int = -1) -> Matrix:
    """Jacobian-vector product of softmax: ``out * (g - <g, out>)``."""
    return out * (upstream - np.sum(upstream * out, axis=axis, keepdims=True))


def l2_normalize_rows(inputs: Matrix) -> tuple[Matrix, Matrix]:
    """Scale every row to unit Euclidean norm; returns (out, norms)."""
    norms = np.sqrt(np.sum(inputs * inputs, axis=-1, keepdims=True))
    if np.any(norms < NORM_FLOOR):
        row = tuple(int(i) for i in np.argwhere(norms[..., 0] < NORM_FLOOR)[0])
        raise DegenerateInputError(f"l2_normalize: row {row} has norm below {NORM_FLOOR}")
    return inputs / norms, norms


def l2_normalize_backward(upstream: Matrix, out: Matrix, norms: Matrix) -> Matrix:
    return (upstream - out * np.sum(upstream * out, axis=-1, keepdims=True)) / norms


def cosine_matrix(left: Matrix, right: Matrix) -> Matrix:
    """Pairwise dot products of unit rows: ``left @ right.T``."""
    if left.ndim != 2 or right.ndim != 2 or left.shape[1] != right.shape[1]:
        raise DimensionError("cosine", left.shape, right.shape)
    return left @ right.T


# ── dropout ────────────────────────────────────────────────────────


def dropout_op(
    inputs: Matrix, rate: float, train: bool, rng: np.random.Generator | None
) -> tuple[Matrix, Matrix | None]:
    """Inverted dropout.  Returns (out, mask); mask is None when inactive."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return inputs, None
    if rng is None:
        raise ConfigError("dropout in train mode needs a random generator")
    mask = (rng.random(inputs.shape) >= rate) / (1.0 - rate)
    return inputs * mask, mask


def dropout_backward(upstream: Matrix, mask: Matrix | None) -> Matrix:
    return upstream if mask is None else upstream * mask


# ── verification ───────────────────────────────────────────────────


def grad_check(
    scalar_function: Callable[[], float],
    parameters: Sequence[Parameter],
    step: float = 1e-5,
) -> float:
    """Compare analytic gradients against central differences.

    ``scalar_function`` must zero the gradients, evaluate the loss, run the
    backward pass into ``parameter.grad`` and return the loss.  It has to be
    deterministic (dropout off).  Returns the maximum over all coordinates of
    ``|g_a - g_n| / max(1e-8, |g_a| + |g_n|)``.
    """
    scalar_function()
    analytic = [p.grad.copy() for p in parameters]
    worst = 0.0
    for param, grad in zip(parameters, analytic, strict=True):
        check_finite(f"{param.name}.grad", grad)
        flat = param.value.reshape(-1)
        flat_grad = grad.reshape(-1)
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + step
            plus = scalar_function()
            flat[idx] = original - step
            minus = scalar_function()
            flat[idx] = original
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NumericError(f"grad_check: non-finite loss perturbing {param.name}[{idx}]")
            numeric = (plus - minus) / (2.0 * step)
            g_a = float(flat_grad[idx])
            rel = abs(g_a - numeric) / max(1e-8, abs(g_a) + abs(numeric))
            if rel > worst:
                _log.debug(
                    "grad_check %s[%d]: analytic=%g numeric=%g", param.name, idx, g_a, numeric
                )
                worst = rel
    scalar_function()
    return worst
