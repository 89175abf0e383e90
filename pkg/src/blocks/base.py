"""Abstract base class for fusion blocks."""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from collections.abc import Sequence
from typing import TYPE_CHECKING, Any, NamedTuple

import numpy as np

from ..diffmath import (
    Parameter,
    affine_backward,
    affine_forward,
    dropout_backward,
    dropout_op,
    tanh_backward,
    tanh_op,
)
from ..errors import ConfigError, DimensionError

if TYPE_CHECKING:
    from ..diffmath import Matrix

VIDEO_LEVEL = "video"
FRAME_LEVEL = "frame"


class BlockInput(NamedTuple):
    """One declared input feature of a block."""

    name: str
    dim: int
    level: str = VIDEO_LEVEL


class FrameBatch(NamedTuple):
    """Zero-padded frame sequences: frames ``(n, T, dim)``, mask ``(n, T)``."""

    frames: Matrix
    mask: np.ndarray


class BlockOutput(NamedTuple):
    embedding: Matrix
    # (n, k) convex weights for attentional blocks, None otherwise.
    weights: Matrix | None
    cache: Any


def uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> Matrix:
    """Uniform in ±1/sqrt(fan_in)."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def convex_combine(weights: Matrix, stack: Matrix) -> Matrix:
    """``sum_i weights[..., i] * stack[..., i, :]``."""
    return np.einsum("nk,nkd->nd", weights, stack)


class FusionBlock(ABC):
    """Base class for all fusion blocks.

    A block maps ``k`` input features (each an ``(n, dim_i)`` matrix) to one
    ``(n, out_dim)`` embedding.  Subclasses create their parameters in
    ``__init__`` and list them, in declaration order, from ``parameters()``;
    that order is also the serialization order.

    ``backward`` accumulates into each ``Parameter.grad`` and returns the
    gradients with respect to the inputs.

    Class attributes:
        attentional  True when ``forward`` reports convex weights per input.
        selectable   False for helper blocks that a config cannot name.
    """

    attentional: bool = False
    selectable: bool = True

    def __init__(
        self,
        inputs: Sequence[BlockInput],
        out_dim: int,
        *,
        prefix: str,
        rng: np.random.Generator,
        dropout_rate: float = 0.0,
        heads: int = 1,
    ) -> None:
        if not inputs:
            raise ConfigError(f"{prefix}: a fusion block needs at least one input feature")
        if out_dim < 1:
            raise ConfigError(f"{prefix}: output dimension must be >= 1, got {out_dim}")
        if not 0.0 <= dropout_rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {dropout_rate}")
        self.inputs = list(inputs)
        self.out_dim = out_dim
        self.prefix = prefix
        self.dropout_rate = dropout_rate
        self.heads = heads
        self.proj_weights: list[Parameter] = []
        self.proj_biases: list[Parameter] = []

    @property
    @abstractmethod
    def name(self) -> str:
        """Return the block name used in configs."""

    @abstractmethod
    def parameters(self) -> list[Parameter]:
        """All trainable parameters in declaration order."""

    @abstractmethod
    def forward(
        self,
        inputs: Sequence[Matrix | FrameBatch],
        *,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> BlockOutput:
        """Fuse one batch of inputs."""

    @abstractmethod
    def backward(self, cache: Any, upstream: Matrix) -> list[Matrix]:
        """Backpropagate ``upstream`` (n, out_dim); return grads w.r.t. inputs."""

    @classmethod
    @abstractmethod
    def count_params(cls, inputs: Sequence[BlockInput], out_dim: int, heads: int = 1) -> int:
        """Closed-form trainable-parameter count."""

    # ── shared per-feature projection ──────────────────────────────

    def _init_projections(self, rng: np.random.Generator) -> None:
        for feat in self.inputs:
            self.proj_weights.append(
                Parameter(
                    f"{self.prefix}.proj.{feat.name}.weight",
                    uniform_init(rng, feat.dim, (feat.dim, self.out_dim)),
                )
            )
            self.proj_biases.append(
                Parameter(
                    f"{self.prefix}.proj.{feat.name}.bias",
                    uniform_init(rng, feat.dim, (self.out_dim,)),
                )
            )

    def _check_inputs(self, inputs: Sequence[Any]) -> int:
        """Validate feature count and dims; return the batch size."""
        if len(inputs) != len(self.inputs):
            raise DimensionError(
                f"{self.prefix} feature count", (len(inputs),), (len(self.inputs),)
            )
        n = None
        for feat, x in zip(self.inputs, inputs, strict=True):
            if x.ndim != 2 or x.shape[1] != feat.dim:
                raise DimensionError(f"{self.prefix}/{feat.name}", x.shape, (-1, feat.dim))
            if n is None:
                n = x.shape[0]
            elif x.shape[0] != n:
                raise DimensionError(f"{self.prefix} batch", (x.shape[0],), (n,))
        return int(n or 0)

    def _project(
        self,
        inputs: Sequence[Matrix],
        train: bool,
        rng: np.random.Generator | None,
        *,
        squash: bool = True,
    ) -> tuple[Matrix, list[tuple[Matrix, Matrix | None, Matrix]]]:
        """Project every input to ``out_dim``: ``tanh(dropout(x W + b))``.

        Returns the ``(n, k, out_dim)`` stack and per-feature caches.
        """
        outs = []
        caches = []
        for x, weight, bias in zip(inputs, self.proj_weights, self.proj_biases, strict=True):
            proj = affine_forward(x, weight.value, bias.value)
            proj, mask = dropout_op(proj, self.dropout_rate, train, rng)
            out = tanh_op(proj) if squash else proj
            outs.append(out)
            caches.append((x, mask, out))
        return np.stack(outs, axis=1), caches

    def _project_backward(
        self,
        grad_stack: Matrix,
        caches: list[tuple[Matrix, Matrix | None, Matrix]],
        *,
        squash: bool = True,
    ) -> list[Matrix]:
        grads_in = []
        for i, (x, mask, out) in enumerate(caches):
            grad = grad_stack[:, i, :]
            if squash:
                grad = tanh_backward(grad, out)
            grad = dropout_backward(grad, mask)
            grad_x, grad_w, grad_b = affine_backward(grad, x, self.proj_weights[i].value)
            self.proj_weights[i].grad += grad_w
            self.proj_biases[i].grad += grad_b
            grads_in.append(grad_x)
        return grads_in

    def __repr__(self) -> str:
        dims = ", ".join(f"{f.name}:{f.dim}" for f in self.inputs)
        return f"{type(self).__name__}({self.prefix}, [{dims}] -> {self.out_dim})"
