"""Frame-level LAFF: one shared projection, attention over the frames of a stream."""

from __future__ import annotations

from collections.abc import Sequence
from typing import TYPE_CHECKING, Any

import numpy as np

from ..diffmath import (
    Parameter,
    affine_backward,
    affine_forward,
    dropout_backward,
    dropout_op,
    softmax_backward,
    softmax_rows,
    tanh_backward,
    tanh_op,
)
from ..errors import ConfigError, DegenerateInputError, DimensionError
from .base import BlockInput, BlockOutput, FrameBatch, FusionBlock, uniform_init

if TYPE_CHECKING:
    from ..diffmath import Matrix


class FrameLaffBlock(FusionBlock):
    """Aggregates one frame-level stream into a video-level vector.

    Every frame goes through the same ``tanh(dropout(x W + b))``; a stream-own
    attention vector scores the frames, and padded frames (mask False) get
    zero weight.
    """

    attentional = True
    selectable = False

    def __init__(self, inputs: Sequence[BlockInput], out_dim: int, **kwargs: Any) -> None:
        super().__init__(inputs, out_dim, **kwargs)
        if len(self.inputs) != 1:
            raise ConfigError(f"{self.prefix}: frame-level LAFF takes exactly one stream")
        dim = self.inputs[0].dim
        rng = kwargs["rng"]
        self.weight = Parameter(f"{self.prefix}.weight", uniform_init(rng, dim, (dim, out_dim)))
        self.bias = Parameter(f"{self.prefix}.bias", uniform_init(rng, dim, (out_dim,)))
        self.attention = Parameter(f"{self.prefix}.attention", np.zeros(out_dim))

    @property
    def name(self) -> str:
        return "frame_laff"

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias, self.attention]

    @classmethod
    def count_params(cls, inputs: Sequence[BlockInput], out_dim: int, heads: int = 1) -> int:
        return sum(f.dim * out_dim + 2 * out_dim for f in inputs)

    def forward(
        self,
        inputs: Sequence[FrameBatch],
        *,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> BlockOutput:
        if len(inputs) != 1:
            raise DimensionError(f"{self.prefix} stream count", (len(inputs),), (1,))
        frames, mask = inputs[0]
        if frames.ndim != 3 or frames.shape[2] != self.inputs[0].dim:
            raise DimensionError(self.prefix, frames.shape, (-1, -1, self.inputs[0].dim))
        if not np.all(mask.any(axis=1)):
            raise DegenerateInputError(f"{self.prefix}: empty frame stream in batch")
        proj = affine_forward(frames, self.weight.value, self.bias.value)
        proj, drop = dropout_op(proj, self.dropout_rate, train, rng)
        stack = tanh_op(proj)
        logits = np.where(mask, stack @ self.attention.value, -np.inf)
        weights = softmax_rows(logits)
        out = np.einsum("nt,ntd->nd", weights, stack)
        return BlockOutput(out, weights, (frames, drop, stack, weights))

    def backward(self, cache: Any, upstream: Matrix) -> list[Matrix]:
        frames, drop, stack, weights = cache
        grad_weights = np.einsum("ntd,nd->nt", stack, upstream)
        grad_logits = softmax_backward(grad_weights, weights)
        self.attention.grad += np.einsum("nt,ntd->d", grad_logits, stack)
        grad_stack = weights[:, :, None] * upstream[:, None, :]
        grad_stack += grad_logits[:, :, None] * self.attention.value[None, None, :]
        grad = dropout_backward(tanh_backward(grad_stack, stack), drop)
        grad_frames, grad_w, grad_b = affine_backward(grad, frames, self.weight.value)
        self.weight.grad += grad_w
        self.bias.grad += grad_b
        return [grad_frames]
