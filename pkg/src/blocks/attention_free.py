"""Attention-free block: the LAFF projections with a uniform 1/k average."""

from __future__ import annotations

from collections.abc import Sequence
from typing import TYPE_CHECKING, Any

import numpy as np

from .base import BlockInput, BlockOutput, FusionBlock, convex_combine

if TYPE_CHECKING:
    from ..diffmath import Matrix, Parameter


class AttentionFreeBlock(FusionBlock):
    def __init__(self, inputs: Sequence[BlockInput], out_dim: int, **kwargs: Any) -> None:
        super().__init__(inputs, out_dim, **kwargs)
        self._init_projections(kwargs["rng"])

    @property
    def name(self) -> str:
        return "attention_free"

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for weight, bias in zip(self.proj_weights, self.proj_biases, strict=True):
            params.extend((weight, bias))
        return params

    @classmethod
    def count_params(cls, inputs: Sequence[BlockInput], out_dim: int, heads: int = 1) -> int:
        return sum(f.dim * out_dim + out_dim for f in inputs)

    def forward(
        self,
        inputs: Sequence[Matrix],
        *,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> BlockOutput:
        n = self._check_inputs(inputs)
        stack, caches = self._project(inputs, train, rng)
        k = len(self.inputs)
        # Same combine path as LaffBlock so a zero attention vector matches bit-for-bit.
        weights = np.full((n, k), 1.0 / k)
        out = convex_combine(weights, stack)
        return BlockOutput(out, None, (caches, k))

    def backward(self, cache: Any, upstream: Matrix) -> list[Matrix]:
        caches, k = cache
        grad_stack = np.repeat(upstream[:, None, :] / k, k, axis=1)
        return self._project_backward(grad_stack, caches)
