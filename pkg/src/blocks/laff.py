"""LAFF block: per-feature tanh projection, softmax attention, convex combination."""

from __future__ import annotations

from collections.abc import Sequence
from typing import TYPE_CHECKING, Any

import numpy as np

from ..diffmath import Parameter, softmax_backward, softmax_rows
from .base import BlockInput, BlockOutput, FusionBlock, convex_combine

if TYPE_CHECKING:
    from ..diffmath import Matrix


class LaffBlock(FusionBlock):
    """Lightweight attentional feature fusion.

    For input features ``f_1..f_k``::

        e_i = tanh(dropout(f_i W_i + b_i))
        z_i = w . e_i
        a   = softmax(z)
        out = sum_i a_i e_i

    The attention vector ``w`` has no bias (softmax is shift invariant) and
    starts at zero, so an untrained block averages its inputs.
    """

    attentional = True

    def __init__(self, inputs: Sequence[BlockInput], out_dim: int, **kwargs: Any) -> None:
        super().__init__(inputs, out_dim, **kwargs)
        self._init_projections(kwargs["rng"])
        self.attention = Parameter(f"{self.prefix}.attention", np.zeros(out_dim))

    @property
    def name(self) -> str:
        return "laff"

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for weight, bias in zip(self.proj_weights, self.proj_biases, strict=True):
            params.extend((weight, bias))
        params.append(self.attention)
        return params

    @classmethod
    def count_params(cls, inputs: Sequence[BlockInput], out_dim: int, heads: int = 1) -> int:
        return sum(f.dim * out_dim + out_dim for f in inputs) + out_dim

    def forward(
        self,
        inputs: Sequence[Matrix],
        *,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> BlockOutput:
        self._check_inputs(inputs)
        stack, caches = self._project(inputs, train, rng)
        weights = softmax_rows(stack @ self.attention.value)
        out = convex_combine(weights, stack)
        return BlockOutput(out, weights, (stack, caches, weights))

    def backward(self, cache: Any, upstream: Matrix) -> list[Matrix]:
        stack, caches, weights = cache
        grad_weights = np.einsum("nkd,nd->nk", stack, upstream)
        grad_logits = softmax_backward(grad_weights, weights)
        self.attention.grad += np.einsum("nk,nkd->d", grad_logits, stack)
        grad_stack = weights[:, :, None] * upstream[:, None, :]
        grad_stack += grad_logits[:, :, None] * self.attention.value[None, None, :]
        return self._project_backward(grad_stack, caches)
