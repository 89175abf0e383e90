"""Concatenation baseline: raw features joined, one affine map, tanh."""

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
    tanh_backward,
    tanh_op,
)
from .base import BlockInput, BlockOutput, FusionBlock, uniform_init

if TYPE_CHECKING:
    from ..diffmath import Matrix


class ConcatBlock(FusionBlock):
    def __init__(self, inputs: Sequence[BlockInput], out_dim: int, **kwargs: Any) -> None:
        super().__init__(inputs, out_dim, **kwargs)
        total = sum(f.dim for f in self.inputs)
        rng = kwargs["rng"]
        self.weight = Parameter(f"{self.prefix}.weight", uniform_init(rng, total, (total, out_dim)))
        self.bias = Parameter(f"{self.prefix}.bias", uniform_init(rng, total, (out_dim,)))

    @property
    def name(self) -> str:
        return "concat"

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    @classmethod
    def count_params(cls, inputs: Sequence[BlockInput], out_dim: int, heads: int = 1) -> int:
        return sum(f.dim for f in inputs) * out_dim + out_dim

    def forward(
        self,
        inputs: Sequence[Matrix],
        *,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> BlockOutput:
        self._check_inputs(inputs)
        joined = np.concatenate(list(inputs), axis=1)
        proj = affine_forward(joined, self.weight.value, self.bias.value)
        proj, mask = dropout_op(proj, self.dropout_rate, train, rng)
        out = tanh_op(proj)
        return BlockOutput(out, None, (joined, mask, out))

    def backward(self, cache: Any, upstream: Matrix) -> list[Matrix]:
        joined, mask, out = cache
        grad = dropout_backward(tanh_backward(upstream, out), mask)
        grad_joined, grad_w, grad_b = affine_backward(grad, joined, self.weight.value)
        self.weight.grad += grad_w
        self.bias.grad += grad_b
        splits = np.cumsum([f.dim for f in self.inputs])[:-1]
        return np.split(grad_joined, splits, axis=1)
