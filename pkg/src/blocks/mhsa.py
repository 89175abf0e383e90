"""Multi-head self-attention over feature tokens, mean-pooled to one embedding."""

from __future__ import annotations

import math
from collections.abc import Sequence
from typing import TYPE_CHECKING, Any

import numpy as np

from ..diffmath import (
    Parameter,
    affine_backward,
    affine_forward,
    softmax_backward,
    softmax_rows,
)
from ..errors import ConfigError
from .base import BlockInput, BlockOutput, FusionBlock, uniform_init

if TYPE_CHECKING:
    from ..diffmath import Matrix


class MhsaBlock(FusionBlock):
    """One standard self-attention layer over ``k`` feature tokens.

    Each feature is projected to ``d`` (affine, with dropout) to form a token.
    Per head ``Softmax(Q K^T / sqrt(d_head)) V``; heads are concatenated,
    output-projected and averaged over the tokens.
    """

    def __init__(self, inputs: Sequence[BlockInput], out_dim: int, **kwargs: Any) -> None:
        super().__init__(inputs, out_dim, **kwargs)
        if self.heads < 1 or out_dim % self.heads:
            raise ConfigError(f"mhsa: {self.heads} heads do not divide dimension {out_dim}")
        rng = kwargs["rng"]
        self._init_projections(rng)
        self.qkvo: dict[str, tuple[Parameter, Parameter]] = {}
        for part in ("query", "key", "value", "output"):
            self.qkvo[part] = (
                Parameter(
                    f"{self.prefix}.{part}.weight", uniform_init(rng, out_dim, (out_dim, out_dim))
                ),
                Parameter(f"{self.prefix}.{part}.bias", uniform_init(rng, out_dim, (out_dim,))),
            )

    @property
    def name(self) -> str:
        return "mhsa"

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for weight, bias in zip(self.proj_weights, self.proj_biases, strict=True):
            params.extend((weight, bias))
        for weight, bias in self.qkvo.values():
            params.extend((weight, bias))
        return params

    @classmethod
    def count_params(cls, inputs: Sequence[BlockInput], out_dim: int, heads: int = 1) -> int:
        projections = sum(f.dim * out_dim + out_dim for f in inputs)
        return projections + 4 * (out_dim * out_dim + out_dim)

    def _split(self, x: Matrix) -> Matrix:
        n, k, d = x.shape
        return x.reshape(n, k, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    @staticmethod
    def _merge(x: Matrix) -> Matrix:
        n, h, k, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(n, k, h * dh)

    def forward(
        self,
        inputs: Sequence[Matrix],
        *,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> BlockOutput:
        self._check_inputs(inputs)
        tokens, caches = self._project(inputs, train, rng, squash=False)
        scale = 1.0 / math.sqrt(self.out_dim // self.heads)
        q, k, v = (
            self._split(affine_forward(tokens, w.value, b.value))
            for w, b in (self.qkvo["query"], self.qkvo["key"], self.qkvo["value"])
        )
        attn = softmax_rows(q @ k.transpose(0, 1, 3, 2) * scale)
        mixed = self._merge(attn @ v)
        w_out, b_out = self.qkvo["output"]
        out = affine_forward(mixed, w_out.value, b_out.value).mean(axis=1)
        return BlockOutput(out, None, (caches, tokens, q, k, v, attn, mixed, scale))

    def backward(self, cache: Any, upstream: Matrix) -> list[Matrix]:
        caches, tokens, q, k, v, attn, mixed, scale = cache
        n_tokens = tokens.shape[1]
        grad_y = np.repeat(upstream[:, None, :] / n_tokens, n_tokens, axis=1)
        w_out, b_out = self.qkvo["output"]
        grad_mixed, grad_w, grad_b = affine_backward(grad_y, mixed, w_out.value)
        w_out.grad += grad_w
        b_out.grad += grad_b

        grad_heads = self._split(grad_mixed)
        grad_attn = grad_heads @ v.transpose(0, 1, 3, 2)
        grad_v = attn.transpose(0, 1, 3, 2) @ grad_heads
        grad_scores = softmax_backward(grad_attn, attn) * scale
        grad_q = grad_scores @ k
        grad_k = grad_scores.transpose(0, 1, 3, 2) @ q

        grad_tokens = np.zeros_like(tokens)
        for part, grad in (("query", grad_q), ("key", grad_k), ("value", grad_v)):
            weight, bias = self.qkvo[part]
            grad_in, grad_w, grad_b = affine_backward(self._merge(grad), tokens, weight.value)
            weight.grad += grad_w
            bias.grad += grad_b
            grad_tokens += grad_in
        return self._project_backward(grad_tokens, caches, squash=False)
