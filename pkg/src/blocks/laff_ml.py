"""LAFF-ml: frame-level LAFF per frame stream, then a video-level LAFF on top.

Frame-level inputs arrive as :class:`FrameBatch`; each gets its own
:class:`FrameLaffBlock` producing a ``d``-dimensional stream vector.  The
video-level LAFF then treats stream vectors and raw video-level features
alike, projecting every one of them to ``d``.
"""

from __future__ import annotations

from collections.abc import Sequence
from typing import TYPE_CHECKING, Any

import numpy as np

from ..errors import DimensionError
from .base import FRAME_LEVEL, BlockInput, BlockOutput, FrameBatch, FusionBlock
from .frame_laff import FrameLaffBlock
from .laff import LaffBlock

if TYPE_CHECKING:
    from ..diffmath import Matrix, Parameter


def _video_level_inputs(inputs: Sequence[BlockInput], out_dim: int) -> list[BlockInput]:
    return [
        BlockInput(f.name, out_dim) if f.level == FRAME_LEVEL else BlockInput(f.name, f.dim)
        for f in inputs
    ]


class LaffMlBlock(FusionBlock):
    attentional = True

    def __init__(self, inputs: Sequence[BlockInput], out_dim: int, **kwargs: Any) -> None:
        super().__init__(inputs, out_dim, **kwargs)
        self.frame_blocks: dict[int, FrameLaffBlock] = {}
        for i, feat in enumerate(self.inputs):
            if feat.level == FRAME_LEVEL:
                self.frame_blocks[i] = FrameLaffBlock(
                    [feat], out_dim, **{**kwargs, "prefix": f"{self.prefix}.frames.{feat.name}"}
                )
        self.video_block = LaffBlock(
            _video_level_inputs(self.inputs, out_dim), out_dim, **kwargs
        )

    @property
    def name(self) -> str:
        return "laff_ml"

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for block in self.frame_blocks.values():
            params.extend(block.parameters())
        params.extend(self.video_block.parameters())
        return params

    @classmethod
    def count_params(cls, inputs: Sequence[BlockInput], out_dim: int, heads: int = 1) -> int:
        frames = [f for f in inputs if f.level == FRAME_LEVEL]
        return FrameLaffBlock.count_params(frames, out_dim) + LaffBlock.count_params(
            _video_level_inputs(inputs, out_dim), out_dim
        )

    def forward(
        self,
        inputs: Sequence[Matrix | FrameBatch],
        *,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> BlockOutput:
        if len(inputs) != len(self.inputs):
            raise DimensionError(
                f"{self.prefix} feature count", (len(inputs),), (len(self.inputs),)
            )
        level_inputs: list[Matrix] = []
        frame_outputs: dict[int, BlockOutput] = {}
        for i, x in enumerate(inputs):
            if i in self.frame_blocks:
                if not isinstance(x, FrameBatch):
                    raise DimensionError(f"{self.prefix}/{self.inputs[i].name}", x.shape, (-1, -1))
                frame_outputs[i] = self.frame_blocks[i].forward([x], train=train, rng=rng)
                level_inputs.append(frame_outputs[i].embedding)
            else:
                level_inputs.append(x)  # type: ignore[arg-type]
        top = self.video_block.forward(level_inputs, train=train, rng=rng)
        return BlockOutput(top.embedding, top.weights, (top.cache, frame_outputs))

    def backward(self, cache: Any, upstream: Matrix) -> list[Matrix]:
        top_cache, frame_outputs = cache
        grads = self.video_block.backward(top_cache, upstream)
        for i, out in frame_outputs.items():
            grads[i] = self.frame_blocks[i].backward(out.cache, grads[i])[0]
        return grads

    def frame_weights(self, cache: Any) -> dict[str, Matrix]:
        """Per-stream ``(n, T)`` frame attention from a forward cache."""
        _top, frame_outputs = cache
        return {self.inputs[i].name: out.weights for i, out in frame_outputs.items()}
