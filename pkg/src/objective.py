"""Triplet ranking loss with in-batch hardest-negative mining.

For each query ``q`` with positive video ``x+`` the hardest negative is the
in-batch video maximizing ``s(x-, q) - s(x+, q)``; the query loss is
``max(0, margin + s(x*-, q) - s(x+, q))`` and the batch loss is the mean over
queries.  Only the text-to-video direction is used.
"""

from __future__ import annotations

from collections.abc import Sequence
from typing import TYPE_CHECKING, NamedTuple

import numpy as np

from .diffmath import check_finite
from .errors import ConfigError, DegenerateInputError, DimensionError
from .model import backward_side, encode_pairwise, similarity

if TYPE_CHECKING:
    from .blocks import FrameBatch
    from .diffmath import Matrix
    from .model import FusionModel

COMBINED = "combined"
SINGLE = "single"
LOSS_MODES = (COMBINED, SINGLE)


class LossReport(NamedTuple):
    space_losses: tuple[float, ...]
    combined: float
    # (h, n_queries) hardest-negative column per mined space (h = 1 in single mode).
    hardest: np.ndarray
    # (h, n_queries, n_videos) gradient of ``combined`` w.r.t. each space's similarities.
    grads: Matrix


def triplet_hard_loss(
    sims: Matrix, positive_index: np.ndarray, margin: float
) -> tuple[float, Matrix, np.ndarray]:
    """Return (loss, grad w.r.t. ``sims``, hardest-negative columns).

    ``sims`` is ``(n_queries, n_videos)``; every column other than a query's
    positive is one of its negatives.  Ties go to the lowest column.
    """
    if margin <= 0:
        raise ConfigError(f"margin must be positive, got {margin}")
    n_q, n_v = sims.shape
    if n_v < 2:
        raise DegenerateInputError("triplet loss: a batch needs at least two videos")
    if positive_index.shape != (n_q,):
        raise DimensionError("positive_index", positive_index.shape, (n_q,))
    rows = np.arange(n_q)
    positives = sims[rows, positive_index]
    negatives = sims.copy()
    negatives[rows, positive_index] = -np.inf
    hardest = np.argmax(negatives, axis=1)
    violation = margin + negatives[rows, hardest] - positives
    loss = float(np.maximum(0.0, violation).mean())
    grad = np.zeros_like(sims)
    active = rows[violation > 0]
    grad[active, hardest[active]] += 1.0 / n_q
    grad[active, positive_index[active]] -= 1.0 / n_q
    return loss, grad, hardest


def combined_loss(per_space: Matrix, positive_index: np.ndarray, margin: float) -> LossReport:
    """Sum of per-space triplet losses, each mined on its own similarities."""
    losses, grads, hardest = [], [], []
    for sims in per_space:
        loss, grad, hard = triplet_hard_loss(sims, positive_index, margin)
        losses.append(loss)
        grads.append(grad)
        hardest.append(hard)
    return LossReport(tuple(losses), float(sum(losses)), np.stack(hardest), np.stack(grads))


def single_loss(per_space: Matrix, positive_index: np.ndarray, margin: float) -> LossReport:
    """One triplet loss on the mean similarity across spaces."""
    h = per_space.shape[0]
    fused = per_space.mean(axis=0)
    loss, grad, hardest = triplet_hard_loss(fused, positive_index, margin)
    grads = np.repeat((grad / h)[None], h, axis=0)
    return LossReport((loss,), loss, hardest[None], grads)


def batch_loss(
    model: FusionModel,
    video_inputs: Sequence[Matrix | FrameBatch],
    text_inputs: Sequence[Matrix],
    positive_index: np.ndarray,
    margin: float,
    *,
    mode: str = COMBINED,
    train: bool = False,
    rng: np.random.Generator | None = None,
    backward: bool = True,
) -> LossReport:
    """Forward one batch, compute the loss and (optionally) backpropagate.

    Gradients accumulate into ``param.grad``; the caller zeroes them.
    """
    if mode not in LOSS_MODES:
        raise ConfigError(f"unknown loss mode {mode!r}; choose from {LOSS_MODES}")
    videos, texts = encode_pairwise(model, video_inputs, text_inputs, train=train, rng=rng)
    _fused, per_space = similarity(videos.embeddings, texts.embeddings)
    loss_fn = combined_loss if mode == COMBINED else single_loss
    report = loss_fn(per_space, positive_index, margin)
    check_finite("loss", np.asarray(report.combined))
    if backward:
        grad_videos = [g.T @ t for g, t in zip(report.grads, texts.embeddings, strict=True)]
        grad_texts = [g @ v for g, v in zip(report.grads, videos.embeddings, strict=True)]
        backward_side(model.video_blocks, videos, grad_videos)
        backward_side(model.text_blocks, texts, grad_texts)
    return report
