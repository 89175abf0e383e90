"""RMSProp, the learning-rate schedule and the epoch loop."""

from __future__ import annotations

import json
import logging
import time
from collections.abc import Sequence
from typing import TYPE_CHECKING, Any, NamedTuple

import numpy as np

from .dataio import assemble_batch, make_batches, text_inputs, video_inputs
from .errors import ConfigError, DegenerateInputError, NumericError
from .evalkit import evaluate
from .model import encode_pairwise
from .objective import LOSS_MODES, batch_loss

if TYPE_CHECKING:
    from .dataio import DatasetManifest, FeatureStore
    from .diffmath import Matrix, Parameter
    from .model import FusionModel

_log = logging.getLogger("laff.optim")
_log.addHandler(logging.NullHandler())

VALIDATION_METRICS = ("map", "sum_recall", "r1", "r5", "r10")


class TrainConfig(NamedTuple):
    margin: float = 0.2
    batch_size: int = 128
    base_lr: float = 1e-4
    per_epoch_decay: float = 0.99
    plateau_patience: int = 3
    plateau_factor: float = 0.5
    early_stop_patience: int = 10
    rmsprop_rho: float = 0.99
    rmsprop_eps: float = 1e-8
    max_epochs: int = 30
    seed: int = 0
    validation_metric: str = "map"
    loss: str = "combined"

    def to_dict(self) -> dict[str, Any]:
        return self._asdict()

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TrainConfig:
        return cls(**{k: v for k, v in data.items() if k in cls._fields})


def validate_train_config(config: TrainConfig) -> None:
    if config.margin <= 0:
        raise ConfigError(f"margin must be positive, got {config.margin}")
    if config.batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2, got {config.batch_size}")
    for key in ("base_lr", "per_epoch_decay", "plateau_factor", "rmsprop_rho"):
        value = getattr(config, key)
        if not 0 < value <= 1:
            raise ConfigError(f"{key} must be in (0, 1], got {value}")
    if config.rmsprop_eps <= 0:
        raise ConfigError(f"rmsprop_eps must be positive, got {config.rmsprop_eps}")
    if config.plateau_patience < 1 or config.early_stop_patience < 1:
        raise ConfigError("patiences must be >= 1")
    if config.max_epochs < 0:
        raise ConfigError(f"max_epochs must be >= 0, got {config.max_epochs}")
    if config.validation_metric not in VALIDATION_METRICS:
        raise ConfigError(
            f"unknown validation metric {config.validation_metric!r}; "
            f"choose from {VALIDATION_METRICS}"
        )
    if config.loss not in LOSS_MODES:
        raise ConfigError(f"unknown loss mode {config.loss!r}; choose from {LOSS_MODES}")


# ── RMSProp ────────────────────────────────────────────────────────


class RmspropState:
    """Running mean-square accumulator per parameter, zero at start."""

    def __init__(self, params: Sequence[Parameter], rho: float = 0.99, eps: float = 1e-8) -> None:
        self.rho = rho
        self.eps = eps
        self.accumulators: list[Matrix] = [np.zeros_like(p.value) for p in params]


def rmsprop_step(params: Sequence[Parameter], state: RmspropState, lr: float) -> None:
    """One in-place update from the gradients stored on ``params``.

    Nothing is modified when any gradient is non-finite.
    """
    if len(params) != len(state.accumulators):
        raise ConfigError(
            f"optimizer tracks {len(state.accumulators)} parameters, got {len(params)}"
        )
    for param in params:
        if not np.all(np.isfinite(param.grad)):
            raise NumericError(f"non-finite gradient in {param.name}")
    for param, acc in zip(params, state.accumulators, strict=True):
        if acc.shape != param.shape:
            raise ConfigError(f"{param.name}: accumulator shape {acc.shape} != {param.shape}")
        acc *= state.rho
        acc += (1.0 - state.rho) * np.square(param.grad)
        param.value -= lr * param.grad / (np.sqrt(acc) + state.eps)


# ── schedule ───────────────────────────────────────────────────────


def stagnant_epochs(val_history: Sequence[float], initial_best: float | None = None) -> int:
    """Trailing epochs without a strict improvement over the best so far.

    Without ``initial_best`` the first score is the baseline, so the first
    epoch already counts as stagnant when nothing beats it.
    """
    if initial_best is None:
        initial_best = val_history[0] if val_history else -np.inf
    best = initial_best
    stagnant = 0
    for value in val_history:
        if value > best:
            best = value
            stagnant = 0
        else:
            stagnant += 1
    return stagnant


def schedule_step(
    epoch_index: int,
    val_history: Sequence[float],
    current_lr: float,
    *,
    config: TrainConfig,
    initial_best: float | None = None,
) -> tuple[float, bool]:
    """Learning rate for the next epoch and whether to stop.

    ``initial_best`` is the validation score before the first epoch.  Decay
    applies every epoch; halving applies on every ``plateau_patience``-th
    stagnant epoch in a row, compounding with the decay.
    """
    if len(val_history) != epoch_index:
        raise ConfigError(f"epoch {epoch_index} with {len(val_history)} validation scores")
    stagnant = stagnant_epochs(val_history, initial_best)
    lr = current_lr * config.per_epoch_decay
    if stagnant > 0 and stagnant % config.plateau_patience == 0:
        lr *= config.plateau_factor
        _log.info("No improvement for %d epochs; halving learning rate to %.3g", stagnant, lr)
    return lr, stagnant >= config.early_stop_patience


# ── epoch loop ─────────────────────────────────────────────────────


def simplex_deviation(weights: Sequence[Matrix | None]) -> tuple[float, float]:
    """(smallest weight, largest ``|sum - 1|``) over all rows of all arrays."""
    minimum, deviation = 1.0, 0.0
    for w in weights:
        if w is None:
            continue
        minimum = min(minimum, float(w.min()))
        deviation = max(deviation, float(np.abs(w.sum(axis=-1) - 1.0).max()))
    return minimum, deviation


def _attention_check(
    model: FusionModel, manifest: DatasetManifest, store: FeatureStore
) -> dict[str, float] | None:
    if not model.attentional:
        return None
    videos = manifest.splits["val"]
    captions = [c.caption_id for c in manifest.split_captions("val")]
    video_enc, text_enc = encode_pairwise(
        model, video_inputs(store, model.config, videos), text_inputs(store, model.config, captions)
    )
    minimum, deviation = simplex_deviation([*video_enc.weights, *text_enc.weights])
    return {"min": minimum, "max_sum_error": deviation}


def _append(log_path: str | None, record: dict[str, Any]) -> None:
    if log_path is None:
        return
    with open(log_path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def fit(
    model: FusionModel,
    manifest: DatasetManifest,
    store: FeatureStore,
    config: TrainConfig,
    log_path: str | None = None,
    *,
    threads: int = 1,
) -> tuple[FusionModel, list[dict[str, Any]]]:
    """Train ``model`` in place and leave it holding its best checkpoint.

    Returns the model and the per-epoch records also appended to ``log_path``
    as JSON lines.
    """
    validate_train_config(config)
    log: list[dict[str, Any]] = []
    if config.max_epochs == 0:
        return model, log
    if not manifest.split_captions("train"):
        raise DegenerateInputError("the train split has no captions")
    if not manifest.split_captions("val"):
        raise DegenerateInputError("the val split has no captions")

    params = model.parameters()
    state = RmspropState(params, config.rmsprop_rho, config.rmsprop_eps)
    dropout_rng = np.random.default_rng([config.seed, 1])
    metric = config.validation_metric

    initial_best = evaluate(model, manifest, store, "val", threads=threads).metric(metric)
    best_score, best_epoch, best_state = initial_best, 0, model.state()
    history: list[float] = []
    lr = config.base_lr
    _log.info(
        "Training %r for up to %d epochs (val %s %.4f)",
        model, config.max_epochs, metric, initial_best,
    )

    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        losses = []
        try:
            for batch in make_batches(manifest, "train", config.batch_size, config.seed, epoch):
                videos, texts, positive = assemble_batch(store, model.config, batch)
                model.zero_grad()
                report = batch_loss(
                    model,
                    videos,
                    texts,
                    positive,
                    config.margin,
                    mode=config.loss,
                    train=True,
                    rng=dropout_rng,
                )
                rmsprop_step(params, state, lr)
                losses.append(report.combined)
        except NumericError as exc:
            _append(log_path, {"epoch": epoch, "lr": lr, "error": str(exc)})
            _log.error("Diverged in epoch %d: %s", epoch, exc)
            raise

        val = evaluate(model, manifest, store, "val", threads=threads)
        score = val.metric(metric)
        history.append(score)
        if score > best_score:
            best_score, best_epoch, best_state = score, epoch, model.state()

        record: dict[str, Any] = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)) if losses else 0.0,
            "val": val.to_dict(),
            "best_epoch": best_epoch,
            "wall_time": round(time.perf_counter() - started, 3),
        }
        attention = _attention_check(model, manifest, store)
        if attention is not None:
            record["attention"] = attention
        log.append(record)
        _append(log_path, record)
        _log.info(
            "epoch %d lr %.3g loss %.4f val %s %.4f",
            epoch, lr, record["train_loss"], metric, score,
        )

        lr, stop = schedule_step(
            epoch, history, lr, config=config, initial_best=initial_best
        )
        if stop:
            _log.info("Early stop after epoch %d (best epoch %d)", epoch, best_epoch)
            break

    model.load_state(best_state)
    return model, log
