"""Tests for RMSProp, the learning-rate schedule and the training loop."""

import json
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.diffmath import Parameter
from src.errors import ConfigError, DegenerateInputError, NumericError
from src.evalkit import evaluate
from src.model import FusionModel, ModelConfig
from src.optim import (
    RmspropState,
    TrainConfig,
    fit,
    rmsprop_step,
    schedule_step,
    simplex_deviation,
    stagnant_epochs,
    validate_train_config,
)
from src.synth import SynthSpec, synth_generate

BASE = TrainConfig()


def _trace(history, initial_best):
    """Apply the schedule epoch by epoch; returns (lrs after each epoch, stop flags)."""
    lr = BASE.base_lr
    lrs, stops = [], []
    for epoch in range(1, len(history) + 1):
        lr, stop = schedule_step(
            epoch, history[:epoch], lr, config=BASE, initial_best=initial_best
        )
        lrs.append(lr)
        stops.append(stop)
    return lrs, stops


class TestRmsprop:
    def test_hand_case(self):
        param = Parameter("w", np.array([1.0]))
        param.grad[...] = 1.0
        state = RmspropState([param], rho=0.99, eps=1e-8)
        rmsprop_step([param], state, 1e-4)
        assert state.accumulators[0][0] == pytest.approx(0.01)
        assert param.value[0] - 1.0 == pytest.approx(-1e-3, rel=1e-6)

    def test_zero_gradient_leaves_value(self):
        param = Parameter("w", np.array([0.5, -2.0]))
        state = RmspropState([param])
        rmsprop_step([param], state, 1e-2)
        np.testing.assert_array_equal(param.value, [0.5, -2.0])
        np.testing.assert_array_equal(state.accumulators[0], [0.0, 0.0])

    def test_non_finite_gradient_changes_nothing(self):
        good = Parameter("good", np.array([1.0]))
        bad = Parameter("bad", np.array([1.0]))
        good.grad[...] = 1.0
        bad.grad[...] = np.inf
        state = RmspropState([good, bad])
        with pytest.raises(NumericError, match="bad"):
            rmsprop_step([good, bad], state, 1e-4)
        assert good.value[0] == 1.0
        assert state.accumulators[0][0] == 0.0

    def test_parameter_count_mismatch(self):
        state = RmspropState([Parameter("w", np.zeros(1))])
        with pytest.raises(ConfigError):
            rmsprop_step([], state, 1e-4)


class TestSchedule:
    def test_improving_history_only_decays(self):
        lrs, stops = _trace([0.1], initial_best=0.0)
        assert lrs[0] == pytest.approx(1e-4 * 0.99)
        assert stops == [False]

    def test_plateau_halves_after_three(self):
        lrs, stops = _trace([0.5, 0.5, 0.5], initial_best=0.5)
        assert lrs[1] == pytest.approx(1e-4 * 0.99**2)
        assert lrs[2] == pytest.approx(1e-4 * 0.99**3 * 0.5)
        assert not any(stops)

    def test_halving_repeats_every_three(self):
        lrs, _ = _trace([0.5] * 6, initial_best=0.5)
        assert lrs[5] == pytest.approx(1e-4 * 0.99**6 * 0.25)

    def test_early_stop_after_ten(self):
        _, stops = _trace([0.5] * 10, initial_best=0.5)
        assert stops == [False] * 9 + [True]

    def test_flat_history_without_initial_best(self):
        assert stagnant_epochs([0.5] * 3) == 3
        lrs, stops = _trace([0.5] * 10, initial_best=None)
        assert lrs[2] == pytest.approx(1e-4 * 0.99**3 * 0.5)
        assert stops == [False] * 9 + [True]

    def test_improvement_resets_counter(self):
        history = [0.5, 0.4, 0.4, 0.6, 0.6]
        assert stagnant_epochs(history, initial_best=0.1) == 1
        lrs, _ = _trace(history, initial_best=0.1)
        # Stagnation reaches 2 at most, so only the per-epoch decay applies.
        assert lrs[-1] == pytest.approx(1e-4 * 0.99**5)

    def test_lr_never_increases(self):
        history = list(np.random.default_rng(0).uniform(size=25))
        lrs, _ = _trace(history, initial_best=0.0)
        assert all(b <= a for a, b in zip(lrs, lrs[1:], strict=False))

    def test_history_length_checked(self):
        with pytest.raises(ConfigError):
            schedule_step(2, [0.1], 1e-4, config=BASE)


class TestTrainConfig:
    @pytest.mark.parametrize(
        "overrides",
        [
            {"margin": 0.0},
            {"batch_size": 1},
            {"base_lr": 0.0},
            {"per_epoch_decay": 1.5},
            {"validation_metric": "r50"},
            {"loss": "mean"},
            {"max_epochs": -1},
        ],
    )
    def test_rejected(self, overrides):
        with pytest.raises(ConfigError):
            validate_train_config(BASE._replace(**overrides))

    def test_dict_round_trip(self):
        config = BASE._replace(loss="single", seed=7)
        assert TrainConfig.from_dict(config.to_dict()) == config


class TestSimplexDeviation:
    def test_exact_rows(self):
        weights = [np.array([[0.25, 0.75], [0.5, 0.5]]), None]
        assert simplex_deviation(weights) == (0.25, 0.0)

    def test_reports_worst_row(self):
        minimum, deviation = simplex_deviation([np.array([[0.2, 0.7]])])
        assert minimum == 0.2
        assert deviation == pytest.approx(0.1)


def _setup(videos=60, **model_overrides):
    store, manifest = synth_generate(SynthSpec(videos=videos, latent_dim=4))
    config = ModelConfig(
        tuple(r.decl() for r in manifest.video_features),
        tuple(r.decl() for r in manifest.text_features),
        spaces=2,
        total_dim=16,
    )._replace(**model_overrides)
    return FusionModel(config, seed=0), manifest, store


def _train(max_epochs=3, **model_overrides):
    model, manifest, store = _setup(**model_overrides)
    train = TrainConfig(batch_size=16, base_lr=1e-2, max_epochs=max_epochs)
    return fit(model, manifest, store, train)


class TestFit:
    def test_zero_epochs_is_noop(self):
        model, manifest, store = _setup()
        before = model.state()
        _, log = fit(model, manifest, store, TrainConfig(max_epochs=0))
        assert log == []
        for a, b in zip(before, model.state(), strict=True):
            np.testing.assert_array_equal(a, b)

    def test_log_records(self, tmp_path):
        model, manifest, store = _setup()
        path = tmp_path / "log.jsonl"
        _, log = fit(model, manifest, store, TrainConfig(batch_size=16, max_epochs=2), str(path))
        lines = [json.loads(line) for line in path.read_text().splitlines()]
        assert [r["epoch"] for r in lines] == [1, 2]
        assert {"lr", "train_loss", "val", "best_epoch", "wall_time", "attention"} <= set(lines[0])
        assert len(log) == 2

    def test_deterministic_apart_from_wall_time(self):
        model_a, log_a = _train()
        model_b, log_b = _train()
        strip = [{k: v for k, v in r.items() if k != "wall_time"} for r in log_a]
        assert strip == [{k: v for k, v in r.items() if k != "wall_time"} for r in log_b]
        for a, b in zip(model_a.state(), model_b.state(), strict=True):
            np.testing.assert_array_equal(a, b)

    def test_lr_non_increasing(self):
        _, log = _train(max_epochs=4)
        lrs = [r["lr"] for r in log]
        assert all(b <= a for a, b in zip(lrs, lrs[1:], strict=False))

    def test_best_checkpoint_restored(self):
        model, manifest, store = _setup()
        _, log = fit(model, manifest, store, TrainConfig(batch_size=16, base_lr=1e-2, max_epochs=3))
        final = evaluate(model, manifest, store, "val").mean_ap
        assert final >= max(r["val"]["map"] for r in log) - 1e-12

    def test_attention_stays_on_simplex(self):
        _, log = _train()
        for record in log:
            assert record["attention"]["min"] >= 0.0
            assert record["attention"]["max_sum_error"] <= 1e-9

    def test_no_attention_record_for_concat(self):
        _, log = _train(max_epochs=1, block="concat", spaces=1)
        assert "attention" not in log[0]

    def test_empty_val_split(self):
        model, manifest, store = _setup()
        manifest = manifest._replace(splits={**manifest.splits, "val": ()})
        with pytest.raises(DegenerateInputError, match="val"):
            fit(model, manifest, store, TrainConfig(max_epochs=1))

    def test_several_captions_per_video(self):
        store, manifest = synth_generate(
            SynthSpec(
                videos=6,
                captions_per_video=3,
                latent_dim=4,
                split_fractions=(0.5, 0.25, 0.25),
            )
        )
        model = FusionModel(
            ModelConfig(
                tuple(r.decl() for r in manifest.video_features),
                tuple(r.decl() for r in manifest.text_features),
                spaces=2,
                total_dim=8,
            ),
            seed=0,
        )
        _, log = fit(model, manifest, store, TrainConfig(batch_size=2, max_epochs=5))
        assert len(log) == 5
        assert all(np.isfinite(r["train_loss"]) for r in log)
