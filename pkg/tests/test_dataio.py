"""Tests for feature files, manifests and batching."""

import json
import os
import struct
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.blocks import FRAME_LEVEL, VIDEO_LEVEL, BlockInput
from src.dataio import (
    MANIFEST_NAME,
    CaptionRecord,
    DatasetManifest,
    FeatureEntry,
    FeatureRef,
    FeatureStore,
    assemble_batch,
    load_dataset,
    load_features,
    make_batches,
    mean_pool_frames,
    parse_manifest,
    validate_dataset,
    video_inputs,
    write_dataset,
    write_features,
)
from src.errors import ConfigError, DegenerateInputError, FormatError
from src.model import ModelConfig


def _entry(level=VIDEO_LEVEL, dim=3):
    if level == FRAME_LEVEL:
        vectors = {
            "v1": np.arange(2 * dim, dtype=np.float64).reshape(2, dim),
            "v2": np.full((3, dim), 0.5),
        }
    else:
        vectors = {"v1": np.array([0.5, -1.0, 2.0]), "v2": np.array([0.25, 0.0, 1.5])}
    return FeatureEntry("feat", level, dim, vectors)


def _manifest_dict():
    return {
        "videos": ["a", "b", "c", "d"],
        "captions": [
            {"id": "a#0", "video": "a", "text": "a dog runs"},
            {"id": "b#0", "video": "b"},
            {"id": "c#0", "video": "c", "relevant": ["d"]},
            {"id": "d#0", "video": "d"},
        ],
        "splits": {"train": ["a", "b"], "val": ["c"], "test": ["d"]},
        "features": {
            "video": [{"name": "vf", "dim": 2, "path": "features/vf.lftr"}],
            "text": [{"name": "tf", "dim": 3, "path": "features/tf.txt"}],
        },
    }


class TestFeatureFiles:
    @pytest.mark.parametrize("text", [False, True])
    @pytest.mark.parametrize("level", [VIDEO_LEVEL, FRAME_LEVEL])
    def test_write_then_load(self, tmp_path, level, text):
        entry = _entry(level)
        path = str(tmp_path / "feat.bin")
        write_features(path, entry, text=text)
        loaded = load_features(path, "feat", 3, level)
        assert list(loaded.vectors) == ["v1", "v2"]
        for key, value in entry.vectors.items():
            np.testing.assert_array_equal(loaded.vectors[key], value)

    def test_binary_header(self, tmp_path):
        path = tmp_path / "feat.lftr"
        write_features(str(path), _entry())
        magic, version, dim, count = struct.unpack_from("<4sIIQ", path.read_bytes())
        assert (magic, version, dim, count) == (b"LFTR", 1, 3, 2)

    def test_dim_mismatch(self, tmp_path):
        path = str(tmp_path / "feat.lftr")
        write_features(path, _entry())
        with pytest.raises(FormatError, match="declared dim"):
            load_features(path, "feat", 4)

    def test_truncated_binary(self, tmp_path):
        path = tmp_path / "feat.lftr"
        write_features(str(path), _entry())
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(FormatError, match="truncated"):
            load_features(str(path), "feat", 3)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "feat.lftr"
        write_features(str(path), _entry())
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError, match="trailing"):
            load_features(str(path), "feat", 3)

    def test_random_bytes_are_a_format_error(self, tmp_path):
        blob = np.random.default_rng(0).integers(0, 256, size=64, dtype=np.uint8).tobytes()
        path = tmp_path / "feat.bin"
        path.write_bytes(b"\xff" + blob)
        with pytest.raises(FormatError, match="not LFTR binary or UTF-8 text") as info:
            load_features(str(path), "feat", 3)
        assert info.value.exit_code == 2

    def test_text_wrong_value_count(self, tmp_path):
        path = tmp_path / "feat.txt"
        path.write_text("v1 1 2 3\nv2 1 2\n")
        with pytest.raises(FormatError, match="line 2"):
            load_features(str(path), "feat", 3)

    def test_text_duplicate_id(self, tmp_path):
        path = tmp_path / "feat.txt"
        path.write_text("v1 1 2\nv1 3 4\n")
        with pytest.raises(FormatError, match="duplicate"):
            load_features(str(path), "feat", 2)

    def test_text_frames_must_be_consecutive(self, tmp_path):
        path = tmp_path / "feat.txt"
        path.write_text("v1 1 2\nv2 1 1\nv1 3 4\n")
        with pytest.raises(FormatError, match="duplicate"):
            load_features(str(path), "feat", 2, FRAME_LEVEL)

    def test_non_finite_rejected(self, tmp_path):
        path = tmp_path / "feat.txt"
        path.write_text("v1 1 nan\n")
        with pytest.raises(FormatError, match="non-finite"):
            load_features(str(path), "feat", 2)

    def test_values_rounded_to_float32(self, tmp_path):
        entry = FeatureEntry("f", VIDEO_LEVEL, 1, {"x": np.array([0.1])})
        path = str(tmp_path / "f.lftr")
        write_features(path, entry)
        assert load_features(path, "f", 1).vectors["x"][0] == float(np.float32(0.1))


class TestFeatureEntry:
    def test_mean_pool(self):
        np.testing.assert_array_equal(
            mean_pool_frames(np.array([[1.0, 2.0], [3.0, 4.0]])), [2.0, 3.0]
        )

    def test_mean_pool_empty(self):
        with pytest.raises(DegenerateInputError):
            mean_pool_frames(np.zeros((0, 2)))

    def test_matrix_pools_frames(self):
        entry = _entry(FRAME_LEVEL)
        np.testing.assert_array_equal(entry.matrix(["v2", "v1"]), [[0.5] * 3, [1.5, 2.5, 3.5]])

    def test_frames_padded(self):
        batch = _entry(FRAME_LEVEL).frames(["v1", "v2"])
        assert batch.frames.shape == (2, 3, 3)
        np.testing.assert_array_equal(batch.mask, [[True, True, False], [True, True, True]])
        np.testing.assert_array_equal(batch.frames[0, 2], [0.0, 0.0, 0.0])

    def test_unknown_id(self):
        with pytest.raises(ConfigError, match="no item"):
            _entry().matrix(["missing"])

    def test_frames_of_video_level(self):
        with pytest.raises(ConfigError, match="not frame-level"):
            _entry().frames(["v1"])


class TestManifest:
    def test_parse(self):
        manifest = parse_manifest(_manifest_dict())
        assert manifest.videos == ("a", "b", "c", "d")
        assert manifest.captions[0].text == "a dog runs"
        assert manifest.captions[2].relevant_videos() == frozenset({"c", "d"})
        assert manifest.video_features[0] == FeatureRef("vf", 2, VIDEO_LEVEL, "features/vf.lftr")

    def test_round_trip_dict(self):
        manifest = parse_manifest(_manifest_dict())
        assert parse_manifest(json.loads(json.dumps(manifest.to_dict()))) == manifest

    def test_split_captions(self):
        manifest = parse_manifest(_manifest_dict())
        assert [c.caption_id for c in manifest.split_captions("train")] == ["a#0", "b#0"]
        with pytest.raises(ConfigError, match="unknown split"):
            manifest.split_captions("dev")

    def test_missing_key(self):
        data = _manifest_dict()
        del data["splits"]
        with pytest.raises(FormatError, match="splits"):
            parse_manifest(data)

    def test_unknown_caption_video(self):
        data = _manifest_dict()
        data["captions"][0]["video"] = "zzz"
        with pytest.raises(FormatError, match="unknown videos"):
            parse_manifest(data)

    def test_overlapping_splits(self):
        data = _manifest_dict()
        data["splits"]["test"].append("a")
        with pytest.raises(FormatError, match="already in split"):
            parse_manifest(data)

    def test_duplicate_caption_ids(self):
        data = _manifest_dict()
        data["captions"][1]["id"] = "a#0"
        with pytest.raises(FormatError, match="duplicate caption"):
            parse_manifest(data)


def _tiny_dataset():
    manifest = parse_manifest(_manifest_dict())
    rng = np.random.default_rng(0)
    store = FeatureStore(
        vf=FeatureEntry("vf", VIDEO_LEVEL, 2, {v: rng.standard_normal(2) for v in manifest.videos}),
        tf=FeatureEntry(
            "tf", VIDEO_LEVEL, 3, {c.caption_id: rng.standard_normal(3) for c in manifest.captions}
        ),
    )
    return manifest, store


class TestDataset:
    def test_write_then_load(self, tmp_path):
        manifest, store = _tiny_dataset()
        write_dataset(str(tmp_path), manifest, store)
        assert (tmp_path / MANIFEST_NAME).is_file()
        loaded_manifest, loaded_store = load_dataset(str(tmp_path))
        assert loaded_manifest == manifest
        assert set(loaded_store) == {"vf", "tf"}

    def test_missing_ids(self):
        manifest, store = _tiny_dataset()
        del store["vf"].vectors["c"]
        with pytest.raises(ConfigError, match="misses 1 ids"):
            validate_dataset(manifest, store)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_dataset(str(tmp_path))

    def test_malformed_manifest_json(self, tmp_path):
        (tmp_path / MANIFEST_NAME).write_text("{not json")
        with pytest.raises(FormatError):
            load_dataset(str(tmp_path))


def _caption_manifest(n_videos, captions_per_video=1):
    videos = tuple(f"v{i}" for i in range(n_videos))
    captions = tuple(
        CaptionRecord(f"{v}#{c}", v) for v in videos for c in range(captions_per_video)
    )
    return DatasetManifest(videos, captions, {"train": videos}, (), ())


class TestBatching:
    def test_covers_split_once(self):
        batches = make_batches(_caption_manifest(10), "train", 4, seed=0, epoch=1)
        ids = [c.caption_id for batch in batches for c in batch]
        assert sorted(ids) == sorted(f"v{i}#0" for i in range(10))
        assert [len(b) for b in batches] == [4, 4, 2]

    def test_deterministic_per_epoch(self):
        manifest = _caption_manifest(20)
        first = make_batches(manifest, "train", 5, seed=3, epoch=1)
        assert first == make_batches(manifest, "train", 5, seed=3, epoch=1)
        assert first != make_batches(manifest, "train", 5, seed=3, epoch=2)

    def test_singleton_tail_dropped(self):
        batches = make_batches(_caption_manifest(9), "train", 4, seed=0, epoch=1)
        assert [len(b) for b in batches] == [4, 4]

    def test_every_batch_holds_two_videos(self):
        manifest = _caption_manifest(2, captions_per_video=2)
        for epoch in range(1, 30):
            batches = make_batches(manifest, "train", 2, seed=0, epoch=epoch)
            assert batches
            assert all(len({c.video_id for c in b}) >= 2 for b in batches)
            ids = sorted(c.caption_id for b in batches for c in b)
            assert ids == ["v0#0", "v0#1", "v1#0", "v1#1"]

    def test_single_video_split_yields_nothing(self):
        manifest = _caption_manifest(1, captions_per_video=3)
        assert make_batches(manifest, "train", 2, seed=0, epoch=1) == []

    def test_batch_size_at_least_two(self):
        with pytest.raises(ConfigError):
            make_batches(_caption_manifest(4), "train", 1, seed=0, epoch=1)

    def test_assemble_deduplicates_videos(self):
        manifest, store = _tiny_dataset()
        config = ModelConfig((BlockInput("vf", 2),), (BlockInput("tf", 3),), spaces=1, total_dim=4)
        batch = [
            CaptionRecord("a#0", "a"),
            CaptionRecord("b#0", "b"),
            CaptionRecord("d#0", "a"),
        ]
        videos, texts, positive = assemble_batch(store, config, batch)
        assert videos[0].shape == (2, 2)
        assert texts[0].shape == (3, 3)
        np.testing.assert_array_equal(positive, [0, 1, 0])

    def test_video_inputs_pool_unless_multi_level(self):
        store = FeatureStore(feat=_entry(FRAME_LEVEL))
        feats = (BlockInput("feat", 3, FRAME_LEVEL),)
        text = (BlockInput("t", 2),)
        pooled = video_inputs(store, ModelConfig(feats, text, spaces=1, total_dim=4), ["v1"])
        framed = video_inputs(
            store, ModelConfig(feats, text, spaces=1, total_dim=4, block="laff_ml"), ["v1"]
        )
        assert pooled[0].shape == (1, 3)
        assert framed[0].frames.shape == (1, 2, 3)
