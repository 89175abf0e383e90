"""Feature files, dataset manifests and batching.

Binary feature format (little-endian)::

    "LFTR" | version u32 | dim u32 | count u64
    per item: id_len u16 | UTF-8 id | [frame_count u32] | values f32 ...

``frame_count`` is present only in frame-level files.  The text format has
one item per line, ``id`` followed by whitespace-separated decimals; a
frame-level text file repeats the id on consecutive lines, one line per frame.

Video features are keyed by video id, text features by caption id.  The
level of a file is not stored in it: callers pass the level they declared.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from collections.abc import Iterable, Sequence
from typing import TYPE_CHECKING, Any, NamedTuple

import numpy as np

from .blocks import FRAME_LEVEL, VIDEO_LEVEL, BlockInput, FrameBatch
from .errors import ConfigError, DegenerateInputError, FormatError

if TYPE_CHECKING:
    from .diffmath import Matrix
    from .model import ModelConfig

_log = logging.getLogger("laff.dataio")
_log.addHandler(logging.NullHandler())

FEATURE_MAGIC = b"LFTR"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
_ID_LEN = struct.Struct("<H")
_FRAME_COUNT = struct.Struct("<I")

MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "val", "test")


def mean_pool_frames(frames: Matrix) -> Matrix:
    """Elementwise mean of a ``(T, dim)`` frame sequence."""
    if frames.shape[0] == 0:
        raise DegenerateInputError("mean_pool_frames: empty frame sequence")
    return frames.mean(axis=0)


class FeatureEntry:
    """One named feature: id -> vector (video level) or id -> ``(T, dim)`` frames."""

    def __init__(self, name: str, level: str, dim: int, vectors: dict[str, Matrix]) -> None:
        if level not in (VIDEO_LEVEL, FRAME_LEVEL):
            raise ConfigError(f"feature {name!r}: unknown level {level!r}")
        self.name = name
        self.level = level
        self.dim = dim
        self.vectors = vectors
        self._pooled: dict[str, Matrix] | None = None

    def __len__(self) -> int:
        return len(self.vectors)

    def __contains__(self, item_id: object) -> bool:
        return item_id in self.vectors

    def _lookup(self, item_id: str) -> Matrix:
        try:
            return self.vectors[item_id]
        except KeyError:
            raise ConfigError(f"feature {self.name!r} has no item {item_id!r}") from None

    def matrix(self, ids: Sequence[str]) -> Matrix:
        """``(n, dim)`` rows; frame-level features are mean-pooled."""
        if self.level == VIDEO_LEVEL:
            return np.stack([self._lookup(i) for i in ids])
        if self._pooled is None:
            self._pooled = {k: mean_pool_frames(v) for k, v in self.vectors.items()}
        pooled = self._pooled
        return np.stack([pooled[i] if i in pooled else self._lookup(i) for i in ids])

    def frames(self, ids: Sequence[str]) -> FrameBatch:
        """Zero-padded ``(n, T_max, dim)`` frames with a validity mask."""
        if self.level != FRAME_LEVEL:
            raise ConfigError(f"feature {self.name!r} is not frame-level")
        seqs = [self._lookup(i) for i in ids]
        t_max = max(s.shape[0] for s in seqs)
        frames = np.zeros((len(seqs), t_max, self.dim))
        mask = np.zeros((len(seqs), t_max), dtype=bool)
        for row, seq in enumerate(seqs):
            frames[row, : seq.shape[0]] = seq
            mask[row, : seq.shape[0]] = True
        return FrameBatch(frames, mask)


class FeatureStore(dict[str, FeatureEntry]):
    """Feature name -> :class:`FeatureEntry`.  Treated as immutable after load."""


# ── feature files ──────────────────────────────────────────────────


def write_features(path: str, entry: FeatureEntry, *, text: bool = False) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    if text:
        with open(path, "w", encoding="utf-8") as f:
            for item_id, value in entry.vectors.items():
                rows = value if entry.level == FRAME_LEVEL else value[None, :]
                for row in rows.astype(np.float32):
                    f.write(item_id + " " + " ".join(repr(float(x)) for x in row) + "\n")
        return
    chunks = [_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, entry.dim, len(entry.vectors))]
    for item_id, value in entry.vectors.items():
        raw_id = item_id.encode("utf-8")
        chunks.append(_ID_LEN.pack(len(raw_id)))
        chunks.append(raw_id)
        if entry.level == FRAME_LEVEL:
            chunks.append(_FRAME_COUNT.pack(value.shape[0]))
        chunks.append(np.asarray(value, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def _read_binary(path: str, blob: bytes, dim: int, level: str) -> dict[str, Matrix]:
    if len(blob) < _HEADER.size:
        raise FormatError(path, 0, "truncated header")
    _magic, version, file_dim, count = _HEADER.unpack_from(blob, 0)
    if version != FEATURE_VERSION:
        raise FormatError(path, 4, f"unsupported feature version {version}")
    if file_dim != dim:
        raise FormatError(path, 8, f"dim {file_dim} does not match declared dim {dim}")
    offset = _HEADER.size
    vectors: dict[str, Matrix] = {}
    for _ in range(count):
        start = offset
        if offset + _ID_LEN.size > len(blob):
            raise FormatError(path, offset, "truncated item id length")
        (id_len,) = _ID_LEN.unpack_from(blob, offset)
        offset += _ID_LEN.size
        try:
            item_id = blob[offset : offset + id_len].decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(path, offset, f"id is not UTF-8: {e}") from e
        if len(item_id) == 0 or offset + id_len > len(blob):
            raise FormatError(path, offset, "empty or truncated item id")
        offset += id_len
        frames = 1
        if level == FRAME_LEVEL:
            if offset + _FRAME_COUNT.size > len(blob):
                raise FormatError(path, offset, "truncated frame count")
            (frames,) = _FRAME_COUNT.unpack_from(blob, offset)
            offset += _FRAME_COUNT.size
            if frames == 0:
                raise FormatError(path, offset, f"item {item_id!r} has no frames")
        n_values = frames * dim
        if offset + 4 * n_values > len(blob):
            raise FormatError(path, offset, f"truncated values for {item_id!r}")
        if item_id in vectors:
            raise FormatError(path, start, f"duplicate id {item_id!r}")
        values = np.frombuffer(blob, dtype="<f4", count=n_values, offset=offset)
        offset += 4 * n_values
        values = values.astype(np.float64)
        vectors[item_id] = values.reshape(frames, dim) if level == FRAME_LEVEL else values
    if offset != len(blob):
        raise FormatError(path, offset, f"{len(blob) - offset} trailing bytes")
    return vectors


def _read_text(path: str, blob: bytes, dim: int, level: str) -> dict[str, Matrix]:
    try:
        text = blob.decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(path, e.start, "not LFTR binary or UTF-8 text") from e
    rows: dict[str, list[np.ndarray]] = {}
    last_id = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        item_id, values = parts[0], parts[1:]
        if len(values) != dim:
            raise FormatError(path, f"line {lineno}", f"{len(values)} values, expected {dim}")
        if item_id in rows and (level == VIDEO_LEVEL or item_id != last_id):
            raise FormatError(path, f"line {lineno}", f"duplicate id {item_id!r}")
        try:
            vec = np.asarray([float(v) for v in values], dtype=np.float32)
        except ValueError as e:
            raise FormatError(path, f"line {lineno}", str(e)) from e
        rows.setdefault(item_id, []).append(vec)
        last_id = item_id
    vectors: dict[str, Matrix] = {}
    for item_id, vecs in rows.items():
        stacked = np.stack(vecs).astype(np.float64)
        vectors[item_id] = stacked if level == FRAME_LEVEL else stacked[0]
    return vectors


def load_features(path: str, name: str, dim: int, level: str = VIDEO_LEVEL) -> FeatureEntry:
    """Load a binary or text feature file; the format is detected from the magic."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] == FEATURE_MAGIC:
        vectors = _read_binary(path, blob, dim, level)
    else:
        vectors = _read_text(path, blob, dim, level)
    for item_id, value in vectors.items():
        if not np.all(np.isfinite(value)):
            raise FormatError(path, item_id, "non-finite value")
    _log.debug("Loaded %d items of %s (%s, dim %d) from %s", len(vectors), name, level, dim, path)
    return FeatureEntry(name, level, dim, vectors)


# ── manifest ───────────────────────────────────────────────────────


class CaptionRecord(NamedTuple):
    caption_id: str
    video_id: str
    text: str | None = None
    # Extra relevant videos for multi-positive queries.
    relevant: tuple[str, ...] = ()

    def relevant_videos(self) -> frozenset[str]:
        return frozenset((self.video_id, *self.relevant))


class FeatureRef(NamedTuple):
    name: str
    dim: int
    level: str
    path: str

    def decl(self) -> BlockInput:
        return BlockInput(self.name, self.dim, self.level)


class DatasetManifest(NamedTuple):
    videos: tuple[str, ...]
    captions: tuple[CaptionRecord, ...]
    splits: dict[str, tuple[str, ...]]
    video_features: tuple[FeatureRef, ...]
    text_features: tuple[FeatureRef, ...]

    def split_captions(self, split: str) -> list[CaptionRecord]:
        if split not in self.splits:
            raise ConfigError(f"unknown split {split!r}; have {sorted(self.splits)}")
        members = set(self.splits[split])
        return [c for c in self.captions if c.video_id in members]

    def to_dict(self) -> dict[str, Any]:
        return {
            "videos": list(self.videos),
            "captions": [
                {
                    "id": c.caption_id,
                    "video": c.video_id,
                    **({"text": c.text} if c.text is not None else {}),
                    **({"relevant": list(c.relevant)} if c.relevant else {}),
                }
                for c in self.captions
            ],
            "splits": {k: list(v) for k, v in self.splits.items()},
            "features": {
                "video": [f._asdict() for f in self.video_features],
                "text": [f._asdict() for f in self.text_features],
            },
        }


def _feature_refs(raw: Iterable[dict[str, Any]], path: str) -> tuple[FeatureRef, ...]:
    try:
        return tuple(
            FeatureRef(str(f["name"]), int(f["dim"]), str(f.get("level", VIDEO_LEVEL)), f["path"])
            for f in raw
        )
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(path, "features", f"bad feature declaration: {e}") from e


def parse_manifest(data: dict[str, Any], path: str = "<manifest>") -> DatasetManifest:
    try:
        videos = tuple(str(v) for v in data["videos"])
        captions = tuple(
            CaptionRecord(
                str(c["id"]),
                str(c["video"]),
                c.get("text"),
                tuple(str(r) for r in c.get("relevant", ())),
            )
            for c in data["captions"]
        )
        splits = {str(k): tuple(str(v) for v in vs) for k, vs in data["splits"].items()}
        features = data["features"]
    except (KeyError, TypeError, AttributeError) as e:
        raise FormatError(path, "root", f"missing or malformed key: {e}") from e
    manifest = DatasetManifest(
        videos,
        captions,
        splits,
        _feature_refs(features.get("video", ()), path),
        _feature_refs(features.get("text", ()), path),
    )
    validate_manifest(manifest, path)
    return manifest


def validate_manifest(manifest: DatasetManifest, path: str = "<manifest>") -> None:
    video_set = set(manifest.videos)
    if len(video_set) != len(manifest.videos):
        raise FormatError(path, "videos", "duplicate video ids")
    caption_ids = [c.caption_id for c in manifest.captions]
    if len(set(caption_ids)) != len(caption_ids):
        raise FormatError(path, "captions", "duplicate caption ids")
    for cap in manifest.captions:
        missing = cap.relevant_videos() - video_set
        if missing:
            where = f"caption {cap.caption_id}"
            raise FormatError(path, where, f"unknown videos {sorted(missing)}")
    seen: dict[str, str] = {}
    for split, ids in manifest.splits.items():
        for vid in ids:
            if vid not in video_set:
                raise FormatError(path, f"split {split}", f"unknown video {vid!r}")
            if vid in seen:
                raise FormatError(
                    path, f"split {split}", f"video {vid!r} already in split {seen[vid]!r}"
                )
            seen[vid] = split


def validate_dataset(manifest: DatasetManifest, store: FeatureStore) -> None:
    """Every declared feature must cover every video / caption id."""
    caption_ids = [c.caption_id for c in manifest.captions]
    for refs, ids in (
        (manifest.video_features, manifest.videos),
        (manifest.text_features, caption_ids),
    ):
        for ref in refs:
            entry = store.get(ref.name)
            if entry is None:
                raise ConfigError(f"feature {ref.name!r} declared but not loaded")
            missing = [i for i in ids if i not in entry]
            if missing:
                raise ConfigError(
                    f"feature {ref.name!r} misses {len(missing)} ids (first: {missing[0]!r})"
                )


def load_dataset(directory: str) -> tuple[DatasetManifest, FeatureStore]:
    """Read ``manifest.json`` and every feature it declares."""
    path = os.path.join(directory, MANIFEST_NAME)
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(path, f"line {e.lineno}", e.msg) from e
    except OSError as e:
        raise ConfigError(f"cannot read dataset manifest {path}: {e}") from e
    manifest = parse_manifest(data, path)
    store = FeatureStore()
    for ref in (*manifest.video_features, *manifest.text_features):
        if ref.name in store:
            raise FormatError(path, "features", f"feature name {ref.name!r} used twice")
        store[ref.name] = load_features(
            os.path.join(directory, ref.path), ref.name, ref.dim, ref.level
        )
    validate_dataset(manifest, store)
    return manifest, store


def write_dataset(
    directory: str, manifest: DatasetManifest, store: FeatureStore, *, text: bool = False
) -> None:
    os.makedirs(directory, exist_ok=True)
    for ref in (*manifest.video_features, *manifest.text_features):
        write_features(os.path.join(directory, ref.path), store[ref.name], text=text)
    with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8") as f:
        json.dump(manifest.to_dict(), f, indent=1)


# ── batching ───────────────────────────────────────────────────────


def make_batches(
    manifest: DatasetManifest, split: str, batch_size: int, seed: int, epoch: int
) -> list[list[CaptionRecord]]:
    """Seeded shuffle of a split's captions, chunked into batches.

    A final short batch is kept only if it still has two items (mining needs
    a negative). A batch whose captions all describe one video is merged into
    its predecessor, or takes in its successor when it comes first; a split
    with a single video yields no batches.
    """
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2, got {batch_size}")
    items = manifest.split_captions(split)
    order = np.random.default_rng([seed, epoch]).permutation(len(items))
    batches = [
        [items[j] for j in order[start : start + batch_size]]
        for start in range(0, len(items), batch_size)
    ]
    if batches and len(batches[-1]) < 2:
        batches.pop()
    merged: list[list[CaptionRecord]] = []
    for batch in batches:
        if merged and (_video_count(batch) < 2 or _video_count(merged[-1]) < 2):
            merged[-1].extend(batch)
        else:
            merged.append(batch)
    return [batch for batch in merged if _video_count(batch) >= 2]


def _video_count(batch: Sequence[CaptionRecord]) -> int:
    return len({record.video_id for record in batch})


def video_inputs(
    store: FeatureStore, config: ModelConfig, video_ids: Sequence[str]
) -> list[Matrix | FrameBatch]:
    """Model inputs for a list of videos, in the config's feature order."""
    inputs: list[Matrix | FrameBatch] = []
    for feat in config.video_features:
        entry = store[feat.name]
        if entry.level == FRAME_LEVEL and config.uses_frames:
            inputs.append(entry.frames(video_ids))
        else:
            inputs.append(entry.matrix(video_ids))
    return inputs


def text_inputs(
    store: FeatureStore, config: ModelConfig, caption_ids: Sequence[str]
) -> list[Matrix]:
    return [store[feat.name].matrix(caption_ids) for feat in config.text_features]


def assemble_batch(
    store: FeatureStore, config: ModelConfig, batch: Sequence[CaptionRecord]
) -> tuple[list[Matrix | FrameBatch], list[Matrix], np.ndarray]:
    """Inputs for one training batch.

    Videos are de-duplicated in first-seen order so a video paired with two
    captions of the batch is never its own negative.  Returns
    (video inputs, text inputs, positive column per caption).
    """
    columns: dict[str, int] = {}
    for cap in batch:
        columns.setdefault(cap.video_id, len(columns))
    positive = np.array([columns[c.video_id] for c in batch], dtype=np.intp)
    return (
        video_inputs(store, config, list(columns)),
        text_inputs(store, config, [c.caption_id for c in batch]),
        positive,
    )
