"""Embedding index, ranking, retrieval metrics and inter-space diagnostics.

Metrics take ranked lists of video ids plus, per query, the set of relevant
video ids.  R@K counts a query as a hit when any relevant video is in its
top K; Med r uses the best-ranked relevant video (lower median for an even
number of queries); AP averages precision at every relevant position.  The
metric loops are plain sequential Python arithmetic so results are exactly
reproducible.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from typing import TYPE_CHECKING, Any, NamedTuple

import numpy as np

from .dataio import text_inputs, video_inputs
from .errors import ConfigError, DegenerateInputError, UnsupportedOperationError
from .model import average_attention_weights, encode_texts, encode_videos

if TYPE_CHECKING:
    from .dataio import DatasetManifest, FeatureStore
    from .diffmath import Matrix
    from .model import FusionModel, ModelConfig

_log = logging.getLogger("laff.evalkit")
_log.addHandler(logging.NullHandler())

ENCODE_CHUNK = 1024


class EmbeddingIndex(NamedTuple):
    video_ids: tuple[str, ...]
    # One (m, d) matrix of unit rows per space.
    embeddings: list[Matrix]


class RankedList(NamedTuple):
    query_id: str
    video_ids: tuple[str, ...]
    scores: tuple[float, ...]


class EvalReport(NamedTuple):
    r1: float
    r5: float
    r10: float
    median_rank: int
    mean_ap: float
    sum_recall: float
    queries: int
    ranked: list[RankedList] | None = None
    jaccard: list[list[float]] | None = None
    attention: dict[str, dict[str, float]] | None = None

    def metric(self, name: str) -> float:
        if name == "map":
            return self.mean_ap
        if name == "sum_recall":
            return self.sum_recall
        if name in ("r1", "r5", "r10"):
            return float(getattr(self, name))
        raise ConfigError(f"unknown validation metric {name!r}")

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "r1": self.r1,
            "r5": self.r5,
            "r10": self.r10,
            "median_rank": self.median_rank,
            "map": self.mean_ap,
            "sum_recall": self.sum_recall,
            "queries": self.queries,
        }
        if self.jaccard is not None:
            data["jaccard"] = self.jaccard
        if self.attention is not None:
            data["attention"] = self.attention
        return data


# ── encoding ───────────────────────────────────────────────────────


def build_index(
    model: FusionModel, store: FeatureStore, video_ids: Sequence[str]
) -> EmbeddingIndex:
    """Encode every video (eval mode) into per-space unit rows."""
    per_space: list[list[Matrix]] = [[] for _ in range(model.spaces)]
    for start in range(0, len(video_ids), ENCODE_CHUNK):
        chunk = video_ids[start : start + ENCODE_CHUNK]
        encoding = encode_videos(model, video_inputs(store, model.config, chunk))
        for space, emb in zip(per_space, encoding.embeddings, strict=True):
            space.append(emb)
    embeddings = [
        np.concatenate(parts) if parts else np.zeros((0, model.config.space_dim))
        for parts in per_space
    ]
    return EmbeddingIndex(tuple(video_ids), embeddings)


def encode_queries(
    model: FusionModel, store: FeatureStore, caption_ids: Sequence[str]
) -> list[Matrix]:
    per_space: list[list[Matrix]] = [[] for _ in range(model.spaces)]
    for start in range(0, len(caption_ids), ENCODE_CHUNK):
        chunk = caption_ids[start : start + ENCODE_CHUNK]
        encoding = encode_texts(model, text_inputs(store, model.config, chunk))
        for space, emb in zip(per_space, encoding.embeddings, strict=True):
            space.append(emb)
    return [np.concatenate(parts) for parts in per_space]


# ── ranking ────────────────────────────────────────────────────────


def _id_positions(video_ids: Sequence[str]) -> np.ndarray:
    """Position of each id in ascending id order (the tie-break key)."""
    positions = np.empty(len(video_ids), dtype=np.intp)
    positions[sorted(range(len(video_ids)), key=video_ids.__getitem__)] = np.arange(len(video_ids))
    return positions


def _order(scores: Matrix, tie_key: np.ndarray) -> np.ndarray:
    """Per row: indices by descending score, ties by ascending id."""
    return np.stack([np.lexsort((tie_key, -row)) for row in scores])


def _chunks(n: int, parts: int) -> list[slice]:
    size = max(1, -(-n // max(1, parts)))
    return [slice(s, min(n, s + size)) for s in range(0, n, size)]


def rank(
    query_embeddings: Sequence[Matrix],
    index: EmbeddingIndex,
    query_ids: Sequence[str] | None = None,
    *,
    threads: int = 1,
) -> list[RankedList]:
    """Rank every indexed video for every query by mean per-space cosine."""
    if not index.video_ids:
        raise DegenerateInputError("rank: empty index")
    if len(query_embeddings) != len(index.embeddings):
        raise ConfigError(
            f"query has {len(query_embeddings)} spaces, index has {len(index.embeddings)}"
        )
    n_queries = query_embeddings[0].shape[0]
    ids = list(query_ids) if query_ids is not None else [str(i) for i in range(n_queries)]
    pairs = zip(query_embeddings, index.embeddings, strict=True)
    scores = np.mean([q @ v.T for q, v in pairs], axis=0)
    tie_key = _id_positions(index.video_ids)

    if threads > 1 and n_queries > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = _chunks(n_queries, threads)
            orders = list(pool.map(lambda s: _order(scores[s], tie_key), parts))
        order = np.concatenate(orders)
    else:
        order = _order(scores, tie_key)

    return [
        RankedList(
            ids[q],
            tuple(index.video_ids[j] for j in order[q]),
            tuple(float(scores[q, j]) for j in order[q]),
        )
        for q in range(n_queries)
    ]


# ── metrics ────────────────────────────────────────────────────────


def _check_lengths(ranked: Sequence[Sequence[str]], relevance: Sequence[frozenset[str]]) -> None:
    if not ranked:
        raise DegenerateInputError("metrics need at least one query")
    if len(ranked) != len(relevance):
        raise ConfigError(f"{len(ranked)} ranked lists but {len(relevance)} relevance sets")


def first_relevant_ranks(
    ranked: Sequence[Sequence[str]], relevance: Sequence[frozenset[str]]
) -> list[int]:
    """1-based rank of the best relevant video; ``len + 1`` if none is ranked."""
    ranks = []
    for videos, relevant in zip(ranked, relevance, strict=True):
        best = len(videos) + 1
        for pos, vid in enumerate(videos, start=1):
            if vid in relevant:
                best = pos
                break
        ranks.append(best)
    return ranks


def recall_at_k(
    ranked: Sequence[Sequence[str]], relevance: Sequence[frozenset[str]], k: int
) -> float:
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    _check_lengths(ranked, relevance)
    hits = sum(1 for r in first_relevant_ranks(ranked, relevance) if r <= k)
    return hits / len(ranked)


def median_rank(ranked: Sequence[Sequence[str]], relevance: Sequence[frozenset[str]]) -> int:
    _check_lengths(ranked, relevance)
    ranks = sorted(first_relevant_ranks(ranked, relevance))
    return ranks[(len(ranks) - 1) // 2]


def average_precision(videos: Sequence[str], relevant: frozenset[str]) -> float:
    if not relevant:
        return 0.0
    hits = 0
    total = 0.0
    for pos, vid in enumerate(videos, start=1):
        if vid in relevant:
            hits += 1
            total += hits / pos
    return total / len(relevant)


def mean_ap(ranked: Sequence[Sequence[str]], relevance: Sequence[frozenset[str]]) -> float:
    _check_lengths(ranked, relevance)
    total = 0.0
    for videos, relevant in zip(ranked, relevance, strict=True):
        total += average_precision(videos, relevant)
    return total / len(ranked)


def jaccard(left: set[str] | frozenset[str], right: set[str] | frozenset[str]) -> float:
    union = left | right
    return len(left & right) / len(union) if union else 1.0


def jaccard_interspace(
    query_embeddings: Sequence[Matrix], index: EmbeddingIndex, k: int = 5
) -> list[list[float]]:
    """Mean Jaccard index between per-space top-``k`` result sets."""
    h = len(query_embeddings)
    if h < 2:
        raise UnsupportedOperationError("inter-space Jaccard needs at least two spaces")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    tie_key = _id_positions(index.video_ids)
    tops = [
        [frozenset(row[:k].tolist()) for row in _order(q @ v.T, tie_key)]
        for q, v in zip(query_embeddings, index.embeddings, strict=True)
    ]
    n_queries = len(tops[0])
    matrix = [[1.0] * h for _ in range(h)]
    for i in range(h):
        for j in range(i + 1, h):
            total = 0.0
            for a, b in zip(tops[i], tops[j], strict=True):
                total += jaccard(a, b)
            matrix[i][j] = matrix[j][i] = total / n_queries
    return matrix


# ── reports ────────────────────────────────────────────────────────


def report_from_ranking(
    ranked: Sequence[RankedList], relevance: Sequence[frozenset[str]], *, keep_ranking: bool = False
) -> EvalReport:
    lists = [r.video_ids for r in ranked]
    r1, r5, r10 = (recall_at_k(lists, relevance, k) for k in (1, 5, 10))
    return EvalReport(
        r1=r1,
        r5=r5,
        r10=r10,
        median_rank=median_rank(lists, relevance),
        mean_ap=mean_ap(lists, relevance),
        sum_recall=100.0 * (r1 + r5 + r10),
        queries=len(lists),
        ranked=list(ranked) if keep_ranking else None,
    )


def evaluate(
    model: FusionModel,
    manifest: DatasetManifest,
    store: FeatureStore,
    split: str,
    *,
    threads: int = 1,
    keep_ranking: bool = False,
    jaccard_k: int | None = None,
    with_attention: bool = False,
) -> EvalReport:
    """Caption-as-query retrieval over the videos of one split."""
    captions = manifest.split_captions(split)
    if not captions:
        raise DegenerateInputError(f"split {split!r} has no captions")
    index = build_index(model, store, manifest.splits[split])
    queries = encode_queries(model, store, [c.caption_id for c in captions])
    ranked = rank(queries, index, [c.caption_id for c in captions], threads=threads)
    members = frozenset(manifest.splits[split])
    report = report_from_ranking(
        ranked, [c.relevant_videos() & members for c in captions], keep_ranking=keep_ranking
    )
    if jaccard_k is not None and model.spaces > 1:
        report = report._replace(jaccard=jaccard_interspace(queries, index, jaccard_k))
    if with_attention and model.attentional:
        report = report._replace(attention=dataset_attention(model, manifest, store, split))
    return report


def dataset_attention(
    model: FusionModel, manifest: DatasetManifest, store: FeatureStore, split: str
) -> dict[str, dict[str, float]]:
    """Average attention weights over the videos and captions of a split."""
    captions = [c.caption_id for c in manifest.split_captions(split)]
    return average_attention_weights(
        model,
        video_inputs(store, model.config, manifest.splits[split]),
        text_inputs(store, model.config, captions),
    )


def select_features(
    weights: dict[str, dict[str, float]], config: ModelConfig, top_video: int, top_text: int
) -> ModelConfig:
    """Keep the ``top_*`` highest-weighted features per modality.

    Ties go to declaration order; kept features stay in declaration order.
    """
    kept = {}
    for side, feats, top in (
        ("video", config.video_features, top_video),
        ("text", config.text_features, top_text),
    ):
        if top < 1 or top > len(feats):
            raise ConfigError(f"top_{side} must be in [1, {len(feats)}], got {top}")
        side_weights = weights[side]
        ranked = sorted(
            range(len(feats)), key=lambda i, f=feats, w=side_weights: (-w[f[i].name], i)
        )
        chosen = set(ranked[:top])
        kept[side] = tuple(f for i, f in enumerate(feats) if i in chosen)
    return config._replace(video_features=kept["video"], text_features=kept["text"])


def write_ranking_tsv(path: str, ranked: Sequence[RankedList], top: int | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        for entry in ranked:
            rows = zip(entry.video_ids, entry.scores, strict=True)
            for pos, (vid, score) in enumerate(rows, start=1):
                if top is not None and pos > top:
                    break
                writer.writerow((entry.query_id, pos, vid, f"{score:.6f}"))
