"""Tests for ranking, retrieval metrics, Jaccard diagnostics and feature selection."""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.blocks import BlockInput
from src.errors import ConfigError, DegenerateInputError, UnsupportedOperationError
from src.evalkit import (
    EmbeddingIndex,
    average_precision,
    build_index,
    encode_queries,
    evaluate,
    jaccard,
    jaccard_interspace,
    mean_ap,
    median_rank,
    rank,
    recall_at_k,
    report_from_ranking,
    select_features,
    write_ranking_tsv,
)
from src.model import FusionModel, ModelConfig
from src.synth import SynthSpec, synth_generate

IDS = ("a", "b", "c", "d", "e", "f")


def _list_with_hit_at(position, relevant="x"):
    """Six-item ranked list whose ``position`` (1-based) holds the relevant id."""
    items = list(IDS[:5])
    items.insert(position - 1, relevant)
    return items


def _unit(rows):
    rows = np.asarray(rows, dtype=np.float64)
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


class TestMetrics:
    def test_recall_hand_case(self):
        ranked = [_list_with_hit_at(1), _list_with_hit_at(6), _list_with_hit_at(5)]
        relevance = [frozenset({"x"})] * 3
        assert recall_at_k(ranked, relevance, 5) == pytest.approx(2 / 3)

    def test_recall_full_depth(self):
        ranked = [_list_with_hit_at(p) for p in (1, 4, 6)]
        assert recall_at_k(ranked, [frozenset({"x"})] * 3, 6) == 1.0

    def test_recall_monotone(self):
        ranked = [_list_with_hit_at(p) for p in (2, 3, 5, 6)]
        relevance = [frozenset({"x"})] * 4
        values = [recall_at_k(ranked, relevance, k) for k in range(1, 7)]
        assert values == sorted(values)

    def test_recall_needs_positive_k(self):
        with pytest.raises(ConfigError):
            recall_at_k([["x"]], [frozenset({"x"})], 0)

    def test_recall_any_hit(self):
        ranked = [["a", "b", "c"]]
        assert recall_at_k(ranked, [frozenset({"c", "b"})], 2) == 1.0

    def test_median_odd(self):
        ranked = [_list_with_hit_at(p) for p in (1, 3, 6)]
        assert median_rank(ranked, [frozenset({"x"})] * 3) == 3

    def test_median_even_is_lower(self):
        ranked = [_list_with_hit_at(p) for p in (2, 4)]
        assert median_rank(ranked, [frozenset({"x"})] * 2) == 2

    def test_median_best_case(self):
        ranked = [_list_with_hit_at(1)] * 3
        assert median_rank(ranked, [frozenset({"x"})] * 3) == 1

    def test_median_uses_best_relevant(self):
        assert median_rank([["a", "b", "c"]], [frozenset({"c", "b"})]) == 2

    def test_ap_perfect(self):
        assert average_precision(["x", "a"], frozenset({"x"})) == 1.0

    def test_ap_two_relevant(self):
        assert average_precision(["x", "a", "b", "y"], frozenset({"x", "y"})) == 0.75

    def test_ap_single_at_three(self):
        assert average_precision(["a", "b", "x"], frozenset({"x"})) == pytest.approx(1 / 3)

    def test_map_is_mean(self):
        ranked = [["x", "a"], ["a", "x"]]
        assert mean_ap(ranked, [frozenset({"x"})] * 2) == 0.75

    def test_no_queries(self):
        with pytest.raises(DegenerateInputError):
            mean_ap([], [])

    def test_length_mismatch(self):
        with pytest.raises(ConfigError):
            mean_ap([["x"]], [])


def _brute_force(query_embs, video_embs, video_ids, relevance):
    """Full similarity, naive sort and textbook metric formulas."""
    scores = np.mean([q @ v.T for q, v in zip(query_embs, video_embs, strict=True)], axis=0)
    lists = []
    for row in scores:
        order = sorted(range(len(video_ids)), key=lambda j, r=row: (-r[j], video_ids[j]))
        lists.append([video_ids[j] for j in order])
    first = []
    aps = []
    for videos, relevant in zip(lists, relevance, strict=True):
        positions = [i + 1 for i, v in enumerate(videos) if v in relevant]
        first.append(positions[0])
        precision_sum = 0.0
        for seen, pos in enumerate(positions, start=1):
            precision_sum += seen / pos
        aps.append(precision_sum / len(relevant))
    n = len(lists)
    recalls = {k: sum(1 for r in first if r <= k) / n for k in (1, 5, 10)}
    total_ap = 0.0
    for ap in aps:
        total_ap += ap
    return recalls, sorted(first)[(n - 1) // 2], total_ap / n


class TestBruteForce:
    @pytest.mark.parametrize("seed", range(20))
    def test_metrics_match_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n_q, n_v, h, d = rng.integers(1, 51), rng.integers(2, 51), rng.integers(1, 4), 3
        video_ids = tuple(f"vid{j:03d}" for j in rng.permutation(n_v))
        video_embs = [_unit(rng.standard_normal((n_v, d))) for _ in range(h)]
        query_embs = [_unit(rng.standard_normal((n_q, d))) for _ in range(h)]
        relevance = []
        for _ in range(n_q):
            picked = rng.choice(video_ids, size=rng.integers(1, min(3, n_v) + 1), replace=False)
            relevance.append(frozenset(str(v) for v in picked))
        ranked = rank(query_embs, EmbeddingIndex(video_ids, video_embs))
        report = report_from_ranking(ranked, relevance)
        recalls, medr, map_value = _brute_force(query_embs, video_embs, video_ids, relevance)
        assert (report.r1, report.r5, report.r10) == (recalls[1], recalls[5], recalls[10])
        assert report.median_rank == medr
        assert report.mean_ap == map_value


class TestRank:
    def test_self_query_first(self):
        rng = np.random.default_rng(0)
        videos = [_unit(rng.standard_normal((5, 4))) for _ in range(2)]
        queries = [v[3:4] for v in videos]
        ranked = rank(queries, EmbeddingIndex(("a", "b", "c", "d", "e"), videos))
        assert ranked[0].video_ids[0] == "d"

    def test_ties_by_ascending_id(self):
        emb = _unit([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        ranked = rank([_unit([[1.0, 0.0]])], EmbeddingIndex(("zeta", "alpha", "mid"), [emb]))
        assert ranked[0].video_ids == ("alpha", "zeta", "mid")

    def test_hand_case_two_spaces(self):
        space0 = _unit([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        space1 = _unit([[0.0, 1.0], [1.0, 0.0], [-1.0, 0.0]])
        query = [_unit([[1.0, 0.0]]), _unit([[1.0, 0.0]])]
        # Mean cosines: v1 (1 + 0)/2 = 0.5, v2 (0 + 1)/2 = 0.5, v3 (0.707 - 1)/2 < 0.
        ranked = rank(query, EmbeddingIndex(("v1", "v2", "v3"), [space0, space1]))
        assert ranked[0].video_ids == ("v1", "v2", "v3")
        assert ranked[0].scores[0] == pytest.approx(0.5)
        assert ranked[0].scores[2] == pytest.approx((2**-0.5 - 1) / 2)

    def test_permutation_of_index(self):
        rng = np.random.default_rng(1)
        videos = [_unit(rng.standard_normal((7, 3)))]
        queries = [_unit(rng.standard_normal((4, 3)))]
        ranked = rank(queries, EmbeddingIndex(tuple("abcdefg"), videos))
        for entry in ranked:
            assert sorted(entry.video_ids) == list("abcdefg")

    def test_threads_give_same_order(self):
        rng = np.random.default_rng(2)
        videos = [_unit(rng.standard_normal((30, 4))) for _ in range(2)]
        queries = [_unit(rng.standard_normal((17, 4))) for _ in range(2)]
        index = EmbeddingIndex(tuple(f"v{i:02d}" for i in range(30)), videos)
        assert rank(queries, index, threads=4) == rank(queries, index, threads=1)

    def test_empty_index(self):
        with pytest.raises(DegenerateInputError, match="empty index"):
            rank([np.ones((1, 2))], EmbeddingIndex((), [np.zeros((0, 2))]))

    def test_space_count_mismatch(self):
        with pytest.raises(ConfigError):
            rank([np.ones((1, 2))] * 2, EmbeddingIndex(("a",), [np.ones((1, 2))]))

    def test_tsv_output(self, tmp_path):
        emb = _unit([[1.0, 0.0], [0.0, 1.0]])
        ranked = rank([emb], EmbeddingIndex(("a", "b"), [emb]), ["q1", "q2"])
        path = tmp_path / "rank.tsv"
        write_ranking_tsv(str(path), ranked, top=1)
        assert path.read_text() == "q1\t1\ta\t1.000000\nq2\t1\tb\t1.000000\n"


class TestJaccard:
    def test_set_arithmetic(self):
        assert jaccard(set("abcde"), set("abcfg")) == pytest.approx(3 / 7)

    def test_identical_spaces(self):
        rng = np.random.default_rng(3)
        emb = _unit(rng.standard_normal((10, 3)))
        query = _unit(rng.standard_normal((4, 3)))
        matrix = jaccard_interspace([query, query], EmbeddingIndex(tuple("abcdefghij"), [emb, emb]))
        assert matrix == [[1.0, 1.0], [1.0, 1.0]]

    def test_symmetric_unit_diagonal(self):
        rng = np.random.default_rng(4)
        spaces = [_unit(rng.standard_normal((12, 3))) for _ in range(3)]
        index = EmbeddingIndex(tuple(f"v{i}" for i in range(12)), spaces)
        queries = [_unit(rng.standard_normal((5, 3))) for _ in range(3)]
        matrix = np.array(jaccard_interspace(queries, index, k=5))
        np.testing.assert_array_equal(matrix, matrix.T)
        np.testing.assert_array_equal(np.diag(matrix), [1.0, 1.0, 1.0])
        assert np.all((matrix >= 0) & (matrix <= 1))

    def test_single_space_unsupported(self):
        with pytest.raises(UnsupportedOperationError):
            jaccard_interspace([np.ones((1, 2))], EmbeddingIndex(("a",), [np.ones((1, 2))]))


VIDEO_FEATS = (BlockInput("f1", 2), BlockInput("f2", 2), BlockInput("f3", 2))
TEXT_FEATS = (BlockInput("t1", 2), BlockInput("t2", 2))


class TestSelectFeatures:
    def _config(self):
        return ModelConfig(VIDEO_FEATS, TEXT_FEATS, spaces=1, total_dim=4)

    def test_identity_at_full_size(self):
        weights = {"video": {"f1": 0.2, "f2": 0.5, "f3": 0.3}, "text": {"t1": 0.4, "t2": 0.6}}
        assert select_features(weights, self._config(), 3, 2) == self._config()

    def test_keeps_heaviest(self):
        weights = {"video": {"f1": 0.6, "f2": 0.3, "f3": 0.1}, "text": {"t1": 0.4, "t2": 0.6}}
        reduced = select_features(weights, self._config(), 2, 1)
        assert [f.name for f in reduced.video_features] == ["f1", "f2"]
        assert [f.name for f in reduced.text_features] == ["t2"]

    def test_ties_follow_declaration_order(self):
        weights = {"video": {"f1": 0.2, "f2": 0.4, "f3": 0.4}, "text": {"t1": 0.5, "t2": 0.5}}
        reduced = select_features(weights, self._config(), 1, 1)
        assert [f.name for f in reduced.video_features] == ["f2"]
        assert [f.name for f in reduced.text_features] == ["t1"]

    def test_declaration_order_preserved(self):
        weights = {"video": {"f1": 0.1, "f2": 0.3, "f3": 0.6}, "text": {"t1": 0.5, "t2": 0.5}}
        reduced = select_features(weights, self._config(), 2, 2)
        assert [f.name for f in reduced.video_features] == ["f2", "f3"]

    @pytest.mark.parametrize(("top_video", "top_text"), [(0, 1), (1, 0), (4, 1)])
    def test_out_of_range(self, top_video, top_text):
        weights = {"video": {"f1": 0.2, "f2": 0.4, "f3": 0.4}, "text": {"t1": 0.5, "t2": 0.5}}
        with pytest.raises(ConfigError):
            select_features(weights, self._config(), top_video, top_text)


class TestEvaluate:
    def setup_method(self):
        self.store, self.manifest = synth_generate(SynthSpec(videos=40, latent_dim=4))
        config = ModelConfig(
            tuple(r.decl() for r in self.manifest.video_features),
            tuple(r.decl() for r in self.manifest.text_features),
            spaces=2,
            total_dim=8,
        )
        self.model = FusionModel(config, seed=0)

    def test_report_invariants(self):
        report = evaluate(self.model, self.manifest, self.store, "test", jaccard_k=5)
        assert 0.0 <= report.r1 <= report.r5 <= report.r10 <= 1.0
        assert report.median_rank >= 1
        assert 0.0 <= report.mean_ap <= 1.0
        assert report.queries == 8
        assert report.sum_recall == pytest.approx(100 * (report.r1 + report.r5 + report.r10))
        assert len(report.jaccard) == 2

    def test_report_keys(self):
        data = evaluate(
            self.model, self.manifest, self.store, "val", with_attention=True
        ).to_dict()
        assert {"r1", "r5", "r10", "median_rank", "map", "sum_recall", "attention"} <= set(data)

    def test_keep_ranking(self):
        report = evaluate(self.model, self.manifest, self.store, "val", keep_ranking=True)
        assert len(report.ranked) == 4
        assert len(report.ranked[0].video_ids) == 4

    def test_index_rows_match_videos(self):
        ids = self.manifest.splits["test"]
        index = build_index(self.model, self.store, ids)
        assert all(emb.shape == (len(ids), 4) for emb in index.embeddings)
        queries = encode_queries(self.model, self.store, ["v00000#0"])
        assert len(queries) == 2

    def test_relevant_videos_outside_split_ignored(self):
        train_video = self.manifest.splits["train"][0]
        members = set(self.manifest.splits["test"])
        captions = tuple(
            c._replace(relevant=(train_video,)) if c.video_id in members else c
            for c in self.manifest.captions
        )
        widened = self.manifest._replace(captions=captions)
        plain = evaluate(self.model, self.manifest, self.store, "test")
        assert evaluate(self.model, widened, self.store, "test") == plain
