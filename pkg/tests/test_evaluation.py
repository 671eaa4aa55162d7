"""One-shot episodes, KNN voting and the accuracy report."""
import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import resinsort.evaluation as ev
from resinsort.evaluation import (
    EmbeddingIndex,
    EvalConfig,
    build_index,
    embed_images,
    knn_classify,
    knn_report,
    one_shot_accuracy,
    one_shot_episode,
    pick,
    siamese_dissimilarity,
)
from resinsort.nets import SiameseModel, TripletModel, TrunkConfig

TINY = {"input_shape": [8, 8, 3], "embedding_width": 4, "layers": [
    {"type": "conv", "filters": 2, "kernel": 3, "stride": 1, "padding": 0},
    {"type": "relu"},
    {"type": "fc", "units": 4},
]}

TRIPLET = SimpleNamespace(kind="triplet")


def knn_oracle(emb, labels, q, k):
    """Full sort by (distance, row); majority vote, ties to the nearest tied class."""
    d = [(math.dist(emb[q], emb[i]), i) for i in range(len(emb)) if i != q]
    nearest = [labels[i] for _, i in sorted(d)[:k]]
    counts = {c: nearest.count(c) for c in nearest}
    top = max(counts.values())
    return next(c for c in nearest if counts[c] == top)


def make_index(emb, labels):
    return EmbeddingIndex(np.asarray(emb, float), np.asarray(labels), [f"r{i}" for i in range(len(labels))])


class TestKnn:
    @pytest.mark.parametrize("k", [1, 3, 5, 7])
    def test_matches_full_sort_oracle(self, rng, k):
        emb, labels = rng.normal(size=(60, 4)), rng.integers(0, 4, 60)
        index = make_index(emb, labels)
        for q in range(60):
            assert knn_classify(index, q, k) == knn_oracle(emb, list(labels), q, k)

    def test_k1_is_nearest_neighbour(self, rng):
        emb = rng.normal(size=(20, 3))
        index = make_index(emb, np.arange(20))
        for q in range(20):
            d = np.linalg.norm(emb - emb[q], axis=1)
            d[q] = np.inf
            assert knn_classify(index, q, 1) == int(np.argmin(d))

    def test_excludes_query(self):
        index = make_index([[0.0], [0.0], [1.0], [1.1]], [0, 1, 1, 1])
        assert knn_classify(index, 0, 1) == 1

    def test_majority(self):
        index = make_index([[0.0], [1.0], [2.0], [3.0]], [9, 0, 0, 1])
        assert knn_classify(index, 0, 3) == 0

    def test_tie_goes_to_nearest_class(self):
        index = make_index([[0.0], [1.0], [2.0], [3.0], [4.0]], [9, 1, 0, 1, 0])
        assert knn_classify(index, 0, 4) == 1

    def test_lookup_by_id(self):
        index = make_index([[0.0], [1.0], [5.0]], [0, 0, 1])
        assert knn_classify(index, "r2", 1) == 0
        with pytest.raises(KeyError):
            knn_classify(index, "missing", 1)

    def test_k_bounds(self):
        index = make_index([[0.0], [1.0], [2.0]], [0, 0, 1])
        with pytest.raises(ValueError):
            knn_classify(index, 0, 3)
        with pytest.raises(ValueError):
            knn_classify(index, 0, 0)

    @given(st.integers(0, 10_000), st.sampled_from([1, 3, 5]))
    def test_permutation_invariant(self, seed, k):
        r = np.random.default_rng(seed)
        emb, labels = r.normal(size=(25, 3)), r.integers(0, 3, 25)
        perm = r.permutation(25)
        a = make_index(emb, labels)
        b = make_index(emb[perm], labels[perm])
        inv = np.argsort(perm)
        for q in range(25):
            assert knn_classify(a, q, k) == knn_classify(b, int(inv[q]), k)


class TestKnnReport:
    def test_shape_and_columns(self, rng):
        index = make_index(rng.normal(size=(40, 3)), np.repeat(np.arange(4), 10))
        report = knn_report(index, range(40), class_names=["a", "b", "c", "d"])
        assert report.header == ["K", "a", "b", "c", "d", "Average", "Overall"]
        assert [row[0] for row in report.table_rows()] == [3, 5, 7]
        assert all(len(row) == 7 for row in report.table_rows())
        assert report.to_csv().splitlines()[0] == "K,a,b,c,d,Average,Overall"

    def test_weighted_class_mean_is_overall(self, rng):
        labels = np.array([0] * 5 + [1] * 15 + [2] * 10)
        index = make_index(rng.normal(size=(30, 2)), labels)
        report = knn_report(index, range(30))
        counts = np.array(report.class_counts)
        for pc, ov, avg in zip(report.per_class, report.overall, report.average):
            assert np.dot(pc, counts) / counts.sum() == pytest.approx(ov)
            assert np.mean(pc) == pytest.approx(avg)

    def test_separated_clusters_are_perfect(self, rng):
        centers = np.eye(3) * 10
        labels = np.repeat(np.arange(3), 8)
        index = make_index(centers[labels] + 0.1 * rng.normal(size=(24, 3)), labels)
        report = knn_report(index, range(24))
        assert report.average == [1.0, 1.0, 1.0]
        assert report.table_rows()[0] == [3, "100.00", "100.00", "100.00", "100.00", "100.00"]

    def test_absent_class_is_blank(self):
        index = make_index([[0.0], [0.1], [0.2], [5.0], [5.1]], [0, 0, 0, 1, 1])
        report = knn_report(index, [0, 1, 2], ks=(1,))
        assert report.table_rows()[0][2] == ""
        assert report.average == [1.0]

    def test_candidates_restrict_neighbours(self):
        index = make_index([[0.0], [0.1], [1.0], [1.05]], [0, 1, 0, 1])
        # with every row, the query's nearest is row 1 (class 1)
        assert knn_report(index, [0], ks=(1,)).overall == [0.0]
        assert knn_report(index, [0], ks=(1,), candidate_rows=[2, 3]).overall == [1.0]
        with pytest.raises(ValueError):
            knn_report(index, [0], ks=(3,), candidate_rows=[2, 3])

    def test_text_table(self, rng):
        index = make_index(rng.normal(size=(12, 2)), np.repeat([0, 1], 6))
        lines = knn_report(index, range(12), ks=(3,)).to_text().splitlines()
        assert len(lines) == 3 and set(lines[1]) <= {"-", " "}


class TestOneShot:
    def test_one_hot_embeddings_are_perfect(self):
        labels = np.repeat(np.arange(5), 6)
        index = make_index(np.eye(5)[labels], labels)
        acc = one_shot_accuracy(TRIPLET, index, range(30), EvalConfig(n_way=5, episodes=200))
        assert acc == 1.0

    def test_random_embeddings_are_at_chance(self):
        r = np.random.default_rng(8)
        labels = np.repeat(np.arange(5), 40)
        index = make_index(r.normal(size=(200, 8)), labels)
        n = 2000
        acc = one_shot_accuracy(TRIPLET, index, range(200), EvalConfig(n_way=5, episodes=n, seed=3))
        assert abs(acc - 0.2) <= 3 * math.sqrt(0.2 * 0.8 / n)

    def test_single_way_is_always_right(self, rng):
        labels = np.repeat(np.arange(3), 4)
        index = make_index(rng.normal(size=(12, 3)), labels)
        assert one_shot_accuracy(TRIPLET, index, range(12), EvalConfig(n_way=1)) == 1.0

    def test_default_one_episode_per_query(self, rng, monkeypatch):
        calls = []
        real = ev.episode_scores
        monkeypatch.setattr(ev, "episode_scores", lambda *a: (calls.append(1), real(*a))[1])
        labels = np.repeat(np.arange(3), 5)
        one_shot_accuracy(TRIPLET, make_index(rng.normal(size=(15, 2)), labels),
                          range(4), EvalConfig(n_way=3))
        assert len(calls) == 4

    def test_deterministic_under_seed(self, rng):
        labels = np.repeat(np.arange(5), 10)
        index = make_index(rng.normal(size=(50, 4)), labels)
        cfg = EvalConfig(episodes=300, seed=9)
        assert one_shot_accuracy(TRIPLET, index, range(50), cfg) == \
            one_shot_accuracy(TRIPLET, index, range(50), cfg)

    def test_too_many_ways(self, rng):
        index = make_index(rng.normal(size=(6, 2)), [0, 0, 1, 1, 2, 2])
        with pytest.raises(ValueError):
            one_shot_accuracy(TRIPLET, index, range(6), EvalConfig(n_way=4))

    def test_query_never_its_own_support(self):
        # the only other class-0 image is far away; using the query itself would score 0 distance
        index = make_index([[0.0], [9.0], [0.5]], [0, 0, 1])
        assert one_shot_accuracy(TRIPLET, index, [0], EvalConfig(n_way=2, episodes=5)) == 0.0

    def test_twin_support_wins(self, rng):
        model = TripletModel.create(config=TrunkConfig.from_dict(TINY), seed=1)
        query = rng.normal(size=(8, 8, 3))
        support = {0: rng.normal(size=(8, 8, 3)), 1: query.copy(), 2: rng.normal(size=(8, 8, 3))}
        assert one_shot_episode(model, query, support) == 1

    def test_siamese_twin_support_wins(self, rng):
        model = SiameseModel.create(config=TrunkConfig.from_dict(TINY), seed=1)
        # a negative head weight makes the output fall with distance
        model.head.weights.data[:] = -1.0
        query = rng.normal(size=(8, 8, 3))
        support = {0: rng.normal(size=(8, 8, 3)) * 3, 1: query.copy()}
        assert one_shot_episode(model, query, support) == 1
        assert one_shot_episode(model, query, support, polarity="greatest") == 0

    def test_siamese_dissimilarity_formula(self, rng):
        model = SiameseModel.create(config=TrunkConfig.from_dict(TINY), seed=2)
        q, s = rng.normal(size=4), rng.normal(size=(3, 4))
        w, b = model.head.weights.data[0], model.head.bias.data[0]
        expected = [1.0 - 1.0 / (1.0 + math.exp(-(w @ np.abs(q - row) + b))) for row in s]
        np.testing.assert_allclose(siamese_dissimilarity(model, q, s), expected, rtol=1e-12)

    def test_pick(self):
        assert pick([0.3, 0.1, 0.2]) == 1
        assert pick([0.3, 0.1, 0.2], "greatest") == 0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EvalConfig(knn_ks=(4,))
        with pytest.raises(ValueError):
            EvalConfig(polarity="middle")
        with pytest.raises(ValueError):
            EvalConfig(n_way=0)


class TestIndex:
    def test_build_index_and_chunking(self, rng):
        model = TripletModel.create(config=TrunkConfig.from_dict(TINY), seed=0)
        images = rng.normal(size=(7, 8, 8, 3))
        np.testing.assert_allclose(embed_images(model, images, chunk=3), model.embed(images), atol=1e-12)
        manifest = SimpleNamespace(records=[SimpleNamespace(id=f"i{k}") for k in range(7)],
                                   labels=lambda rows: np.array([k % 2 for k in rows]))
        index = build_index(model, manifest, images, rows=[1, 4, 6])
        assert index.ids == ["i1", "i4", "i6"] and list(index.labels) == [1, 0, 0]

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            EmbeddingIndex(np.zeros((2, 2)), [0], ["a", "b"])

    def test_subset(self, rng):
        index = make_index(rng.normal(size=(5, 2)), [0, 1, 2, 3, 4])
        sub = index.subset([4, 0])
        assert sub.ids == ["r4", "r0"] and list(sub.labels) == [4, 0]
