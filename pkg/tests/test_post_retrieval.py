import numpy as np
import pytest

from qpp.core import (
    EmbeddingStore,
    RankedList,
    RetrievalConfig,
    Similarity,
)
from qpp.errors import EmptyList, UnknownDocId
from qpp.post_retrieval import (
    RemovalResult,
    adapted_query_feedback,
    aqf_predictor,
    embedding_variance,
    embedding_variance_predictor,
    iterative_feature_removal,
    median_image,
    removal_predictor,
    score_variance,
    score_variance_predictor,
)
from qpp.retrieval import rank, rank_all
from tests.conftest import random_store


def mk_ranked(ids, scores=None, query_id="q"):
    if scores is None:
        scores = np.arange(len(ids), 0, -1, dtype=np.float64)
    return RankedList(query_id, tuple(ids), np.asarray(scores, dtype=np.float64))


def int_store(n, dim, rng, zero_row=False):
    """Integer-grid embeddings keep every similarity bit-exact, so the

    brute-force oracle and the incremental engine agree to the last ulp."""
    vecs = rng.integers(-2, 3, size=(n, dim)).astype(np.float32)
    if zero_row:
        vecs[0] = 0.0
    ids = [f"d{i:03d}" for i in range(n)]
    return EmbeddingStore.create(ids, vecs)


def unit_grid_query(dim, rng):
    """Four +-1 entries: the L2 norm is exactly 2, so normalizing stays exact."""
    q = np.zeros(dim)
    pos = rng.choice(dim, size=4, replace=False)
    q[pos] = rng.choice([-1.0, 1.0], size=4)
    return q


def oracle_removal(query_vec, collection, cfg, m, l):
    """Literal restatement with explicit zeroed matrices, no incremental state."""
    q = np.asarray(query_vec, dtype=np.float64).copy()
    if cfg.similarity is Similarity.COSINE:
        nrm = np.linalg.norm(q)
        if nrm > 0:
            q = q / nrm
    v = collection.vectors.astype(np.float64).copy()
    removed = np.zeros(collection.dim, dtype=bool)

    def topset():
        dots = v @ q
        row_sq = np.einsum("ij,ij->i", v, v)
        q_sq = float(q @ q)
        if cfg.similarity is Similarity.COSINE:
            denom = np.sqrt(np.maximum(row_sq, 0.0)) * np.sqrt(max(q_sq, 0.0))
            with np.errstate(divide="ignore", invalid="ignore"):
                sims = np.where(denom > 0.0, dots / denom, -np.inf)
        else:
            sims = -np.sqrt(np.maximum(row_sq - 2.0 * dots + q_sq, 0.0))
        order = sorted(
            (i for i in range(len(collection)) if np.isfinite(sims[i])),
            key=lambda i: (-sims[i], collection.ids[i]),
        )
        return order[: cfg.k]

    sets = [frozenset(topset())]
    for _ in range(l):
        if removed.all() or float(q @ q) <= 0.0 or not sets[-1]:
            break
        colsum = v[list(sets[-1])].sum(axis=0)
        dim_scores = q * colsum
        dim_scores[removed] = -np.inf
        take = min(m, int((~removed).sum()))
        hot = np.argsort(-dim_scores, kind="stable")[:take]
        q[hot] = 0.0
        v[:, hot] = 0.0
        removed[hot] = True
        sets.append(frozenset(topset()))
        if removed.all() or float(q @ q) <= 0.0:
            break
    union = set().union(*sets)
    inter = set(sets[0])
    for s in sets[1:]:
        inter &= s
    return 1.0 if not union else len(inter) / len(union)


class TestScoreVariance:
    def test_hand_value(self):
        rl = mk_ranked(["a", "b", "c"], [0.9, 0.7, 0.5])
        # mean 0.7, squared deviations 0.04, 0, 0.04
        assert score_variance(rl) == pytest.approx((0.04 + 0.0 + 0.04) / 3.0)

    def test_population_not_sample(self):
        rl = mk_ranked(["a", "b"], [1.0, 0.0])
        assert score_variance(rl) == pytest.approx(0.25)  # not 0.5

    def test_constant_scores_zero(self):
        rl = mk_ranked(["a", "b", "c"], [0.4, 0.4, 0.4])
        assert score_variance(rl) == 0.0

    def test_matches_numpy(self):
        rng = np.random.default_rng(0)
        scores = np.sort(rng.normal(size=30))[::-1]
        rl = mk_ranked([f"d{i}" for i in range(30)], scores)
        assert score_variance(rl) == pytest.approx(float(np.var(scores)), rel=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(EmptyList):
            score_variance(RankedList("q", (), np.zeros(0)))


class TestMedianImage:
    def test_euclidean_closest_to_mean(self):
        store = EmbeddingStore.create(
            ["x", "y", "z"], np.array([[0.0], [1.0], [5.0]], dtype=np.float32)
        )
        # mean 2.0; nearest point is y at distance 1
        assert median_image(mk_ranked(["x", "y", "z"]), store, Similarity.NEG_EUCLIDEAN) == "y"

    def test_cosine_mode_uses_direction(self):
        r2 = 1.0 / np.sqrt(2.0)
        store = EmbeddingStore.create(
            ["e1", "e2", "mid"],
            np.array([[1, 0], [0, 1], [r2, r2]], dtype=np.float32),
        )
        assert median_image(mk_ranked(["e1", "e2", "mid"]), store, Similarity.COSINE) == "mid"

    def test_tie_resolves_to_lowest_id(self):
        store = EmbeddingStore.create(
            ["b", "a"], np.array([[0.0], [2.0]], dtype=np.float32)
        )
        # mean 1.0, both at distance 1
        assert median_image(mk_ranked(["a", "b"]), store, Similarity.NEG_EUCLIDEAN) == "a"

    def test_zero_mean_cosine_degenerates_to_lowest_id(self):
        store = EmbeddingStore.create(
            ["p", "n"], np.array([[1.0, 0.0], [-1.0, 0.0]], dtype=np.float32)
        )
        assert median_image(mk_ranked(["n", "p"]), store, Similarity.COSINE) == "n"

    def test_unknown_id_rejected(self):
        store = random_store(3, 2, seed=1)
        with pytest.raises(UnknownDocId):
            median_image(mk_ranked(["ghost"]), store, Similarity.COSINE)


class TestEmbeddingVariance:
    def test_identical_rows_zero(self):
        store = EmbeddingStore.create(
            ["a", "b", "c"], np.ones((3, 4), dtype=np.float32)
        )
        assert embedding_variance(mk_ranked(["a", "b", "c"]), store) == 0.0

    def test_matches_definition(self):
        store = random_store(20, 6, seed=2, normalized=False)
        rl = mk_ranked(store.ids[:9])
        rows = np.array([store.row(i) for i in rl.ids], dtype=np.float64)
        mean = rows.mean(axis=0)
        expect = float(np.mean(((rows - mean) ** 2).sum(axis=1)))
        assert embedding_variance(rl, store) == pytest.approx(expect, rel=1e-12)

    def test_hand_value(self):
        store = EmbeddingStore.create(
            ["a", "b"], np.array([[0.0, 0.0], [2.0, 0.0]], dtype=np.float32)
        )
        # mean (1,0); each point at squared distance 1
        assert embedding_variance(mk_ranked(["a", "b"]), store) == pytest.approx(1.0)


class TestAdaptedQueryFeedback:
    def test_whole_collection_retrieved_gives_one(self):
        store = random_store(5, 4, seed=3, normalized=False)
        cfg = RetrievalConfig(Similarity.NEG_EUCLIDEAN, k=5)
        rl = rank("q", np.zeros(4), store, cfg)
        assert adapted_query_feedback(rl, store, cfg) == 1.0

    def test_half_overlap_construction(self):
        # 1-D points a=-10 b=0 c=1 d=2, query -4, k=3:
        # original {a,b,c}; median b requeries to {b,c,d}; IoU 2/4
        store = EmbeddingStore.create(
            ["a", "b", "c", "d"],
            np.array([[-10.0], [0.0], [1.0], [2.0]], dtype=np.float32),
        )
        cfg = RetrievalConfig(Similarity.NEG_EUCLIDEAN, k=3)
        rl = rank("q", np.array([-4.0]), store, cfg)
        assert set(rl.ids) == {"a", "b", "c"}
        assert adapted_query_feedback(rl, store, cfg) == pytest.approx(0.5)

    def test_minimal_overlap_construction(self):
        # k=2: original {a,b}, feedback from a lands on {a,z}; IoU 1/3
        store = EmbeddingStore.create(
            ["a", "b", "w", "z"],
            np.array([[10.0], [-8.0], [30.0], [12.0]], dtype=np.float32),
        )
        cfg = RetrievalConfig(Similarity.NEG_EUCLIDEAN, k=2)
        rl = rank("q", np.array([1.0]), store, cfg)
        assert set(rl.ids) == {"a", "b"}
        assert adapted_query_feedback(rl, store, cfg) == pytest.approx(1.0 / 3.0)

    def test_bounds_random(self):
        collection = random_store(60, 8, seed=4)
        queries = random_store(10, 8, seed=5, prefix="q")
        cfg = RetrievalConfig(Similarity.COSINE, k=10)
        for rl in rank_all(queries, collection, cfg):
            v = adapted_query_feedback(rl, collection, cfg)
            assert 0.0 < v <= 1.0  # median is in both sets, so IoU > 0


class TestIterativeFeatureRemoval:
    def test_l_zero_is_stable(self):
        store = random_store(10, 6, seed=6, normalized=False)
        cfg = RetrievalConfig(Similarity.NEG_EUCLIDEAN, k=4)
        result = iterative_feature_removal("q", np.ones(6), store, cfg, m=2, l=0)
        assert result == RemovalResult(score=1.0, iterations_run=0, exhausted=False)

    @pytest.mark.parametrize("similarity", list(Similarity))
    def test_matches_bruteforce_oracle(self, similarity):
        rng = np.random.default_rng(17)
        cfg = RetrievalConfig(similarity, k=5)
        for trial in range(30):
            store = int_store(30, 24, rng, zero_row=(trial % 3 == 0))
            if similarity is Similarity.COSINE:
                q = unit_grid_query(24, rng)
            else:
                q = rng.integers(-2, 3, size=24).astype(np.float64)
            expect = oracle_removal(q, store, cfg, m=4, l=4)
            got = iterative_feature_removal("q", q, store, cfg, m=4, l=4)
            assert got.score == expect, f"trial {trial}"

    def test_score_bounds_random(self):
        rng = np.random.default_rng(23)
        cfg = RetrievalConfig(Similarity.COSINE, k=8)
        for trial in range(20):
            store = random_store(40, 32, seed=200 + trial)
            q = rng.normal(size=32)
            r = iterative_feature_removal("q", q, store, cfg, m=6, l=5)
            assert 0.0 <= r.score <= 1.0
            assert r.iterations_run <= 5

    def test_exhaustion_flagged_when_dims_run_out(self):
        # 4 dims, m=3: round 1 removes 3, round 2 removes the last and stops
        store = int_store(12, 4, np.random.default_rng(5))
        cfg = RetrievalConfig(Similarity.NEG_EUCLIDEAN, k=4)
        r = iterative_feature_removal("q", np.ones(4), store, cfg, m=3, l=5)
        assert r.exhausted
        assert r.iterations_run == 2

    def test_full_budget_not_exhausted(self):
        store = random_store(20, 64, seed=7, normalized=False)
        cfg = RetrievalConfig(Similarity.NEG_EUCLIDEAN, k=5)
        r = iterative_feature_removal(
            "q", np.random.default_rng(1).normal(size=64), store, cfg, m=4, l=3
        )
        assert not r.exhausted
        assert r.iterations_run == 3

    def test_docs_that_lose_all_support_are_dropped_not_crashed(self):
        # doc "z" lives only on the first two query dims; removing them must
        # not produce NaN similarities under COSINE
        vecs = np.array(
            [
                [9, 9, 0, 0, 0, 0, 0, 0],
                [8, 7, 1, 1, 0, 0, 0, 0],
                [1, 1, 2, 2, 1, 0, 0, 0],
                [0, 1, 1, 2, 2, 1, 0, 0],
                [2, 0, 1, 1, 0, 2, 1, 0],
            ],
            dtype=np.float32,
        )
        store = EmbeddingStore.create(["z", "b", "c", "d", "e"], vecs)
        q = np.zeros(8)
        q[[0, 1, 2, 3]] = 1.0  # norm exactly 2
        cfg = RetrievalConfig(Similarity.COSINE, k=3)
        r = iterative_feature_removal("q", q, store, cfg, m=2, l=2)
        assert np.isfinite(r.score)
        assert 0.0 <= r.score <= 1.0


class TestPredictorWrappers:
    def test_shapes_names_orientations(self, cluster_corpus):
        collection, queries, _, _, _ = cluster_corpus
        cfg = RetrievalConfig(Similarity.COSINE, k=10)
        rankings = rank_all(queries, collection, cfg)

        sv = score_variance_predictor(rankings)
        ev = embedding_variance_predictor(rankings, collection)
        aqf = aqf_predictor(rankings, collection, cfg)
        rem, details = removal_predictor(queries, collection, cfg, m=8, l=2)

        assert sv.name == "score_variance"
        assert ev.name == "embedding_variance"
        assert aqf.name == "adapted_query_feedback"
        assert rem.name == "feature_removal"
        for out in (sv, ev, aqf, rem):
            assert set(out.scores) == set(queries.ids)
        assert set(details) == set(queries.ids)
        assert all(isinstance(d, RemovalResult) for d in details.values())

    def test_workers_do_not_change_values(self, cluster_corpus):
        collection, queries, _, _, _ = cluster_corpus
        cfg = RetrievalConfig(Similarity.COSINE, k=10)
        rankings = rank_all(queries, collection, cfg)
        seq = aqf_predictor(rankings, collection, cfg)
        par = aqf_predictor(rankings, collection, cfg, workers=4)
        assert seq.scores == par.scores
        rem_seq, _ = removal_predictor(queries, collection, cfg, m=8, l=2)
        rem_par, _ = removal_predictor(queries, collection, cfg, m=8, l=2, workers=4)
        assert rem_seq.scores == rem_par.scores
