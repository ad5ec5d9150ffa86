import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from logicl.errors import ConfigError, DegenerateInputError
from logicl.retrieval import MMRParams, RetrievalIndex, mmr_select, top_k_similar

from ref_impl import ref_mmr, ref_top_k


def random_index(rng, n, d=6):
    vectors = rng.normal(size=(n, d))
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    return RetrievalIndex([f"id{i:03d}" for i in range(n)], vectors)


def test_params_validation():
    with pytest.raises(ConfigError):
        MMRParams(lam=1.5)
    with pytest.raises(ConfigError):
        MMRParams(k=0)


class TestTopK:
    def test_exact_match_ranks_first(self):
        rng = np.random.default_rng(0)
        index = random_index(rng, 10)
        query = index.vectors[4].copy()
        ranked = top_k_similar(query, index, 3)
        assert ranked[0][0] == "id004"
        assert ranked[0][1] == pytest.approx(1.0, abs=1e-12)

    def test_k_larger_than_index(self):
        rng = np.random.default_rng(1)
        index = random_index(rng, 4)
        ranked = top_k_similar(rng.normal(size=6), index, 10)
        assert len(ranked) == 4
        sims = [s for _, s in ranked]
        assert sims == sorted(sims, reverse=True)

    def test_matches_brute_force_oracle(self):
        # 5 random vectors, k=3, plus larger instances up to |index| = 64
        for seed in range(50):
            rng = np.random.default_rng(seed)
            n = 5 if seed < 10 else int(rng.integers(2, 65))
            index = random_index(rng, n)
            query = rng.normal(size=index.vectors.shape[1])
            k = 3 if seed < 10 else int(rng.integers(1, n + 1))
            got = [sid for sid, _ in top_k_similar(query, index, k)]
            expected = ref_top_k(query, index.ids, [list(v) for v in index.vectors], k)
            assert got == expected, f"seed {seed}"

    def test_tie_break_by_insertion_order(self):
        v = np.array([1.0, 0.0])
        index = RetrievalIndex(["b", "a", "c"], np.stack([v, v, v]))
        assert [sid for sid, _ in top_k_similar(v, index, 3)] == ["b", "a", "c"]

    def test_empty_index_rejected(self):
        index = RetrievalIndex([], np.zeros((0, 3)))
        with pytest.raises(DegenerateInputError):
            top_k_similar(np.ones(3), index, 1)


class TestMMR:
    def test_lambda_one_reduces_to_top_k(self):
        for seed in range(50):
            rng = np.random.default_rng(100 + seed)
            n = int(rng.integers(2, 40))
            index = random_index(rng, n)
            query = rng.normal(size=index.vectors.shape[1])
            k = int(rng.integers(1, n + 1))
            knn = [sid for sid, _ in top_k_similar(query, index, k)]
            assert mmr_select(query, index, MMRParams(lam=1.0, k=k)) == knn, f"seed {seed}"

    def test_hand_derived_three_candidate_case(self):
        # Prescribed cosines: sim(q,d1)=0.9, sim(q,d2)=0.85, sim(q,d3)=0.2,
        # sim(d1,d2)=0.95, sim(d1,d3)=sim(d2,d3)=0.1. With lam=0.5, k=2 the
        # second pick scores d2 at 0.5*0.85-0.5*0.95 = -0.05 and d3 at
        # 0.5*0.2-0.5*0.1 = 0.05, so selection is d1 then d3.
        G = np.array(
            [
                [1.0, 0.9, 0.85, 0.2],
                [0.9, 1.0, 0.95, 0.1],
                [0.85, 0.95, 1.0, 0.1],
                [0.2, 0.1, 0.1, 1.0],
            ]
        )
        L = np.linalg.cholesky(G + 1e-12 * np.eye(4))
        query, d1, d2, d3 = L
        index = RetrievalIndex(["d1", "d2", "d3"], np.stack([d1, d2, d3]))
        assert mmr_select(query, index, MMRParams(lam=0.5, k=2)) == ["d1", "d3"]
        # cross-check every step against the literal greedy evaluator
        assert ref_mmr(query, index.ids, [list(v) for v in index.vectors], 0.5, 2) == ["d1", "d3"]

    def test_matches_literal_greedy_evaluator(self):
        for seed in range(30):
            rng = np.random.default_rng(200 + seed)
            n = int(rng.integers(3, 20))
            index = random_index(rng, n)
            query = rng.normal(size=index.vectors.shape[1])
            params = MMRParams(lam=float(rng.uniform(0, 1)), k=int(rng.integers(1, n + 1)))
            got = mmr_select(query, index, params)
            expected = ref_mmr(
                query, index.ids, [list(v) for v in index.vectors], params.lam, params.k
            )
            assert got == expected, f"seed {seed}"

    def test_degenerate_identical_candidates(self):
        v = np.array([1.0, 0.0])
        index = RetrievalIndex(["x", "y", "z"], np.stack([v, v, v]))
        # After the first pick every remaining candidate scores -max-sim = -1;
        # selection proceeds by tie-break order.
        assert mmr_select(v, index, MMRParams(lam=0.0, k=3)) == ["x", "y", "z"]

    @given(st.integers(min_value=0, max_value=500))
    @settings(max_examples=40)
    def test_no_duplicates_and_length(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 24))
        index = random_index(rng, n)
        query = rng.normal(size=index.vectors.shape[1])
        k = int(rng.integers(1, 12))
        out = mmr_select(query, index, MMRParams(lam=0.6, k=k))
        assert len(out) == len(set(out)) == min(k, n)

    def test_greedy_prefix_property(self):
        for seed in range(20):
            rng = np.random.default_rng(300 + seed)
            index = random_index(rng, 12)
            query = rng.normal(size=index.vectors.shape[1])
            lam = float(rng.uniform(0, 1))
            full = mmr_select(query, index, MMRParams(lam=lam, k=8))
            for m in range(1, 9):
                assert mmr_select(query, index, MMRParams(lam=lam, k=m)) == full[:m]

    def test_empty_index_rejected(self):
        index = RetrievalIndex([], np.zeros((0, 3)))
        with pytest.raises(DegenerateInputError):
            mmr_select(np.ones(3), index, MMRParams())


def test_index_invariants():
    with pytest.raises(ConfigError):
        RetrievalIndex(["a", "a"], np.ones((2, 3)))
    with pytest.raises(ConfigError):
        RetrievalIndex(["a"], np.ones((2, 3)))
    with pytest.raises(DegenerateInputError):
        RetrievalIndex(["a", "b"], np.array([[1.0, 0.0], [0.0, 0.0]]))
