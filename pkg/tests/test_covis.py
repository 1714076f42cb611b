import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from demslam.covis import (CovisGraph, LoopCandidate, TileHit,
                           read_candidate_log, rerank_vpr, select_covisible,
                           vote_submaps, write_candidate_log)
from demslam.errors import EmptyCandidate, SelfEdge


def hit(submap, s, chip=0):
    return TileHit(chip, submap, (0, 0), s)


class TestVoting:
    def test_hand_case(self):
        hits = [hit(0, 0.9), hit(0, 0.8), hit(1, 0.5)]
        scores = vote_submaps(hits)
        assert np.isclose(scores[0], 1.7) and np.isclose(scores[1], 0.5)
        assert scores[0] > scores[1]

    def test_no_hits_empty(self):
        assert vote_submaps([]) == {}

    def test_single_hit(self):
        assert vote_submaps([hit(3, 0.42)]) == {3: pytest.approx(0.42)}

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_permutation_invariance_and_additivity(self, seed):
        r = np.random.default_rng(seed)
        hits = [hit(int(r.integers(0, 5)), float(r.uniform(-1, 1)))
                for _ in range(30)]
        base = vote_submaps(hits)
        perm = [hits[i] for i in r.permutation(30)]
        assert {k: pytest.approx(v) for k, v in vote_submaps(perm).items()} == base
        # additivity over a disjoint split
        a, b = vote_submaps(hits[:11]), vote_submaps(hits[11:])
        merged = {k: a.get(k, 0.0) + b.get(k, 0.0) for k in set(a) | set(b)}
        for k, v in base.items():
            assert np.isclose(merged[k], v)

    def test_scaling_preserves_ranking(self, rng):
        # lam <= 1 keeps similarities inside the TileHit invariant
        lam = 0.37
        hits = [hit(int(rng.integers(0, 6)), float(rng.uniform(0.01, 1)))
                for _ in range(40)]
        base = vote_submaps(hits)
        scaled = vote_submaps([hit(h.submap_id, lam * h.similarity)
                               for h in hits])
        rank = lambda s: [k for k, _ in
                          sorted(s.items(), key=lambda kv: (-kv[1], kv[0]))]
        assert rank(base) == rank(scaled)
        for k in base:
            assert np.isclose(scaled[k], lam * base[k])

    def test_similarity_range_validated(self):
        with pytest.raises(ValueError):
            TileHit(0, 0, (0, 0), 1.5)


class TestSelect:
    def test_threshold(self):
        assert select_covisible({0: 1.7, 1: 0.5}, tau_s=1.0, top_k=10) == [0]

    def test_top_k_truncation(self, rng):
        scores = {i: float(rng.uniform(1, 2)) for i in range(15)}
        got = select_covisible(scores, tau_s=0.5, top_k=10)
        # oracle: plain sort
        expected = sorted(scores, key=lambda k: (-scores[k], k))[:10]
        assert got == expected

    def test_all_below_threshold(self):
        assert select_covisible({0: 0.1, 1: 0.2}, tau_s=1.0, top_k=5) == []

    def test_exclusion(self):
        got = select_covisible({0: 2.0, 1: 1.5}, 0.0, 5, exclude={0})
        assert got == [1]

    def test_tie_break_lower_id(self):
        got = select_covisible({5: 1.0, 2: 1.0, 9: 1.0}, 0.0, 2)
        assert got == [2, 5]

    def test_invariants(self, rng):
        scores = {i: float(rng.uniform(-1, 3)) for i in range(20)}
        got = select_covisible(scores, tau_s=0.7, top_k=6)
        assert len(got) <= 6
        assert all(scores[s] >= 0.7 for s in got)


class TestRerank:
    def test_self_similarity_is_maximal(self, rng):
        chips = rng.normal(size=(6, 8))
        chips /= np.linalg.norm(chips, axis=1, keepdims=True)
        others = rng.normal(size=(6, 8))
        others /= np.linalg.norm(others, axis=1, keepdims=True)
        self_score = rerank_vpr(chips, chips)
        other_score = rerank_vpr(chips, others)
        assert self_score >= other_score

    def test_orthogonal_near_zero(self):
        chips = np.eye(8)[:3]
        tiles = np.eye(8)[4:6]
        assert abs(rerank_vpr(chips, tiles)) < 1e-12

    def test_matches_exhaustive_pairwise_oracle(self, rng):
        chips = rng.normal(size=(5, 6))
        cands = [rng.normal(size=(7, 6)) for _ in range(3)]
        k = 3
        got = [rerank_vpr(chips, c, k_prime=k) for c in cands]
        expected = []
        for c in cands:
            total = 0.0
            for q in chips:
                sims = sorted(
                    float((q / np.linalg.norm(q)) @ (t / np.linalg.norm(t)))
                    for t in c)
                total += sum(sims[-k:])
            expected.append(total)
        assert np.allclose(got, expected, atol=1e-9)
        assert np.argsort(got).tolist() == np.argsort(expected).tolist()

    def test_empty_candidate(self):
        with pytest.raises(EmptyCandidate):
            rerank_vpr(np.ones((2, 4)), np.zeros((0, 4)))


class TestGraph:
    def test_single_insert(self):
        g = CovisGraph()
        g.update(1, [LoopCandidate(1, 0, 2.0, 3.0)])
        assert g.nodes == {0, 1}
        assert len(g.edges) == 1
        assert g.edges[(0, 1)]["vote_score"] == 2.0

    def test_reinsert_keeps_max(self):
        g = CovisGraph()
        g.update(1, [LoopCandidate(1, 0, 2.0, 3.0)])
        g.update(1, [LoopCandidate(1, 0, 1.0, 5.0)])
        assert g.edges[(0, 1)]["vote_score"] == 2.0
        assert g.edges[(0, 1)]["rerank_score"] == 5.0

    def test_replay_oracle(self, rng):
        # oracle: replay the same inserts into dict-of-max bookkeeping
        inserts = []
        for _ in range(5):
            q = int(rng.integers(0, 6))
            nb = int(rng.integers(0, 6))
            if nb == q:
                nb = (q + 1) % 6
            inserts.append((q, LoopCandidate(q, nb, float(rng.uniform(0, 2)),
                                             float(rng.uniform(0, 2)))))
        g = CovisGraph()
        expected_edges = {}
        expected_nodes = set()
        for q, cand in inserts:
            g.update(q, [cand])
            key = tuple(sorted((cand.query_submap, cand.neighbor_submap)))
            expected_nodes |= {q, cand.neighbor_submap}
            prev = expected_edges.get(key, {"vote_score": -np.inf,
                                            "rerank_score": -np.inf})
            expected_edges[key] = {
                "vote_score": max(prev["vote_score"], cand.vote_score),
                "rerank_score": max(prev["rerank_score"], cand.rerank_score)}
        assert g.nodes == expected_nodes
        assert g.edges.keys() == expected_edges.keys()
        for k in g.edges:
            assert g.edges[k] == pytest.approx(expected_edges[k])

    def test_self_edge_rejected(self):
        with pytest.raises(SelfEdge):
            LoopCandidate(2, 2, 1.0, 1.0)

    def test_graph_stays_simple(self, rng):
        g = CovisGraph()
        for _ in range(30):
            q = int(rng.integers(0, 5))
            nb = (q + 1 + int(rng.integers(0, 4))) % 5
            if nb == q:
                continue
            g.update(q, [LoopCandidate(q, nb, 1.0, 1.0)])
        for a, b in g.edges:
            assert a < b

    def test_json_round_trip(self, tmp_path):
        g = CovisGraph()
        g.update(1, [LoopCandidate(1, 0, 2.0, 3.0)])
        g.update(4, [LoopCandidate(4, 2, 1.0, 0.5)])
        path = tmp_path / "covis.json"
        g.save(path)
        loaded = CovisGraph.load(path)
        assert loaded.nodes == g.nodes
        assert loaded.edges == g.edges


def test_candidate_log_round_trip(tmp_path):
    cands = [LoopCandidate(3, 0, 1.25, 0.75, True),
             LoopCandidate(3, 1, 0.5, 0.25, False)]
    path = tmp_path / "candidates.csv"
    write_candidate_log(path, cands)
    loaded = read_candidate_log(path)
    assert [(c.query_submap, c.neighbor_submap, c.vote_score, c.rerank_score,
             c.accepted) for c in loaded] == \
           [(c.query_submap, c.neighbor_submap, c.vote_score, c.rerank_score,
             c.accepted) for c in cands]
