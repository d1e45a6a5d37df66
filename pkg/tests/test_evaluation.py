import logging

import numpy as np
import pytest

from kgembed import evaluation as ev
from kgembed.data import Query
from kgembed.model import build_model

from conftest import random_store, store_from_arrays


def line_model(store, positions, shift):
    """dim-1 translation model with hand-set coordinates: d = |pos_h - pos_t + shift|."""
    m = build_model("transe", store.num_entities, store.num_relations, 1,
                    p=1, dtype=np.float64)
    m.params["ent"] = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    m.params["rel"] = np.full((store.num_relations, 1), float(shift))
    return m


class TestTieRank:
    def test_unique_best_is_rank_one(self):
        for policy in ev.TIE_POLICIES:
            assert ev.tie_rank(0, 0, policy) == 1.0

    def test_policies_split_ties(self):
        assert ev.tie_rank(3, 2, "optimistic") == 4.0
        assert ev.tie_rank(3, 2, "pessimistic") == 6.0
        assert ev.tie_rank(3, 2, "mean") == 5.0

    def test_gold_tied_with_one_candidate(self):
        assert ev.tie_rank(0, 1, "optimistic") == 1.0
        assert ev.tie_rank(0, 1, "pessimistic") == 2.0
        assert ev.tie_rank(0, 1, "mean") == 1.5

    def test_unknown_policy(self):
        with pytest.raises(ValueError, match="tie policy"):
            ev.tie_rank(0, 0, "hopeful")


class TestSortRank:
    def test_agrees_with_counting(self):
        rng = np.random.default_rng(70)
        for _ in range(50):
            cand = rng.integers(0, 6, size=20).astype(np.float64)
            gold = float(rng.integers(0, 6))
            better = (cand < gold).sum()
            ties = (cand == gold).sum()
            for policy in ev.TIE_POLICIES:
                assert ev.sort_rank(cand, gold, policy) == \
                    ev.tie_rank(better, ties, policy)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(71)
        cand = rng.normal(size=30)
        gold = cand[4]
        for f in (lambda x: 2 * x + 5, np.exp, lambda x: x ** 3):
            for policy in ev.TIE_POLICIES:
                assert ev.sort_rank(f(cand), f(np.array(gold)), policy) == \
                    ev.sort_rank(cand, gold, policy)


class TestRankQuery:
    def make_line_setup(self):
        # entities on a line at 0..4, r shifts by +1; d(h=0 -> t) = |1 - t|
        store = store_from_arrays(
            [(0, 0, 1), (0, 0, 2)], test=[(0, 0, 3)],
            num_entities=5, num_relations=1,
        )
        return store, line_model(store, [0, 1, 2, 3, 4], 1.0)

    def test_filtering_removes_known_competitor(self):
        store, m = self.make_line_setup()
        q = Query(0, 0, 3, "tail")
        # unfiltered pool {0,1,2,4}: scores {1,0,1,3}, gold d=2 -> rank 4
        res = ev.rank_query(m, store, q, protocol="candidate-set",
                            candidates=np.array([0, 1, 2, 4]))
        assert res.rank == 4.0
        # filtered-full drops the known-true tails 1 and 2 -> pool {0,4}
        res = ev.rank_query(m, store, q)
        assert res.rank == 2.0
        assert res.num_candidates == 3

    def test_tied_gold_across_policies(self):
        # gold t=0 and candidate t=2 both sit at distance 1
        store, m = self.make_line_setup()
        q = Query(0, 0, 0, "tail")
        got = {
            pol: ev.rank_query(m, store, q, protocol="candidate-set",
                               candidates=np.array([2, 3, 4]),
                               tie_policy=pol).rank
            for pol in ev.TIE_POLICIES
        }
        assert got == {"optimistic": 1.0, "pessimistic": 2.0, "mean": 1.5}

    def test_gold_in_candidate_set_dropped_with_warning(self, caplog):
        store, m = self.make_line_setup()
        q = Query(0, 0, 3, "tail")
        with caplog.at_level(logging.WARNING, logger="kgembed.evaluation"):
            res = ev.rank_query(m, store, q, protocol="candidate-set",
                                candidates=np.array([0, 3, 4]))
        assert any("candidate set" in r.message for r in caplog.records)
        clean = ev.rank_query(m, store, q, protocol="candidate-set",
                              candidates=np.array([0, 4]))
        assert res.rank == clean.rank
        assert res.num_candidates == 3

    def test_empty_candidates_rejected(self):
        store, m = self.make_line_setup()
        q = Query(0, 0, 3, "tail")
        with pytest.raises(ValueError, match="empty candidate"):
            ev.rank_query(m, store, q, protocol="candidate-set",
                          candidates=np.array([3]))

    def test_bad_protocol_and_missing_candidates(self):
        store, m = self.make_line_setup()
        q = Query(0, 0, 3, "tail")
        with pytest.raises(ValueError, match="protocol"):
            ev.rank_query(m, store, q, protocol="open-world")
        with pytest.raises(ValueError, match="candidate list"):
            ev.rank_query(m, store, q, protocol="candidate-set")

    @pytest.mark.parametrize("kind", ["transe", "interht"])
    def test_matches_brute_force_oracle(self, kind):
        store = random_store(40, 3, 300, seed=72, splits=(0.8, 0.1, 0.1))
        m = build_model(kind, 40, 3, 6, p=1, seed=73, dtype=np.float64)
        known = {
            tuple(t) for split in store.splits.values() for t in split.tolist()
        }
        tables = m.encode_all()
        queries = ev.split_queries(store.splits["test"][:10], True)
        for q in queries:
            d = ev.score_against_all(m, tables, q)
            gold = q.t if q.target == "tail" else q.h
            cand = []
            for e in range(40):
                if e == gold:
                    continue
                trip = (q.h, q.r, e) if q.target == "tail" else (e, q.r, q.t)
                if trip in known:
                    continue
                cand.append(d[e])
            cand = np.array(cand)
            for policy in ev.TIE_POLICIES:
                got = ev.rank_query(m, store, q, tie_policy=policy,
                                    tables=tables)
                assert got.rank == ev.sort_rank(cand, d[gold], policy)
                assert got.num_candidates == len(cand) + 1


class TestSummarize:
    def test_reciprocal_rank_arithmetic(self):
        report = ev.summarize_ranks([1.0, 2.0, 4.0], "filtered-full", "mean")
        assert report.mrr == pytest.approx(7.0 / 12.0, abs=1e-12)
        assert report.hits[1] == pytest.approx(1 / 3)
        assert report.hits[3] == pytest.approx(2 / 3)
        assert report.hits[10] == 1.0
        assert report.count == 3

    def test_single_rank_ten(self):
        report = ev.summarize_ranks([10.0], "filtered-full", "mean")
        assert report.mrr == pytest.approx(0.1)
        assert report.hits == {1: 0.0, 3: 0.0, 10: 1.0}

    def test_all_rank_one(self):
        report = ev.summarize_ranks([1.0] * 7, "filtered-full", "mean")
        assert report.mrr == 1.0
        assert all(v == 1.0 for v in report.hits.values())

    def test_fractional_rank_counts_toward_hits(self):
        report = ev.summarize_ranks([1.5], "filtered-full", "mean")
        assert report.hits[1] == 0.0 and report.hits[3] == 1.0
        assert report.mrr == pytest.approx(2 / 3)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="no ranks"):
            ev.summarize_ranks([], "filtered-full", "mean")

    def test_to_dict_keys(self):
        d = ev.summarize_ranks([2.0], "filtered-full", "mean").to_dict()
        assert set(d) == {"mrr", "hits@1", "hits@3", "hits@10", "count",
                          "protocol", "tie_policy"}


class TestEvaluateSplit:
    def test_both_directions_doubles_count(self):
        store = random_store(20, 2, 100, seed=74, splits=(0.8, 0.0, 0.2))
        m = build_model("transe", 20, 2, 4, seed=75)
        both = ev.evaluate_split(m, store, "test")
        tails = ev.evaluate_split(m, store, "test", both_directions=False)
        assert both.count == 2 * tails.count

    def test_threads_do_not_change_results(self):
        store = random_store(20, 2, 100, seed=76, splits=(0.8, 0.0, 0.2))
        m = build_model("interht", 20, 2, 4, seed=77)
        one = ev.evaluate_split(m, store, "test", threads=1)
        four = ev.evaluate_split(m, store, "test", threads=4)
        assert one.to_dict() == four.to_dict()

    def test_perfectly_ranked_split(self):
        # model distances reproduce the +1-shift graph exactly
        store = store_from_arrays(
            [(0, 0, 1), (1, 0, 2)], test=[(2, 0, 3)],
            num_entities=4, num_relations=1,
        )
        m = line_model(store, [0, 1, 2, 3], 1.0)
        report = ev.evaluate_split(m, store, "test")
        assert report.mrr == 1.0

    def test_candidate_rows_map_one_per_triple(self):
        store = store_from_arrays(
            [(0, 0, 1)], test=[(0, 0, 1), (0, 0, 2)],
            num_entities=6, num_relations=1,
        )
        m = line_model(store, [0, 1, 2, 3, 4, 5], 1.0)
        # rows are per test triple; with both directions off, query i uses row i
        cands = {"tail": np.array([[3, 4], [4, 5]])}
        report = ev.evaluate_split(m, store, "test", protocol="candidate-set",
                                   both_directions=False, candidate_sets=cands)
        # triple 0: gold d=0 vs {2,3} -> rank 1; triple 1: gold d=1 vs {3,4} -> 1
        assert report.mrr == 1.0
        assert report.count == 2

    def test_candidate_rows_shared_between_directions(self):
        store = store_from_arrays(
            [(0, 0, 1)], test=[(0, 0, 1)], num_entities=4, num_relations=1
        )
        m = line_model(store, [0, 1, 2, 3], 1.0)
        cands = {"tail": np.array([[2, 3]]), "head": np.array([[2, 3]])}
        report = ev.evaluate_split(m, store, "test", protocol="candidate-set",
                                   candidate_sets=cands)
        assert report.count == 2

    def test_candidate_row_count_mismatch(self):
        store = store_from_arrays(
            [(0, 0, 1)], test=[(0, 0, 1), (0, 0, 2)],
            num_entities=4, num_relations=1,
        )
        m = line_model(store, [0, 1, 2, 3], 1.0)
        with pytest.raises(ValueError, match="rows"):
            ev.evaluate_split(m, store, "test", protocol="candidate-set",
                              candidate_sets={"tail": np.array([[2, 3]])})

    def test_candidate_protocol_requires_sets(self):
        store = random_store(10, 2, 40, seed=78, splits=(0.8, 0.0, 0.2))
        m = build_model("transe", 10, 2, 4)
        with pytest.raises(ValueError, match="candidate_sets"):
            ev.evaluate_split(m, store, "test", protocol="candidate-set")

    def test_head_queries_need_head_candidates(self):
        store = store_from_arrays(
            [(0, 0, 1)], test=[(0, 0, 1)], num_entities=4, num_relations=1
        )
        m = line_model(store, [0, 1, 2, 3], 1.0)
        with pytest.raises(ValueError, match="candidate list"):
            ev.evaluate_split(m, store, "test", protocol="candidate-set",
                              candidate_sets={"tail": np.array([[2, 3]])})

    def test_empty_split_rejected(self):
        store = store_from_arrays([(0, 0, 1)], num_entities=2, num_relations=1)
        m = build_model("transe", 2, 1, 4)
        with pytest.raises(ValueError, match="empty"):
            ev.evaluate_split(m, store, "valid")


class TestCandidateFiles:
    def test_round_trip(self, tmp_path):
        arr = np.array([[5, 2, 9], [1, 0, 3]])
        path = tmp_path / "cands.tsv"
        ev.save_candidate_sets(arr, path)
        np.testing.assert_array_equal(ev.load_candidate_sets(path), arr)

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "cands.tsv"
        path.write_text("1\t2\n\n3\t4\n")
        np.testing.assert_array_equal(ev.load_candidate_sets(path),
                                      [[1, 2], [3, 4]])

    def test_ragged_rows_report_line(self, tmp_path):
        path = tmp_path / "cands.tsv"
        path.write_text("1\t2\n3\t4\t5\n")
        with pytest.raises(ValueError, match=":2"):
            ev.load_candidate_sets(path)

    def test_non_integer_reports_line(self, tmp_path):
        path = tmp_path / "cands.tsv"
        path.write_text("1\t2\nx\t4\n")
        with pytest.raises(ValueError, match=":2"):
            ev.load_candidate_sets(path)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "cands.tsv"
        path.write_text("\n")
        with pytest.raises(ValueError, match="no candidate"):
            ev.load_candidate_sets(path)
