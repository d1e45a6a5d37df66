"""Link-prediction ranking: filtered full ranking, fixed candidate sets,
MRR and Hits@K, plus a sort-based oracle for cross-checking.

All ranking happens on the unified "lower is better" scores, so distance
and bilinear kinds share one code path.  Reciprocal ranks accumulate in
double precision regardless of table dtype.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Query, TripleStore, filtered_candidates
from .model import KgeModel

log = logging.getLogger(__name__)

TIE_POLICIES = ("optimistic", "pessimistic", "mean")
PROTOCOLS = ("filtered-full", "candidate-set")
HITS_KS = (1, 3, 10)


@dataclass
class RankResult:
    query: Query
    rank: float               # fractional under the mean tie policy
    num_candidates: int


@dataclass
class EvalReport:
    mrr: float
    hits: dict[int, float]
    count: int
    protocol: str
    tie_policy: str

    def to_dict(self) -> dict:
        out = {"mrr": self.mrr}
        for k in HITS_KS:
            out[f"hits@{k}"] = self.hits[k]
        out.update(count=self.count, protocol=self.protocol,
                   tie_policy=self.tie_policy)
        return out


def tie_rank(better: int, ties: int, policy: str) -> float:
    """Rank of the gold among candidates: `better` score strictly ahead of
    it, `ties` score equal (gold itself excluded from both counts)."""
    if policy == "optimistic":
        return 1.0 + better
    if policy == "pessimistic":
        return 1.0 + better + ties
    if policy == "mean":
        return 1.0 + better + ties / 2.0
    raise ValueError(f"tie policy must be one of {TIE_POLICIES}, got {policy!r}")


def score_against_all(model: KgeModel, tables, query: Query) -> np.ndarray:
    """Unified scores of (h, r, *) or (*, r, t) against every entity."""
    base, aux = tables
    rel = {part: v[0]
           for part, v in model.relation_vecs(np.array([query.r])).items()}
    if query.target == "tail":
        vecs = {"h": base[query.h], "t": base, **rel}
        if aux is not None:
            vecs.update(h_a=aux[query.h], t_a=aux)
    elif query.target == "head":
        vecs = {"h": base, "t": base[query.t], **rel}
        if aux is not None:
            vecs.update(h_a=aux, t_a=aux[query.t])
    else:
        raise ValueError(f"bad query target {query.target!r}")
    d, _ = model.score(vecs)
    return d


def rank_query(model: KgeModel, store: TripleStore, query: Query,
               protocol: str = "filtered-full", tie_policy: str = "mean",
               tables=None, candidates: np.ndarray | None = None) -> RankResult:
    """Rank the gold entity against its candidate pool.

    filtered-full ranks against all entities minus other known-true
    completions; candidate-set ranks against a provided id list (gold
    occurrences are deduplicated with a warning).
    """
    if tables is None:
        tables = model.encode_all()
    d = score_against_all(model, tables, query)
    gold = query.t if query.target == "tail" else query.h
    gold_d = d[gold]
    if protocol == "filtered-full":
        keep = np.ones(model.num_entities, dtype=bool)
        keep[filtered_candidates(store, query)] = False
        keep[gold] = False
        cand_d = d[keep]
    elif protocol == "candidate-set":
        if candidates is None:
            raise ValueError("candidate-set protocol needs a candidate list")
        cands = np.asarray(candidates, dtype=np.int64)
        if (cands == gold).any():
            log.warning("gold entity %d found in its candidate set; dropped",
                        gold)
            cands = cands[cands != gold]
        cand_d = d[cands]
    else:
        raise ValueError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    if len(cand_d) == 0:
        raise ValueError(f"empty candidate list for {query}")
    better = int((cand_d < gold_d).sum())
    ties = int((cand_d == gold_d).sum())
    return RankResult(query, tie_rank(better, ties, tie_policy), len(cand_d) + 1)


def sort_rank(cand_scores: np.ndarray, gold_score: float,
              tie_policy: str) -> float:
    """Sort-based rank recount used as an independent cross-check."""
    s = np.sort(np.asarray(cand_scores, dtype=np.float64))
    lo = int(np.searchsorted(s, gold_score, side="left"))
    hi = int(np.searchsorted(s, gold_score, side="right"))
    return tie_rank(lo, hi - lo, tie_policy)


def split_queries(triples: np.ndarray, both_directions: bool) -> list[Query]:
    queries = []
    for h, r, t in triples.tolist():
        queries.append(Query(h, r, t, "tail"))
        if both_directions:
            queries.append(Query(h, r, t, "head"))
    return queries


def summarize_ranks(ranks, protocol: str, tie_policy: str) -> EvalReport:
    rr = 0.0
    hit_counts = {k: 0 for k in HITS_KS}
    n = 0
    for rank in ranks:
        rr += 1.0 / rank
        for k in HITS_KS:
            hit_counts[k] += rank <= k
        n += 1
    if n == 0:
        raise ValueError("no ranks to summarize")
    return EvalReport(
        mrr=rr / n,
        hits={k: hit_counts[k] / n for k in HITS_KS},
        count=n, protocol=protocol, tie_policy=tie_policy,
    )


def evaluate_split(model: KgeModel, store: TripleStore, split: str = "test",
                   protocol: str = "filtered-full", tie_policy: str = "mean",
                   both_directions: bool = True, candidate_sets=None,
                   threads: int = 1) -> EvalReport:
    """Rank every query of a split and aggregate MRR / Hits@{1,3,10}.

    candidate_sets: {"tail": [n, k] ids, "head": [n, k]} for the
    candidate-set protocol, one row per split triple.
    """
    triples = store.splits[split]
    if len(triples) == 0:
        raise ValueError(f"split {split!r} is empty")
    queries = split_queries(triples, both_directions)
    cand_rows: list[np.ndarray | None] = [None] * len(queries)
    if protocol == "candidate-set":
        if not candidate_sets:
            raise ValueError("candidate-set protocol needs candidate_sets")
        for direction, arr in candidate_sets.items():
            arr = np.asarray(arr)
            if arr.shape[0] != len(triples):
                raise ValueError(
                    f"{direction} candidate sets have {arr.shape[0]} rows "
                    f"for {len(triples)} triples"
                )
        for i, q in enumerate(queries):
            if q.target in candidate_sets:
                cand_rows[i] = np.asarray(candidate_sets[q.target])[i // (2 if both_directions else 1)]
    tables = model.encode_all()

    def rank_of(i: int) -> float:
        return rank_query(model, store, queries[i], protocol, tie_policy,
                          tables=tables, candidates=cand_rows[i]).rank

    if threads > 1:
        chunks = np.array_split(np.arange(len(queries)), threads)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: [rank_of(i) for i in c], chunks))
        ranks = [r for part in parts for r in part]
    else:
        ranks = [rank_of(i) for i in range(len(queries))]
    return summarize_ranks(ranks, protocol, tie_policy)


def load_candidate_sets(path: str | Path) -> np.ndarray:
    """Tab-separated candidate ids, one evaluation query per line; every
    line must list the same number of candidates."""
    rows: list[list[int]] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                row = [int(x) for x in line.split("\t")]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if rows and len(row) != len(rows[0]):
                raise ValueError(
                    f"{path}:{lineno}: {len(row)} candidates, "
                    f"expected {len(rows[0])}"
                )
            rows.append(row)
    if not rows:
        raise ValueError(f"{path}: no candidate rows")
    return np.asarray(rows, dtype=np.int64)


def save_candidate_sets(arr: np.ndarray, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in np.asarray(arr, dtype=np.int64):
            f.write("\t".join(str(int(x)) for x in row) + "\n")
