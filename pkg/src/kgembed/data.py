"""Triple store: vocabularies, splits, CSR adjacency, and filter indices.

Triple files are UTF-8, one fact per line, exactly three tab-separated
fields.  Blank lines and comment lines are rejected rather than skipped so
that malformed exports surface immediately.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, NamedTuple

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")

TRIPLES_MAGIC = b"KGTS"
TRIPLES_VERSION = 1


class TripleFormatError(ValueError):
    """Malformed triple or vocabulary data."""


class Query(NamedTuple):
    """A link-prediction query: one side of (h, r, t) is predicted.

    ``target`` is the side being ranked ("head" or "tail"); the stored id on
    that side is the gold entity.
    """

    h: int
    r: int
    t: int
    target: str


@dataclass
class Vocab:
    """Dense label<->id mapping; ids are assigned in first-seen order."""

    labels: list[str] = field(default_factory=list)
    index: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def add(self, label: str) -> int:
        idx = self.index.get(label)
        if idx is None:
            idx = len(self.labels)
            self.index[label] = idx
            self.labels.append(label)
        return idx

    @classmethod
    def identity(cls, n: int) -> "Vocab":
        labels = [str(i) for i in range(n)]
        return cls(labels, {s: i for i, s in enumerate(labels)})

    def save_tsv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for i, label in enumerate(self.labels):
                f.write(f"{label}\t{i}\n")

    @classmethod
    def load_tsv(cls, path: str | Path) -> "Vocab":
        labels: list[str] = []
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 2:
                    raise TripleFormatError(f"{path}: bad vocab line {lineno}")
                label, idx = parts[0], int(parts[1])
                if idx != len(labels):
                    raise TripleFormatError(
                        f"{path}: non-dense id {idx} at line {lineno}"
                    )
                labels.append(label)
        return cls(labels, {s: i for i, s in enumerate(labels)})


@dataclass
class TripleStore:
    """Immutable-after-build container for a knowledge graph.

    Adjacency is CSR over the train split only: ``in_*`` lists, for each
    node v, the (u, r) pairs with (u, r, v) in train; ``out_*`` lists the
    (u, r) pairs with (v, r, u) in train.  Both are sorted per node by
    (neighbor, relation).
    """

    entities: Vocab
    relations: Vocab
    splits: dict[str, np.ndarray]
    duplicates: dict[str, int] = field(default_factory=dict)

    in_ptr: np.ndarray | None = None
    in_nbr: np.ndarray | None = None
    in_rel: np.ndarray | None = None
    out_ptr: np.ndarray | None = None
    out_nbr: np.ndarray | None = None
    out_rel: np.ndarray | None = None

    _hr: dict | None = field(default=None, repr=False)
    _rt: dict | None = field(default=None, repr=False)
    _all_keys: np.ndarray | None = field(default=None, repr=False)
    _train_keys: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def num_triples(self, split: str) -> int:
        return len(self.splits[split])

    @property
    def has_adjacency(self) -> bool:
        return self.in_ptr is not None

    def in_neighbors(self, v: int) -> tuple[np.ndarray, np.ndarray]:
        """(heads, relations) of train triples pointing at v."""
        lo, hi = self.in_ptr[v], self.in_ptr[v + 1]
        return self.in_nbr[lo:hi], self.in_rel[lo:hi]

    def out_neighbors(self, v: int) -> tuple[np.ndarray, np.ndarray]:
        """(tails, relations) of train triples leaving v."""
        lo, hi = self.out_ptr[v], self.out_ptr[v + 1]
        return self.out_nbr[lo:hi], self.out_rel[lo:hi]

    def degrees(self) -> np.ndarray:
        """Per-entity in+out degree over the train split."""
        tr = self.splits["train"]
        deg = np.bincount(tr[:, 0], minlength=self.num_entities)
        deg += np.bincount(tr[:, 2], minlength=self.num_entities)
        return deg

    # -- membership -------------------------------------------------------

    def _pack(self, h, r, t) -> np.ndarray:
        e, rl = self.num_entities, self.num_relations
        if e * rl * e >= 2**62:
            raise OverflowError("graph too large for packed triple keys")
        h = np.asarray(h, dtype=np.int64)
        r = np.asarray(r, dtype=np.int64)
        t = np.asarray(t, dtype=np.int64)
        return (h * rl + r) * e + t

    def _ensure_keys(self) -> None:
        if self._all_keys is None:
            parts = [s for s in SPLITS if len(self.splits[s])]
            allt = np.concatenate([self.splits[s] for s in parts])
            self._all_keys = np.unique(self._pack(allt[:, 0], allt[:, 1], allt[:, 2]))
            tr = self.splits["train"]
            self._train_keys = np.unique(self._pack(tr[:, 0], tr[:, 1], tr[:, 2]))

    def has_triple(self, h: int, r: int, t: int) -> bool:
        """True iff (h, r, t) appears in at least one split."""
        self._ensure_keys()
        key = self._pack(h, r, t)
        i = np.searchsorted(self._all_keys, key)
        return bool(i < len(self._all_keys) and self._all_keys[i] == key)

    def train_triple_mask(self, h, r, t) -> np.ndarray:
        """Vectorized membership in the train split."""
        self._ensure_keys()
        keys = self._pack(h, r, t)
        idx = np.searchsorted(self._train_keys, keys)
        idx = np.minimum(idx, len(self._train_keys) - 1)
        return self._train_keys[idx] == keys

    @property
    def true_count(self) -> int:
        self._ensure_keys()
        return len(self._all_keys)

    def _ensure_filter_index(self) -> None:
        if self._hr is not None:
            return
        parts = [s for s in SPLITS if len(self.splits[s])]
        allt = np.concatenate([self.splits[s] for s in parts]).astype(np.int64)
        rl = np.int64(self.num_relations)
        self._hr = _group_by(allt[:, 0] * rl + allt[:, 1], allt[:, 2])
        self._rt = _group_by(allt[:, 2] * rl + allt[:, 1], allt[:, 0])

    def tails_of(self, h: int, r: int) -> np.ndarray:
        self._ensure_filter_index()
        return self._hr.get(h * self.num_relations + r, _EMPTY_IDS)

    def heads_of(self, r: int, t: int) -> np.ndarray:
        self._ensure_filter_index()
        return self._rt.get(t * self.num_relations + r, _EMPTY_IDS)

    # -- persistence ------------------------------------------------------

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.entities.save_tsv(directory / "entities.tsv")
        self.relations.save_tsv(directory / "relations.tsv")
        with open(directory / "triples.bin", "wb") as f:
            f.write(TRIPLES_MAGIC)
            f.write(struct.pack("<I", TRIPLES_VERSION))
            f.write(
                struct.pack(
                    "<QQQQQ",
                    self.num_entities,
                    self.num_relations,
                    *(len(self.splits[s]) for s in SPLITS),
                )
            )
            for s in SPLITS:
                f.write(np.ascontiguousarray(self.splits[s], dtype="<i4").tobytes())

    @classmethod
    def load(cls, directory: str | Path) -> "TripleStore":
        directory = Path(directory)
        entities = Vocab.load_tsv(directory / "entities.tsv")
        relations = Vocab.load_tsv(directory / "relations.tsv")
        with open(directory / "triples.bin", "rb") as f:
            magic = f.read(4)
            if magic != TRIPLES_MAGIC:
                raise TripleFormatError(f"{directory}: bad triples.bin magic {magic!r}")
            (version,) = struct.unpack("<I", f.read(4))
            if version != TRIPLES_VERSION:
                raise TripleFormatError(f"{directory}: unsupported version {version}")
            ne, nr, *counts = struct.unpack("<QQQQQ", f.read(40))
            if ne != len(entities) or nr != len(relations):
                raise TripleFormatError(f"{directory}: vocab/binary size mismatch")
            splits = {}
            for s, n in zip(SPLITS, counts):
                buf = f.read(n * 3 * 4)
                if len(buf) != n * 3 * 4:
                    raise TripleFormatError(f"{directory}: truncated triples.bin")
                splits[s] = np.frombuffer(buf, dtype="<i4").reshape(n, 3).astype(np.int32)
        store = cls(entities=entities, relations=relations, splits=splits)
        _count_duplicates(store)
        return build_adjacency(store)


_EMPTY_IDS = np.empty(0, dtype=np.int64)


def _group_by(keys: np.ndarray, vals: np.ndarray) -> dict[int, np.ndarray]:
    order = np.argsort(keys, kind="stable")
    k, v = keys[order], vals[order]
    starts = np.flatnonzero(np.r_[True, k[1:] != k[:-1]]) if len(k) else np.empty(0, int)
    bounds = np.r_[starts, len(k)]
    return {
        int(k[s]): np.unique(v[s:e]) for s, e in zip(bounds[:-1], bounds[1:])
    }


def _iter_lines(source) -> Iterable[str]:
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as f:
            yield from f
    elif hasattr(source, "read"):
        data = source.read()
        if isinstance(data, bytes):
            data = data.decode("utf-8")
        yield from data.splitlines(keepends=True)
    else:
        raise TypeError(f"unsupported triple source {type(source)!r}")


def _parse_split(name: str, source, fmt: str, entities: Vocab, relations: Vocab):
    rows: list[tuple[int, int, int]] = []
    for lineno, raw in enumerate(_iter_lines(source), start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if line.strip() == "":
            raise TripleFormatError(f"{name}: blank line at line {lineno}")
        parts = line.split("\t")
        if len(parts) != 3 or any(p == "" for p in parts):
            raise TripleFormatError(
                f"{name}: expected 3 tab-separated fields at line {lineno}, "
                f"got {len(parts)}"
            )
        if fmt == "labels":
            h = entities.add(parts[0])
            r = relations.add(parts[1])
            t = entities.add(parts[2])
        elif fmt == "numeric":
            try:
                h, r, t = int(parts[0]), int(parts[1]), int(parts[2])
            except ValueError:
                raise TripleFormatError(
                    f"{name}: non-integer id at line {lineno}"
                ) from None
            if h < 0 or r < 0 or t < 0:
                raise TripleFormatError(f"{name}: negative id at line {lineno}")
        else:
            raise ValueError(f"unknown triple format {fmt!r}")
        rows.append((h, r, t))
    if rows:
        return np.asarray(rows, dtype=np.int32)
    return np.empty((0, 3), dtype=np.int32)


def _count_duplicates(store: TripleStore) -> None:
    for s in SPLITS:
        arr = store.splits[s]
        if len(arr) == 0:
            store.duplicates[s] = 0
            continue
        n_unique = len(np.unique(arr, axis=0))
        dups = len(arr) - n_unique
        store.duplicates[s] = dups
        if dups:
            log.warning("%s split contains %d duplicate triples (kept)", s, dups)


def load_triples(
    sources: dict[str, object],
    fmt: str = "labels",
    num_entities: int | None = None,
    num_relations: int | None = None,
) -> TripleStore:
    """Load train/valid/test triple sources into a TripleStore.

    ``sources`` maps split names to paths or binary/text file objects; the
    train split is required and must be non-empty.  With ``fmt="labels"``
    dense ids are assigned in first-seen order; with ``fmt="numeric"`` the
    fields are integer ids, optionally validated against declared counts.
    """
    unknown = set(sources) - set(SPLITS)
    if unknown:
        raise ValueError(f"unknown split names {sorted(unknown)}")
    entities, relations = Vocab(), Vocab()
    splits: dict[str, np.ndarray] = {}
    for s in SPLITS:
        if s in sources:
            splits[s] = _parse_split(s, sources[s], fmt, entities, relations)
        else:
            splits[s] = np.empty((0, 3), dtype=np.int32)
    if len(splits["train"]) == 0:
        raise TripleFormatError("train split is empty")

    if fmt == "numeric":
        allt = np.concatenate([a for a in splits.values() if len(a)])
        max_e = int(max(allt[:, 0].max(), allt[:, 2].max()))
        max_r = int(allt[:, 1].max())
        ne = num_entities if num_entities is not None else max_e + 1
        nr = num_relations if num_relations is not None else max_r + 1
        if max_e >= ne:
            raise TripleFormatError(
                f"entity id {max_e} out of range (num_entities={ne})"
            )
        if max_r >= nr:
            raise TripleFormatError(
                f"relation id {max_r} out of range (num_relations={nr})"
            )
        entities = Vocab.identity(ne)
        relations = Vocab.identity(nr)

    store = TripleStore(entities=entities, relations=relations, splits=splits)
    _count_duplicates(store)
    for s in SPLITS:
        log.info("loaded %s: %d triples", s, len(splits[s]))
    return store


def build_adjacency(store: TripleStore) -> TripleStore:
    """Populate CSR adjacency from the train split (sorted per node)."""
    tr = store.splits["train"]
    if len(tr) == 0:
        raise TripleFormatError("cannot build adjacency: train split is empty")
    e = store.num_entities
    h, r, t = tr[:, 0], tr[:, 1], tr[:, 2]

    order = np.lexsort((r, h, t))
    store.in_nbr = np.ascontiguousarray(h[order])
    store.in_rel = np.ascontiguousarray(r[order])
    store.in_ptr = np.zeros(e + 1, dtype=np.int64)
    store.in_ptr[1:] = np.cumsum(np.bincount(t, minlength=e))

    order = np.lexsort((r, t, h))
    store.out_nbr = np.ascontiguousarray(t[order])
    store.out_rel = np.ascontiguousarray(r[order])
    store.out_ptr = np.zeros(e + 1, dtype=np.int64)
    store.out_ptr[1:] = np.cumsum(np.bincount(h, minlength=e))
    return store


def filtered_candidates(store: TripleStore, query: Query) -> np.ndarray:
    """Entity ids to exclude when ranking ``query`` under the filtered protocol.

    Returns every entity that completes the query into a known-true triple
    (any split), minus the query's own gold entity.
    """
    if query.target == "tail":
        known = store.tails_of(query.h, query.r)
        return known[known != query.t]
    if query.target == "head":
        known = store.heads_of(query.r, query.t)
        return known[known != query.h]
    raise ValueError(f"bad query target {query.target!r}")
