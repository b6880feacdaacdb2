"""Sparse binary triple tensor in coordinate format.

A knowledge graph is held as the set of its nonzero coordinates
``(subject, relation, object)``.  Subject and object share one entity axis.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)


class TripleError(ValueError):
    """Raised for an out-of-range or malformed triple."""

    def __init__(self, message: str, line: int | None = None, ids: tuple | None = None):
        self.line = line
        self.ids = ids
        super().__init__(message)


class Vocabulary:
    """Bijective label <-> dense id map, ids assigned by first appearance."""

    def __init__(self, labels: Iterable[str] = ()):
        self._ids: dict[str, int] = {}
        self._labels: list[str] = []
        for label in labels:
            self.add(label)

    def add(self, label: str) -> int:
        idx = self._ids.get(label)
        if idx is None:
            idx = len(self._labels)
            self._ids[label] = idx
            self._labels.append(label)
        return idx

    def id(self, label: str) -> int:
        return self._ids[label]

    def get(self, label: str, default=None):
        return self._ids.get(label, default)

    def label(self, idx: int) -> str:
        return self._labels[idx]

    @property
    def labels(self) -> list[str]:
        return list(self._labels)

    def __contains__(self, label: str) -> bool:
        return label in self._ids

    def __len__(self) -> int:
        return len(self._labels)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._labels == other._labels

    def __repr__(self) -> str:
        return f"Vocabulary({len(self)} labels)"


def pack_key(s, r, o, n_e: int, n_r: int):
    """Pack ``(s, r, o)`` into one integer; works on scalars and int64 arrays."""
    return (s * n_r + r) * n_e + o


@dataclass(eq=False)
class TripleStore:
    """Deduplicated triple set with membership and per-pair indexes.

    Treat as immutable once built; use :func:`build_store`.
    """

    n_e: int
    n_r: int
    triples: np.ndarray  # (n, 3) int64, first-occurrence order
    n_duplicates: int = 0
    _keys: frozenset = field(default=frozenset(), repr=False)
    _sr_to_o: Mapping[tuple[int, int], frozenset] = field(default_factory=dict, repr=False)
    _ro_to_s: Mapping[tuple[int, int], frozenset] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.triples)

    def __iter__(self):
        for s, r, o in self.triples.tolist():
            yield (s, r, o)

    def contains(self, s: int, r: int, o: int) -> bool:
        return pack_key(int(s), int(r), int(o), self.n_e, self.n_r) in self._keys

    def __contains__(self, triple) -> bool:
        return self.contains(*triple)

    def objects_of(self, s: int, r: int) -> frozenset:
        return self._sr_to_o.get((int(s), int(r)), frozenset())

    def subjects_of(self, r: int, o: int) -> frozenset:
        return self._ro_to_s.get((int(r), int(o)), frozenset())

    def contains_many(self, triples: np.ndarray) -> np.ndarray:
        """Vectorised membership for an ``(n, 3)`` id array."""
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        keys = pack_key(triples[:, 0], triples[:, 1], triples[:, 2], self.n_e, self.n_r)
        return np.fromiter((k in self._keys for k in keys.tolist()), dtype=bool, count=len(keys))

    def same_as(self, other: "TripleStore") -> bool:
        return (
            self.n_e == other.n_e
            and self.n_r == other.n_r
            and np.array_equal(self.triples, other.triples)
            and self._keys == other._keys
            and dict(self._sr_to_o) == dict(other._sr_to_o)
            and dict(self._ro_to_s) == dict(other._ro_to_s)
        )


def build_store(
    triples: Sequence | np.ndarray, n_e: int, n_r: int, warn_duplicates: bool = True
) -> TripleStore:
    """Build a :class:`TripleStore` from raw id triples.

    Duplicates are dropped (first occurrence wins) and counted.  Any id out
    of range raises :class:`TripleError` naming the offending row.
    """
    if n_e < 0 or n_r < 0:
        raise ValueError("n_e and n_r must be non-negative")
    arr = np.asarray(triples, dtype=np.int64)
    if arr.size == 0:
        arr = np.empty((0, 3), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise TripleError(f"expected an (n, 3) array of ids, got shape {arr.shape}")

    bad = (
        (arr[:, 0] < 0) | (arr[:, 0] >= n_e)
        | (arr[:, 1] < 0) | (arr[:, 1] >= n_r)
        | (arr[:, 2] < 0) | (arr[:, 2] >= n_e)
    )
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        ids = tuple(int(v) for v in arr[row])
        raise TripleError(
            f"triple {ids} at line {row + 1} is out of range (n_e={n_e}, n_r={n_r})",
            line=row + 1,
            ids=ids,
        )

    keys = pack_key(arr[:, 0], arr[:, 1], arr[:, 2], n_e, n_r)
    _, first = np.unique(keys, return_index=True)
    first.sort()
    n_dup = len(arr) - len(first)
    if n_dup and warn_duplicates:
        log.warning("dropped %d duplicate triples", n_dup)
    arr = arr[first]

    sr_to_o: dict[tuple[int, int], set] = defaultdict(set)
    ro_to_s: dict[tuple[int, int], set] = defaultdict(set)
    for s, r, o in arr.tolist():
        sr_to_o[(s, r)].add(o)
        ro_to_s[(r, o)].add(s)

    return TripleStore(
        n_e=n_e,
        n_r=n_r,
        triples=arr,
        n_duplicates=n_dup,
        _keys=frozenset(keys[first].tolist()),
        _sr_to_o={k: frozenset(v) for k, v in sr_to_o.items()},
        _ro_to_s={k: frozenset(v) for k, v in ro_to_s.items()},
    )


def merge_stores(*stores: TripleStore) -> TripleStore:
    """Union of stores over the same vocabularies (used for filter sets)."""
    n_e, n_r = stores[0].n_e, stores[0].n_r
    for st in stores:
        if (st.n_e, st.n_r) != (n_e, n_r):
            raise ValueError("stores index different vocabularies")
    return build_store(
        np.concatenate([st.triples for st in stores]), n_e, n_r, warn_duplicates=False
    )
