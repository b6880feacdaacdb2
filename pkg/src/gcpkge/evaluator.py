"""Link-prediction ranking: MRR and Hits@{1,3,10}, filtered or raw."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .gcp import FactorModel
from .tensor_core import TripleStore, merge_stores

HITS_AT = (1, 3, 10)
DIRECTIONS = ("tail", "head")


def score_all(model: FactorModel, direction: str, anchor: int, relation: int) -> np.ndarray:
    """Model value of every entity placed in the open slot.

    ``direction="tail"`` scores ``(anchor, relation, ?)``; ``"head"`` scores
    ``(?, relation, anchor)``.  One matrix-vector product, O(n_e R).
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be 'tail' or 'head', got {direction!r}")
    context = model.A[anchor] * model.B[relation]
    return model.A @ context


def rank_of(scores: np.ndarray, true_entity: int, filter_set=()) -> int:
    """Pessimistic rank: ties with the true entity count against it."""
    mask = np.ones(len(scores), dtype=bool)
    if len(filter_set):
        mask[np.fromiter(filter_set, dtype=np.int64)] = False
    mask[true_entity] = False
    return 1 + int(np.count_nonzero(scores[mask] >= scores[true_entity]))


@dataclass
class Metrics:
    mrr: float
    hits1: float
    hits3: float
    hits10: float
    n_queries: int

    @classmethod
    def from_ranks(cls, ranks: np.ndarray) -> "Metrics":
        ranks = np.asarray(ranks, dtype=np.float64)
        if len(ranks) == 0:
            return cls(float("nan"), float("nan"), float("nan"), float("nan"), 0)
        return cls(
            float(np.mean(1.0 / ranks)),
            float(np.mean(ranks <= 1)),
            float(np.mean(ranks <= 3)),
            float(np.mean(ranks <= 10)),
            len(ranks),
        )


@dataclass
class EvalReport:
    setting: str
    directions: str
    n_queries: int
    mrr: float
    hits1: float
    hits3: float
    hits10: float
    per_direction: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "setting": self.setting,
            "directions": self.directions,
            "n_queries": self.n_queries,
            "mrr": self.mrr,
            "hits1": self.hits1,
            "hits3": self.hits3,
            "hits10": self.hits10,
            "per_direction": {k: vars(v) for k, v in self.per_direction.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)

    def to_text(self) -> str:
        lines = [
            f"setting: {self.setting}",
            f"directions: {self.directions}",
            f"n_queries: {self.n_queries}",
            f"mrr: {self.mrr:.6f}",
            f"hits1: {self.hits1:.6f}",
            f"hits3: {self.hits3:.6f}",
            f"hits10: {self.hits10:.6f}",
        ]
        for name, m in self.per_direction.items():
            lines += [
                f"{name}.n_queries: {m.n_queries}",
                f"{name}.mrr: {m.mrr:.6f}",
                f"{name}.hits1: {m.hits1:.6f}",
                f"{name}.hits3: {m.hits3:.6f}",
                f"{name}.hits10: {m.hits10:.6f}",
            ]
        return "\n".join(lines) + "\n"


def _ranks_for(model: FactorModel, direction: str, anchors: np.ndarray, relations: np.ndarray,
               targets: np.ndarray, known: TripleStore | None, chunk: int) -> np.ndarray:
    ranks = np.empty(len(targets), dtype=np.int64)
    n_e = model.n_e
    for start in range(0, len(targets), chunk):
        sl = slice(start, start + chunk)
        a, r, t = anchors[sl], relations[sl], targets[sl]
        scores = (model.A[a] * model.B[r]) @ model.A.T  # (q, n_e)
        true = scores[np.arange(len(t)), t]
        better = scores >= true[:, None]
        better[np.arange(len(t)), t] = False
        if known is not None:
            rows, cols = [], []
            for q, (aq, rq) in enumerate(zip(a.tolist(), r.tolist())):
                hits = known.objects_of(aq, rq) if direction == "tail" else known.subjects_of(rq, aq)
                if hits:
                    rows.append(np.full(len(hits), q))
                    cols.append(np.fromiter(hits, dtype=np.int64, count=len(hits)))
            if rows:
                better[np.concatenate(rows), np.concatenate(cols)] = False
        ranks[sl] = 1 + better.sum(axis=1)
        del scores, better
    assert np.all((ranks >= 1) & (ranks <= n_e))
    return ranks


def evaluate(model: FactorModel, test: TripleStore, known: list[TripleStore] | TripleStore | None = None,
             setting: str = "filtered", directions: str = "both", chunk: int = 256) -> EvalReport:
    """Rank every test triple's object (and subject) among all entities.

    ``known`` are the splits whose triples are filtered out of the candidate
    lists (typically train, valid and test); required for ``setting="filtered"``.
    Scores are compared in the model's precision; ties are exact equality.
    """
    if len(test) == 0:
        raise ValueError("test split is empty")
    if setting not in ("filtered", "unfiltered"):
        raise ValueError(f"setting must be 'filtered' or 'unfiltered', got {setting!r}")
    if directions not in ("both", "tail_only"):
        raise ValueError(f"directions must be 'both' or 'tail_only', got {directions!r}")
    filter_store = None
    if setting == "filtered":
        if known is None:
            known = [test]
        if isinstance(known, TripleStore):
            known = [known]
        filter_store = merge_stores(test, *known)

    s, r, o = test.triples[:, 0], test.triples[:, 1], test.triples[:, 2]
    per_dir = {"tail": _ranks_for(model, "tail", s, r, o, filter_store, chunk)}
    if directions == "both":
        per_dir["head"] = _ranks_for(model, "head", o, r, s, filter_store, chunk)
    all_ranks = np.concatenate(list(per_dir.values()))
    overall = Metrics.from_ranks(all_ranks)
    return EvalReport(
        setting=setting,
        directions=directions,
        n_queries=overall.n_queries,
        mrr=overall.mrr,
        hits1=overall.hits1,
        hits3=overall.hits3,
        hits10=overall.hits10,
        per_direction={k: Metrics.from_ranks(v) for k, v in per_dir.items()},
    )
