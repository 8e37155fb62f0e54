"""Link-prediction ranking, accuracy and transfer metrics, latency."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .dataset import MULTI_HOP, SINGLE_HOP, HopLabel

SIDES = ("head", "tail")
HITS_AT = (1, 3, 10)


@dataclass(frozen=True)
class RankResult:
    triple: tuple
    side: str
    rank: int
    candidates: int


class FilterIndex:
    """Known true triples, indexed for filtered ranking."""

    def __init__(self, triples: Iterable[np.ndarray] = ()):
        self.tails: dict[tuple[int, int], set[int]] = {}
        self.heads: dict[tuple[int, int], set[int]] = {}
        for arr in triples:
            self.add(arr)

    def add(self, triples: np.ndarray) -> "FilterIndex":
        for h, r, t in np.asarray(triples, dtype=np.int64).reshape(-1, 3).tolist():
            self.tails.setdefault((h, r), set()).add(t)
            self.heads.setdefault((r, t), set()).add(h)
        return self

    def true_answers(self, triple, side: str) -> set[int]:
        h, r, t = (int(x) for x in triple)
        if side == "tail":
            return self.tails.get((h, r), set())
        return self.heads.get((r, t), set())

    def __contains__(self, triple) -> bool:
        h, r, t = (int(x) for x in triple)
        return t in self.tails.get((h, r), ())


def rank_from_scores(scores: np.ndarray, true_index: int, excluded: Iterable[int] = ()) -> tuple[int, int]:
    """Mean-rank tie policy: ``1 + better + ceil(ties / 2)``; returns (rank, candidates)."""
    s0 = scores[true_index]
    keep = np.ones(len(scores), dtype=bool)
    ex = [e for e in excluded if e != true_index and e < len(scores)]
    if ex:
        keep[ex] = False
    live = scores[keep]
    better = int(np.count_nonzero(live < s0))
    ties = int(np.count_nonzero(live == s0)) - 1
    return 1 + better + (ties + 1) // 2, int(keep.sum())


def rank_triples(scorer, triples: np.ndarray, side: str, n_candidates: int,
                 filter_index: FilterIndex | None = None, chunk: int = 256) -> np.ndarray:
    """Ranks of the true entity on ``side`` for every triple (full enumeration)."""
    if side not in SIDES:
        raise ValueError(f"side must be 'head' or 'tail', got {side!r}")
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    col = 0 if side == "head" else 2
    ranks = np.empty(len(triples), dtype=np.int64)
    for start in range(0, len(triples), chunk):
        block = triples[start:start + chunk]
        scores = scorer.candidate_scores(block, side, n_candidates)
        for k, trip in enumerate(block):
            true = int(trip[col])
            if true >= n_candidates:
                raise KeyError(f"entity {true} outside the candidate pool of size {n_candidates}")
            excluded = filter_index.true_answers(trip, side) if filter_index is not None else ()
            ranks[start + k] = rank_from_scores(scores[k], true, excluded)[0]
    return ranks


def rank_query(triple, side: str, scorer, filter_index: FilterIndex | None = None,
               n_candidates: int | None = None) -> RankResult:
    n = scorer.n_entities if n_candidates is None else n_candidates
    for x in (triple[0], triple[2]):
        if int(x) >= scorer.n_entities:
            raise KeyError(f"entity {int(x)} has no embedding")
    scores = scorer.candidate_scores(np.array([triple]), side, n)[0]
    col = 0 if side == "head" else 2
    excluded = filter_index.true_answers(triple, side) if filter_index is not None else ()
    rank, cands = rank_from_scores(scores, int(triple[col]), excluded)
    return RankResult(tuple(int(x) for x in triple), side, rank, cands)


def metrics(ranks) -> dict[str, float]:
    ranks = np.asarray([r.rank if isinstance(r, RankResult) else r for r in ranks], dtype=np.float64)
    if ranks.size == 0:
        raise ValueError("metrics need at least one rank")
    out = {"MRR": float(np.mean(1.0 / ranks))}
    for k in HITS_AT:
        out[f"Hits@{k}"] = float(np.mean(ranks <= k))
    out["queries"] = int(ranks.size)
    return out


def evaluate(scorer, triples: np.ndarray, n_candidates: int,
             filter_index: FilterIndex | None = None) -> tuple[dict, np.ndarray]:
    """Pooled head+tail metrics; also returns ranks of shape ``(len(triples), 2)``."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    ranks = np.stack([rank_triples(scorer, triples, side, n_candidates, filter_index)
                      for side in SIDES], axis=1)
    return metrics(ranks.ravel()), ranks


class MetricsMatrix:
    """``grid[h][i]``: metric of the model trained through ``h`` on test set ``i``.

    Cells never evaluated hold NaN.
    """

    def __init__(self, n: int):
        self.n = n
        self.grid = {name: np.full((n, n), np.nan) for name in ("MRR",) + tuple(f"Hits@{k}" for k in HITS_AT)}

    def set(self, h: int, i: int, values: dict) -> None:
        for name, grid in self.grid.items():
            v = values[name]
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
            grid[h, i] = v

    def __getitem__(self, key):
        return self.grid["MRR"][key]

    def to_csv(self, metric: str = "MRR") -> str:
        grid = self.grid[metric]
        lines = ["model," + ",".join(f"test_{i}" for i in range(self.n))]
        for h in range(self.n):
            cells = ["" if math.isnan(v) else f"{v:.6f}" for v in grid[h]]
            lines.append(f"{h}," + ",".join(cells))
        return "\n".join(lines) + "\n"


def transfer_metrics(matrix) -> tuple[float, float]:
    """Forward and backward transfer from an MRR grid.

    FWT averages ``grid[i-1][i]`` (zero-shot on the next snapshot); BWT
    averages ``grid[n-1][i] - grid[i][i]`` over ``i < n-1``.
    """
    grid = matrix.grid["MRR"] if isinstance(matrix, MetricsMatrix) else np.asarray(matrix, dtype=float)
    n = grid.shape[0]
    if grid.shape != (n, n):
        raise ValueError("metrics grid must be square")
    if n < 2:
        return 0.0, 0.0
    needed = [(i - 1, i) for i in range(1, n)] + [(i, i) for i in range(n)] + \
        [(n - 1, i) for i in range(n)]
    missing = [c for c in needed if math.isnan(grid[c])]
    if missing:
        raise ValueError(f"metrics grid incomplete; missing cells {missing}")
    fwt = sum(grid[i - 1, i] for i in range(1, n)) / (n - 1)
    bwt = sum(grid[n - 1, i] - grid[i, i] for i in range(n - 1)) / (n - 1)
    return float(fwt), float(bwt)


def hop_breakdown(triples: np.ndarray, ranks: np.ndarray, labels: HopLabel) -> dict:
    """Metrics per hop class; an empty class maps to ``None`` rather than NaN."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    ranks = np.asarray(ranks).reshape(len(triples), -1)
    cls = np.array([labels.label(t) for t in triples.tolist()], dtype=object)
    out = {}
    for name in (MULTI_HOP, SINGLE_HOP):
        sel = ranks[cls == name] if len(triples) else ranks[:0]
        out[name] = metrics(sel.ravel()) if sel.size else None
        out[f"{name}_triples"] = int(np.count_nonzero(cls == name))
    return out


@dataclass(frozen=True)
class LatencyReport:
    queries: int
    total_seconds: float
    mean_seconds: float
    candidates: int


def measure_latency(scorer_factory, triples: np.ndarray, n_candidates: int,
                    filter_index: FilterIndex | None = None) -> LatencyReport:
    """Wall-clock time of ranking every test triple on both sides.

    ``scorer_factory`` builds the scoring view, so the timing includes
    computing entity representations from the stored parameters.
    """
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    queries = 2 * len(triples)
    if queries == 0:
        return LatencyReport(0, 0.0, 0.0, n_candidates)
    t0 = time.perf_counter()
    scorer = scorer_factory()
    for side in SIDES:
        rank_triples(scorer, triples, side, n_candidates, filter_index)
    total = time.perf_counter() - t0
    return LatencyReport(queries, total, total / queries, n_candidates)


def brute_force_ranks(score_fn, triple, side: str, n_candidates: int,
                      filter_index: FilterIndex | None = None) -> int:
    """Reference ranker: score every substitution one by one, sort, locate the truth."""
    h, r, t = (int(x) for x in triple)
    true_answers = filter_index.true_answers(triple, side) if filter_index is not None else set()
    true_entity = t if side == "tail" else h
    scores = []
    true_score = None
    for c in range(n_candidates):
        cand = (h, r, c) if side == "tail" else (c, r, t)
        s = float(score_fn(cand))
        if c == true_entity:
            true_score = s
        elif c in true_answers:
            continue
        else:
            scores.append(s)
    scores.sort()
    lo = int(np.searchsorted(scores, true_score, side="left"))
    hi = int(np.searchsorted(scores, true_score, side="right"))
    ties = hi - lo
    return 1 + lo + (ties + 1) // 2


__all__ = [
    "RankResult", "FilterIndex", "rank_query", "rank_triples", "rank_from_scores", "metrics",
    "evaluate", "MetricsMatrix", "transfer_metrics", "hop_breakdown", "measure_latency",
    "LatencyReport", "brute_force_ranks",
]
