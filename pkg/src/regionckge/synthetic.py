"""Small synthetic knowledge graphs for sanity runs and directional checks."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import SPLITS, Snapshot, SnapshotBuilder, Vocab, write_triples


def clique_kg(sizes: Sequence[int] = (4,) * 8 + (3,) * 8, n_entities: int = 40,
              seed: int = 0) -> np.ndarray:
    """Relation ``r`` holds every ordered pair (self-pairs included) of a random set of ``sizes[r]`` entities.

    The default yields 200 triples over 16 relations. A score that is a sum
    of a head term and a tail term can fit such a graph exactly.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for r, k in enumerate(sizes):
        members = np.sort(rng.choice(n_entities, size=k, replace=False))
        rows.extend((int(h), r, int(t)) for h in members for t in members)
    return np.array(rows, dtype=np.int64)


def _split(rows: list, rng: np.random.Generator) -> dict[str, list]:
    order = rng.permutation(len(rows))
    n_valid = int(round(len(rows) / 5))
    n_test = int(round(len(rows) / 5))
    n_train = len(rows) - n_valid - n_test
    pick = [rows[i] for i in order]
    return {"train": pick[:n_train], "valid": pick[n_train:n_train + n_valid],
            "test": pick[n_train + n_valid:]}


def _cover(splits: dict[str, list], seen: set) -> None:
    """Move valid/test triples whose entities never occur in training into train."""
    known = seen | {x for h, _, t in splits["train"] for x in (h, t)}
    for name in ("valid", "test"):
        keep = []
        for trip in splits[name]:
            if trip[0] in known and trip[2] in known:
                keep.append(trip)
            else:
                splits["train"].append(trip)
                known.update((trip[0], trip[2]))
        splits[name] = keep
    seen.update(known)


def community_benchmark(n_entities: int = 50, n_relations: int = 10, n_triples: int = 400,
                        new_fraction: float = 0.2, new_entity_fraction: float = 0.2,
                        members_per_relation: int = 10, seed: int = 0) -> list[dict[str, list]]:
    """Two-snapshot benchmark with community-structured relations.

    Each relation draws its triples from pairs of one member set. Entities
    are split into old and new; snapshot 0 takes triples among old entities
    only and snapshot 1 takes ``new_fraction`` of all triples, each touching
    at least one new entity. Returns per-snapshot ``{split: [(h, r, t)]}``
    with string names, split 3:1:1.
    """
    rng = np.random.default_rng(seed)
    n_new = int(round(n_entities * new_entity_fraction))
    ids = rng.permutation(n_entities)
    new = set(int(x) for x in ids[:n_new])
    members = [np.sort(rng.choice(n_entities, size=members_per_relation, replace=False))
               for _ in range(n_relations)]
    old_pool, new_pool = [], []
    for r, mem in enumerate(members):
        for h in mem.tolist():
            for t in mem.tolist():
                (new_pool if (h in new or t in new) else old_pool).append((h, r, t))
    n_later = int(round(n_triples * new_fraction))
    n_first = n_triples - n_later
    if n_first > len(old_pool) or n_later > len(new_pool):
        raise ValueError("member sets too small for the requested triple counts")
    first = [old_pool[i] for i in np.sort(rng.choice(len(old_pool), n_first, replace=False))]
    later = [new_pool[i] for i in np.sort(rng.choice(len(new_pool), n_later, replace=False))]
    seen: set = set()
    out = []
    for rows in (first, later):
        splits = _split(rows, rng)
        _cover(splits, seen)
        out.append({name: [(f"e{h}", f"r{r}", f"e{t}") for h, r, t in splits[name]]
                     for name in SPLITS})
    return out


def build_snapshots(per_snapshot: Sequence[dict[str, list]]) -> tuple[list[Snapshot], Vocab]:
    builder = SnapshotBuilder()
    snaps = [builder.add(splits, source=f" (synthetic {i})") for i, splits in enumerate(per_snapshot)]
    return snaps, builder.vocab.freeze()


def write_dataset(per_snapshot: Sequence[dict[str, list]], root) -> Path:
    """Write ``<root>/<i>/{train,valid,test}.txt`` for every snapshot."""
    root = Path(root)
    for i, splits in enumerate(per_snapshot):
        d = root / str(i)
        d.mkdir(parents=True, exist_ok=True)
        for name in SPLITS:
            write_triples(d / f"{name}.txt", splits.get(name, ()))
    return root


def triples_as_names(triples: np.ndarray) -> list[tuple[str, str, str]]:
    return [(f"e{h}", f"r{r}", f"e{t}") for h, r, t in np.asarray(triples).reshape(-1, 3).tolist()]


__all__ = ["clique_kg", "community_benchmark", "build_snapshots", "write_dataset",
           "triples_as_names"]
