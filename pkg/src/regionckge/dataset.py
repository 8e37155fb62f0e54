"""Snapshot-sequence datasets: loading, hop classification and generation.

On-disk layout::

    <root>/<i>/train.txt
    <root>/<i>/valid.txt
    <root>/<i>/test.txt
    <root>/stats.json          (written by the generator only)

Each line is ``head<TAB>relation<TAB>tail`` in UTF-8 surface strings. Ids are
assigned on first sight (train, then valid, then test; head, relation, tail)
and never change afterwards, so the entity set of snapshot ``i`` is always
``range(n_entities)``.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
SINGLE_HOP = "single_hop"
MULTI_HOP = "multi_hop"
GROWTH_PROFILES = ("equal", "higher", "lower")


class DatasetError(Exception):
    """Raised for missing files and inconsistent dataset contents."""


class ParseError(DatasetError):
    def __init__(self, path, line_no, line):
        super().__init__(f"{path}:{line_no}: expected 3 tab-separated fields, got {line!r}")
        self.path = str(path)
        self.line_no = line_no


class GenerationError(Exception):
    """The requested snapshot sequence cannot be realised on the base graph."""


class DuplicateTripleWarning(UserWarning):
    pass


class Vocab:
    """Append-only string <-> dense id mapping for entities and relations."""

    def __init__(self, entity_names: Iterable[str] = (), relation_names: Iterable[str] = ()):
        self.entity_names: list[str] = []
        self.relation_names: list[str] = []
        self.entity_ids: dict[str, int] = {}
        self.relation_ids: dict[str, int] = {}
        self._frozen = False
        for name in entity_names:
            self.add_entity(name)
        for name in relation_names:
            self.add_relation(name)

    def add_entity(self, name: str) -> int:
        idx = self.entity_ids.get(name)
        if idx is None:
            if self._frozen:
                raise DatasetError(f"vocabulary is frozen; cannot add entity {name!r}")
            idx = len(self.entity_names)
            self.entity_names.append(name)
            self.entity_ids[name] = idx
        return idx

    def add_relation(self, name: str) -> int:
        idx = self.relation_ids.get(name)
        if idx is None:
            if self._frozen:
                raise DatasetError(f"vocabulary is frozen; cannot add relation {name!r}")
            idx = len(self.relation_names)
            self.relation_names.append(name)
            self.relation_ids[name] = idx
        return idx

    def freeze(self) -> "Vocab":
        self._frozen = True
        return self

    @property
    def n_entities(self) -> int:
        return len(self.entity_names)

    @property
    def n_relations(self) -> int:
        return len(self.relation_names)

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        _write_lines(directory / "entities.dict", self.entity_names)
        _write_lines(directory / "relations.dict", self.relation_names)

    @classmethod
    def read(cls, directory) -> "Vocab":
        directory = Path(directory)
        ents = _read_lines(directory / "entities.dict")
        rels = _read_lines(directory / "relations.dict")
        return cls(ents, rels)

    def __eq__(self, other):
        return (isinstance(other, Vocab) and self.entity_names == other.entity_names
                and self.relation_names == other.relation_names)


def _write_lines(path: Path, lines: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in lines:
            f.write(line + "\n")


def _read_lines(path: Path) -> list[str]:
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    with open(path, encoding="utf-8", newline="\n") as f:
        return [line.rstrip("\n") for line in f]


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.int64).reshape(-1, 3)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Snapshot:
    index: int
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    delta_triples: np.ndarray
    n_entities: int
    n_relations: int
    prev_n_entities: int
    prev_n_relations: int

    @property
    def delta_entities(self) -> range:
        return range(self.prev_n_entities, self.n_entities)

    @property
    def delta_relations(self) -> range:
        return range(self.prev_n_relations, self.n_relations)

    @property
    def cumulative_entities(self) -> range:
        return range(self.n_entities)

    @property
    def cumulative_relations(self) -> range:
        return range(self.n_relations)

    def split(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    @property
    def all_triples(self) -> np.ndarray:
        return np.concatenate([self.train, self.valid, self.test])

    def stats(self) -> dict:
        return {
            "index": self.index,
            "entities": self.n_entities,
            "relations": self.n_relations,
            "new_entities": len(self.delta_entities),
            "new_relations": len(self.delta_relations),
            "new_triples": len(self.delta_triples),
            "train": len(self.train),
            "valid": len(self.valid),
            "test": len(self.test),
        }


class SnapshotBuilder:
    """Turns per-split surface triples into consecutive :class:`Snapshot` objects."""

    def __init__(self, vocab: Vocab | None = None):
        self.vocab = vocab if vocab is not None else Vocab()
        self.snapshots: list[Snapshot] = []
        self._known: set[tuple[int, int, int]] = set()

    def add(self, splits: dict[str, Sequence[tuple[str, str, str]]], source: str = "") -> Snapshot:
        prev_e, prev_r = self.vocab.n_entities, self.vocab.n_relations
        index = len(self.snapshots)
        arrays = {}
        seen_in: dict[tuple[int, int, int], str] = {}
        for name in SPLITS:
            rows = []
            local: set[tuple[int, int, int]] = set()
            n_dup = 0
            for h, r, t in splits.get(name, ()):
                trip = (self.vocab.add_entity(h), self.vocab.add_relation(r), self.vocab.add_entity(t))
                if trip in local:
                    n_dup += 1
                    continue
                other = seen_in.get(trip)
                if other is not None:
                    raise DatasetError(
                        f"snapshot {index}{source}: triple {(h, r, t)} appears in both "
                        f"{other} and {name}")
                local.add(trip)
                seen_in[trip] = name
                rows.append(trip)
            if n_dup:
                warnings.warn(f"snapshot {index}{source}: dropped {n_dup} duplicate triple(s) "
                              f"in {name}", DuplicateTripleWarning, stacklevel=3)
            arrays[name] = np.array(rows, dtype=np.int64).reshape(-1, 3)
        delta = [trip for name in SPLITS for trip in map(tuple, arrays[name].tolist())
                 if trip not in self._known]
        self._known.update(delta)
        snap = Snapshot(
            index=index,
            train=_frozen(arrays["train"]),
            valid=_frozen(arrays["valid"]),
            test=_frozen(arrays["test"]),
            delta_triples=_frozen(np.array(delta, dtype=np.int64)),
            n_entities=self.vocab.n_entities,
            n_relations=self.vocab.n_relations,
            prev_n_entities=prev_e,
            prev_n_relations=prev_r,
        )
        self.snapshots.append(snap)
        return snap


def read_triples(path) -> list[tuple[str, str, str]]:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    out = []
    with open(path, encoding="utf-8", newline="\n") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(path, line_no, line)
            out.append((parts[0], parts[1], parts[2]))
    return out


def write_triples(path, triples: Iterable[tuple[str, str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for h, r, t in triples:
            f.write(f"{h}\t{r}\t{t}\n")


class DatasetLoader:
    """Loads snapshot directories one at a time, sharing a growing vocabulary."""

    def __init__(self, root):
        self.root = Path(root)
        self._builder = SnapshotBuilder()

    @property
    def vocab(self) -> Vocab:
        return self._builder.vocab

    @property
    def snapshots(self) -> list[Snapshot]:
        return self._builder.snapshots

    def load_next(self) -> Snapshot:
        index = len(self.snapshots)
        snap_dir = self.root / str(index)
        if not snap_dir.is_dir():
            raise DatasetError(f"missing snapshot directory: {snap_dir}")
        splits = {name: read_triples(snap_dir / f"{name}.txt") for name in SPLITS}
        return self._builder.add(splits, source=f" ({snap_dir})")


def count_snapshot_dirs(root) -> int:
    root = Path(root)
    n = 0
    while (root / str(n)).is_dir():
        n += 1
    return n


def load_dataset(root, n_snapshots: int | None = None) -> tuple[list[Snapshot], Vocab]:
    """Load snapshots ``0..n_snapshots-1`` from ``root``.

    With ``n_snapshots=None`` every consecutive numbered directory is loaded.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"missing dataset directory: {root}")
    if n_snapshots is None:
        n_snapshots = count_snapshot_dirs(root)
        if n_snapshots == 0:
            raise DatasetError(f"missing snapshot directory: {root / '0'}")
    loader = DatasetLoader(root)
    for _ in range(n_snapshots):
        loader.load_next()
    return list(loader.snapshots), loader.vocab.freeze()


# ---------------------------------------------------------------------------
# hop classification


@dataclass(frozen=True)
class HopLabel:
    snapshot: int
    entity_labels: dict = field(default_factory=dict)
    triple_labels: dict = field(default_factory=dict)

    @property
    def multi_hop_entities(self) -> set[int]:
        return {e for e, lab in self.entity_labels.items() if lab == MULTI_HOP}

    @property
    def single_hop_entities(self) -> set[int]:
        return {e for e, lab in self.entity_labels.items() if lab == SINGLE_HOP}

    @property
    def n_multi_hop_triples(self) -> int:
        return sum(1 for lab in self.triple_labels.values() if lab == MULTI_HOP)

    @property
    def n_single_hop_triples(self) -> int:
        return len(self.triple_labels) - self.n_multi_hop_triples

    def label(self, triple) -> str:
        """Label of a triple; triples not new at this snapshot count as single-hop."""
        return self.triple_labels.get(tuple(int(x) for x in triple), SINGLE_HOP)

    def counts(self) -> dict:
        return {
            "multi_hop_entities": len(self.multi_hop_entities),
            "single_hop_entities": len(self.single_hop_entities),
            "multi_hop_triples": self.n_multi_hop_triples,
            "single_hop_triples": self.n_single_hop_triples,
        }


def _largest_component(triples: np.ndarray) -> set[int]:
    parent: dict[int, int] = {}

    def find(x):
        root = x
        while parent.setdefault(root, root) != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    for h, _, t in triples.tolist():
        a, b = find(h), find(t)
        if a != b:
            if a < b:
                parent[b] = a
            else:
                parent[a] = b
    groups: dict[int, list[int]] = {}
    for x in list(parent):
        groups.setdefault(find(x), []).append(x)
    if not groups:
        return set()
    # ties broken towards the component holding the smallest id
    best = max(groups.values(), key=lambda g: (len(g), -min(g)))
    return set(best)


def classify_hops(snapshot: Snapshot, previous_entities: Iterable[int] | None = None) -> HopLabel:
    """Label new entities and new triples of ``snapshot`` as single- or multi-hop.

    A new entity is multi-hop when none of its incident new triples touches a
    previously known entity. When there is no previous graph (snapshot 0) the
    largest connected component of the snapshot plays that role.
    """
    if previous_entities is None:
        previous_entities = range(snapshot.prev_n_entities)
    previous = set(previous_entities)
    delta = snapshot.delta_triples
    new_entities = [e for e in snapshot.delta_entities if e not in previous]
    if not previous:
        anchored = _largest_component(delta)
    else:
        anchored = set()
        for h, _, t in delta.tolist():
            if t in previous:
                anchored.add(h)
            if h in previous:
                anchored.add(t)
    entity_labels = {e: (SINGLE_HOP if e in anchored else MULTI_HOP) for e in new_entities}
    triple_labels = {}
    for h, r, t in delta.tolist():
        multi = entity_labels.get(h) == MULTI_HOP and entity_labels.get(t) == MULTI_HOP
        triple_labels[(h, r, t)] = MULTI_HOP if multi else SINGLE_HOP
    return HopLabel(snapshot=snapshot.index, entity_labels=entity_labels,
                    triple_labels=triple_labels)


def dataset_stats(snapshots: Sequence[Snapshot]) -> list[dict]:
    out = []
    for snap in snapshots:
        row = snap.stats()
        labels = classify_hops(snap)
        row["multi_hop_triples"] = labels.n_multi_hop_triples
        row["single_hop_triples"] = labels.n_single_hop_triples
        row["multi_hop_entities"] = len(labels.multi_hop_entities)
        out.append(row)
    return out


# ---------------------------------------------------------------------------
# generation


def _growth_targets(total: int, n: int, profile: str) -> list[int]:
    if profile == "equal":
        weights = [1.0] * n
    elif profile == "higher":
        weights = [2.0 ** i for i in range(n)]
    elif profile == "lower":
        weights = [2.0 ** -i for i in range(n)]
    else:
        raise ValueError(f"unknown growth profile {profile!r}; expected one of {GROWTH_PROFILES}")
    cum = np.cumsum(weights) / sum(weights)
    bounds = [0] + [int(round(total * c)) for c in cum]
    bounds[-1] = total
    return [bounds[i + 1] - bounds[i] for i in range(n)]


def _split_311(rows: list, rng: np.random.Generator) -> dict[str, list]:
    order = rng.permutation(len(rows))
    rows = [rows[i] for i in order]
    n = len(rows)
    n_train = int(round(0.6 * n))
    n_valid = int(round(0.2 * n))
    return {
        "train": sorted(rows[:n_train]),
        "valid": sorted(rows[n_train:n_train + n_valid]),
        "test": sorted(rows[n_train + n_valid:]),
    }


def generate_snapshots(base_triples: Iterable[tuple[str, str, str]], n: int, out_dir,
                       growth_profile: str = "equal", multihop_ratio: float = 0.0,
                       seed: int = 0, ratio_tolerance: float = 0.002) -> dict:
    """Cut a static graph into ``n`` snapshots and write them under ``out_dir``.

    Snapshot entity sets grow from a seeded BFS start; every entity added at
    snapshot ``i > 0`` is adjacent to the previous snapshot. For ``i < n - 1``
    a fraction ``multihop_ratio`` of the facts comes from detached two-entity
    islands whose links to the rest of the graph are released one snapshot
    later. Returns the report that is also written to ``stats.json``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= multihop_ratio <= 0.05:
        raise ValueError(f"multihop_ratio must lie in [0, 0.05], got {multihop_ratio}")
    rng = np.random.default_rng(seed)

    triples = sorted(set((str(h), str(r), str(t)) for h, r, t in base_triples))
    names = sorted({x for h, _, t in triples for x in (h, t)})
    eid = {name: i for i, name in enumerate(names)}
    arr = np.array([(eid[h], 0, eid[t]) for h, _, t in triples], dtype=np.int64).reshape(-1, 3)
    main = _largest_component(arr)
    keep = [i for i, (h, _, t) in enumerate(arr.tolist()) if h in main and t in main]
    dropped_triples = len(triples) - len(keep)
    triples = [triples[i] for i in keep]
    heads = [eid[h] for h, _, _ in triples]
    tails = [eid[t] for _, _, t in triples]
    n_ent = len(names)
    incident: list[list[int]] = [[] for _ in range(n_ent)]
    for k, (h, t) in enumerate(zip(heads, tails)):
        incident[h].append(k)
        if t != h:
            incident[t].append(k)

    def other(k, x):
        return tails[k] if heads[k] == x else heads[k]

    targets = _growth_targets(len(triples), n, growth_profile)
    ent_snap = np.full(n_ent, -1, dtype=np.int64)
    trip_snap = np.full(len(triples), -1, dtype=np.int64)
    assigned_count = [0] * n

    def join(x, i):
        ent_snap[x] = i
        for k in incident[x]:
            y = other(k, x)
            if trip_snap[k] < 0 and ent_snap[y] >= 0:
                trip_snap[k] = i
                assigned_count[trip_snap[k]] += 1

    for i in range(n):
        ratio = multihop_ratio if i < n - 1 else 0.0
        main_target = targets[i] * (1.0 - ratio)
        if i == 0:
            start = int(rng.choice(sorted(main)))
            queue = [start]
            seen = {start}
            pos = 0
            while pos < len(queue) and assigned_count[0] < main_target:
                x = queue[pos]
                pos += 1
                join(x, 0)
                nbrs = sorted({other(k, x) for k in incident[x]} - seen)
                for y in rng.permutation(nbrs).tolist() if nbrs else []:
                    seen.add(y)
                    queue.append(y)
        else:
            previous = np.flatnonzero((ent_snap >= 0) & (ent_snap < i))
            frontier = sorted({other(k, x) for x in previous.tolist() for k in incident[x]
                               if ent_snap[other(k, x)] < 0})
            order = rng.permutation(frontier).tolist() if frontier else []
            for x in order:
                if i < n - 1 and assigned_count[i] >= main_target:
                    break
                join(x, i)
        if ratio > 0:
            main_count = assigned_count[i]
            island_target = ratio / (1.0 - ratio) * main_count
            made = 0
            free = ent_snap < 0
            near = np.zeros(n_ent, dtype=bool)
            for x in np.flatnonzero(~free).tolist():
                for k in incident[x]:
                    near[other(k, x)] = True
            cands = [k for k in range(len(triples))
                     if heads[k] != tails[k] and free[heads[k]] and free[tails[k]]]
            far = [k for k in cands if not (near[heads[k]] or near[tails[k]])]
            close = [k for k in cands if near[heads[k]] or near[tails[k]]]
            order = (rng.permutation(far).tolist() if far else []) + \
                    (rng.permutation(close).tolist() if close else [])
            for k in order:
                if made >= island_target:
                    break
                x, y = heads[k], tails[k]
                if ent_snap[x] >= 0 or ent_snap[y] >= 0:
                    continue
                ent_snap[x] = ent_snap[y] = i
                for z in (x, y):
                    for kk in incident[z]:
                        if trip_snap[kk] >= 0:
                            continue
                        w = other(kk, z)
                        if w in (x, y):
                            trip_snap[kk] = i
                            assigned_count[i] += 1
                            made += 1
                        elif ent_snap[w] >= 0:
                            trip_snap[kk] = i + 1
                            assigned_count[i + 1] += 1

    dropped_entities = int(np.sum(ent_snap < 0))
    dropped_triples += int(np.sum(trip_snap < 0))

    builder = SnapshotBuilder()
    split_rows = []
    for i in range(n):
        rows = [triples[k] for k in np.flatnonzero(trip_snap == i).tolist()]
        splits = _split_311(rows, rng)
        split_rows.append(splits)
        builder.add(splits)
    stats = dataset_stats(builder.snapshots)

    for i, row in enumerate(stats):
        if i == n - 1 or row["new_triples"] == 0:
            continue
        achieved = row["multi_hop_triples"] / row["new_triples"]
        tol = max(ratio_tolerance, 2.0 / row["new_triples"])
        if abs(achieved - multihop_ratio) > tol:
            raise GenerationError(
                f"snapshot {i}: achieved multi-hop ratio {achieved:.4f}, "
                f"requested {multihop_ratio:.4f}")

    out_dir = Path(out_dir)
    for i, splits in enumerate(split_rows):
        snap_dir = out_dir / str(i)
        snap_dir.mkdir(parents=True, exist_ok=True)
        for name in SPLITS:
            write_triples(snap_dir / f"{name}.txt", splits[name])
    report = {
        "format": "regionckge-stats/1",
        "growth_profile": growth_profile,
        "multihop_ratio": multihop_ratio,
        "seed": seed,
        "dropped_entities": dropped_entities,
        "dropped_triples": dropped_triples,
        "snapshots": stats,
    }
    with open(out_dir / "stats.json", "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(report, indent=2, sort_keys=True) + "\n")
    logger.info("wrote %d snapshots to %s", n, out_dir)
    return report


def read_stats(root) -> dict:
    path = Path(root) / "stats.json"
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def read_base_triples(path) -> list[tuple[str, str, str]]:
    """Base graph for generation: a triple file, or a dataset directory (all splits)."""
    path = Path(path)
    if path.is_dir():
        n = count_snapshot_dirs(path)
        if n == 0:
            files = [path / f"{s}.txt" for s in SPLITS if (path / f"{s}.txt").is_file()]
            if not files:
                raise DatasetError(f"no triple files under {path}")
        else:
            files = [path / str(i) / f"{s}.txt" for i in range(n) for s in SPLITS]
        out = []
        for f in files:
            out.extend(read_triples(f))
        return out
    return read_triples(path)


__all__ = [
    "Vocab", "Snapshot", "HopLabel", "SnapshotBuilder", "DatasetLoader", "DatasetError",
    "ParseError", "GenerationError", "DuplicateTripleWarning", "load_dataset", "classify_hops",
    "dataset_stats", "generate_snapshots", "read_triples", "write_triples", "read_stats",
    "read_base_triples", "SINGLE_HOP", "MULTI_HOP",
]
