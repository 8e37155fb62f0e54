"""Snapshot transitions: entity/relation initialisation and the bidirectional update."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataset import MULTI_HOP, SINGLE_HOP, HopLabel, Snapshot, classify_hops
from .geometry import EntityEmbedding
from .training import ModelState, TrainConfig, derive_seed


class SnapshotOrderError(ValueError):
    pass


class OrthogonalBlockSampler:
    """Hands out base vectors row by row from random orthonormal blocks.

    Rows from the same block (at most ``dim`` of them) are mutually orthogonal;
    a fresh block is drawn once the current one is used up.
    """

    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.rng = rng
        self._block = np.zeros((0, dim))
        self._pos = 0
        self.blocks_drawn = 0

    def _new_block(self):
        q, r = np.linalg.qr(self.rng.standard_normal((self.dim, self.dim)))
        # sign fix makes the draw uniform over the orthogonal group
        q = q * np.sign(np.diag(r))
        self._block = q.T
        self._pos = 0
        self.blocks_drawn += 1

    def next(self) -> np.ndarray:
        if self._pos >= len(self._block):
            self._new_block()
        row = self._block[self._pos]
        self._pos += 1
        return row

    def draw(self, n: int) -> np.ndarray:
        return np.stack([self.next() for _ in range(n)]) if n else np.zeros((0, self.dim))


def init_new_entity(entity_id: int, hop_class: str, sampler: OrthogonalBlockSampler,
                    rng: np.random.Generator, offset_scale: float = 0.01,
                    embedded: set | None = None) -> EntityEmbedding:
    """Fresh embedding: orthogonal-block base, small uniform offset, empty set.

    Both hop classes start the same way; they differ only in what the
    bidirectional update does afterwards. ``embedded`` guards against
    initialising the same id twice.
    """
    if hop_class not in (SINGLE_HOP, MULTI_HOP):
        raise ValueError(f"unknown hop class {hop_class!r}")
    if embedded is not None:
        if entity_id in embedded:
            raise ValueError(f"entity {entity_id} is already initialized")
        embedded.add(entity_id)
    base = sampler.next()
    offset = rng.uniform(-offset_scale, offset_scale, size=sampler.dim)
    return EntityEmbedding(base, offset, frozenset())


def init_relations(n: int, config: TrainConfig, rng: np.random.Generator, regions_per_relation=1):
    rows = n * regions_per_relation
    base = rng.uniform(-config.relation_base_init, config.relation_base_init, (rows, config.dim))
    lo, hi = config.relation_extent_init
    extent = rng.uniform(lo, hi, (rows, config.dim))
    return base, extent


@dataclass
class BcuReport:
    snapshot: int = -1
    entities_initialized: int = 0
    relations_initialized: int = 0
    single_hop_entities: int = 0
    multi_hop_entities: int = 0
    forward_updates: int = 0
    backward_updates: int = 0
    vector_additions: int = 0
    omega_sizes: dict = field(default_factory=dict)
    skipped: bool = False

    def lines(self) -> list[str]:
        sizes = list(self.omega_sizes.values())
        return [
            f"snapshot={self.snapshot}",
            f"entities_initialized={self.entities_initialized}",
            f"relations_initialized={self.relations_initialized}",
            f"single_hop_entities={self.single_hop_entities}",
            f"multi_hop_entities={self.multi_hop_entities}",
            f"forward_updates={self.forward_updates}",
            f"backward_updates={self.backward_updates}",
            f"vector_additions={self.vector_additions}",
            f"omega_mean={(sum(sizes) / len(sizes)) if sizes else 0.0:.4f}",
            f"omega_max={max(sizes) if sizes else 0}",
            f"bcu_skipped={int(self.skipped)}",
        ]


def bcu(delta_triples: np.ndarray, model: ModelState, labels: HopLabel,
        n_previous: int, degree_cap: int = 0) -> BcuReport:
    """Grow association sets for the new single-hop entities of a snapshot.

    For every single-hop entity ``e`` (ascending id) the opposite endpoint of
    each incident new triple joins ``Omega[e]`` (old -> new), and every
    previously known neighbour ``j`` gains ``e`` in ``Omega[j]`` (new -> old).
    Multi-hop entities keep an empty set. Base vectors are never touched.
    ``degree_cap > 0`` stops backward updates into neighbours whose set has
    reached that size.
    """
    delta_triples = np.asarray(delta_triples, dtype=np.int64).reshape(-1, 3)
    n = model.n_entities
    for h, _, t in delta_triples.tolist():
        for x in (h, t):
            if x >= n:
                raise KeyError(f"triple references entity {x} which has no embedding")
    single = sorted(labels.single_hop_entities)
    report = BcuReport(snapshot=labels.snapshot, single_hop_entities=len(single),
                       multi_hop_entities=len(labels.multi_hop_entities))
    incident: dict[int, list[int]] = {e: [] for e in single}
    for h, _, t in delta_triples.tolist():
        if h in incident:
            incident[h].append(t)
        if t in incident and t != h:
            incident[t].append(h)
    for e in single:
        for j in incident[e]:
            if model.add_neighbor(e, j):
                report.forward_updates += 1
        for j in sorted(model.neighbors[e]):
            if j >= n_previous:
                continue
            if degree_cap > 0 and len(model.neighbors[j]) >= degree_cap:
                continue
            if model.add_neighbor(j, e):
                report.backward_updates += 1
        report.omega_sizes[e] = len(model.neighbors[e])
    report.vector_additions = report.forward_updates + report.backward_updates
    return report


def build_reservoir(history: Sequence[Snapshot], size: int, seed: np.random.SeedSequence) -> np.ndarray:
    """Up to ``size`` uniformly sampled training triples from each past snapshot."""
    rng = np.random.default_rng(seed)
    parts = []
    for snap in history:
        train = snap.train
        if len(train) > size:
            train = train[np.sort(rng.choice(len(train), size=size, replace=False))]
        parts.append(train)
    if not parts:
        return np.zeros((0, 3), dtype=np.int64)
    return np.concatenate(parts).astype(np.int64)


def advance_snapshot(model: ModelState, snapshot: Snapshot, history: Sequence[Snapshot] = (),
                     config: TrainConfig | None = None) -> BcuReport:
    """Prepare ``model`` for training on ``snapshot``.

    Embeds the new entities and relations, runs the bidirectional update
    (unless ablated), marks pre-existing entities as old for the update scope,
    refreshes the old-fact reservoir from ``history`` and resets the optimiser.
    Also used for snapshot 0, where no update runs.
    """
    if config is not None:
        model.set_config(config)
    cfg = model.config
    if snapshot.index != model.snapshot + 1:
        raise SnapshotOrderError(
            f"snapshot {snapshot.index} cannot follow snapshot {model.snapshot}")
    if model.n_entities != snapshot.prev_n_entities or model.n_relations != snapshot.prev_n_relations:
        raise SnapshotOrderError(
            f"model has {model.n_entities} entities / {model.n_relations} relations, snapshot "
            f"{snapshot.index} expects {snapshot.prev_n_entities} / {snapshot.prev_n_relations}")
    rng = np.random.default_rng(derive_seed(cfg.seed, snapshot.index, "init"))
    sampler = OrthogonalBlockSampler(cfg.dim, rng)
    labels = classify_hops(snapshot)
    embedded = set(range(model.n_entities))
    new_ids = list(snapshot.delta_entities)
    embs = [init_new_entity(e, labels.entity_labels.get(e, MULTI_HOP), sampler, rng,
                            cfg.offset_init, embedded) for e in new_ids]
    if embs:
        model.add_entities(new_ids, np.stack([x.base for x in embs]),
                           np.stack([x.offset for x in embs]))
    n_new_rel = len(snapshot.delta_relations)
    if n_new_rel:
        base, extent = init_relations(n_new_rel, cfg, rng, model.regions_per_relation)
        model.add_relations(n_new_rel, base, extent)

    if snapshot.index == 0 or "bcu" in cfg.ablations:
        report = BcuReport(snapshot=snapshot.index, skipped=True,
                           single_hop_entities=len(labels.single_hop_entities),
                           multi_hop_entities=len(labels.multi_hop_entities))
    else:
        report = bcu(snapshot.delta_triples, model, labels, snapshot.prev_n_entities,
                     cfg.degree_cap)
    report.entities_initialized = len(new_ids)
    report.relations_initialized = n_new_rel

    model.snapshot = snapshot.index
    model.n_old_entities = snapshot.prev_n_entities
    model.epoch = 0
    model.best_valid = -1.0
    model.bad_evals = 0
    model.stopped = False
    model.rng = np.random.default_rng(derive_seed(cfg.seed, snapshot.index, "train"))
    model.reservoir = build_reservoir(list(history)[:snapshot.index], cfg.reservoir_size,
                                      derive_seed(cfg.seed, snapshot.index, "reservoir"))
    model.reset_optimizer()
    return report
