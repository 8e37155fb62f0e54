"""Shared fixtures and oracles for the test suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from regionckge.continual import advance_snapshot, bcu
from regionckge.dataset import SnapshotBuilder, classify_hops
from regionckge.geometry import dist_terms, region_bounds, score
from regionckge.synthetic import build_snapshots, community_benchmark
from regionckge.training import (
    ModelState,
    TrainBatch,
    TrainConfig,
    compute_loss,
    make_batch,
    train_snapshot,
)


def small_config(**changes) -> TrainConfig:
    base = dict(dim=8, lr=0.01, batch_size=16, k_neg=4, epochs=3, patience=0, seed=0)
    base.update(changes)
    return TrainConfig(**base)


def benchmark(seed: int = 0, **kwargs):
    return build_snapshots(community_benchmark(seed=seed, **kwargs))


def prepared_model(config: TrainConfig, snapshots, upto: int) -> ModelState:
    """Model advanced to snapshot ``upto``, with every earlier snapshot trained."""
    model = ModelState(config)
    for i in range(upto + 1):
        advance_snapshot(model, snapshots[i], snapshots[:i])
        if i < upto:
            train_snapshot(model, snapshots[i].train, snapshots[i].n_entities)
    return model


def batch_triples(batch: TrainBatch) -> np.ndarray:
    parts = [batch.positives, batch.negatives.reshape(-1, 3)]
    if batch.old_facts is not None:
        parts.append(batch.old_facts)
    return np.concatenate(parts)


def kink_signature(model: ModelState, batch: TrainBatch) -> tuple:
    """Every piecewise switch the loss depends on, for detecting nearby kinks."""
    trip = batch_triples(batch)
    reps = model.representations()
    b = len(batch.positives)
    n_scored = b + batch.negatives.shape[0] * batch.negatives.shape[1]
    sig, dists = [], []
    for col, region_of in ((0, model.head_region), (2, model.tail_region)):
        reg = region_of(trip[:, 1])
        base = model.rel_base[reg].astype(np.float64)
        extent = model.rel_extent[reg].astype(np.float64)
        p = reps[trip[:, col]]
        terms, inside = dist_terms(p, base, extent)
        center = region_bounds(base, extent)[2]
        sig += [inside, np.sign(p - center), np.sign(extent)]
        dists.append(terms.sum(axis=1))
    s = dists[0][:n_scored] + dists[1][:n_scored]
    lo, hi = model.config.clamp
    sig.append((s < lo) | (s > hi))
    if batch.old_facts is not None:
        sig.append(np.sign(dists[0][:b] - dists[0][n_scored:]))
        sig.append(np.sign(dists[1][:b] - dists[1][n_scored:]))
    return tuple(x.tobytes() for x in sig)


@dataclass
class FiniteDifferenceReport:
    checked: int
    passed: int
    excluded: int
    worst: float

    @property
    def fraction(self) -> float:
        return self.passed / self.checked if self.checked else 0.0


def finite_difference_check(model: ModelState, batch: TrainBatch, n_params: int,
                            rng: np.random.Generator, h: float = 1e-5, guard: float = 1e-4,
                            tol: float = 1e-4, roundoff_floor: bool = False
                            ) -> FiniteDifferenceReport:
    """Compare analytic gradients with central differences on random touched parameters.

    Negative weights are frozen at their current values. Parameters whose
    perturbation by ``guard`` flips any piecewise switch are excluded and
    replaced by fresh draws. With ``roundoff_floor`` an absolute gap below the
    float64 resolution of the difference quotient also counts as a pass.
    """
    res = compute_loss(model, batch)
    weights = res.weights
    grads = res.grads
    params = model.params()
    pool = [(name, int(row)) for name, (rows, _) in grads.items() for row in rows]
    lookup = {name: {int(r): k for k, r in enumerate(rows)} for name, (rows, _) in grads.items()}
    base_sig = kink_signature(model, batch)
    floor = 64 * np.finfo(np.float64).eps * max(1.0, abs(res.loss)) / h if roundoff_floor else 0.0

    def loss_at(name, row, col, value):
        arr = params[name]
        old = arr[row, col]
        arr[row, col] = value
        try:
            return compute_loss(model, batch, with_grad=False, weights=weights).loss
        finally:
            arr[row, col] = old

    def sig_at(name, row, col, value):
        arr = params[name]
        old = arr[row, col]
        arr[row, col] = value
        try:
            return kink_signature(model, batch)
        finally:
            arr[row, col] = old

    checked = passed = excluded = 0
    worst = 0.0
    attempts = 0
    while checked < n_params and attempts < 50 * n_params:
        attempts += 1
        name, row = pool[int(rng.integers(len(pool)))]
        col = int(rng.integers(model.dim))
        x = float(params[name][row, col])
        if sig_at(name, row, col, x + guard) != base_sig or sig_at(name, row, col, x - guard) != base_sig:
            excluded += 1
            continue
        fd = (loss_at(name, row, col, x + h) - loss_at(name, row, col, x - h)) / (2 * h)
        analytic = float(grads[name][1][lookup[name][row], col])
        err = abs(analytic - fd) / (abs(analytic) + 1e-8)
        worst = max(worst, err)
        checked += 1
        passed += err < tol or abs(analytic - fd) < floor
    return FiniteDifferenceReport(checked, passed, excluded, worst)


def gradient_fixture(seed: int = 0, dim: int = 8, epochs: int = 2):
    """Float64 model at snapshot 1 with non-empty association sets and old facts.

    ``epochs`` is the training budget spent on snapshot 0 before the transition.
    """
    snaps, _ = benchmark(seed)
    config = small_config(dim=dim, dtype="float64", update_scope="Sbo", seed=seed, epochs=epochs)
    model = prepared_model(config, snaps, 1)
    batch = make_batch(model, snaps[1].train[:16], snaps[1].n_entities)
    return model, batch, snaps


def random_transition(rng: np.random.Generator, n_old: int = 12, n_new: int = 8,
                      n_rel: int = 3, n_first: int = 20, n_later: int = 15):
    """Two random snapshots; the second mixes old-new, new-new and old-old facts."""
    def name(x):
        return f"e{x}"

    first = {(name(rng.integers(n_old)), f"r{rng.integers(n_rel)}", name(rng.integers(n_old)))
             for _ in range(n_first)}
    old_names = {x for h, _, t in first for x in (h, t)}
    pool = n_old + n_new
    later = set()
    while len(later) < n_later:
        h, t = rng.integers(pool, size=2)
        trip = (name(h), f"r{rng.integers(n_rel + 1)}", name(t))
        if trip in first:
            continue
        if int(h) < n_old and name(h) not in old_names:
            continue
        if int(t) < n_old and name(t) not in old_names:
            continue
        later.add(trip)
    builder = SnapshotBuilder()
    return [builder.add({"train": sorted(first)}), builder.add({"train": sorted(later)})]


def random_toy_model(rng: np.random.Generator, quantize: bool = False, max_entities: int = 50):
    """Random single-snapshot KG with at most ``max_entities`` entities and a model over it.

    Association sets are filled at random so that representations mix
    offsets. With ``quantize`` every parameter is a multiple of 1/4, which
    makes exact score ties common.
    """
    n_ent = int(rng.integers(5, max_entities + 1))
    n_rel = int(rng.integers(1, 5))
    n_trip = int(rng.integers(5, 3 * n_ent))
    names = [f"e{i}" for i in range(n_ent)]
    rows = {(names[rng.integers(n_ent)], f"r{rng.integers(n_rel)}", names[rng.integers(n_ent)])
            for _ in range(n_trip)}
    rows = sorted(rows)
    order = rng.permutation(len(rows))
    n_test = max(1, len(rows) // 5)
    splits = {"test": [rows[i] for i in order[:n_test]],
              "train": [rows[i] for i in order[n_test:]]}
    snap = SnapshotBuilder().add(splits)
    config = TrainConfig(dim=int(rng.integers(2, 6)), dtype="float64", seed=int(rng.integers(1 << 30)))
    model = ModelState(config)
    advance_snapshot(model, snap)
    for e in range(model.n_entities):
        for j in rng.choice(model.n_entities, size=int(rng.integers(0, 3)), replace=False).tolist():
            if j != e:
                model.add_neighbor(e, j)
    if quantize:
        for p in model.params().values():
            p[:] = np.round(rng.uniform(-1, 1, p.shape) * 4) / 4
    return model, snap


def advanced(snaps, **config):
    model = ModelState(small_config(**config))
    for i, s in enumerate(snaps):
        report = advance_snapshot(model, s, snaps[:i])
    return model, report


def check_transition(snaps, degree_cap: int = 0):
    """Apply the update to a prepared model and verify every structural invariant."""
    model, _ = advanced(snaps, ablations={"bcu"}, degree_cap=degree_cap)
    snap = snaps[1]
    labels = classify_hops(snap)
    prev = snap.prev_n_entities
    base_before = model.ent_base.copy()
    off_before = model.ent_offset.copy()
    old_sets = [set(x) for x in model.neighbors]
    report = bcu(snap.delta_triples, model, labels, prev, degree_cap)

    assert np.array_equal(model.ent_base, base_before)
    assert np.array_equal(model.ent_offset, off_before)
    assert report.vector_additions <= 2 * len(snap.delta_triples)

    single = labels.single_hop_entities
    for h, _, t in snap.delta_triples.tolist():
        for a, b in ((h, t), (t, h)):
            if a in single:
                assert b in model.neighbors[a]
                if b < prev and degree_cap == 0:
                    assert a in model.neighbors[b]
                elif b in single:
                    assert a in model.neighbors[b]
    new_empty = {e for e in snap.delta_entities if not model.neighbors[e]}
    assert new_empty == labels.multi_hop_entities
    if degree_cap == 0:
        assert report.backward_updates == sum(
            len({j for j in model.neighbors[e] if j < prev}) for e in single)
    else:
        for j in range(prev):
            if model.neighbors[j] != old_sets[j]:
                assert len(model.neighbors[j]) <= degree_cap

    sets = [set(x) for x in model.neighbors]
    again = bcu(snap.delta_triples, model, labels, prev, degree_cap)
    assert model.neighbors == sets
    assert again.forward_updates == again.backward_updates == 0
    return report


def region_score_fn(model: ModelState):
    """Score one triple straight from the geometry, bypassing the batched scorer."""
    reps = model.representations()

    def fn(trip):
        h, r, t = trip
        return score(reps[h], reps[t], model.region(int(model.head_region(r))),
                     tail_relation=model.region(int(model.tail_region(r))), clamp=None)[0]
    return fn
