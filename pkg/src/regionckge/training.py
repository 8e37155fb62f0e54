"""Model state, losses, analytic gradients and the per-snapshot training loop."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, fields, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import geometry

logger = logging.getLogger(__name__)

UPDATE_SCOPES = ("Sb", "So", "Sbo")
ABLATIONS = ("bcu", "be")
# component codes for seed derivation, see derive_seed
SEED_COMPONENTS = {"init": 0, "train": 1, "reservoir": 2, "split": 3, "baseline": 4}


class NumericalError(RuntimeError):
    """Training produced a non-finite loss; the last good parameters were restored."""


@dataclass(frozen=True)
class TrainConfig:
    dim: int = 200
    lr: float = 1e-4
    batch_size: int = 1024
    k_neg: int = 10
    gamma: float = 6.0
    alpha: float = 0.5
    beta: float = 0.5
    epochs: int = 200
    patience: int = 3
    eval_every: int = 1
    seed: int = 0
    update_scope: str = "So"
    ablations: frozenset = frozenset()
    clamp_low: float = -30.0
    clamp_high: float = 30.0
    aggregate: str = "sum"
    paired_regions: bool = False
    reservoir_size: int = 1000
    shared_entity_pairing: bool = False
    degree_cap: int = 0
    offset_init: float = 0.01
    relation_base_init: float = 0.1
    relation_extent_init: tuple = (0.1, 0.5)
    max_grad_norm: float = 1.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.update_scope not in UPDATE_SCOPES:
            raise ValueError(f"update_scope must be one of {UPDATE_SCOPES}, got {self.update_scope!r}")
        bad = set(self.ablations) - set(ABLATIONS)
        if bad:
            raise ValueError(f"unknown ablations {sorted(bad)}; expected a subset of {ABLATIONS}")
        if self.aggregate not in ("sum", "mean"):
            raise ValueError(f"aggregate must be 'sum' or 'mean', got {self.aggregate!r}")
        object.__setattr__(self, "ablations", frozenset(self.ablations))
        object.__setattr__(self, "relation_extent_init", tuple(self.relation_extent_init))

    @property
    def clamp(self):
        return (self.clamp_low, self.clamp_high)

    @property
    def balance_weights(self) -> tuple[float, float]:
        if "be" in self.ablations:
            return 0.0, 0.0
        return self.alpha, self.beta

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def derive_seed(master: int, snapshot: int, component: str) -> np.random.SeedSequence:
    """Per-snapshot, per-component seed: ``SeedSequence([master, snapshot, code])``."""
    return np.random.SeedSequence([int(master), int(snapshot), SEED_COMPONENTS[component]])


def encode_triples(triples: np.ndarray) -> np.ndarray:
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    return (triples[:, 0] << 42) | (triples[:, 1] << 21) | triples[:, 2]


class Adam:
    """Row-sparse Adam: only rows that receive a gradient have their moments updated.

    Moment buffers are allocated on first use and padded when parameters grow.
    """

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 max_grad_norm: float = 0.0):
        self.lr = lr
        self.max_grad_norm = max_grad_norm
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def _moments(self, name, param):
        m = self.m.get(name)
        if m is None:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
        elif m.shape != param.shape:
            pad = param.shape[0] - m.shape[0]
            self.m[name] = np.concatenate([m, np.zeros((pad,) + m.shape[1:], dtype=m.dtype)])
            self.v[name] = np.concatenate([self.v[name],
                                           np.zeros((pad,) + m.shape[1:], dtype=m.dtype)])
        return self.m[name], self.v[name]

    def step(self, params: dict[str, np.ndarray], grads: dict[str, tuple[np.ndarray, np.ndarray]]):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        scale = 1.0
        if self.max_grad_norm > 0:
            norm = math.sqrt(sum(float(np.sum(g * g)) for _, g in grads.values()))
            if norm > self.max_grad_norm:
                scale = self.max_grad_norm / norm
        for name, (rows, g) in grads.items():
            g = g * scale if scale != 1.0 else g
            if len(rows) == 0:
                continue
            p = params[name]
            m, v = self._moments(name, p)
            m_rows = self.beta1 * m[rows].astype(np.float64) + (1.0 - self.beta1) * g
            v_rows = self.beta2 * v[rows].astype(np.float64) + (1.0 - self.beta2) * (g * g)
            m[rows] = m_rows
            v[rows] = v_rows
            update = self.lr * (m_rows / bc1) / (np.sqrt(v_rows / bc2) + self.eps)
            p[rows] = p[rows].astype(np.float64) - update

    def reset(self):
        self.t = 0
        self.m.clear()
        self.v.clear()


class ModelState:
    """All learnable parameters plus the bookkeeping needed to resume training.

    Entity ids are dense and append-only; ``neighbors[i]`` is the association
    set of entity ``i``. Relation ``r`` uses region row ``r`` for both head and
    tail unless ``paired_regions`` is set, in which case rows ``2r`` and
    ``2r + 1`` hold the head and tail regions.
    """

    def __init__(self, config: TrainConfig):
        self.config = config
        self.dim = config.dim
        self.dtype = np.dtype(config.dtype)
        self.ent_base = np.zeros((0, self.dim), dtype=self.dtype)
        self.ent_offset = np.zeros((0, self.dim), dtype=self.dtype)
        self.neighbors: list[set[int]] = []
        self.rel_base = np.zeros((0, self.dim), dtype=self.dtype)
        self.rel_extent = np.zeros((0, self.dim), dtype=self.dtype)
        self.optimizer = Adam(config.lr, max_grad_norm=config.max_grad_norm)
        self.snapshot = -1
        self.epoch = 0
        self.n_old_entities = 0
        self.best_valid = -1.0
        self.bad_evals = 0
        self.stopped = False
        self.rng = np.random.default_rng(derive_seed(config.seed, 0, "train"))
        self.reservoir = np.zeros((0, 3), dtype=np.int64)
        self._assoc = None

    # -- structure -------------------------------------------------------

    @property
    def n_entities(self) -> int:
        return self.ent_base.shape[0]

    @property
    def regions_per_relation(self) -> int:
        return 2 if self.config.paired_regions else 1

    @property
    def n_relations(self) -> int:
        return self.rel_base.shape[0] // self.regions_per_relation

    def head_region(self, rel):
        return np.asarray(rel) * self.regions_per_relation

    def tail_region(self, rel):
        return np.asarray(rel) * self.regions_per_relation + (self.regions_per_relation - 1)

    def params(self) -> dict[str, np.ndarray]:
        return {"ent_base": self.ent_base, "ent_offset": self.ent_offset,
                "rel_base": self.rel_base, "rel_extent": self.rel_extent}

    def add_entities(self, ids, base: np.ndarray, offset: np.ndarray) -> None:
        ids = [int(i) for i in ids]
        expected = list(range(self.n_entities, self.n_entities + len(ids)))
        if ids != expected:
            dup = [i for i in ids if i < self.n_entities]
            if dup:
                raise ValueError(f"entities already initialized: {dup[:10]}")
            raise ValueError(f"entity ids must be appended densely; expected {expected[:3]}..., "
                             f"got {ids[:3]}...")
        self.ent_base = np.concatenate([self.ent_base, np.asarray(base, dtype=self.dtype)])
        self.ent_offset = np.concatenate([self.ent_offset, np.asarray(offset, dtype=self.dtype)])
        self.neighbors.extend(set() for _ in ids)
        self._assoc = None

    def add_relations(self, n: int, base: np.ndarray, extent: np.ndarray) -> None:
        k = self.regions_per_relation
        if base.shape != (n * k, self.dim) or extent.shape != (n * k, self.dim):
            raise ValueError("relation arrays must have shape (n * regions_per_relation, dim)")
        self.rel_base = np.concatenate([self.rel_base, base.astype(self.dtype)])
        self.rel_extent = np.concatenate([self.rel_extent, extent.astype(self.dtype)])

    def add_neighbor(self, entity: int, neighbor: int) -> bool:
        if neighbor in self.neighbors[entity]:
            return False
        self.neighbors[entity].add(neighbor)
        self._assoc = None
        return True

    def association_matrix(self) -> sp.csr_matrix:
        """Sparse ``M`` with ``reps = base + M @ offset`` (own offset on the diagonal)."""
        if self._assoc is None:
            n = self.n_entities
            rows, cols, vals = [], [], []
            mean = self.config.aggregate == "mean"
            for i, nb in enumerate(self.neighbors):
                rows.append(i)
                cols.append(i)
                vals.append(1.0)
                if nb:
                    w = 1.0 / len(nb) if mean else 1.0
                    for j in sorted(nb):
                        rows.append(i)
                        cols.append(j)
                        vals.append(w)
            m = sp.csr_matrix((np.array(vals, dtype=np.float64),
                               (np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64))),
                              shape=(n, n))
            m.sum_duplicates()
            m.sort_indices()
            self._assoc = m
        return self._assoc

    def representations(self, ids=None) -> np.ndarray:
        """Final entity vectors (float64) for ``ids`` (all entities by default)."""
        m = self.association_matrix()
        off = self.ent_offset.astype(np.float64)
        if ids is None:
            return self.ent_base.astype(np.float64) + m @ off
        ids = np.asarray(ids, dtype=np.int64)
        return self.ent_base[ids].astype(np.float64) + m[ids] @ off

    def region(self, index: int) -> geometry.RelationRegion:
        return geometry.RelationRegion(self.rel_base[index].astype(np.float64),
                                       self.rel_extent[index].astype(np.float64))

    def entity(self, i: int) -> geometry.EntityEmbedding:
        return geometry.EntityEmbedding(self.ent_base[i].astype(np.float64),
                                        self.ent_offset[i].astype(np.float64),
                                        frozenset(self.neighbors[i]))

    # -- trainability ----------------------------------------------------

    def base_trainable(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        if self.config.update_scope in ("Sb", "Sbo"):
            return np.ones(ids.shape, dtype=bool)
        return ids >= self.n_old_entities

    def offset_trainable(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        if self.config.update_scope in ("So", "Sbo"):
            return np.ones(ids.shape, dtype=bool)
        return ids >= self.n_old_entities

    # -- evaluation ------------------------------------------------------

    def scorer(self) -> "RegionScorer":
        return RegionScorer(self)

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)

    def reset_optimizer(self):
        self.optimizer = Adam(self.config.lr, max_grad_norm=self.config.max_grad_norm)

    def set_config(self, config: TrainConfig) -> None:
        if config.dim != self.dim or config.paired_regions != self.config.paired_regions:
            raise ValueError("dimension and region layout cannot change on an existing model")
        self.config = config
        self.optimizer.lr = config.lr
        self.optimizer.max_grad_norm = config.max_grad_norm
        self._assoc = None


class RegionScorer:
    """Read-only scoring view over a frozen :class:`ModelState`.

    Distances of every entity to every region are computed once and reused, so
    single-triple scores and full candidate scans share one arithmetic path.
    """

    def __init__(self, model: ModelState):
        self.model = model
        self.reps = model.representations()
        self.n_entities = model.n_entities
        self._table: dict[int, np.ndarray] = {}

    def region_dists(self, region: int) -> np.ndarray:
        d = self._table.get(region)
        if d is None:
            m = self.model
            d = geometry.dist(self.reps, base=m.rel_base[region].astype(np.float64),
                              extent=m.rel_extent[region].astype(np.float64))
            self._table[region] = d
        return d

    def score_triples(self, triples: np.ndarray) -> np.ndarray:
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        out = np.empty(len(triples))
        m = self.model
        for k, (h, r, t) in enumerate(triples.tolist()):
            out[k] = self.region_dists(int(m.head_region(r)))[h] + \
                self.region_dists(int(m.tail_region(r)))[t]
        return out

    def candidate_scores(self, triples: np.ndarray, side: str, n_candidates: int) -> np.ndarray:
        """Scores (lower is better) of replacing ``side`` by each of the first ``n_candidates``."""
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        m = self.model
        out = np.empty((len(triples), n_candidates))
        for k, (h, r, t) in enumerate(triples.tolist()):
            hd = self.region_dists(int(m.head_region(r)))
            td = self.region_dists(int(m.tail_region(r)))
            if side == "tail":
                out[k] = hd[h] + td[:n_candidates]
            else:
                out[k] = hd[:n_candidates] + td[t]
        return out


# ---------------------------------------------------------------------------
# negative sampling


def sample_negatives_batch(positives: np.ndarray, k_neg: int, n_entities: int,
                           rng: np.random.Generator, known_codes: np.ndarray | None = None,
                           max_redraws: int = 10):
    """Corrupt head or tail (fair coin) of every positive ``k_neg`` times.

    Replacements are uniform over ``range(n_entities)`` minus the original
    entity. A negative equal to a known positive is redrawn up to
    ``max_redraws`` times and then kept. Returns ``(negatives, corrupt_head)``
    of shapes ``(B, k_neg, 3)`` and ``(B, k_neg)``.
    """
    if n_entities < 2:
        raise ValueError("negative sampling needs at least two entities")
    positives = np.asarray(positives, dtype=np.int64).reshape(-1, 3)
    b = len(positives)
    corrupt_head = rng.random((b, k_neg)) < 0.5
    negs = np.repeat(positives[:, None, :], k_neg, axis=1)
    orig = np.where(corrupt_head, negs[..., 0], negs[..., 2])

    def draw(shape, original):
        x = rng.integers(0, n_entities - 1, size=shape)
        return x + (x >= original)

    repl = draw((b, k_neg), orig)
    negs[..., 0] = np.where(corrupt_head, repl, negs[..., 0])
    negs[..., 2] = np.where(corrupt_head, negs[..., 2], repl)
    if known_codes is not None and len(known_codes):
        for _ in range(max_redraws):
            codes = encode_triples(negs.reshape(-1, 3)).reshape(b, k_neg)
            pos = np.searchsorted(known_codes, codes)
            pos = np.minimum(pos, len(known_codes) - 1)
            hit = known_codes[pos] == codes
            if not hit.any():
                break
            idx = np.nonzero(hit)
            new = draw(len(idx[0]), orig[idx])
            ch = corrupt_head[idx]
            negs[idx[0][ch], idx[1][ch], 0] = new[ch]
            negs[idx[0][~ch], idx[1][~ch], 2] = new[~ch]
    return negs, corrupt_head


def sample_negatives(positive, k_neg: int, entity_pool, rng: np.random.Generator,
                     known_codes: np.ndarray | None = None) -> list[tuple[int, int, int]]:
    """Negatives for a single positive triple; ``entity_pool`` is ``E_i`` (dense ids)."""
    n = len(entity_pool) if not isinstance(entity_pool, int) else entity_pool
    negs, _ = sample_negatives_batch(np.array([positive]), k_neg, n, rng, known_codes)
    return [tuple(x) for x in negs[0].tolist()]


# ---------------------------------------------------------------------------
# losses


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def adversarial_weights(s_neg, clamp=geometry.DEFAULT_CLAMP):
    u = geometry.exp_score(s_neg, clamp)
    return u / u.sum(axis=-1, keepdims=True)


def learn_loss(s_pos, s_neg, gamma: float, weights=None, clamp=geometry.DEFAULT_CLAMP) -> float:
    """Self-adversarial sigmoid loss averaged over positives.

    ``s_pos`` has shape ``(B,)`` and ``s_neg`` shape ``(B, K)`` (log-domain
    scores). ``weights`` overrides the normalised negative weights.
    """
    s_pos = np.atleast_1d(np.asarray(s_pos, dtype=np.float64))
    s_neg = np.asarray(s_neg, dtype=np.float64).reshape(len(s_pos), -1)
    u_pos = geometry.exp_score(s_pos, clamp)
    u_neg = geometry.exp_score(s_neg, clamp)
    if weights is None:
        weights = u_neg / u_neg.sum(axis=-1, keepdims=True)
    weights = np.asarray(weights, dtype=np.float64).reshape(s_neg.shape)
    per = _softplus(u_pos - gamma) + (weights * _softplus(gamma - u_neg)).sum(axis=-1)
    return float(per.mean())


def balance_terms(d_head_new, d_head_old, d_tail_new, d_tail_old, alpha, beta):
    d_head = np.asarray(d_head_new) - np.asarray(d_head_old)
    d_tail = np.asarray(d_tail_new) - np.asarray(d_tail_old)
    return alpha * np.abs(d_head) + beta * np.abs(d_tail), d_head, d_tail


def balance_loss(new_fact, old_fact, model: ModelState | None, alpha: float, beta: float,
                 dists=None) -> tuple[float, bool]:
    """Magnitude of the head/tail distance gap between a new and an old fact.

    Returns ``(loss, active)``; ``active`` is False when no old fact exists.
    ``dists`` may supply ``(head_new, head_old, tail_new, tail_old)`` directly.
    """
    if old_fact is None or (dists is None and len(np.atleast_2d(old_fact)) == 0):
        return 0.0, False
    if dists is None:
        scorer = model.scorer()
        h, r, t = (int(x) for x in new_fact)
        ho, ro, to = (int(x) for x in old_fact)
        dists = (scorer.region_dists(int(model.head_region(r)))[h],
                 scorer.region_dists(int(model.head_region(ro)))[ho],
                 scorer.region_dists(int(model.tail_region(r)))[t],
                 scorer.region_dists(int(model.tail_region(ro)))[to])
    terms, _, _ = balance_terms(dists[0], dists[1], dists[2], dists[3], alpha, beta)
    return float(np.mean(terms)), True


def total_loss(learn: float, balance: float) -> float:
    return learn + balance


@dataclass
class TrainBatch:
    positives: np.ndarray
    negatives: np.ndarray
    corrupt_head: np.ndarray
    old_facts: np.ndarray | None = None

    def duplicated(self) -> "TrainBatch":
        old = None if self.old_facts is None else np.concatenate([self.old_facts] * 2)
        return TrainBatch(np.concatenate([self.positives] * 2),
                          np.concatenate([self.negatives] * 2),
                          np.concatenate([self.corrupt_head] * 2), old)


@dataclass
class LossResult:
    loss: float
    learn: float
    balance: float
    balance_active: bool
    grads: dict = field(default_factory=dict)
    weights: np.ndarray | None = None


def _gather_matrix(index: np.ndarray, n_cols: int) -> sp.csr_matrix:
    n = len(index)
    return sp.csr_matrix((np.ones(n), (np.arange(n), index)), shape=(n, n_cols))


def compute_loss(model: ModelState, batch: TrainBatch, with_grad: bool = True,
                 weights: np.ndarray | None = None) -> LossResult:
    """Batch loss and row-sparse analytic gradients.

    Negative weights and inside/outside indicators are constants for the
    gradient. The exp clamp is bypassed in the backward pass so that
    saturated scores still receive a gradient. Pass ``weights`` to freeze the
    negative weights (used by the finite-difference check).
    """
    cfg = model.config
    pos = np.asarray(batch.positives, dtype=np.int64).reshape(-1, 3)
    neg = np.asarray(batch.negatives, dtype=np.int64).reshape(len(pos), -1, 3)
    b, k = neg.shape[0], neg.shape[1]
    alpha, beta = cfg.balance_weights
    old = batch.old_facts
    balance_on = old is not None and len(old) > 0
    if balance_on:
        old = np.asarray(old, dtype=np.int64).reshape(-1, 3)
        if len(old) != b:
            raise ValueError("old_facts must pair one-to-one with positives")
    parts = [pos, neg.reshape(-1, 3)] + ([old] if balance_on else [])
    trip = np.concatenate(parts)
    n_scored = b + b * k

    ents, inv = np.unique(np.concatenate([trip[:, 0], trip[:, 2]]), return_inverse=True)
    h_idx, t_idx = inv[:len(trip)], inv[len(trip):]
    m_rows = model.association_matrix()[ents]
    off = model.ent_offset.astype(np.float64)
    reps = model.ent_base[ents].astype(np.float64) + m_rows @ off
    h_reg = model.head_region(trip[:, 1])
    t_reg = model.tail_region(trip[:, 1])
    rb = model.rel_base.astype(np.float64)
    re_ = model.rel_extent.astype(np.float64)
    dh, gph, gbh, geh = geometry.dist_with_grad(reps[h_idx], rb[h_reg], re_[h_reg])
    dt, gpt, gbt, get_ = geometry.dist_with_grad(reps[t_idx], rb[t_reg], re_[t_reg])

    s = dh[:n_scored] + dt[:n_scored]
    s_pos = s[:b]
    s_neg = s[b:].reshape(b, k)
    u_pos = geometry.exp_score(s_pos, cfg.clamp)
    u_neg = geometry.exp_score(s_neg, cfg.clamp)
    if weights is None:
        weights = u_neg / u_neg.sum(axis=1, keepdims=True)
    gamma = cfg.gamma
    learn_per = _softplus(u_pos - gamma) + (weights * _softplus(gamma - u_neg)).sum(axis=1)
    learn = float(learn_per.mean())

    balance = 0.0
    if balance_on:
        bal_terms, d_head, d_tail = balance_terms(dh[:b], dh[n_scored:], dt[:b], dt[n_scored:],
                                                  alpha, beta)
        balance = float(bal_terms.mean())
    result = LossResult(loss=learn + balance, learn=learn, balance=balance,
                        balance_active=balance_on, weights=weights)
    if not with_grad:
        return result

    g_s = np.empty(n_scored)
    g_s[:b] = _sigmoid(u_pos - gamma) * u_pos / b
    g_s[b:] = (-weights * _sigmoid(gamma - u_neg) * u_neg).ravel() / b
    g_dh = np.zeros(len(trip))
    g_dt = np.zeros(len(trip))
    g_dh[:n_scored] = g_s
    g_dt[:n_scored] = g_s
    if balance_on:
        sh = alpha * np.sign(d_head) / b
        st = beta * np.sign(d_tail) / b
        g_dh[:b] += sh
        g_dh[n_scored:] -= sh
        g_dt[:b] += st
        g_dt[n_scored:] -= st

    n_u = len(ents)
    g_reps = _gather_matrix(h_idx, n_u).T @ (g_dh[:, None] * gph) + \
        _gather_matrix(t_idx, n_u).T @ (g_dt[:, None] * gpt)
    reg_all = np.concatenate([h_reg, t_reg])
    regs, reg_inv = np.unique(reg_all, return_inverse=True)
    gather = _gather_matrix(reg_inv, len(regs)).T
    g_rb = gather @ np.concatenate([g_dh[:, None] * gbh, g_dt[:, None] * gbt])
    g_re = gather @ np.concatenate([g_dh[:, None] * geh, g_dt[:, None] * get_])

    grads = {}
    bmask = model.base_trainable(ents)
    grads["ent_base"] = (ents[bmask], g_reps[bmask])
    cols = np.unique(m_rows.indices)
    g_off = (m_rows[:, cols].T @ g_reps)
    omask = model.offset_trainable(cols)
    grads["ent_offset"] = (cols[omask], np.asarray(g_off)[omask])
    grads["rel_base"] = (regs, g_rb)
    grads["rel_extent"] = (regs, g_re)
    result.grads = grads
    return result


def dense_gradients(model: ModelState, grads: dict) -> dict[str, np.ndarray]:
    out = {}
    for name, p in model.params().items():
        g = np.zeros(p.shape, dtype=np.float64)
        rows, vals = grads.get(name, (np.zeros(0, dtype=np.int64), None))
        if len(rows):
            g[rows] += vals
        out[name] = g
    return out


def gradients(batch: TrainBatch, model: ModelState) -> dict:
    """Row-sparse gradients ``{name: (rows, values)}`` of the batch loss."""
    return compute_loss(model, batch).grads


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, epoch: int, loss: float, valid_mrr: float | None):
        self.rows.append((epoch, loss, valid_mrr))

    def to_csv(self) -> str:
        lines = ["epoch,loss,valid_mrr"]
        for epoch, loss, mrr in self.rows:
            lines.append(f"{epoch},{loss:.8f},{'' if mrr is None else f'{mrr:.6f}'}")
        return "\n".join(lines) + "\n"

    def __len__(self):
        return len(self.rows)


def _draw_old_facts(model: ModelState, positives: np.ndarray) -> np.ndarray | None:
    res = model.reservoir
    if len(res) == 0:
        return None
    idx = model.rng.integers(0, len(res), size=len(positives))
    old = res[idx]
    if model.config.shared_entity_pairing:
        by_entity: dict[int, list[int]] = {}
        for j, (h, _, t) in enumerate(res.tolist()):
            by_entity.setdefault(h, []).append(j)
            by_entity.setdefault(t, []).append(j)
        for i, (h, _, t) in enumerate(positives.tolist()):
            cand = by_entity.get(h, []) + by_entity.get(t, [])
            if cand:
                old[i] = res[cand[int(model.rng.integers(0, len(cand)))]]
    return old


def make_batch(model: ModelState, positives: np.ndarray, n_entities: int,
               known_codes: np.ndarray | None = None) -> TrainBatch:
    negs, side = sample_negatives_batch(positives, model.config.k_neg, n_entities, model.rng,
                                        known_codes)
    old = _draw_old_facts(model, positives) if model.config.balance_weights != (0.0, 0.0) else None
    return TrainBatch(positives, negs, side, old)


def _snapshot_params(model: ModelState):
    return {name: p.copy() for name, p in model.params().items()}


def _restore_params(model: ModelState, saved):
    model.ent_base = saved["ent_base"]
    model.ent_offset = saved["ent_offset"]
    model.rel_base = saved["rel_base"]
    model.rel_extent = saved["rel_extent"]


def train_epoch(model: ModelState, train: np.ndarray, n_entities: int,
                known_codes: np.ndarray | None = None) -> float:
    cfg = model.config
    order = model.rng.permutation(len(train))
    total = 0.0
    for start in range(0, len(train), cfg.batch_size):
        pos = train[order[start:start + cfg.batch_size]]
        batch = make_batch(model, pos, n_entities, known_codes)
        res = compute_loss(model, batch)
        if not math.isfinite(res.loss):
            raise NumericalError(f"non-finite loss at epoch {model.epoch}")
        model.optimizer.step(model.params(), res.grads)
        total += res.loss * len(pos)
    return total / max(len(train), 1)


def train_snapshot(model: ModelState, train: np.ndarray, n_entities: int,
                   valid_fn: Callable[[ModelState], float] | None = None,
                   known_codes: np.ndarray | None = None, log: TrainLog | None = None,
                   stop_after: int | None = None) -> TrainLog:
    """Run epochs ``model.epoch .. config.epochs - 1`` on ``train``.

    ``valid_fn`` returns the validation MRR used for early stopping (patience
    counted in evaluations; ``patience <= 0`` disables it). ``stop_after``
    halts after that many epochs in this call, leaving the model resumable.
    On a non-finite loss the parameters of the last completed epoch are
    restored and :class:`NumericalError` is raised.
    """
    cfg = model.config
    log = TrainLog() if log is None else log
    train = np.asarray(train, dtype=np.int64).reshape(-1, 3)
    done = 0
    while model.epoch < cfg.epochs and not model.stopped and len(train):
        if stop_after is not None and done >= stop_after:
            break
        saved = _snapshot_params(model)
        saved_opt = copy.deepcopy(model.optimizer)
        try:
            loss = train_epoch(model, train, n_entities, known_codes)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {model.epoch}")
            for p in model.params().values():
                if not np.all(np.isfinite(p)):
                    raise NumericalError(f"non-finite parameters at epoch {model.epoch}")
        except NumericalError:
            _restore_params(model, saved)
            model.optimizer = saved_opt
            raise
        epoch = model.epoch
        model.epoch += 1
        done += 1
        mrr = None
        if valid_fn is not None and cfg.eval_every > 0 and model.epoch % cfg.eval_every == 0:
            mrr = valid_fn(model)
            if mrr > model.best_valid:
                model.best_valid = mrr
                model.bad_evals = 0
            else:
                model.bad_evals += 1
                if cfg.patience > 0 and model.bad_evals >= cfg.patience:
                    model.stopped = True
        log.append(epoch, loss, mrr)
        logger.debug("epoch %d loss %.6f valid_mrr %s", epoch, loss, mrr)
    return log
