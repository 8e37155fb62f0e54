"""Translation baseline (L1 TransE) trained by naive fine-tuning across snapshots."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .dataset import Snapshot
from .training import Adam, NumericalError, TrainConfig, TrainLog, derive_seed, sample_negatives_batch


class TransEModel:
    """Entity and relation vectors scored by ``||h + r - t||_1`` (lower is better)."""

    def __init__(self, config: TrainConfig, margin: float = 1.0):
        self.config = config
        self.dim = config.dim
        self.margin = margin
        self.ent = np.zeros((0, self.dim))
        self.rel = np.zeros((0, self.dim))
        self.optimizer = Adam(config.lr)
        self.snapshot = -1
        self.epoch = 0
        self.best_valid = -1.0
        self.bad_evals = 0
        self.stopped = False
        self.rng = np.random.default_rng(derive_seed(config.seed, 0, "baseline"))

    @property
    def n_entities(self) -> int:
        return self.ent.shape[0]

    @property
    def n_relations(self) -> int:
        return self.rel.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"ent": self.ent, "rel": self.rel}

    def advance(self, snapshot: Snapshot) -> None:
        """Embed the snapshot's new entities and relations; old vectors are kept."""
        if snapshot.index != self.snapshot + 1:
            raise ValueError(f"snapshot {snapshot.index} cannot follow snapshot {self.snapshot}")
        rng = np.random.default_rng(derive_seed(self.config.seed, snapshot.index, "baseline"))
        bound = 6.0 / math.sqrt(self.dim)
        new_e = rng.uniform(-bound, bound, (len(snapshot.delta_entities), self.dim))
        new_e /= np.maximum(np.linalg.norm(new_e, axis=1, keepdims=True), 1e-12)
        new_r = rng.uniform(-bound, bound, (len(snapshot.delta_relations), self.dim))
        self.ent = np.concatenate([self.ent, new_e])
        self.rel = np.concatenate([self.rel, new_r])
        self.snapshot = snapshot.index
        self.epoch = 0
        self.best_valid = -1.0
        self.bad_evals = 0
        self.stopped = False
        self.rng = np.random.default_rng(derive_seed(self.config.seed, snapshot.index, "train"))
        self.optimizer = Adam(self.config.lr)

    def scorer(self) -> "TransEScorer":
        return TransEScorer(self)


class TransEScorer:
    def __init__(self, model: TransEModel):
        self.ent = model.ent.copy()
        self.rel = model.rel.copy()
        self.n_entities = model.n_entities

    def score_triples(self, triples: np.ndarray) -> np.ndarray:
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        out = np.empty(len(triples))
        for k, (h, r, t) in enumerate(triples.tolist()):
            out[k] = np.abs((self.ent[h] + self.rel[r]) - self.ent[t]).sum()
        return out

    def candidate_scores(self, triples: np.ndarray, side: str, n_candidates: int) -> np.ndarray:
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        cands = self.ent[:n_candidates]
        out = np.empty((len(triples), n_candidates))
        for k, (h, r, t) in enumerate(triples.tolist()):
            if side == "tail":
                out[k] = np.abs((self.ent[h] + self.rel[r]) - cands).sum(axis=1)
            else:
                out[k] = np.abs((cands + self.rel[r]) - self.ent[t]).sum(axis=1)
        return out


def transe_loss(model: TransEModel, positives: np.ndarray, negatives: np.ndarray,
                with_grad: bool = True):
    """Margin ranking loss ``mean(max(0, margin + d(pos) - d(neg)))`` and row-sparse gradients."""
    pos = np.asarray(positives, dtype=np.int64).reshape(-1, 3)
    neg = np.asarray(negatives, dtype=np.int64).reshape(len(pos), -1, 3)
    k = neg.shape[1]
    pos_rep = np.repeat(pos, k, axis=0)
    neg_flat = neg.reshape(-1, 3)
    diff_p = model.ent[pos_rep[:, 0]] + model.rel[pos_rep[:, 1]] - model.ent[pos_rep[:, 2]]
    diff_n = model.ent[neg_flat[:, 0]] + model.rel[neg_flat[:, 1]] - model.ent[neg_flat[:, 2]]
    viol = model.margin + np.abs(diff_p).sum(axis=1) - np.abs(diff_n).sum(axis=1)
    active = viol > 0
    loss = float(np.where(active, viol, 0.0).sum() / len(pos_rep)) if len(pos_rep) else 0.0
    if not with_grad:
        return loss, {}
    scale = active[:, None] / len(pos_rep)
    gp = np.sign(diff_p) * scale
    gn = -np.sign(diff_n) * scale
    g_ent = np.zeros_like(model.ent)
    g_rel = np.zeros_like(model.rel)
    for trip, g in ((pos_rep, gp), (neg_flat, gn)):
        np.add.at(g_ent, trip[:, 0], g)
        np.add.at(g_ent, trip[:, 2], -g)
        np.add.at(g_rel, trip[:, 1], g)
    e_rows = np.unique(np.concatenate([pos_rep[:, [0, 2]].ravel(), neg_flat[:, [0, 2]].ravel()]))
    r_rows = np.unique(pos_rep[:, 1])
    return loss, {"ent": (e_rows, g_ent[e_rows]), "rel": (r_rows, g_rel[r_rows])}


def train_transe_snapshot(model: TransEModel, train: np.ndarray, n_entities: int,
                          valid_fn: Callable[[TransEModel], float] | None = None,
                          known_codes: np.ndarray | None = None) -> TrainLog:
    cfg = model.config
    log = TrainLog()
    train = np.asarray(train, dtype=np.int64).reshape(-1, 3)
    while model.epoch < cfg.epochs and not model.stopped and len(train):
        order = model.rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(train), cfg.batch_size):
            pos = train[order[start:start + cfg.batch_size]]
            negs, _ = sample_negatives_batch(pos, cfg.k_neg, n_entities, model.rng, known_codes)
            loss, grads = transe_loss(model, pos, negs)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite baseline loss at epoch {model.epoch}")
            model.optimizer.step(model.params(), grads)
            rows = grads["ent"][0]
            norms = np.linalg.norm(model.ent[rows], axis=1, keepdims=True)
            model.ent[rows] /= np.maximum(norms, 1.0)
            total += loss * len(pos)
        epoch = model.epoch
        model.epoch += 1
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
        log.append(epoch, total / len(train), mrr)
    return log


__all__ = ["TransEModel", "TransEScorer", "transe_loss", "train_transe_snapshot"]
