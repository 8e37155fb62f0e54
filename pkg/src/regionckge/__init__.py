"""Continual knowledge-graph embedding with region-shaped relations."""

from .continual import advance_snapshot, bcu, init_new_entity
from .dataset import Snapshot, Vocab, classify_hops, generate_snapshots, load_dataset
from .eval import metrics, rank_query, transfer_metrics
from .geometry import EntityEmbedding, RelationRegion, dist, final_representation, score
from .training import ModelState, TrainConfig, train_snapshot

__version__ = "0.1.0"

__all__ = [
    "advance_snapshot", "bcu", "init_new_entity", "Snapshot", "Vocab", "classify_hops",
    "generate_snapshots", "load_dataset", "metrics", "rank_query", "transfer_metrics",
    "EntityEmbedding", "RelationRegion", "dist", "final_representation", "score", "ModelState",
    "TrainConfig", "train_snapshot",
]
