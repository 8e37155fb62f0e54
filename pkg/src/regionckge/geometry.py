"""Region geometry: entity representations, relation boxes, distance and score.

Every function here is pure and broadcasts over leading axes, so the same code
path serves single vectors, batches of triples and whole-vocabulary scans.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

DEFAULT_CLAMP = (-30.0, 30.0)


@dataclass(frozen=True)
class EntityEmbedding:
    base: np.ndarray
    offset: np.ndarray
    neighbors: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if np.shape(self.base) != np.shape(self.offset):
            raise ValueError(
                f"base and offset differ in shape: {np.shape(self.base)} vs {np.shape(self.offset)}")


@dataclass(frozen=True)
class RelationRegion:
    """Axis-aligned box given by a base point and a per-dimension extent.

    Bounds are derived on every access, so they can never go stale.
    """

    base: np.ndarray
    extent: np.ndarray

    @property
    def lower(self) -> np.ndarray:
        return region_bounds(self.base, self.extent)[0]

    @property
    def upper(self) -> np.ndarray:
        return region_bounds(self.base, self.extent)[1]

    @property
    def center(self) -> np.ndarray:
        return region_bounds(self.base, self.extent)[2]

    @property
    def width(self) -> np.ndarray:
        return region_bounds(self.base, self.extent)[3]


def final_representation(entity: EntityEmbedding, offsets: Mapping[int, np.ndarray],
                         include_self: bool = False, aggregate: str = "sum") -> np.ndarray:
    """Base vector plus the offsets of every entity in the association set.

    ``offsets`` maps entity id to offset vector; a missing id raises KeyError.
    With ``include_self`` the entity's own offset is added as well, which is
    how the trained model represents entities.
    """
    out = np.array(entity.base, dtype=np.float64, copy=True)
    if include_self:
        out = out + entity.offset
    if not entity.neighbors:
        return out
    ids = sorted(entity.neighbors)
    missing = [j for j in ids if j not in offsets]
    if missing:
        raise KeyError(f"association set references unknown entity ids {missing}")
    total = np.sum([np.asarray(offsets[j], dtype=np.float64) for j in ids], axis=0)
    if aggregate == "mean":
        total = total / len(ids)
    elif aggregate != "sum":
        raise ValueError(f"unknown aggregate {aggregate!r}")
    return out + total


def region_bounds(base, extent):
    """Return ``(lower, upper, center, width)`` per dimension."""
    base = np.asarray(base, dtype=np.float64)
    half = 0.5 * np.asarray(extent, dtype=np.float64)
    a = base - half
    b = base + half
    lower = np.minimum(a, b)
    upper = np.maximum(a, b)
    center = (upper + lower) / 2
    width = upper - lower + 1
    return lower, upper, center, width


def reward(width):
    """Width-dependent bonus for being inside a box (zero for unit width)."""
    return 0.5 * (width - 1) ** 2 * (width + 1) / width


def _reward_grad(width):
    return (width - 1) * (width + 1) / width - 0.5 * (width - 1) ** 2 / width ** 2


def dist_terms(point, base, extent):
    """Per-dimension distance terms and the inside indicator (+1 / -1)."""
    point = np.asarray(point, dtype=np.float64)
    lower, upper, center, width = region_bounds(base, extent)
    inside = (point >= lower) & (point <= upper)
    delta = np.where(inside, 1.0, -1.0)
    gap = np.abs(point - center)
    terms = np.where(inside, gap / width, gap * width) - delta * reward(width)
    return terms, delta


def dist(point, region: RelationRegion | None = None, *, base=None, extent=None):
    """L1-aggregated region distance of ``point``; lower means more plausible."""
    if region is not None:
        base, extent = region.base, region.extent
    terms, _ = dist_terms(point, base, extent)
    return terms.sum(axis=-1)


def dist_with_grad(point, base, extent):
    """Distance together with its gradients w.r.t. point, base and extent.

    The inside indicator is treated as piecewise constant.
    """
    point = np.asarray(point, dtype=np.float64)
    base = np.asarray(base, dtype=np.float64)
    extent = np.asarray(extent, dtype=np.float64)
    lower, upper, center, width = region_bounds(base, extent)
    inside = (point >= lower) & (point <= upper)
    delta = np.where(inside, 1.0, -1.0)
    diff = point - center
    gap = np.abs(diff)
    sgn = np.sign(diff)
    terms = np.where(inside, gap / width, gap * width) - delta * reward(width)

    g_point = np.where(inside, sgn / width, sgn * width)
    g_center = -g_point
    g_width = np.where(inside, -gap / width ** 2, gap) - delta * _reward_grad(width)
    # center = (u + l) / 2, width = u - l + 1
    g_upper = 0.5 * g_center + g_width
    g_lower = 0.5 * g_center - g_width
    # upper = base + |extent|/2, lower = base - |extent|/2 (sign(0) taken as +1)
    s = np.where(extent >= 0, 1.0, -1.0)
    g_base = g_upper + g_lower
    g_extent = 0.5 * s * (g_upper - g_lower)
    return terms.sum(axis=-1), g_point, g_base, g_extent


def score(head, tail, relation: RelationRegion, tail_relation: RelationRegion | None = None,
          clamp=DEFAULT_CLAMP):
    """Log-domain triple score ``s`` and ``U = exp(s)``.

    Lower ``s`` ranks better. ``clamp`` bounds ``s`` before exponentiation only;
    pass ``None`` to disable it.
    """
    tail_relation = relation if tail_relation is None else tail_relation
    s = dist(head, relation) + dist(tail, tail_relation)
    return s, exp_score(s, clamp)


def exp_score(s, clamp=DEFAULT_CLAMP):
    s = np.asarray(s, dtype=np.float64)
    if clamp is not None:
        s = np.clip(s, clamp[0], clamp[1])
    return np.exp(s)
