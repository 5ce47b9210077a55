"""Synthetic instance features for desk-scale benchmarks.

Cluster means follow the hierarchy: top-level labels get well-separated
means and each child offsets its parent's mean by a shrinking step, so
classes at every level stay linearly separable when the within-cluster
noise is small.
"""

from __future__ import annotations

import numpy as np

from .hierarchy import Hierarchy
from .joint import FeatureMatrix


def gaussian_cluster_features(
    h: Hierarchy,
    per_leaf: int,
    dim: int,
    seed: int,
    *,
    root_scale: float = 8.0,
    shrink: float = 0.4,
    noise: float = 0.25,
) -> FeatureMatrix:
    """One Gaussian cluster per deepest-level label, means nested by level."""
    rng = np.random.default_rng(seed)
    means: dict[str, np.ndarray] = {}
    for level in range(1, h.level_count + 1):
        scale = root_scale * (shrink ** (level - 1))
        for nid in h.level_members(level):
            parent = h.parent(nid)
            base = means[parent] if parent is not None else np.zeros(dim)
            means[nid] = base + rng.standard_normal(dim) * scale
    ids: list[str] = []
    rows: list[np.ndarray] = []
    leaves: list[str] = []
    for leaf in h.level_members(h.level_count):
        for k in range(per_leaf):
            ids.append(f"i_{leaf}_{k:04d}")
            rows.append(means[leaf] + rng.standard_normal(dim) * noise)
            leaves.append(leaf)
    return FeatureMatrix(tuple(ids), np.array(rows), tuple(leaves))
