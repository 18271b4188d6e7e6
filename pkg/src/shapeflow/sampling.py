"""Point-cloud downsampling and the nearest-neighbor token matching that
couples coarse query anchors to fine ones."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud


@dataclass
class QuerySet:
    """Query points plus the indices they occupy in the source cloud."""

    points: np.ndarray    # (k, 3)
    indices: np.ndarray   # (k,) into the originating cloud

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if len(self.points) != len(self.indices):
            raise ValueError(
                f"{len(self.points)} points but {len(self.indices)} indices")

    def __len__(self):
        return len(self.indices)


@dataclass
class TokenMatching:
    """mapping[i] is the coarse-cloud index matched to fine query i."""

    fine_queries: QuerySet
    coarse_queries: QuerySet
    mapping: np.ndarray

    def __post_init__(self):
        self.mapping = np.asarray(self.mapping, dtype=np.int64)
        if len(self.mapping) != len(self.fine_queries):
            raise ValueError("mapping length must equal the fine query count")


def _cloud_points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64)


def random_downsample(cloud, k: int, seed: int = 0) -> QuerySet:
    """k distinct indices chosen uniformly without replacement."""
    pts = _cloud_points(cloud)
    n = len(pts)
    if k > n:
        raise ValueError(f"cannot draw {k} points from a cloud of {n}")
    idx = np.random.default_rng(seed).choice(n, size=k, replace=False)
    return QuerySet(points=pts[idx], indices=idx)


def farthest_point_sampling(cloud, k: int, start_index: int = 0) -> QuerySet:
    """Greedy max-min selection; distance ties break to the lowest index."""
    pts = _cloud_points(cloud)
    n = len(pts)
    if n == 0:
        raise ValueError("cannot sample from an empty cloud")
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= {n}, got k={k}")
    if not 0 <= start_index < n:
        raise ValueError(f"start_index {start_index} out of range [0, {n})")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start_index
    dists = np.linalg.norm(pts - pts[start_index], axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dists))  # argmax returns the first (lowest) index
        chosen[i] = nxt
        np.minimum(dists, np.linalg.norm(pts - pts[nxt], axis=1), out=dists)
    return QuerySet(points=pts[chosen], indices=chosen)


def two_stage_downsample(cloud, m: int, seed: int = 0) -> QuerySet:
    """Random downsample to 4m, then farthest point sampling down to m.

    The FPS start is the first randomly drawn index; returned indices refer
    to the original cloud.
    """
    pts = _cloud_points(cloud)
    if len(pts) < 4 * m:
        raise ValueError(
            f"two-stage downsampling needs at least {4 * m} points, "
            f"cloud has {len(pts)}")
    stage1 = random_downsample(pts, 4 * m, seed=seed)
    stage2 = farthest_point_sampling(stage1.points, m, start_index=0)
    indices = stage1.indices[stage2.indices]
    return QuerySet(points=pts[indices], indices=indices)


def match_tokens(fine_queries: QuerySet, coarse_cloud,
                 chunk: int = 1024) -> TokenMatching:
    """Nearest coarse-cloud point for each fine query (ties: lowest index)."""
    coarse = _cloud_points(coarse_cloud)
    if len(coarse) == 0:
        raise ValueError("coarse cloud is empty")
    fine = fine_queries.points
    mapping = np.empty(len(fine), dtype=np.int64)
    for lo in range(0, len(fine), chunk):
        block = fine[lo:lo + chunk]
        d2 = ((block[:, None, :] - coarse[None, :, :]) ** 2).sum(axis=2)
        mapping[lo:lo + len(block)] = d2.argmin(axis=1)
    coarse_queries = QuerySet(points=coarse[mapping], indices=mapping)
    return TokenMatching(fine_queries=fine_queries,
                         coarse_queries=coarse_queries, mapping=mapping)


def duplicate_fraction(matching: TokenMatching) -> float:
    """Fraction of fine queries whose matched coarse index is shared."""
    mapping = matching.mapping
    if len(mapping) == 0:
        return 0.0
    counts = np.bincount(mapping)
    return float((counts[mapping] >= 2).mean())
