"""Exact neighbor search, farthest point sampling and relative positions.

Desk-scale clouds make exact search affordable, so everything here is brute
force over squared distances with a fully specified tie rule: equal
distances resolve to the lower point index. That determinism is what lets
tests compare against independent re-implementations index for index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud


@dataclass
class NeighborhoodIndex:
    """k nearest neighbors per point, self excluded, sorted by distance."""

    k: int
    neighbors: np.ndarray  # (n, k) int64
    distances: np.ndarray  # (n, k) float64, nondecreasing per row

    @property
    def n(self) -> int:
        return self.neighbors.shape[0]


@dataclass
class RelativePositions:
    """Offsets to each neighbor plus unit-direction copies.

    ``units`` rows with zero offset (duplicate points) are stored as zero
    vectors and flagged in ``degenerate`` so downstream dot products see a
    contribution of exactly zero instead of NaN.
    """

    offsets: np.ndarray     # (n, k, 3), neighbor position minus query position
    units: np.ndarray       # (n, k, 3), offsets scaled to unit norm
    norms: np.ndarray       # (n, k)
    degenerate: np.ndarray  # (n, k) bool

    @property
    def k(self) -> int:
        return self.offsets.shape[1]


def _pairwise_sq_dists(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    diff = query[:, None, :] - ref[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _smallest_k(d2: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the k smallest entries per row, ties to the lower index.

    argpartition finds the candidate set cheaply; rows where the partition
    boundary is an exact distance tie fall back to a stable full sort, since
    the candidate set itself is ambiguous there.
    """
    rows, n = d2.shape
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the reference size {n}")
    if k == n - 1:
        order = np.argsort(d2, axis=1, kind="stable")
        idx = order[:, :k]
    else:
        cand = np.argpartition(d2, kth=k, axis=1)[:, : k + 1]
        cand_d = np.take_along_axis(d2, cand, axis=1)
        # lexicographic (distance, index) order inside the candidate window
        perm = np.lexsort((cand, cand_d), axis=1)
        cand = np.take_along_axis(cand, perm, axis=1)
        cand_d = np.take_along_axis(cand_d, perm, axis=1)
        ambiguous = cand_d[:, k - 1] == cand_d[:, k]
        idx = cand[:, :k]
        if np.any(ambiguous):
            bad = np.nonzero(ambiguous)[0]
            order = np.argsort(d2[bad], axis=1, kind="stable")
            idx = idx.copy()
            idx[bad] = order[:, :k]
    dist = np.sqrt(np.take_along_axis(d2, idx, axis=1))
    return idx.astype(np.int64), dist


def knn_index(cloud: PointCloud, k: int, chunk: int = 512) -> NeighborhoodIndex:
    """Exact k nearest neighbors for every point of ``cloud``."""
    return knn_points(cloud.positions, k, chunk)


def knn_points(positions: np.ndarray, k: int, chunk: int = 512) -> NeighborhoodIndex:
    n = positions.shape[0]
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must satisfy 1 <= k <= n-1, got k={k}, n={n}")
    neighbors = np.empty((n, k), dtype=np.int64)
    distances = np.empty((n, k))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d2 = _pairwise_sq_dists(positions[start:stop], positions)
        d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        idx, dist = _smallest_k(d2, k)
        neighbors[start:stop] = idx
        distances[start:stop] = dist
    return NeighborhoodIndex(k=k, neighbors=neighbors, distances=distances)


def nearest_reference_points(
    query: np.ndarray, ref: np.ndarray, t: int, chunk: int = 1024
) -> tuple[np.ndarray, np.ndarray]:
    """t nearest points of ``ref`` for each row of ``query`` (no exclusion).

    Used for cross-resolution feature interpolation. Same tie rule as
    ``knn_index``. Requires ``t <= len(ref)``; pads nothing.
    """
    nq, nr = query.shape[0], ref.shape[0]
    if not 1 <= t <= nr:
        raise ValueError(f"t must satisfy 1 <= t <= {nr}, got {t}")
    idx_out = np.empty((nq, t), dtype=np.int64)
    dist_out = np.empty((nq, t))
    for start in range(0, nq, chunk):
        stop = min(start + chunk, nq)
        d2 = _pairwise_sq_dists(query[start:stop], ref)
        if t == nr:
            order = np.argsort(d2, axis=1, kind="stable")
            idx = order[:, :t]
            dist = np.sqrt(np.take_along_axis(d2, idx, axis=1))
        else:
            idx, dist = _smallest_k(d2, t)
        idx_out[start:stop] = idx
        dist_out[start:stop] = dist
    return idx_out, dist_out


def farthest_point_sampling(cloud: PointCloud, m: int, start: int = 0) -> np.ndarray:
    """Greedy max-min subsample of ``m`` point indices, beginning at ``start``."""
    return farthest_point_sampling_points(cloud.positions, m, start)


def farthest_point_sampling_points(positions: np.ndarray, m: int, start: int = 0) -> np.ndarray:
    n = positions.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"m must satisfy 1 <= m <= n, got m={m}, n={n}")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} outside [0, {n})")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    # running distance of every point to the chosen set; argmax ties resolve
    # to the lowest index because numpy returns the first maximum
    diff = positions - positions[start]
    best = np.einsum("ij,ij->i", diff, diff)
    for i in range(1, m):
        nxt = int(np.argmax(best))
        chosen[i] = nxt
        diff = positions - positions[nxt]
        np.minimum(best, np.einsum("ij,ij->i", diff, diff), out=best)
    return chosen


def relative_positions(cloud: PointCloud, idx: NeighborhoodIndex) -> RelativePositions:
    """Neighbor offsets ``position[j] - position[i]`` plus unit directions."""
    return relative_positions_points(cloud.positions, idx)


def relative_positions_points(positions: np.ndarray, idx: NeighborhoodIndex) -> RelativePositions:
    if idx.neighbors.shape[0] != positions.shape[0]:
        raise ValueError("index was built over a different number of points")
    offsets = positions[idx.neighbors] - positions[:, None, :]
    norms = np.sqrt(np.einsum("nkd,nkd->nk", offsets, offsets))
    degenerate = norms == 0.0
    safe = np.where(degenerate, 1.0, norms)
    units = offsets / safe[:, :, None]
    units[degenerate] = 0.0
    return RelativePositions(offsets=offsets, units=units, norms=norms, degenerate=degenerate)
