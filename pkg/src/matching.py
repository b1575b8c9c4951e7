"""
Bipartite assignment between query sets and exact nearest-neighbor search between point sets.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import EmptySetError, NonFiniteError, ShapeMismatchError
from .scene import GroundTruthSet

logger = logging.getLogger(__name__)

# rows per block in the nearest-neighbor scan; bounds the temporary distance matrix
NN_BLOCK = 256


@dataclass(eq=False)
class CostMatrix:
    """Square matrix of finite pairwise costs."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ShapeMismatchError(f"cost matrix must be square, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteError("cost matrix contains non-finite entries")

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(eq=False)
class MatchResult:
    """``assignment[i]`` is the column matched to row i; ``total_cost`` is the summed cost."""

    assignment: np.ndarray
    total_cost: float


def hungarian(cost) -> MatchResult:
    """
    Minimum-cost perfect assignment on a square matrix, O(N^3).

    Shortest augmenting path with row/column potentials. Column scans are
    vectorized; the lowest column index wins every tie, so the result is a
    deterministic function of the input.

    Args:
        cost: CostMatrix or square array-like of finite costs

    Returns:
        MatchResult: optimal permutation and its total cost

    Raises:
        ShapeMismatchError: non-square input
        NonFiniteError: NaN or infinite entries

    Example:
        >>> hungarian([[4, 1, 3], [2, 0, 5], [3, 2, 2]]).assignment
        array([1, 0, 2])
    """
    c = cost.values if isinstance(cost, CostMatrix) else CostMatrix(cost).values
    n = c.shape[0]
    if n == 0:
        return MatchResult(np.zeros(0, dtype=np.int64), 0.0)

    # 1-based potentials; column 0 is the virtual source of each augmenting path
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row matched to column j
    way = np.zeros(n + 1, dtype=np.int64)

    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            reduced = c[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    assignment = np.empty(n, dtype=np.int64)
    assignment[p[1:] - 1] = np.arange(n)
    total = float(c[np.arange(n), assignment].sum())
    return MatchResult(assignment, total)


def build_query_cost_matrix(student_centers: np.ndarray, teacher_centers: np.ndarray) -> CostMatrix:
    """
    Euclidean (not squared) distances between student and teacher point-set centers.

    ``values[i, j] = ||student_centers[i] - teacher_centers[j]||_2``
    """
    s = np.asarray(student_centers, dtype=np.float64).reshape(-1, 3)
    t = np.asarray(teacher_centers, dtype=np.float64).reshape(-1, 3)
    if len(s) != len(t):
        raise ShapeMismatchError(f"{len(s)} student centers vs {len(t)} teacher centers")
    diff = s[:, None, :] - t[None, :, :]
    return CostMatrix(np.sqrt(np.sum(diff * diff, axis=-1)))


def _nearest(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Index into ``dst`` of the nearest point for each row of ``src``; lowest index on ties."""
    out = np.empty(len(src), dtype=np.int64)
    for start in range(0, len(src), NN_BLOCK):
        block = src[start:start + NN_BLOCK]
        diff = block[:, None, :] - dst[None, :, :]
        d2 = np.sum(diff * diff, axis=-1)
        out[start:start + NN_BLOCK] = np.argmin(d2, axis=1)
    return out


def nearest_neighbor_pairs(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Exact nearest neighbors in both directions.

    Squared distances are summed per coordinate difference (no dot-product
    expansion), so equal distances compare equal and ties resolve to the lowest index.

    Returns:
        tuple: (a_to_b, b_to_a) - for each point of ``a`` the index of its nearest
        point in ``b``, and vice versa

    Raises:
        EmptySetError: either set is empty
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise EmptySetError(f"nearest_neighbor_pairs needs non-empty sets, got {len(a)} and {len(b)}")
    return _nearest(a, b), _nearest(b, a)


def nn_label_assign(pred_positions: np.ndarray, gt: GroundTruthSet) -> np.ndarray:
    """Class of the nearest ground-truth voxel center for every predicted point."""
    if gt.M == 0:
        raise EmptySetError("cannot assign labels from an empty ground-truth set")
    pred = np.asarray(pred_positions, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0:
        return np.zeros(0, dtype=np.int64)
    return gt.classes[_nearest(pred, gt.positions)]
