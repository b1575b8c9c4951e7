"""
Scene-core domain types: voxel grids, point sets, cameras and occupancy metrics.

Grids are stored flat in X-major order: the flat index of voxel (x, y, z) is
``(x * Y + y) * Z + z``, which is numpy's C order for an array of shape (X, Y, Z).
Class 0 is reserved for empty space; semantic classes are 1..K_total-1 and map to
semantic logit index ``class - 1``.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from .errors import (
    GridMismatchError,
    InvalidClassError,
    NonFiniteError,
    SceneFormatError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)

EMPTY = 0
DEFAULT_NUM_CLASSES = 7  # empty + floor, ceiling, wall + 3 furniture classes

SCENE_MAGIC = b"DSC1"
SCENE_VERSION = 1
_HEADER = struct.Struct("<4sI3If3f")
_CAMERA = struct.Struct("<4f12f")


# ============================================================================
# Domain types
# ============================================================================

@dataclass(frozen=True)
class GridSpec:
    """Geometry of a voxel grid: voxel counts, voxel edge length and corner origin (meters)."""

    dims: Tuple[int, int, int]
    voxel_size: float
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(origin) != 3:
            raise ShapeMismatchError(f"GridSpec needs 3 dims and a 3D origin, got {self.dims}, {self.origin}")
        if min(dims) <= 0:
            raise ValueError(f"GridSpec dims must be positive, got {dims}")
        if not self.voxel_size > 0:
            raise ValueError(f"GridSpec voxel_size must be positive, got {self.voxel_size}")
        # stored at f32 precision so specs survive a round trip through the scene format
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", tuple(float(np.float32(o)) for o in origin))
        object.__setattr__(self, "voxel_size", float(np.float32(self.voxel_size)))

    @classmethod
    def toy(cls) -> "GridSpec":
        """Desk-scale default: 24x24x16 voxels at 0.2 m."""
        return cls((24, 24, 16), 0.2)

    @classmethod
    def paper(cls) -> "GridSpec":
        """Benchmark geometry: 60x60x36 voxels at 0.08 m (4.8 m x 4.8 m x 2.88 m)."""
        return cls((60, 60, 36), 0.08)

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=np.float64) * self.voxel_size

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=np.float64)

    @property
    def upper(self) -> np.ndarray:
        return self.lower + self.extent

    def voxel_indices(self, positions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Map positions to integer voxel indices using half-open cells [lo, hi).

        Returns:
            tuple: (ijk, inside) - (n, 3) integer indices and a boolean in-bounds mask
        """
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        ijk = np.floor((positions - self.lower) / self.voxel_size).astype(np.int64)
        inside = np.all((ijk >= 0) & (ijk < np.asarray(self.dims)), axis=1)
        return ijk, inside

    def flat_index(self, ijk: np.ndarray) -> np.ndarray:
        return np.ravel_multi_index(tuple(np.asarray(ijk).T), self.dims)

    def centers(self, ijk: np.ndarray) -> np.ndarray:
        return self.lower + (np.asarray(ijk, dtype=np.float64) + 0.5) * self.voxel_size


@dataclass(eq=False)
class VoxelGrid:
    """Dense labeled grid; ``labels`` is flat, X-major, one class id per voxel."""

    spec: GridSpec
    labels: np.ndarray
    num_classes: int = DEFAULT_NUM_CLASSES

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8).reshape(-1)
        if self.labels.size != self.spec.n_voxels:
            raise ShapeMismatchError(
                f"labels length {self.labels.size} does not match grid {self.spec.dims}"
            )
        if self.num_classes < 2 or self.num_classes > 256:
            raise ValueError(f"num_classes must be in [2, 256], got {self.num_classes}")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise InvalidClassError(
                f"label {int(self.labels.max())} >= num_classes {self.num_classes}"
            )

    @classmethod
    def empty(cls, spec: GridSpec, num_classes: int = DEFAULT_NUM_CLASSES) -> "VoxelGrid":
        return cls(spec, np.zeros(spec.n_voxels, dtype=np.uint8), num_classes)

    @property
    def volume(self) -> np.ndarray:
        """Labels reshaped to (X, Y, Z); a view, not a copy."""
        return self.labels.reshape(self.spec.dims)

    @property
    def occupied(self) -> np.ndarray:
        return self.labels != EMPTY

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.num_classes == other.num_classes
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(eq=False)
class GroundTruthSet:
    """
    Occupied voxel centers and their (non-empty) classes.

    ``num_classes`` records K_total of the grid the set came from, when known.
    """

    positions: np.ndarray
    classes: np.ndarray
    num_classes: Optional[int] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if len(self.positions) != len(self.classes):
            raise ShapeMismatchError(
                f"{len(self.positions)} positions but {len(self.classes)} classes"
            )
        if np.any(self.classes <= EMPTY):
            raise InvalidClassError("ground-truth classes must be non-empty (>= 1)")
        if self.num_classes is not None and self.classes.size and self.classes.max() >= self.num_classes:
            raise InvalidClassError(f"ground-truth classes must lie below {self.num_classes}")

    def __len__(self):
        return len(self.classes)

    @property
    def M(self) -> int:
        return len(self.classes)


@dataclass(eq=False)
class PredictionSet:
    """Predicted point positions with per-point semantic logits (K_sem columns)."""

    positions: np.ndarray
    logits: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 2 or len(self.logits) != len(self.positions):
            raise ShapeMismatchError(
                f"logits {self.logits.shape} do not match {len(self.positions)} positions"
            )

    def __len__(self):
        return len(self.positions)


@dataclass(eq=False)
class Camera:
    """
    Pinhole camera with OpenCV axes (+x right, +y down, +z forward).

    ``rotation`` and ``translation`` form the camera-to-world transform:
    ``p_world = rotation @ p_cam + translation``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        self.fx, self.fy, self.cx, self.cy = (float(v) for v in (self.fx, self.fy, self.cx, self.cy))
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def look_at(cls, eye, target, fx, fy, cx, cy, up=(0.0, 0.0, 1.0)) -> "Camera":
        """Place a camera at ``eye`` with its optical axis pointing at ``target``."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rotation = np.stack([right, down, forward], axis=1)
        return cls(fx, fy, cx, cy, rotation, eye)

    def as_float32(self) -> "Camera":
        """Copy with every value rounded to f32, i.e. exactly what a scene file stores."""
        f32 = lambda v: np.asarray(v, dtype=np.float32).astype(np.float64)
        return Camera(
            *(float(f32(v)) for v in (self.fx, self.fy, self.cx, self.cy)),
            rotation=f32(self.rotation),
            translation=f32(self.translation),
        )

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    def pose_matrix(self) -> np.ndarray:
        """Row-major 3x4 camera-to-world matrix."""
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def project(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Project world points to pixel coordinates.

        Returns:
            tuple: (u, v, z) - pixel column, pixel row and camera-frame depth.
            Points with z <= 0 get undefined (but finite) u, v.
        """
        pc = self.world_to_camera(points)
        z = pc[..., 2]
        safe_z = np.where(np.abs(z) > 1e-12, z, 1e-12)
        u = self.fx * pc[..., 0] / safe_z + self.cx
        v = self.fy * pc[..., 1] / safe_z + self.cy
        return u, v, z

    def __eq__(self, other):
        if not isinstance(other, Camera):
            return NotImplemented
        return (
            (self.fx, self.fy, self.cx, self.cy) == (other.fx, other.fy, other.cx, other.cy)
            and np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )


class MetricsReport(BaseModel):
    """Binary IoU, per-class IoU (None when a class is absent from both grids) and mIoU."""

    model_config = ConfigDict(frozen=True)

    iou: float
    per_class_iou: List[Optional[float]]
    miou: Optional[float]
    class_names: Optional[List[str]] = None

    def _exclude(self):
        return {"class_names"} if self.class_names is None else None

    def to_dict(self) -> dict:
        return self.model_dump(exclude=self._exclude())

    def to_json(self) -> str:
        return self.model_dump_json(indent=2, exclude=self._exclude())

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.model_validate_json(text)


def class_names(num_classes: int) -> List[str]:
    """Names of the semantic classes 1..num_classes-1 of the synthetic palette."""
    base = ["floor", "ceiling", "wall"]
    names = base[: num_classes - 1]
    names += [f"furniture_{k}" for k in range(1, num_classes - len(base))]
    return names[: num_classes - 1]


# ============================================================================
# Conversions
# ============================================================================

PointsLike = Union[GroundTruthSet, Iterable[Tuple[Sequence[float], int]]]


def _majority_vote(flat: np.ndarray, classes: np.ndarray, num_classes: int, n_voxels: int) -> np.ndarray:
    """Label each voxel with its most frequent class; ties go to the lowest class id."""
    labels = np.zeros(n_voxels, dtype=np.uint8)
    if flat.size == 0:
        return labels
    keys, counts = np.unique(flat * num_classes + classes, return_counts=True)
    voxel, cls = np.divmod(keys, num_classes)
    order = np.lexsort((cls, -counts, voxel))
    voxel, cls = voxel[order], cls[order]
    first = np.ones(len(voxel), dtype=bool)
    first[1:] = voxel[1:] != voxel[:-1]
    labels[voxel[first]] = cls[first]
    return labels


def voxelize(points: PointsLike, spec: GridSpec, num_classes: Optional[int] = None) -> VoxelGrid:
    """
    Rasterize labeled points into a grid by per-voxel majority vote.

    Args:
        points: a GroundTruthSet, or an iterable of (position, class) pairs
        spec: target grid geometry
        num_classes: K_total including the empty class; defaults to the
            set's own ``num_classes``, else DEFAULT_NUM_CLASSES

    Returns:
        VoxelGrid: labels from the points; out-of-bounds points are dropped

    Example:
        >>> g = voxelize([((0.05, 0.05, 0.05), 3)], GridSpec((2, 2, 2), 0.1))
        >>> int(g.volume[0, 0, 0])
        3
    """
    if isinstance(points, GroundTruthSet):
        positions, classes = points.positions, points.classes
        if num_classes is None:
            num_classes = points.num_classes
    else:
        pairs = list(points)
        positions = np.array([p for p, _ in pairs], dtype=np.float64).reshape(-1, 3)
        classes = np.array([c for _, c in pairs], dtype=np.int64)
    if num_classes is None:
        num_classes = DEFAULT_NUM_CLASSES

    if not np.all(np.isfinite(positions)):
        raise NonFiniteError("voxelize received non-finite positions")
    if classes.size and (classes.min() < 0 or classes.max() >= num_classes):
        raise InvalidClassError(f"classes must lie in [0, {num_classes})")

    ijk, inside = spec.voxel_indices(positions)
    dropped = int((~inside).sum())
    if dropped:
        logger.debug("voxelize dropped %d out-of-bounds points", dropped)
    flat = spec.flat_index(ijk[inside]) if inside.any() else np.zeros(0, dtype=np.int64)
    labels = _majority_vote(flat, classes[inside], num_classes, spec.n_voxels)
    return VoxelGrid(spec, labels, num_classes)


def extract_gt_set(grid: VoxelGrid) -> GroundTruthSet:
    """
    Collect every occupied voxel center with its class, in X-major order.

    Example:
        >>> g = VoxelGrid.empty(GridSpec((2, 1, 1), 0.1))
        >>> g.volume[1, 0, 0] = 4
        >>> extract_gt_set(g).positions
        array([[0.15, 0.05, 0.05]])
    """
    flat = np.flatnonzero(grid.labels)
    ijk = np.stack(np.unravel_index(flat, grid.spec.dims), axis=1)
    return GroundTruthSet(grid.spec.centers(ijk), grid.labels[flat].astype(np.int64), grid.num_classes)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def predset_to_grid(
    pred: PredictionSet,
    spec: GridSpec,
    score_threshold: float = 0.0,
    num_classes: Optional[int] = None,
) -> VoxelGrid:
    """
    Turn a point-set prediction into a voxel grid for evaluation.

    A point votes iff its max softmax probability reaches ``score_threshold``;
    it votes class ``argmax + 1`` into its containing voxel.
    """
    if num_classes is None:
        num_classes = pred.logits.shape[1] + 1
    if not np.all(np.isfinite(pred.logits)):
        raise NonFiniteError("prediction logits must be finite")
    if len(pred) == 0:
        return VoxelGrid.empty(spec, num_classes)
    probs = softmax(pred.logits)
    keep = probs.max(axis=1) >= score_threshold
    classes = probs.argmax(axis=1) + 1
    ijk, inside = spec.voxel_indices(pred.positions)
    keep &= inside
    flat = spec.flat_index(ijk[keep]) if keep.any() else np.zeros(0, dtype=np.int64)
    labels = _majority_vote(flat, classes[keep], num_classes, spec.n_voxels)
    return VoxelGrid(spec, labels, num_classes)


# ============================================================================
# Metrics
# ============================================================================

def _check_same_spec(pred: VoxelGrid, gt: VoxelGrid):
    if pred.spec != gt.spec:
        raise GridMismatchError(f"grid specs differ: {pred.spec} vs {gt.spec}")


def occupancy_iou(pred: VoxelGrid, gt: VoxelGrid) -> float:
    """Binary occupied/empty IoU; 1.0 when both grids are entirely empty."""
    _check_same_spec(pred, gt)
    p, g = pred.occupied, gt.occupied
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(p & g)) / union


def miou(pred: VoxelGrid, gt: VoxelGrid) -> MetricsReport:
    """
    Per-class IoU over semantic classes and their mean.

    Classes absent from both grids are reported as None and excluded from the
    mean; if no class is present anywhere, ``miou`` is None.
    """
    _check_same_spec(pred, gt)
    num_classes = max(pred.num_classes, gt.num_classes)
    per_class: List[Optional[float]] = []
    for c in range(1, num_classes):
        p = pred.labels == c
        g = gt.labels == c
        union = int(np.count_nonzero(p | g))
        per_class.append(None if union == 0 else int(np.count_nonzero(p & g)) / union)
    defined = [v for v in per_class if v is not None]
    mean = float(np.mean(defined)) if defined else None
    return MetricsReport(iou=occupancy_iou(pred, gt), per_class_iou=per_class, miou=mean,
                         class_names=class_names(num_classes))


def mean_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Average reports over scenes; per-class means skip scenes where the class is undefined."""
    if not reports:
        raise ValueError("mean_reports needs at least one report")
    n_classes = len(reports[0].per_class_iou)
    per_class: List[Optional[float]] = []
    for k in range(n_classes):
        vals = [r.per_class_iou[k] for r in reports if r.per_class_iou[k] is not None]
        per_class.append(float(np.mean(vals)) if vals else None)
    mious = [r.miou for r in reports if r.miou is not None]
    return MetricsReport(
        iou=float(np.mean([r.iou for r in reports])),
        per_class_iou=per_class,
        miou=float(np.mean(mious)) if mious else None,
        class_names=reports[0].class_names,
    )


# ============================================================================
# Scene file format
# ============================================================================

def write_scene(path: Union[str, Path], grid: VoxelGrid, camera: Camera) -> None:
    """Write a grid and its camera in the little-endian DSC1 format."""
    spec = grid.spec
    payload = bytearray(_HEADER.pack(SCENE_MAGIC, SCENE_VERSION, *spec.dims, spec.voxel_size, *spec.origin))
    payload += grid.labels.astype(np.uint8).tobytes()
    payload += _CAMERA.pack(camera.fx, camera.fy, camera.cx, camera.cy, *camera.pose_matrix().reshape(-1))
    Path(path).write_bytes(bytes(payload))


def read_scene(path: Union[str, Path], num_classes: int = DEFAULT_NUM_CLASSES) -> Tuple[VoxelGrid, Camera]:
    """
    Read a DSC1 scene file.

    Raises:
        SceneFormatError: bad magic, unsupported version or truncated payload
    """
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise SceneFormatError(f"{path}: file too short for a scene header")
    magic, version, x, y, z, voxel_size, ox, oy, oz = _HEADER.unpack_from(data, 0)
    if magic != SCENE_MAGIC:
        raise SceneFormatError(f"{path}: bad magic {magic!r}")
    if version != SCENE_VERSION:
        raise SceneFormatError(f"{path}: unsupported scene version {version}")
    n = x * y * z
    expected = _HEADER.size + n + _CAMERA.size
    if len(data) != expected:
        raise SceneFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    try:
        spec = GridSpec((x, y, z), voxel_size, (ox, oy, oz))
        labels = np.frombuffer(data, dtype=np.uint8, count=n, offset=_HEADER.size).copy()
        grid = VoxelGrid(spec, labels, num_classes)
        values = _CAMERA.unpack_from(data, _HEADER.size + n)
        pose = np.asarray(values[4:], dtype=np.float64).reshape(3, 4)
        camera = Camera(*values[:4], rotation=pose[:, :3], translation=pose[:, 3])
    except ValueError as e:
        raise SceneFormatError(f"{path}: {e}") from e
    return grid, camera
