"""
Procedural indoor scenes, exact voxel ray casting and on-disk datasets.

A scene is an axis-aligned room shell (floor, ceiling and walls one voxel
thick) holding a few overlap-free furniture boxes, plus a camera standing in
free space and looking at the room center. Everything is a pure function of
(recipe, seed).
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, NonNegativeInt, PositiveFloat, ValidationError, model_validator

from .errors import SceneFormatError, SceneGenerationError
from .model import simulate_depth_prior
from .scene import Camera, GridSpec, GroundTruthSet, VoxelGrid, extract_gt_set, read_scene, write_scene

logger = logging.getLogger(__name__)

FLOOR, CEILING, WALL = 1, 2, 3
FIRST_FURNITURE = 4
MAX_ATTEMPTS = 1000
MANIFEST_NAME = "manifest.json"


class SceneRecipe(BaseModel):
    """Parameters of the procedural generator; sizes are in meters."""

    model_config = ConfigDict(frozen=True)

    grid: Literal["toy", "paper"] = "toy"
    furniture_min: int = Field(1, ge=0)
    furniture_max: int = Field(3, ge=0)
    n_classes: int = Field(6, ge=4)
    box_min: PositiveFloat = 0.4
    box_max: PositiveFloat = 1.2
    camera_height: Tuple[float, float] = (1.0, 1.8)
    image_hw: Tuple[int, int] = (32, 32)

    @model_validator(mode="after")
    def _check(self):
        if self.furniture_min > self.furniture_max:
            raise ValueError(f"furniture_min {self.furniture_min} > furniture_max {self.furniture_max}")
        if self.box_min > self.box_max:
            raise ValueError(f"box_min {self.box_min} > box_max {self.box_max}")
        if self.camera_height[0] > self.camera_height[1]:
            raise ValueError(f"camera_height range {self.camera_height} is reversed")
        return self

    @property
    def spec(self) -> GridSpec:
        return GridSpec.paper() if self.grid == "paper" else GridSpec.toy()

    @property
    def num_classes(self) -> int:
        """K_total: the empty class plus n_classes semantic classes."""
        return self.n_classes + 1


# ============================================================================
# Ray casting
# ============================================================================

def traverse_rays(grid: VoxelGrid, origins: np.ndarray, directions: np.ndarray):
    """
    Exact voxel traversal (Amanatides-Woo) for a batch of rays.

    Directions need not be unit length; hit parameters are in units of the
    given direction. Rays start inside the grid and stop at the first occupied
    voxel or when they leave it.

    Returns:
        tuple: (t, flat, axis) - hit parameter (inf on a miss), flat index of the
        hit voxel (-1 on a miss) and the axis of the face crossed into it (-1 when
        the ray starts inside an occupied voxel or misses)
    """
    spec = grid.spec
    dims = np.asarray(spec.dims)
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    labels = grid.labels

    t_hit = np.full(n, np.inf)
    hit_flat = np.full(n, -1, dtype=np.int64)
    hit_axis = np.full(n, -1, dtype=np.int64)

    ijk = np.floor((origins - spec.lower) / spec.voxel_size).astype(np.int64)
    inside = np.all((ijk >= 0) & (ijk < dims), axis=1)
    step = np.sign(directions).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        boundary = spec.lower + (ijk + (step > 0)) * spec.voxel_size
        t_max = np.where(step != 0, (boundary - origins) / directions, np.inf)
        t_delta = np.where(step != 0, spec.voxel_size / np.abs(directions), np.inf)

    active = np.flatnonzero(inside)
    start = labels[spec.flat_index(ijk[active])] != 0 if len(active) else np.zeros(0, dtype=bool)
    t_hit[active[start]] = 0.0
    hit_flat[active[start]] = spec.flat_index(ijk[active[start]])
    active = active[~start]

    for _ in range(int(dims.sum()) + 3):
        if len(active) == 0:
            break
        axis = np.argmin(t_max[active], axis=1)
        t = t_max[active, axis]
        ijk[active, axis] += step[active, axis]
        t_max[active, axis] += t_delta[active, axis]
        cell = ijk[active]
        within = np.all((cell >= 0) & (cell < dims), axis=1)
        flat = np.full(len(active), -1, dtype=np.int64)
        if within.any():
            flat[within] = spec.flat_index(cell[within])
        occupied = within & (labels[np.maximum(flat, 0)] != 0)
        hit = active[occupied]
        t_hit[hit] = t[occupied]
        hit_flat[hit] = flat[occupied]
        hit_axis[hit] = axis[occupied]
        active = active[within & ~occupied]
    return t_hit, hit_flat, hit_axis


def pixel_rays(camera: Camera, height: int, width: int) -> np.ndarray:
    """World-space ray directions through pixel centers, scaled to unit camera-frame z."""
    jj, ii = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    d_cam = np.stack([(jj - camera.cx) / camera.fx, (ii - camera.cy) / camera.fy, np.ones_like(jj)], axis=-1)
    return d_cam.reshape(-1, 3) @ camera.rotation.T


def render_depth(grid: VoxelGrid, camera: Camera, height: int, width: int) -> np.ndarray:
    """
    Camera-frame z-depth of the first occupied voxel boundary along each pixel ray.

    Pixels whose ray leaves the grid without a hit are 0.

    Example:
        >>> render_depth(VoxelGrid.empty(GridSpec.toy()), camera, 32, 32).max()
        0.0
    """
    spec = grid.spec
    eye = camera.translation
    if np.any(eye < spec.lower) or np.any(eye >= spec.upper):
        raise ValueError(f"camera at {eye.tolist()} is outside the grid bounds")
    dirs = pixel_rays(camera, height, width)
    t, flat, _ = traverse_rays(grid, np.broadcast_to(eye, dirs.shape), dirs)
    # directions have unit camera-frame z, so the ray parameter is the z-depth
    return np.where(flat >= 0, t, 0.0).reshape(height, width)


# ============================================================================
# Scene generation
# ============================================================================

def _shell(spec: GridSpec) -> np.ndarray:
    X, Y, Z = spec.dims
    vol = np.zeros((X, Y, Z), dtype=np.uint8)
    vol[0, :, :] = WALL
    vol[-1, :, :] = WALL
    vol[:, 0, :] = WALL
    vol[:, -1, :] = WALL
    vol[:, :, 0] = FLOOR
    vol[:, :, -1] = CEILING
    return vol


def _meters_to_voxels(size: float, spec: GridSpec, limit: int) -> int:
    return int(np.clip(round(size / spec.voxel_size), 1, limit))


def generate_scene(recipe: SceneRecipe, seed: int) -> Tuple[VoxelGrid, Camera]:
    """
    Build one room and its camera.

    Boxes stand on the floor, never overlap each other and stay strictly inside
    the shell. Box and camera placement share a budget of MAX_ATTEMPTS draws.

    Raises:
        SceneGenerationError: the attempt budget ran out
    """
    spec = recipe.spec
    X, Y, Z = spec.dims
    if min(X, Y, Z) < 4:
        raise SceneGenerationError(f"grid {spec.dims} is too small for a room")
    rng = np.random.default_rng(seed)
    vol = _shell(spec)
    attempts = 0

    n_boxes = int(rng.integers(recipe.furniture_min, recipe.furniture_max + 1))
    placed = 0
    while placed < n_boxes:
        attempts += 1
        if attempts > MAX_ATTEMPTS:
            raise SceneGenerationError(f"seed {seed}: placed {placed}/{n_boxes} boxes in {MAX_ATTEMPTS} attempts")
        sx, sy, sz = (
            _meters_to_voxels(rng.uniform(recipe.box_min, recipe.box_max), spec, limit)
            for limit in (X - 2, Y - 2, Z - 3)
        )
        x0 = int(rng.integers(1, X - 1 - sx + 1))
        y0 = int(rng.integers(1, Y - 1 - sy + 1))
        cls = int(rng.integers(FIRST_FURNITURE, recipe.n_classes + 1))
        region = vol[x0:x0 + sx, y0:y0 + sy, 1:1 + sz]
        if np.any(region):
            continue
        region[...] = cls
        placed += 1

    lo = spec.lower + spec.voxel_size
    hi = spec.upper - spec.voxel_size
    target = (lo + hi) / 2.0
    H, W = recipe.image_hw
    while True:
        attempts += 1
        if attempts > MAX_ATTEMPTS:
            raise SceneGenerationError(f"seed {seed}: no free camera position in {MAX_ATTEMPTS} attempts")
        z_hi = min(recipe.camera_height[1], hi[2] - 0.5 * spec.voxel_size)
        z_lo = min(recipe.camera_height[0], z_hi)
        eye = np.array([rng.uniform(lo[0], hi[0]), rng.uniform(lo[1], hi[1]), rng.uniform(z_lo, z_hi)])
        ijk, inside = spec.voxel_indices(eye)
        if not inside[0] or vol[tuple(ijk[0])] != 0:
            continue
        if np.linalg.norm(target[:2] - eye[:2]) < 4 * spec.voxel_size:
            continue
        camera = Camera.look_at(eye, target, fx=W / 2.0, fy=W / 2.0, cx=W / 2.0, cy=H / 2.0).as_float32()
        break

    logger.debug("seed %d: %d boxes, %d placement attempts", seed, n_boxes, attempts)
    return VoxelGrid(spec, vol.reshape(-1), recipe.num_classes), camera


# ============================================================================
# Datasets
# ============================================================================

@dataclass(eq=False)
class SceneSample:
    """One scene with its clean render, ground-truth set and simulated depth priors."""

    scene_id: int
    seed: int
    grid: VoxelGrid
    camera: Camera
    depth: np.ndarray
    gt: GroundTruthSet
    _priors: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, scene_id: int, seed: int, grid: VoxelGrid, camera: Camera,
              image_hw: Tuple[int, int]) -> "SceneSample":
        depth = render_depth(grid, camera, *image_hw)
        return cls(scene_id, seed, grid, camera, depth, extract_gt_set(grid))

    def prior(self, preset: str) -> np.ndarray:
        """Depth prior of the given quality; the noise stream depends only on the scene seed."""
        if preset not in self._priors:
            self._priors[preset] = simulate_depth_prior(self.depth, preset, seed=self.seed)
        return self._priors[preset]


class SceneDataset:
    """
    Ordered collection of scenes, in memory or backed by a dataset directory.

    Example:
        >>> ds = SceneDataset.generate(SceneRecipe(), seeds=range(4))
        >>> train_ids, val_ids = ds.split(0.25)
    """

    def __init__(self, samples: Sequence[SceneSample], recipe: SceneRecipe):
        self.samples: List[SceneSample] = list(samples)
        self.recipe = recipe

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i: int) -> SceneSample:
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    @classmethod
    def generate(cls, recipe: SceneRecipe, seeds: Sequence[int]) -> "SceneDataset":
        samples = []
        for i, seed in enumerate(seeds):
            grid, camera = generate_scene(recipe, int(seed))
            samples.append(SceneSample.build(i, int(seed), grid, camera, recipe.image_hw))
        return cls(samples, recipe)

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "SceneDataset":
        """
        Read a dataset directory written by ``write_dataset``.

        Raises:
            SceneFormatError: missing or malformed manifest, or a bad scene file
        """
        directory = Path(directory)
        manifest = read_manifest(directory)
        recipe = manifest.recipe
        samples = []
        for i, (name, seed) in enumerate(zip(manifest.files, manifest.seeds)):
            grid, camera = read_scene(directory / name, recipe.num_classes)
            samples.append(SceneSample.build(i, int(seed), grid, camera, recipe.image_hw))
        logger.info("loaded %d scenes from %s", len(samples), directory)
        return cls(samples, recipe)

    def split(self, holdout_fraction: float = 0.25) -> Tuple[List[int], List[int]]:
        """
        Deterministic train/held-out split by position: the last scenes are held out.

        A single-scene dataset is used for both.
        """
        n = len(self.samples)
        if n <= 1:
            return list(range(n)), list(range(n))
        n_val = min(n - 1, max(1, int(round(n * holdout_fraction))))
        return list(range(n - n_val)), list(range(n - n_val, n))


class DatasetManifest(BaseModel):
    """Contents of ``manifest.json``: the scene files of a dataset and how they were generated."""

    model_config = ConfigDict(extra="forbid")

    format: Literal["DSC1"] = "DSC1"
    base_seed: int
    count: NonNegativeInt
    seeds: List[int]
    files: List[str]
    recipe: SceneRecipe

    @model_validator(mode="after")
    def _check_lengths(self) -> "DatasetManifest":
        if not len(self.files) == len(self.seeds) == self.count:
            raise ValueError(f"{len(self.files)} files, {len(self.seeds)} seeds, count {self.count}")
        return self


def scene_file_name(i: int) -> str:
    return f"scene_{i:04d}.dsc"


def write_dataset(out_dir: Union[str, Path], recipe: SceneRecipe, base_seed: int, count: int) -> Path:
    """Generate ``count`` scenes with seeds base_seed..base_seed+count-1 plus the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = [base_seed + i for i in range(count)]
    files = []
    for i, seed in enumerate(seeds):
        grid, camera = generate_scene(recipe, seed)
        write_scene(out_dir / scene_file_name(i), grid, camera)
        files.append(scene_file_name(i))
    manifest = DatasetManifest(base_seed=base_seed, count=count, seeds=seeds, files=files, recipe=recipe)
    (out_dir / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2) + "\n")
    logger.info("wrote %d scenes to %s", count, out_dir)
    return out_dir


def read_manifest(directory: Union[str, Path]) -> DatasetManifest:
    """
    Parse and validate a dataset manifest.

    Raises:
        SceneFormatError: missing file, bad JSON or schema, or mismatched lengths
    """
    path = Path(directory) / MANIFEST_NAME
    try:
        return DatasetManifest.model_validate_json(path.read_bytes())
    except FileNotFoundError as e:
        raise SceneFormatError(f"{directory}: no {MANIFEST_NAME}") from e
    except ValidationError as e:
        raise SceneFormatError(f"{path}: malformed manifest: {e}") from e
