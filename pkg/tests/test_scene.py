import json

import numpy as np
import pytest

from src.errors import GridMismatchError, InvalidClassError, NonFiniteError, SceneFormatError, ShapeMismatchError
from src.scene import (
    Camera,
    GridSpec,
    GroundTruthSet,
    MetricsReport,
    PredictionSet,
    VoxelGrid,
    extract_gt_set,
    mean_reports,
    miou,
    occupancy_iou,
    predset_to_grid,
    read_scene,
    voxelize,
    write_scene,
)


@pytest.fixture
def small_spec():
    return GridSpec((4, 3, 2), 0.1)


def _grid_with(spec, cells, num_classes=7):
    grid = VoxelGrid.empty(spec, num_classes)
    for ijk, cls in cells.items():
        grid.volume[ijk] = cls
    return grid


# ============================================================================
# GridSpec / VoxelGrid
# ============================================================================

def test_grid_spec_presets():
    """Test the desk-scale and benchmark grid presets."""
    toy = GridSpec.toy()
    paper = GridSpec.paper()

    assert toy.dims == (24, 24, 16)
    assert toy.n_voxels == 24 * 24 * 16
    assert paper.dims == (60, 60, 36)
    assert np.allclose(paper.extent, [4.8, 4.8, 2.88])


def test_grid_spec_rejects_bad_geometry():
    """Test that non-positive dims or voxel sizes are rejected."""
    with pytest.raises(ValueError):
        GridSpec((0, 2, 2), 0.1)
    with pytest.raises(ValueError):
        GridSpec((2, 2, 2), 0.0)
    with pytest.raises(ShapeMismatchError):
        GridSpec((2, 2), 0.1)


def test_voxel_grid_validates_labels(small_spec):
    """Test label length and class-range checks."""
    with pytest.raises(ShapeMismatchError):
        VoxelGrid(small_spec, np.zeros(5))
    with pytest.raises(InvalidClassError):
        VoxelGrid(small_spec, np.full(small_spec.n_voxels, 7))


def test_voxel_indices_half_open():
    """Test that cell boundaries belong to the upper voxel and outside points are flagged."""
    spec = GridSpec((4, 3, 2), 0.5)

    ijk, inside = spec.voxel_indices(np.array([[0.5, 0.0, 0.0], [-0.01, 0.0, 0.0], [1.9, 1.4, 0.9]]))

    assert ijk[0].tolist() == [1, 0, 0]
    assert inside.tolist() == [True, False, True]


# ============================================================================
# voxelize / extract_gt_set
# ============================================================================

def test_voxelize_empty_points(small_spec):
    """Test that no points give an all-empty grid."""
    grid = voxelize([], small_spec)

    assert grid.labels.sum() == 0
    assert grid.labels.size == small_spec.n_voxels


def test_voxelize_single_point():
    """Test a point at the center of voxel (0,0,0)."""
    spec = GridSpec((2, 2, 2), 0.1)

    grid = voxelize([((0.05, 0.05, 0.05), 3)], spec)

    # Check that exactly one voxel is labeled
    assert grid.volume[0, 0, 0] == 3
    assert np.count_nonzero(grid.labels) == 1


def test_voxelize_majority_vote(small_spec):
    """Test that a voxel takes the most frequent class."""
    pts = [((0.05, 0.05, 0.05), 2), ((0.06, 0.05, 0.05), 5), ((0.07, 0.05, 0.05), 2)]

    grid = voxelize(pts, small_spec)

    assert grid.volume[0, 0, 0] == 2


def test_voxelize_tie_goes_to_lowest_class(small_spec):
    """Test the tie-break rule of the majority vote."""
    pts = [((0.05, 0.05, 0.05), 6), ((0.06, 0.05, 0.05), 4)]

    grid = voxelize(pts, small_spec)

    assert grid.volume[0, 0, 0] == 4


def test_voxelize_drops_out_of_bounds_points(small_spec):
    """Test that points outside the grid are ignored."""
    grid = voxelize([((5.0, 0.05, 0.05), 2), ((0.15, 0.05, 0.05), 1)], small_spec)

    assert np.count_nonzero(grid.labels) == 1
    assert grid.volume[1, 0, 0] == 1


def test_voxelize_rejects_bad_input(small_spec):
    """Test non-finite positions and out-of-range classes."""
    with pytest.raises(NonFiniteError):
        voxelize([((np.nan, 0.0, 0.0), 1)], small_spec)
    with pytest.raises(InvalidClassError):
        voxelize([((0.05, 0.05, 0.05), 9)], small_spec)


def test_extract_gt_set_empty(small_spec):
    """Test that an empty grid has no ground-truth voxels."""
    gt = extract_gt_set(VoxelGrid.empty(small_spec))

    assert gt.M == 0
    assert gt.positions.shape == (0, 3)


def test_extract_gt_set_center():
    """Test the voxel-center formula for voxel (1,0,0)."""
    grid = _grid_with(GridSpec((2, 1, 1), 0.1), {(1, 0, 0): 4})

    gt = extract_gt_set(grid)

    assert gt.M == 1
    assert np.allclose(gt.positions[0], [0.15, 0.05, 0.05])
    assert gt.classes.tolist() == [4]


def test_extract_then_voxelize_round_trip():
    """Test that voxelizing the extracted set reproduces random grids."""
    spec = GridSpec((6, 5, 4), 0.08, origin=(-0.3, 0.2, 1.0))
    rng = np.random.default_rng(3)

    for _ in range(5):
        labels = np.zeros(spec.n_voxels, dtype=np.uint8)
        occupied = rng.choice(spec.n_voxels, size=7, replace=False)
        labels[occupied] = rng.integers(1, 7, size=7)
        grid = VoxelGrid(spec, labels)

        gt = extract_gt_set(grid)

        assert gt.M == 7
        assert voxelize(gt, spec) == grid


@pytest.mark.parametrize("num_classes", [5, 12])
def test_round_trip_keeps_num_classes(num_classes):
    """Test the round trip for grids whose class count differs from the default."""
    spec = GridSpec((5, 4, 3), 0.1)
    rng = np.random.default_rng(num_classes)
    labels = np.zeros(spec.n_voxels, dtype=np.uint8)
    occupied = rng.choice(spec.n_voxels, size=12, replace=False)
    labels[occupied] = rng.integers(1, num_classes, size=12)
    labels[occupied[0]] = num_classes - 1
    grid = VoxelGrid(spec, labels, num_classes)

    gt = extract_gt_set(grid)

    assert gt.num_classes == num_classes
    assert voxelize(gt, spec) == grid


def test_ground_truth_rejects_class_above_count():
    """Test that a recorded class count bounds the classes."""
    with pytest.raises(InvalidClassError):
        GroundTruthSet(np.zeros((1, 3)), [5], num_classes=5)


def test_ground_truth_rejects_empty_class():
    """Test that class 0 cannot appear in a ground-truth set."""
    with pytest.raises(InvalidClassError):
        GroundTruthSet(np.zeros((1, 3)), [0])


# ============================================================================
# predset_to_grid
# ============================================================================

def test_predset_to_grid_threshold(small_spec):
    """Test that no point above the threshold gives an empty grid."""
    pred = PredictionSet(np.array([[0.05, 0.05, 0.05]]), np.zeros((1, 6)))

    grid = predset_to_grid(pred, small_spec, score_threshold=0.5)

    assert grid.labels.sum() == 0


def test_predset_to_grid_argmax_classes(small_spec):
    """Test that each confident point votes its argmax class + 1."""
    logits = np.full((3, 6), -5.0)
    logits[0, 0] = 5.0
    logits[1, 3] = 5.0
    logits[2, 3] = 5.0
    positions = np.array([[0.05, 0.05, 0.05], [0.35, 0.25, 0.15], [0.36, 0.26, 0.16]])

    grid = predset_to_grid(PredictionSet(positions, logits), small_spec)

    # Check one voxel per point group with unanimous votes
    assert grid.volume[0, 0, 0] == 1
    assert grid.volume[3, 2, 1] == 4
    assert np.count_nonzero(grid.labels) == 2
    assert grid.num_classes == 7


def test_predset_to_grid_non_finite_logits(small_spec):
    """Test that NaN logits are rejected."""
    pred = PredictionSet(np.zeros((1, 3)), np.array([[np.nan, 0.0]]))

    with pytest.raises(NonFiniteError):
        predset_to_grid(pred, small_spec)


# ============================================================================
# Metrics
# ============================================================================

def test_occupancy_iou_examples(small_spec):
    """Test identical, disjoint and partially overlapping occupancy."""
    a, b, c = (0, 0, 0), (1, 0, 0), (2, 0, 0)
    pred = _grid_with(small_spec, {a: 1, b: 1})
    gt = _grid_with(small_spec, {b: 2, c: 2})

    assert occupancy_iou(pred, pred) == 1.0
    assert occupancy_iou(_grid_with(small_spec, {a: 1}), _grid_with(small_spec, {c: 1})) == 0.0
    assert occupancy_iou(pred, gt) == pytest.approx(1 / 3)


def test_miou_identical_grids(small_spec):
    """Test that identical grids score 1 on every present class."""
    grid = _grid_with(small_spec, {(0, 0, 0): 1, (1, 1, 1): 3})

    report = miou(grid, grid)

    assert report.iou == 1.0
    assert report.miou == 1.0
    assert report.per_class_iou[0] == 1.0
    assert report.per_class_iou[2] == 1.0
    assert report.per_class_iou[1] is None


def test_miou_relabeled_class(small_spec):
    """Test a prediction that relabels every class-2 voxel as class 1."""
    gt = _grid_with(small_spec, {(0, 0, 0): 1, (1, 0, 0): 1, (2, 0, 0): 2, (3, 0, 0): 2})
    pred = _grid_with(small_spec, {(0, 0, 0): 1, (1, 0, 0): 1, (2, 0, 0): 1, (3, 0, 0): 1})

    report = miou(pred, gt)

    assert report.iou == 1.0
    assert report.per_class_iou[0] == pytest.approx(0.5)
    assert report.per_class_iou[1] == 0.0
    assert report.miou == pytest.approx(0.25)


def test_miou_no_classes(small_spec):
    """Test the vacuous mean when both grids are empty."""
    empty = VoxelGrid.empty(small_spec)

    report = miou(empty, empty)

    assert report.miou is None
    assert all(v is None for v in report.per_class_iou)
    assert json.loads(report.to_json())["miou"] is None


def test_metrics_reject_grid_mismatch(small_spec):
    """Test that metrics refuse grids with different specs."""
    other = VoxelGrid.empty(GridSpec((4, 3, 2), 0.2))

    with pytest.raises(GridMismatchError):
        occupancy_iou(VoxelGrid.empty(small_spec), other)
    with pytest.raises(GridMismatchError):
        miou(VoxelGrid.empty(small_spec), other)


def test_mean_reports_skips_undefined(small_spec):
    """Test per-class averaging across scenes with absent classes."""
    g1 = _grid_with(small_spec, {(0, 0, 0): 1})
    g2 = _grid_with(small_spec, {(0, 0, 0): 2})
    empty = VoxelGrid.empty(small_spec)

    report = mean_reports([miou(g1, g1), miou(empty, g2)])

    assert report.iou == pytest.approx(0.5)
    assert report.per_class_iou[0] == 1.0
    assert report.per_class_iou[1] == 0.0
    assert report.miou == pytest.approx(0.5)


def test_metrics_are_symmetric():
    """Test that swapping prediction and ground truth leaves the scores unchanged."""
    spec = GridSpec((6, 5, 4), 0.1)
    rng = np.random.default_rng(11)

    for _ in range(10):
        a = VoxelGrid(spec, rng.integers(0, 7, size=spec.n_voxels).astype(np.uint8))
        b = VoxelGrid(spec, np.where(rng.random(spec.n_voxels) < 0.5, a.labels,
                                     rng.integers(0, 7, size=spec.n_voxels)).astype(np.uint8))

        assert occupancy_iou(a, b) == occupancy_iou(b, a)
        ab, ba = miou(a, b), miou(b, a)
        assert ab.per_class_iou == ba.per_class_iou
        assert ab.miou == ba.miou


def test_report_json_round_trip(small_spec):
    """Test that a report survives its JSON form and omits unset class names."""
    grid = _grid_with(small_spec, {(0, 0, 0): 1, (1, 0, 0): 2})
    report = miou(grid, grid)

    assert MetricsReport.from_json(report.to_json()) == report
    assert "class_names" not in mean_reports([report.model_copy(update={"class_names": None})]).to_dict()


# ============================================================================
# Scene file format
# ============================================================================

def _camera():
    return Camera.look_at((0.3, 0.1, 0.15), (0.1, 0.2, 0.05), 16.0, 16.0, 16.0, 16.0).as_float32()


def test_scene_file_round_trip(tmp_path):
    """Test that a written scene reads back identically."""
    spec = GridSpec((5, 4, 3), 0.08, origin=(0.1, -0.2, 0.0))
    rng = np.random.default_rng(0)
    grid = VoxelGrid(spec, rng.integers(0, 7, size=spec.n_voxels))
    camera = _camera()
    path = tmp_path / "scene.dsc"

    write_scene(path, grid, camera)
    grid2, camera2 = read_scene(path)

    assert grid2 == grid
    assert camera2 == camera
    assert path.read_bytes()[:4] == b"DSC1"


def test_scene_file_bad_magic(tmp_path):
    """Test that a wrong magic number is rejected."""
    path = tmp_path / "scene.dsc"
    write_scene(path, VoxelGrid.empty(GridSpec((2, 2, 2), 0.1)), _camera())
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])

    with pytest.raises(SceneFormatError):
        read_scene(path)


def test_scene_file_truncated(tmp_path):
    """Test that a truncated payload is rejected."""
    path = tmp_path / "scene.dsc"
    write_scene(path, VoxelGrid.empty(GridSpec((2, 2, 2), 0.1)), _camera())
    path.write_bytes(path.read_bytes()[:-1])

    with pytest.raises(SceneFormatError):
        read_scene(path)


def test_camera_projects_optical_axis():
    """Test the pinhole projection of a point straight ahead."""
    camera = Camera(100.0, 100.0, 50.0, 50.0)

    u, v, z = camera.project(np.array([[0.0, 0.0, 2.0]]))

    assert (u[0], v[0], z[0]) == (50.0, 50.0, 2.0)
