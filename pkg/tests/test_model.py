import numpy as np
import pytest

from src.errors import NonFiniteError, ShapeMismatchError
from src.model import (
    EncoderSpec,
    ModelConfig,
    SparseOccupancyModel,
    init_params,
    project_to_image,
    sample_prior_depth,
    simulate_depth_prior,
    teacher_guided_init,
)
from src.scene import Camera


@pytest.fixture
def camera():
    return Camera.look_at((2.4, 0.6, 1.4), (2.4, 2.4, 1.0), 16.0, 16.0, 16.0, 16.0)


@pytest.fixture
def observation():
    return np.random.default_rng(0).uniform(0.5, 4.0, size=(32, 32))


def _small_config(**overrides):
    base = dict(
        n_queries=8,
        n_layers=2,
        points_per_layer=(1, 3),
        feature_dim=8,
        hidden_dim=12,
        map_channels=8,
        encoder=EncoderSpec(width=8, depth=1, out_channels=4),
    )
    return ModelConfig(**{**base, **overrides})


def _layers_equal(a, b):
    return all(
        np.array_equal(x.points, y.points) and np.array_equal(x.logits, y.logits)
        and np.array_equal(x.centers, y.centers) and np.array_equal(x.features, y.features)
        for x, y in zip(a.layers, b.layers)
    )


# ============================================================================
# Configuration
# ============================================================================

def test_model_config_validation():
    """Test layer counts, point schedules and image/map divisibility."""
    with pytest.raises(ValueError):
        ModelConfig(n_layers=2, points_per_layer=(1, 4, 16))
    with pytest.raises(ValueError):
        ModelConfig(points_per_layer=(4, 1, 16))
    with pytest.raises(ValueError):
        ModelConfig(image_hw=(30, 32))
    with pytest.raises(ValueError):
        ModelConfig(depth_prior="blurry")


def test_teacher_and_student_presets():
    """Test that the student is smaller and projects to the teacher's map width."""
    teacher = SparseOccupancyModel(ModelConfig.teacher())
    student = SparseOccupancyModel(ModelConfig.student())

    assert student.config.has_projection
    assert not teacher.config.has_projection
    assert student.num_parameters() < teacher.num_parameters()
    assert "encoder.proj.weight" in student.params


def test_init_params_deterministic():
    """Test that the same seed gives bit-identical parameters."""
    config = _small_config()

    assert init_params(config, 3).digest() == init_params(config, 3).digest()
    assert init_params(config, 3).digest() != init_params(config, 4).digest()


def test_query_centers_inside_scene_box():
    """Test that initial query centers lie in the configured scene box."""
    params = init_params(ModelConfig(), seed=1)
    centers = params["queries.embedding"][:, :3]

    assert params["queries.embedding"].shape == (64, 35)
    assert np.all(centers >= 0.0)
    assert np.all(centers <= np.array([4.8, 4.8, 3.2]))


# ============================================================================
# Encoder / decoder
# ============================================================================

def test_encode_zero_image_shape():
    """Test the feature map shape and finiteness on a zero image."""
    model = SparseOccupancyModel(ModelConfig.student())

    fmap = model.encode(np.zeros((32, 32)))

    assert fmap.shape == (32, 8, 8)
    assert np.all(np.isfinite(fmap))


def test_encode_rejects_bad_input():
    """Test non-finite and mis-shaped observations."""
    model = SparseOccupancyModel(_small_config())
    bad = np.zeros((32, 32))
    bad[3, 4] = np.inf

    with pytest.raises(NonFiniteError):
        model.encode(bad)
    with pytest.raises(ShapeMismatchError):
        model.encode(np.zeros((16, 32)))


def test_forward_prediction_count(observation, camera):
    """Test that the final layer flattens to N * R_D points."""
    model = SparseOccupancyModel(ModelConfig.student())

    trace = model.forward(observation, camera)

    assert len(trace.layers) == 3
    assert len(trace.predictions[0]) == 64
    assert len(trace.predictions[-1]) == 1024
    assert trace.predictions[-1].logits.shape == (1024, 6)


def test_forward_is_deterministic(observation, camera):
    """Test that two calls give bit-identical traces."""
    model = SparseOccupancyModel(_small_config(), seed=2)

    first = model.forward(observation, camera)
    second = model.forward(observation, camera)

    assert _layers_equal(first, second)
    assert np.array_equal(first.feature_map, second.feature_map)


def test_forward_override_with_own_embeddings(observation, camera):
    """Test that overriding with the model's own embeddings changes nothing."""
    model = SparseOccupancyModel(_small_config(), seed=3)

    plain = model.forward(observation, camera)
    override = model.forward(observation, camera, query_override=model.params["queries.embedding"].copy())

    assert _layers_equal(plain, override)


def test_forward_override_shape(observation, camera):
    """Test that a mis-shaped override is rejected."""
    model = SparseOccupancyModel(_small_config())

    with pytest.raises(ShapeMismatchError):
        model.forward(observation, camera, query_override=np.zeros((3, 11)))


def test_queries_are_permutation_equivariant(observation, camera):
    """Test that permuting the query input permutes every output."""
    model = SparseOccupancyModel(_small_config(), seed=4)
    queries = model.params["queries.embedding"]
    order = np.random.default_rng(5).permutation(len(queries))

    plain = model.forward(observation, camera)
    shuffled = model.forward(observation, camera, query_override=queries[order])

    for a, b in zip(plain.layers, shuffled.layers):
        assert np.allclose(a.points[order], b.points)
        assert np.allclose(a.logits[order], b.logits)


def test_decode_layer_zero_regression(observation, camera):
    """Test that zero regression weights leave the centers unchanged."""
    model = SparseOccupancyModel(_small_config(), seed=6)
    for name in ("decoder.layer1.reg.weight", "decoder.layer1.reg.bias"):
        model.params[name] = np.zeros_like(model.params[name])
    queries = model.params["queries.embedding"]

    snapshot = model.decode_layer(queries, model.encode(observation), camera, 1)

    assert snapshot.points.shape == (8, 3, 3)
    assert np.allclose(snapshot.centers, queries[:, :3], rtol=1e-15, atol=1e-15)


def test_decode_layer_single_point(observation, camera):
    """Test that with R = 1 the new center is the single point."""
    model = SparseOccupancyModel(_small_config(), seed=7)

    snapshot = model.decode_layer(model.params["queries.embedding"], model.encode(observation), camera, 0)

    assert snapshot.points.shape == (8, 1, 3)
    assert np.array_equal(snapshot.centers, snapshot.points[:, 0])


def test_out_of_view_queries_use_boundary_feature(observation):
    """Test that queries behind the camera sample the learned boundary feature."""
    camera = Camera(16.0, 16.0, 16.0, 16.0, translation=(0.0, 0.0, 5.0))
    model = SparseOccupancyModel(_small_config(), seed=8)
    model.params["decoder.boundary"] = np.full(8, 0.3)
    other = SparseOccupancyModel(_small_config(), params=model.params.copy())
    other.params["decoder.boundary"] = np.full(8, -0.3)
    queries = model.params["queries.embedding"]

    # Check that every center is behind the camera (z < 5 everywhere in the box)
    _, _, _, _, in_view = project_to_image(queries[:, :3], camera, (32, 32))
    assert not in_view.any()

    a = model.decode_layer(queries, model.encode(observation), camera, 0)
    b = other.decode_layer(queries, other.encode(observation), camera, 0)
    assert not np.allclose(a.features, b.features)


# ============================================================================
# Depth branch
# ============================================================================

def test_pinhole_depth_sample():
    """Test a center on the optical axis at 2 m."""
    camera = Camera(100.0, 100.0, 50.0, 50.0)
    prior = np.full((100, 100), 2.0)

    u, v, z, _, in_view = project_to_image(np.array([[0.0, 0.0, 2.0]]), camera, (100, 100))
    d_q, d_p = sample_prior_depth(np.array([0.0, 0.0, 2.0]), camera, prior)

    assert (u[0], v[0], z[0]) == (50.0, 50.0, 2.0)
    assert in_view[0]
    assert d_q == 2.0
    assert d_p == pytest.approx(2.0)


def test_prior_depth_outside_view_is_zero():
    """Test that centers behind the camera read no prior depth."""
    camera = Camera(100.0, 100.0, 50.0, 50.0)

    d_q, d_p = sample_prior_depth(np.array([0.0, 0.0, -1.0]), camera, np.full((100, 100), 2.0))

    assert d_q == -1.0
    assert d_p == 0.0


def test_zero_depth_branch_is_identity(observation, camera):
    """Test that the freshly initialized depth branch leaves features unchanged."""
    plain = SparseOccupancyModel(_small_config(), seed=9)
    with_depth = SparseOccupancyModel(_small_config(depth_branch_enabled=True), seed=9)
    prior = simulate_depth_prior(observation, "standard", seed=1)

    f_d = with_depth.depth_branch(np.array([2.4, 2.4, 1.0]), camera, prior)
    trace_plain = plain.forward(observation, camera)
    trace_depth = with_depth.forward(observation, camera, depth_prior=prior)

    assert np.all(f_d == 0.0)
    assert _layers_equal(trace_plain, trace_depth)


def test_depth_branch_requires_prior(observation, camera):
    """Test that an enabled depth branch needs a prior image."""
    model = SparseOccupancyModel(_small_config(depth_branch_enabled=True))

    with pytest.raises(ValueError):
        model.forward(observation, camera)


def test_simulate_depth_prior():
    """Test that the clean preset is exact and noisy presets keep holes at zero."""
    depth = np.full((8, 8), 3.0)
    depth[0, 0] = 0.0

    clean = simulate_depth_prior(depth, "clean")
    noisy = simulate_depth_prior(depth, "coarse", seed=4)

    assert np.array_equal(clean, depth)
    assert noisy[0, 0] == 0.0
    assert np.all(noisy[depth > 0] >= 0.0)
    assert not np.array_equal(noisy, depth)
    with pytest.raises(ValueError):
        simulate_depth_prior(depth, "unknown")


# ============================================================================
# Teacher-guided initialization
# ============================================================================

def test_teacher_guided_init_copies_decoder():
    """Test that decoder tensors come from the teacher and the encoder stays."""
    teacher = init_params(ModelConfig.teacher(), seed=1)
    student = init_params(ModelConfig.student(), seed=2)

    out = teacher_guided_init(student, teacher)

    for name, value in out.items():
        if name.startswith("decoder.") or name == "queries.embedding":
            assert np.array_equal(value, teacher[name])
        else:
            assert np.array_equal(value, student[name])
    # Check that the inputs are untouched
    assert student.digest() == init_params(ModelConfig.student(), seed=2).digest()


def test_teacher_guided_init_keeps_student_queries():
    """Test that the query-copy flag off leaves the student embeddings."""
    teacher = init_params(ModelConfig.teacher(), seed=1)
    student = init_params(ModelConfig.student(), seed=2)

    out = teacher_guided_init(student, teacher, copy_query_embeddings=False)

    assert np.array_equal(out["queries.embedding"], student["queries.embedding"])
    assert np.array_equal(out["decoder.layer0.mlp1.weight"], teacher["decoder.layer0.mlp1.weight"])


def test_teacher_guided_init_shape_mismatch():
    """Test that decoders of different widths cannot be copied."""
    teacher = init_params(ModelConfig.teacher(feature_dim=16), seed=1)
    student = init_params(ModelConfig.student(), seed=2)

    with pytest.raises(ShapeMismatchError):
        teacher_guided_init(student, teacher)
