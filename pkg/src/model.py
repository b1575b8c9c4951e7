"""
Toy sparse-query occupancy network with hand-derived backward passes.

Pipeline: a patch encoder turns the depth observation into a feature map, then
D decoder layers refine N queries. Each layer projects the query center into
the image, bilinearly samples the feature map, updates the query feature with a
residual two-layer perceptron and emits R_d point offsets and per-point logits.
The optional depth branch adds MLP(d_q, d_p) to the query feature before the update.

Teacher and student share the decoder architecture; only the encoder differs,
and a student whose encoder width differs from the teacher's projects its
features to the teacher's channel count.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveInt, model_validator

from .errors import NonFiniteError, ShapeMismatchError
from .losses import LayerSnapshot
from .scene import Camera, PredictionSet

logger = logging.getLogger(__name__)

DEPTH_SCALE = 4.0  # meters; depth inputs are divided by this before the first layer
Z_NEAR = 1e-3

# depth-prior quality presets: (noise sigma in meters, 2x blur)
PRIOR_PRESETS: Dict[str, Tuple[float, bool]] = {
    "clean": (0.0, False),
    "fine": (0.02, True),
    "standard": (0.05, True),
    "coarse": (0.10, True),
}


# ============================================================================
# Configuration and parameters
# ============================================================================

class EncoderSpec(BaseModel):
    """Width/depth of the toy patch encoder and its output channel count."""

    model_config = ConfigDict(frozen=True)

    width: PositiveInt = 32
    depth: PositiveInt = 1
    out_channels: PositiveInt = 16


class ModelConfig(BaseModel):
    """Architecture of one sparse-query model."""

    model_config = ConfigDict(frozen=True)

    n_queries: PositiveInt = 64
    n_layers: PositiveInt = 3
    points_per_layer: Tuple[PositiveInt, ...] = (1, 4, 16)
    feature_dim: PositiveInt = 32
    n_classes: PositiveInt = 6
    hidden_dim: PositiveInt = 64
    image_hw: Tuple[PositiveInt, PositiveInt] = (32, 32)
    map_hw: Tuple[PositiveInt, PositiveInt] = (8, 8)
    map_channels: PositiveInt = 32
    encoder: EncoderSpec = Field(default_factory=EncoderSpec)
    depth_branch_enabled: bool = False
    depth_hidden: PositiveInt = 16
    depth_prior: str = "standard"
    scene_min: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    scene_max: Tuple[float, float, float] = (4.8, 4.8, 3.2)

    @model_validator(mode="after")
    def _check(self):
        if len(self.points_per_layer) != self.n_layers:
            raise ValueError(f"points_per_layer needs {self.n_layers} entries, got {self.points_per_layer}")
        if any(b < a for a, b in zip(self.points_per_layer, self.points_per_layer[1:])):
            raise ValueError(f"points_per_layer must be nondecreasing, got {self.points_per_layer}")
        (h, w), (mh, mw) = self.image_hw, self.map_hw
        if h % mh or w % mw:
            raise ValueError(f"image {self.image_hw} must be a multiple of the feature map {self.map_hw}")
        if mh < 2 or mw < 2:
            raise ValueError(f"feature map must be at least 2x2, got {self.map_hw}")
        if self.depth_prior not in PRIOR_PRESETS:
            raise ValueError(f"unknown depth prior {self.depth_prior!r}; choose from {sorted(PRIOR_PRESETS)}")
        if any(hi <= lo for lo, hi in zip(self.scene_min, self.scene_max)):
            raise ValueError("scene_max must exceed scene_min on every axis")
        return self

    @classmethod
    def teacher(cls, **overrides) -> "ModelConfig":
        """Large-encoder default."""
        base = dict(encoder=EncoderSpec(width=64, depth=2, out_channels=32), map_channels=32)
        return cls(**{**base, **overrides})

    @classmethod
    def student(cls, **overrides) -> "ModelConfig":
        """Small-encoder default; its features are projected to the teacher's 32 channels."""
        base = dict(encoder=EncoderSpec(width=16, depth=1, out_channels=16), map_channels=32)
        return cls(**{**base, **overrides})

    @property
    def patch_hw(self) -> Tuple[int, int]:
        return self.image_hw[0] // self.map_hw[0], self.image_hw[1] // self.map_hw[1]

    @property
    def has_projection(self) -> bool:
        return self.encoder.out_channels != self.map_channels


class ModelParams:
    """Named float64 tensors of one model."""

    def __init__(self, tensors: Optional[Dict[str, np.ndarray]] = None):
        self.tensors: Dict[str, np.ndarray] = {
            k: np.asarray(v, dtype=np.float64) for k, v in (tensors or {}).items()
        }

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray):
        self.tensors[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self.tensors))

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return ((k, self.tensors[k]) for k in sorted(self.tensors))

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> Dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def digest(self) -> str:
        """SHA-256 over names, shapes and bytes; equal digests mean bit-identical params."""
        h = hashlib.sha256()
        for name, value in self.items():
            h.update(name.encode())
            h.update(str(value.shape).encode())
            h.update(np.ascontiguousarray(value).tobytes())
        return h.hexdigest()

    def assert_finite(self):
        for name, value in self.items():
            if not np.all(np.isfinite(value)):
                raise NonFiniteError(f"parameter {name} has non-finite values")


def _uniform(rng: np.random.Generator, shape, fan_in: int, scale: float = 1.0) -> np.ndarray:
    bound = scale / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_query_embeddings(config: ModelConfig, rng: np.random.Generator) -> np.ndarray:
    """Centers on a jittered uniform grid over the scene box; features uniform in +-0.02."""
    n = config.n_queries
    g = max(1, math.ceil(n ** (1.0 / 3.0)))
    cells = rng.permutation(g ** 3)[:n]
    ijk = np.stack(np.unravel_index(cells, (g, g, g)), axis=1).astype(np.float64)
    lo, hi = np.asarray(config.scene_min), np.asarray(config.scene_max)
    centers = lo + (ijk + rng.uniform(0.0, 1.0, size=(n, 3))) * (hi - lo) / g
    features = rng.uniform(-0.02, 0.02, size=(n, config.feature_dim))
    return np.concatenate([centers, features], axis=1)


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Deterministic initialization from ``seed``."""
    rng = np.random.default_rng(seed)
    C, Cm, Hd = config.feature_dim, config.map_channels, config.hidden_dim
    K = config.n_classes
    ph, pw = config.patch_hw
    t: Dict[str, np.ndarray] = {"queries.embedding": init_query_embeddings(config, rng)}

    fan = ph * pw
    for layer in range(config.encoder.depth):
        t[f"encoder.layer{layer}.weight"] = _uniform(rng, (fan, config.encoder.width), fan)
        t[f"encoder.layer{layer}.bias"] = np.zeros(config.encoder.width)
        fan = config.encoder.width
    t["encoder.head.weight"] = _uniform(rng, (fan, config.encoder.out_channels), fan)
    t["encoder.head.bias"] = np.zeros(config.encoder.out_channels)
    if config.has_projection:
        t["encoder.proj.weight"] = _uniform(rng, (config.encoder.out_channels, Cm), config.encoder.out_channels)

    t["decoder.boundary"] = np.zeros(Cm)
    for d, R in enumerate(config.points_per_layer):
        prefix = f"decoder.layer{d}"
        t[f"{prefix}.mlp1.weight"] = _uniform(rng, (C + Cm, Hd), C + Cm)
        t[f"{prefix}.mlp1.bias"] = np.zeros(Hd)
        t[f"{prefix}.mlp2.weight"] = _uniform(rng, (Hd, C), Hd)
        t[f"{prefix}.mlp2.bias"] = np.zeros(C)
        t[f"{prefix}.reg.weight"] = _uniform(rng, (C, 3 * R), C, scale=0.5)
        t[f"{prefix}.reg.bias"] = np.zeros(3 * R)
        t[f"{prefix}.cls.weight"] = _uniform(rng, (C, K * R), C)
        t[f"{prefix}.cls.bias"] = np.zeros(K * R)

    if config.depth_branch_enabled:
        t["depth.mlp1.weight"] = _uniform(rng, (2, config.depth_hidden), 2)
        t["depth.mlp1.bias"] = np.zeros(config.depth_hidden)
        # zero output layer: the branch starts as an identity on query features
        t["depth.mlp2.weight"] = np.zeros((config.depth_hidden, C))
        t["depth.mlp2.bias"] = np.zeros(C)
        t["depth.out_of_view"] = np.zeros(C)
    return ModelParams(t)


# ============================================================================
# Sampling and projection kernels
# ============================================================================

@dataclass
class _Bilinear:
    x0: np.ndarray
    y0: np.ndarray
    wx: np.ndarray
    wy: np.ndarray
    clamped: np.ndarray  # (n, 2): x and y clamp flags

    def cells(self) -> tuple:
        return self.x0.tobytes(), self.y0.tobytes(), self.clamped.tobytes()


def bilinear_sample(grid: np.ndarray, x: np.ndarray, y: np.ndarray):
    """
    Sample an (H, W, C) grid at continuous cell coordinates, clamped to the border.

    Cell (i, j) sits at x = j, y = i. Returns the samples (n, C), their derivatives
    w.r.t. x and y (zero where the clamp is active) and a cache for the backward pass.
    """
    H, W = grid.shape[:2]
    xc = np.clip(x, 0.0, W - 1.0)
    yc = np.clip(y, 0.0, H - 1.0)
    x0 = np.minimum(np.floor(xc).astype(np.int64), W - 2)
    y0 = np.minimum(np.floor(yc).astype(np.int64), H - 2)
    wx = (xc - x0)[:, None]
    wy = (yc - y0)[:, None]
    v00, v01 = grid[y0, x0], grid[y0, x0 + 1]
    v10, v11 = grid[y0 + 1, x0], grid[y0 + 1, x0 + 1]
    out = (1 - wx) * (1 - wy) * v00 + wx * (1 - wy) * v01 + (1 - wx) * wy * v10 + wx * wy * v11
    in_x = ((x > 0) & (x < W - 1))[:, None]
    in_y = ((y > 0) & (y < H - 1))[:, None]
    dx = ((1 - wy) * (v01 - v00) + wy * (v11 - v10)) * in_x
    dy = ((1 - wx) * (v10 - v00) + wx * (v11 - v01)) * in_y
    return out, dx, dy, _Bilinear(x0, y0, wx, wy, np.stack([x != xc, y != yc], axis=1))


def bilinear_backward(g: np.ndarray, cache: _Bilinear, shape) -> np.ndarray:
    """Scatter sample gradients (n, C) back onto a grid of ``shape``."""
    out = np.zeros(shape)
    x0, y0, wx, wy = cache.x0, cache.y0, cache.wx, cache.wy
    np.add.at(out, (y0, x0), (1 - wx) * (1 - wy) * g)
    np.add.at(out, (y0, x0 + 1), wx * (1 - wy) * g)
    np.add.at(out, (y0 + 1, x0), (1 - wx) * wy * g)
    np.add.at(out, (y0 + 1, x0 + 1), wx * wy * g)
    return out


def project_to_image(centers: np.ndarray, camera: Camera, image_hw: Tuple[int, int]):
    """
    Pinhole projection of query centers.

    Returns:
        tuple: (u, v, z, pc, in_view) - pixel coordinates, camera-frame depth,
        camera-frame points and the in-frustum mask (z > near, 0 <= u < W, 0 <= v < H)
    """
    pc = camera.world_to_camera(centers)
    z = pc[:, 2]
    safe_z = np.where(z > Z_NEAR, z, 1.0)
    u = camera.fx * pc[:, 0] / safe_z + camera.cx
    v = camera.fy * pc[:, 1] / safe_z + camera.cy
    H, W = image_hw
    in_view = (z > Z_NEAR) & (u >= 0) & (u < W) & (v >= 0) & (v < H)
    return u, v, z, pc, in_view


def _projection_backward(g_u, g_v, g_z, pc, in_view, camera: Camera) -> np.ndarray:
    """Gradient w.r.t. world-space centers from gradients on (u, v) (in-view rows) and z."""
    z = np.where(in_view, pc[:, 2], 1.0)
    g_u = np.where(in_view, g_u, 0.0)
    g_v = np.where(in_view, g_v, 0.0)
    g_pc = np.stack([
        g_u * camera.fx / z,
        g_v * camera.fy / z,
        g_z - (g_u * camera.fx * pc[:, 0] + g_v * camera.fy * pc[:, 1]) / (z * z),
    ], axis=1)
    return g_pc @ camera.rotation.T


def simulate_depth_prior(depth: np.ndarray, preset: str = "standard", seed: int = 0) -> np.ndarray:
    """
    Stand-in for a pre-trained monocular depth model.

    Adds Gaussian noise to every hit pixel, then blurs by 2x average-pool
    downsampling followed by bilinear upsampling. Pixels with no hit stay 0.
    """
    if preset not in PRIOR_PRESETS:
        raise ValueError(f"unknown depth prior {preset!r}; choose from {sorted(PRIOR_PRESETS)}")
    sigma, blur = PRIOR_PRESETS[preset]
    depth = np.asarray(depth, dtype=np.float64)
    hit = depth > 0
    out = depth.copy()
    if sigma > 0:
        rng = np.random.default_rng(seed)
        out = out + np.where(hit, rng.normal(0.0, sigma, size=depth.shape), 0.0)
    H, W = out.shape
    if blur and H % 2 == 0 and W % 2 == 0 and H >= 4 and W >= 4:
        small = out.reshape(H // 2, 2, W // 2, 2).mean(axis=(1, 3))
        jj, ii = np.meshgrid(np.arange(W), np.arange(H))
        x = (jj.reshape(-1) + 0.5) / 2.0 - 0.5
        y = (ii.reshape(-1) + 0.5) / 2.0 - 0.5
        up, _, _, _ = bilinear_sample(small[:, :, None], x, y)
        out = up.reshape(H, W)
    return np.where(hit, np.maximum(out, 0.0), 0.0)


# ============================================================================
# Forward / backward
# ============================================================================

@dataclass
class _LayerCache:
    centers: np.ndarray
    pc: np.ndarray
    in_view: np.ndarray
    sample: Optional[_Bilinear]
    dx: np.ndarray
    dy: np.ndarray
    x: np.ndarray
    h: np.ndarray
    f_new: np.ndarray
    depth: Optional[dict] = None


@dataclass
class ForwardTrace:
    """Encoder feature map (C, H', W'), per-layer snapshots and what backward needs."""

    feature_map: np.ndarray
    layers: List[LayerSnapshot]
    query_input: np.ndarray
    _encoder_cache: dict = field(default=None, repr=False)
    _layer_caches: List[_LayerCache] = field(default_factory=list, repr=False)
    _camera: Optional[Camera] = field(default=None, repr=False)
    _prior: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def predictions(self) -> List[PredictionSet]:
        return [layer.predictions() for layer in self.layers]

    def discrete_state(self) -> tuple:
        """Piecewise choices made in forward (view masks, sampling cells)."""
        out = []
        for cache in self._layer_caches:
            cells = () if cache.sample is None else cache.sample.cells()
            prior = cache.depth.get("sample") if cache.depth else None
            out.append((cache.in_view.tobytes(), cells, () if prior is None else prior.cells()))
        return tuple(out)


def _patches(image: np.ndarray, patch_hw: Tuple[int, int]) -> np.ndarray:
    H, W = image.shape
    ph, pw = patch_hw
    blocks = image.reshape(H // ph, ph, W // pw, pw).transpose(0, 2, 1, 3)
    return blocks.reshape((H // ph) * (W // pw), ph * pw)


def _encode(params: ModelParams, config: ModelConfig, observation: np.ndarray):
    observation = np.asarray(observation, dtype=np.float64)
    if observation.shape != tuple(config.image_hw):
        raise ShapeMismatchError(f"observation {observation.shape} does not match image_hw {config.image_hw}")
    if not np.all(np.isfinite(observation)):
        raise NonFiniteError("observation contains non-finite values")
    acts = [_patches(observation, config.patch_hw) / DEPTH_SCALE]
    for layer in range(config.encoder.depth):
        acts.append(np.tanh(acts[-1] @ params[f"encoder.layer{layer}.weight"] + params[f"encoder.layer{layer}.bias"]))
    head = acts[-1] @ params["encoder.head.weight"] + params["encoder.head.bias"]
    fmap = head @ params["encoder.proj.weight"] if config.has_projection else head
    return fmap, {"acts": acts, "head": head}  # fmap: (H'*W', C_map), row-major cells


def _encode_backward(params, config, cache, g_fmap) -> Dict[str, np.ndarray]:
    grads = {}
    g = g_fmap
    if config.has_projection:
        grads["encoder.proj.weight"] = cache["head"].T @ g
        g = g @ params["encoder.proj.weight"].T
    acts = cache["acts"]
    grads["encoder.head.weight"] = acts[-1].T @ g
    grads["encoder.head.bias"] = g.sum(axis=0)
    g = g @ params["encoder.head.weight"].T
    for layer in reversed(range(config.encoder.depth)):
        g_pre = g * (1.0 - acts[layer + 1] ** 2)
        grads[f"encoder.layer{layer}.weight"] = acts[layer].T @ g_pre
        grads[f"encoder.layer{layer}.bias"] = g_pre.sum(axis=0)
        g = g_pre @ params[f"encoder.layer{layer}.weight"].T
    return grads


def _depth_forward(params, u, v, z, in_view, prior):
    """f_d = MLP(d_q, d_p) with a learned bias for centers outside the view."""
    n = len(z)
    d_p = np.zeros(n)
    dpx = np.zeros(n)
    dpy = np.zeros(n)
    sample = None
    if prior is not None and in_view.any():
        vals, dx, dy, sample = bilinear_sample(prior[:, :, None], u[in_view] - 0.5, v[in_view] - 0.5)
        d_p[in_view] = vals[:, 0]
        dpx[in_view] = dx[:, 0]
        dpy[in_view] = dy[:, 0]
    inp = np.stack([z, d_p], axis=1) / DEPTH_SCALE
    h = np.tanh(inp @ params["depth.mlp1.weight"] + params["depth.mlp1.bias"])
    out_of_view = (~in_view).astype(np.float64)[:, None]
    f_d = h @ params["depth.mlp2.weight"] + params["depth.mlp2.bias"] + out_of_view * params["depth.out_of_view"]
    cache = {"inp": inp, "h": h, "dpx": dpx, "dpy": dpy, "out_of_view": out_of_view, "d_p": d_p, "sample": sample}
    return f_d, cache


def _depth_backward(params, cache, g_fd, grads):
    h = cache["h"]
    grads["depth.mlp2.weight"] = grads.get("depth.mlp2.weight", 0) + h.T @ g_fd
    grads["depth.mlp2.bias"] = grads.get("depth.mlp2.bias", 0) + g_fd.sum(axis=0)
    grads["depth.out_of_view"] = grads.get("depth.out_of_view", 0) + (cache["out_of_view"] * g_fd).sum(axis=0)
    g_a = (g_fd @ params["depth.mlp2.weight"].T) * (1.0 - h ** 2)
    grads["depth.mlp1.weight"] = grads.get("depth.mlp1.weight", 0) + cache["inp"].T @ g_a
    grads["depth.mlp1.bias"] = grads.get("depth.mlp1.bias", 0) + g_a.sum(axis=0)
    g_inp = (g_a @ params["depth.mlp1.weight"].T) / DEPTH_SCALE
    g_z, g_dp = g_inp[:, 0], g_inp[:, 1]
    return g_z, g_dp * cache["dpx"], g_dp * cache["dpy"]


def _decode_layer(params, config, d, centers, feats, grid, camera, prior):
    """One decoder layer; returns the snapshot and its cache."""
    C = config.feature_dim
    R = config.points_per_layer[d]
    K = config.n_classes
    prefix = f"decoder.layer{d}"
    (H, W), (mh, mw) = config.image_hw, config.map_hw

    u, v, z, pc, in_view = project_to_image(centers, camera, config.image_hw)

    depth_cache = None
    f_hat = feats
    if config.depth_branch_enabled:
        f_d, depth_cache = _depth_forward(params, u, v, z, in_view, prior)
        f_hat = feats + f_d

    s = np.tile(params["decoder.boundary"], (len(centers), 1))
    dx = np.zeros_like(s)
    dy = np.zeros_like(s)
    sample = None
    if in_view.any():
        vals, sdx, sdy, sample = bilinear_sample(
            grid, u[in_view] * mw / W - 0.5, v[in_view] * mh / H - 0.5
        )
        s[in_view], dx[in_view], dy[in_view] = vals, sdx, sdy

    x = np.concatenate([f_hat, s], axis=1)
    h = np.tanh(x @ params[f"{prefix}.mlp1.weight"] + params[f"{prefix}.mlp1.bias"])
    f_new = f_hat + h @ params[f"{prefix}.mlp2.weight"] + params[f"{prefix}.mlp2.bias"]
    offsets = (f_new @ params[f"{prefix}.reg.weight"] + params[f"{prefix}.reg.bias"]).reshape(-1, R, 3)
    logits = (f_new @ params[f"{prefix}.cls.weight"] + params[f"{prefix}.cls.bias"]).reshape(-1, R, K)
    points = centers[:, None, :] + offsets
    snapshot = LayerSnapshot(points.mean(axis=1), f_new, points, logits)
    cache = _LayerCache(centers, pc, in_view, sample, dx, dy, x, h, f_new, depth_cache)
    return snapshot, cache


def _decode_layer_backward(params, config, d, cache: _LayerCache, g_out, camera, grads, g_grid):
    """Backward through one layer; returns gradients w.r.t. its input centers and features."""
    C = config.feature_dim
    R = config.points_per_layer[d]
    prefix = f"decoder.layer{d}"
    (H, W), (mh, mw) = config.image_hw, config.map_hw
    n = len(cache.centers)

    g_points = g_out["points"] + g_out["centers"][:, None, :] / R
    g_centers = g_points.sum(axis=1)
    g_off = g_points.reshape(n, 3 * R)
    g_logits = g_out["logits"].reshape(n, -1)
    f_new = cache.f_new

    grads[f"{prefix}.reg.weight"] = f_new.T @ g_off
    grads[f"{prefix}.reg.bias"] = g_off.sum(axis=0)
    grads[f"{prefix}.cls.weight"] = f_new.T @ g_logits
    grads[f"{prefix}.cls.bias"] = g_logits.sum(axis=0)
    g_f_new = (
        g_out["features"]
        + g_off @ params[f"{prefix}.reg.weight"].T
        + g_logits @ params[f"{prefix}.cls.weight"].T
    )

    grads[f"{prefix}.mlp2.weight"] = cache.h.T @ g_f_new
    grads[f"{prefix}.mlp2.bias"] = g_f_new.sum(axis=0)
    g_a = (g_f_new @ params[f"{prefix}.mlp2.weight"].T) * (1.0 - cache.h ** 2)
    grads[f"{prefix}.mlp1.weight"] = cache.x.T @ g_a
    grads[f"{prefix}.mlp1.bias"] = g_a.sum(axis=0)
    g_x = g_a @ params[f"{prefix}.mlp1.weight"].T
    g_f_hat = g_f_new + g_x[:, :C]
    g_s = g_x[:, C:]

    in_view = cache.in_view
    grads["decoder.boundary"] = grads.get("decoder.boundary", 0) + g_s[~in_view].sum(axis=0)
    g_u = np.sum(g_s * cache.dx, axis=1) * (mw / W)
    g_v = np.sum(g_s * cache.dy, axis=1) * (mh / H)
    if cache.sample is not None:
        g_grid += bilinear_backward(g_s[in_view], cache.sample, g_grid.shape)

    g_z = np.zeros(n)
    if cache.depth is not None:
        dz, du, dv = _depth_backward(params, cache.depth, g_f_hat, grads)
        g_z += dz
        g_u += du
        g_v += dv

    g_centers += _projection_backward(g_u, g_v, g_z, cache.pc, in_view, camera)
    return g_centers, g_f_hat


def _zero_layer_grads(config: ModelConfig, d: int, n: int) -> Dict[str, np.ndarray]:
    R, K, C = config.points_per_layer[d], config.n_classes, config.feature_dim
    return {
        "centers": np.zeros((n, 3)),
        "features": np.zeros((n, C)),
        "points": np.zeros((n, R, 3)),
        "logits": np.zeros((n, R, K)),
    }


def forward(params: ModelParams, config: ModelConfig, observation: np.ndarray, camera: Camera,
            query_override: Optional[np.ndarray] = None, depth_prior: Optional[np.ndarray] = None) -> ForwardTrace:
    """
    Encode the observation and run all decoder layers.

    Args:
        query_override: optional (N, 3 + C) query input replacing the learned embeddings
        depth_prior: (H, W) prior depth image, used only with the depth branch enabled

    Returns:
        ForwardTrace: D layer snapshots; layer d flattens to N * R_d predicted points
    """
    queries = params["queries.embedding"] if query_override is None else np.asarray(query_override, dtype=np.float64)
    if queries.shape != (config.n_queries, 3 + config.feature_dim):
        raise ShapeMismatchError(
            f"query input {queries.shape} != ({config.n_queries}, {3 + config.feature_dim})"
        )
    if config.depth_branch_enabled and depth_prior is None:
        raise ValueError("depth branch enabled but no depth prior given")
    prior = None if depth_prior is None else np.asarray(depth_prior, dtype=np.float64)

    fmap, enc_cache = _encode(params, config, observation)
    mh, mw = config.map_hw
    grid = fmap.reshape(mh, mw, config.map_channels)

    centers, feats = queries[:, :3].copy(), queries[:, 3:].copy()
    layers, caches = [], []
    for d in range(config.n_layers):
        snapshot, cache = _decode_layer(params, config, d, centers, feats, grid, camera, prior)
        layers.append(snapshot)
        caches.append(cache)
        centers, feats = snapshot.centers, snapshot.features

    feature_map = fmap.T.reshape(config.map_channels, mh, mw)
    return ForwardTrace(feature_map, layers, queries.copy(), enc_cache, caches, camera, prior)


def backward(params: ModelParams, config: ModelConfig, trace: ForwardTrace,
             grads: Dict[str, np.ndarray]) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """
    Backpropagate gradients on trace outputs to every parameter.

    ``grads`` keys: ``feature_map`` (C, H', W') and per layer d any of
    ``layer{d}.centers``, ``layer{d}.features``, ``layer{d}.points`` (N, R, 3),
    ``layer{d}.point_logits`` (N, R, K), ``layer{d}.positions`` (N*R, 3),
    ``layer{d}.logits`` (N*R, K).

    Returns:
        tuple: (parameter gradients, gradient w.r.t. the (N, 3 + C) query input).
        The query-input gradient is not folded into ``queries.embedding``; the
        caller decides where it belongs.
    """
    n = config.n_queries
    mh, mw = config.map_hw
    param_grads: Dict[str, np.ndarray] = {}
    g_grid = np.zeros((mh, mw, config.map_channels))
    carry_c = np.zeros((n, 3))
    carry_f = np.zeros((n, config.feature_dim))

    for d in reversed(range(config.n_layers)):
        R, K = config.points_per_layer[d], config.n_classes
        g_out = _zero_layer_grads(config, d, n)
        g_out["centers"] += carry_c
        g_out["features"] += carry_f
        if f"layer{d}.centers" in grads:
            g_out["centers"] += grads[f"layer{d}.centers"]
        if f"layer{d}.features" in grads:
            g_out["features"] += grads[f"layer{d}.features"]
        if f"layer{d}.points" in grads:
            g_out["points"] += grads[f"layer{d}.points"]
        if f"layer{d}.positions" in grads:
            g_out["points"] += grads[f"layer{d}.positions"].reshape(n, R, 3)
        if f"layer{d}.point_logits" in grads:
            g_out["logits"] += grads[f"layer{d}.point_logits"]
        if f"layer{d}.logits" in grads:
            g_out["logits"] += grads[f"layer{d}.logits"].reshape(n, R, K)
        carry_c, carry_f = _decode_layer_backward(
            params, config, d, trace._layer_caches[d], g_out, trace._camera, param_grads, g_grid
        )

    g_fmap = g_grid.reshape(mh * mw, config.map_channels)
    if "feature_map" in grads:
        g_fmap = g_fmap + grads["feature_map"].reshape(config.map_channels, mh * mw).T
    param_grads.update(_encode_backward(params, config, trace._encoder_cache, g_fmap))

    for name, value in params.items():
        if name not in param_grads:
            param_grads[name] = np.zeros_like(value)
        else:
            param_grads[name] = np.asarray(param_grads[name], dtype=np.float64).reshape(value.shape)
    return param_grads, np.concatenate([carry_c, carry_f], axis=1)


# ============================================================================
# Model object
# ============================================================================

class SparseOccupancyModel:
    """
    A ModelConfig with its parameters and the forward/backward entry points.

    Example:
        >>> model = SparseOccupancyModel(ModelConfig.student(), seed=0)
        >>> trace = model.forward(observation, camera, depth_prior=prior)
        >>> len(trace.predictions[-1])
        1024
    """

    def __init__(self, config: ModelConfig, params: Optional[ModelParams] = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    def num_parameters(self) -> int:
        return self.params.num_parameters()

    def encode(self, observation: np.ndarray) -> np.ndarray:
        """Feature map (C_map, H', W'); projected to the teacher width when configured."""
        fmap, _ = _encode(self.params, self.config, observation)
        mh, mw = self.config.map_hw
        return fmap.T.reshape(self.config.map_channels, mh, mw)

    def decode_layer(self, queries, features: np.ndarray, camera: Camera, layer_idx: int,
                     depth_prior: Optional[np.ndarray] = None) -> LayerSnapshot:
        """
        Refine N queries with decoder layer ``layer_idx``.

        Args:
            queries: a LayerSnapshot (its centers/features are used) or an (N, 3 + C) array
            features: encoder feature map (C_map, H', W')
        """
        if layer_idx >= self.config.n_layers:
            raise IndexError(f"layer {layer_idx} out of range for {self.config.n_layers} layers")
        if isinstance(queries, LayerSnapshot):
            centers, feats = queries.centers, queries.features
        else:
            queries = np.asarray(queries, dtype=np.float64)
            centers, feats = queries[:, :3], queries[:, 3:]
        grid = np.asarray(features, dtype=np.float64).transpose(1, 2, 0)
        snapshot, _ = _decode_layer(self.params, self.config, layer_idx, centers, feats, grid, camera, depth_prior)
        return snapshot

    def forward(self, observation, camera, query_override=None, depth_prior=None) -> ForwardTrace:
        return forward(self.params, self.config, observation, camera, query_override, depth_prior)

    def backward(self, trace: ForwardTrace, grads: Dict[str, np.ndarray]):
        return backward(self.params, self.config, trace, grads)

    def depth_branch(self, center: np.ndarray, camera: Camera, prior_depth_image: np.ndarray) -> np.ndarray:
        """Feature delta f_d for one query center; the caller adds it to the query feature."""
        if not self.config.depth_branch_enabled:
            raise ValueError("depth branch is disabled in this model's config")
        u, v, z, _, in_view = project_to_image(np.asarray(center, dtype=np.float64).reshape(1, 3), camera,
                                               self.config.image_hw)
        f_d, _ = _depth_forward(self.params, u, v, z, in_view, np.asarray(prior_depth_image, dtype=np.float64))
        return f_d[0]


def sample_prior_depth(center: np.ndarray, camera: Camera, prior_depth_image: np.ndarray) -> Tuple[float, float]:
    """(d_q, d_p) of the depth branch for one center; d_p = 0 outside the view."""
    image = np.asarray(prior_depth_image, dtype=np.float64)
    u, v, z, _, in_view = project_to_image(np.asarray(center, dtype=np.float64).reshape(1, 3), camera, image.shape)
    if not in_view[0]:
        return float(z[0]), 0.0
    vals, _, _, _ = bilinear_sample(image[:, :, None], u - 0.5, v - 0.5)
    return float(z[0]), float(vals[0, 0])


def teacher_guided_init(student_params: ModelParams, teacher_params: ModelParams,
                        copy_query_embeddings: bool = True) -> ModelParams:
    """
    Copy the teacher's decoder (and depth branch, when both have one) into the student.

    Encoder and projection tensors are left untouched.

    Raises:
        ShapeMismatchError: a copied tensor has a different shape in the student
    """
    out = student_params.copy()
    has_depth = any(k.startswith("depth.") for k in student_params) and any(
        k.startswith("depth.") for k in teacher_params
    )
    copied = 0
    for name, value in teacher_params.items():
        wanted = (
            name.startswith("decoder.")
            or (has_depth and name.startswith("depth."))
            or (copy_query_embeddings and name == "queries.embedding")
        )
        if not wanted:
            continue
        if name not in student_params or student_params[name].shape != value.shape:
            have = student_params[name].shape if name in student_params else None
            raise ShapeMismatchError(f"cannot copy {name}: teacher {value.shape} vs student {have}")
        out[name] = value.copy()
        copied += 1
    logger.info("teacher-guided init copied %d tensors", copied)
    return out
