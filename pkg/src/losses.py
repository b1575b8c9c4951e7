"""
Differentiable losses for set-based occupancy training and multi-level distillation.

Every loss returns a LossValue: the scalar plus analytic gradients keyed by the
name of each student-side input. Teacher-side inputs are constants and never get
a gradient entry.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Literal, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, NonNegativeFloat

from .errors import EmptySetError, InvalidClassError, ShapeMismatchError
from .matching import build_query_cost_matrix, hungarian, nearest_neighbor_pairs
from .scene import GroundTruthSet, PredictionSet

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12
FOCAL_ALPHA = 1.0
FOCAL_GAMMA = 2.0

MatchMode = Literal["cfd", "fld"]


# ============================================================================
# Types
# ============================================================================

@dataclass
class LossValue:
    """Scalar loss with gradients w.r.t. each named differentiable input."""

    value: float
    grads: Dict[str, np.ndarray] = field(default_factory=dict)
    info: Dict[str, object] = field(default_factory=dict)

    @classmethod
    def zero(cls) -> "LossValue":
        return cls(0.0, {})

    def scaled(self, weight: float) -> "LossValue":
        return LossValue(weight * self.value, {k: weight * g for k, g in self.grads.items()}, dict(self.info))

    def prefixed(self, prefix: str) -> "LossValue":
        return LossValue(
            self.value,
            {f"{prefix}{k}": g for k, g in self.grads.items()},
            {f"{prefix}{k}": v for k, v in self.info.items()},
        )

    def __add__(self, other: "LossValue") -> "LossValue":
        grads = {k: g.copy() for k, g in self.grads.items()}
        for k, g in other.grads.items():
            grads[k] = grads[k] + g if k in grads else g.copy()
        return LossValue(self.value + other.value, grads, {**self.info, **other.info})


@dataclass(eq=False)
class QuerySnapshot:
    """One query after a decoder layer: center, feature, R points and their logits."""

    center: np.ndarray
    feature: np.ndarray
    points: np.ndarray
    logits: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.feature = np.asarray(self.feature, dtype=np.float64).reshape(-1)
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if len(self.points) < 1 or self.logits.ndim != 2 or len(self.logits) != len(self.points):
            raise ShapeMismatchError(
                f"snapshot needs R >= 1 points with matching logits, got {self.points.shape}, {self.logits.shape}"
            )


@dataclass(eq=False)
class LayerSnapshot:
    """All N queries of one decoder layer, stored as stacked arrays."""

    centers: np.ndarray   # (N, 3)
    features: np.ndarray  # (N, C)
    points: np.ndarray    # (N, R, 3)
    logits: np.ndarray    # (N, R, K)

    def __len__(self):
        return len(self.centers)

    def __getitem__(self, i: int) -> QuerySnapshot:
        return QuerySnapshot(self.centers[i], self.features[i], self.points[i], self.logits[i])

    @classmethod
    def from_queries(cls, queries: Sequence[QuerySnapshot]) -> "LayerSnapshot":
        return cls(
            np.stack([q.center for q in queries]),
            np.stack([q.feature for q in queries]),
            np.stack([q.points for q in queries]),
            np.stack([q.logits for q in queries]),
        )

    def take(self, order: np.ndarray) -> "LayerSnapshot":
        return LayerSnapshot(self.centers[order], self.features[order], self.points[order], self.logits[order])

    def predictions(self) -> PredictionSet:
        """Flatten the N point sets into one prediction set of N*R points."""
        return PredictionSet(self.points.reshape(-1, 3), self.logits.reshape(-1, self.logits.shape[-1]))


LayerLike = Union[LayerSnapshot, Sequence[QuerySnapshot]]


def _as_layer(layer: LayerLike) -> LayerSnapshot:
    return layer if isinstance(layer, LayerSnapshot) else LayerSnapshot.from_queries(layer)


class DistillWeights(BaseModel):
    """Weights of the four distillation levels (encoder, query, prior, anchor)."""

    model_config = ConfigDict(frozen=True)

    l1: NonNegativeFloat = 1.0
    l2: NonNegativeFloat = 0.2
    l3: NonNegativeFloat = 0.2
    l4: NonNegativeFloat = 0.5

    @classmethod
    def parse(cls, text: str) -> "DistillWeights":
        """Parse ``"a,b,c,d"``."""
        parts = [p for p in text.split(",") if p.strip()]
        if len(parts) != 4:
            raise ValueError(f"expected four comma-separated weights, got {text!r}")
        return cls(**dict(zip(("l1", "l2", "l3", "l4"), (float(p) for p in parts))))

    def as_tuple(self):
        return (self.l1, self.l2, self.l3, self.l4)


# ============================================================================
# Shared kernels
# ============================================================================

def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _normalize(x: np.ndarray, axis: int):
    norm = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    denom = np.maximum(norm, NORM_EPS)
    return x / denom, norm, denom


def _normalize_backward(g: np.ndarray, unit: np.ndarray, norm: np.ndarray, denom: np.ndarray, axis: int):
    """Gradient through x / max(||x||, eps) given the gradient ``g`` w.r.t. the output."""
    radial = unit * np.sum(unit * g, axis=axis, keepdims=True)
    return np.where(norm > NORM_EPS, g - radial, g) / denom


def _normalized_mse(student: np.ndarray, teacher: np.ndarray, axis: int, rowwise: bool = False):
    """
    MSE between L2-normalized vectors along ``axis``.

    With ``rowwise``, the mean runs over the last axis only and one value per
    leading row is returned (rows are averaged by the caller).
    """
    s_unit, s_norm, s_denom = _normalize(student, axis)
    t_unit, _, _ = _normalize(teacher, axis)
    diff = s_unit - t_unit
    if not rowwise:
        value = float(np.mean(diff * diff))
        g_unit = 2.0 * diff / diff.size
    else:
        value = np.mean(diff * diff, axis=-1)
        g_unit = 2.0 * diff / diff.shape[-1]
    return value, _normalize_backward(g_unit, s_unit, s_norm, s_denom, axis)


def _cfd_rows(s_centers, s_features, t_centers, t_features):
    """Per-pair CFD values (N,) and their gradients w.r.t. student centers/features."""
    delta = s_centers - t_centers
    l1 = np.abs(delta).sum(axis=-1)
    mse, g_features = _normalized_mse(s_features, t_features, axis=-1, rowwise=True)
    return l1 + mse, np.sign(delta), g_features


def _fld_rows(s_points, s_logits, t_points, t_logits):
    """Per-pair FLD values (N,) and gradients w.r.t. student points/logits."""
    R = s_points.shape[-2]
    delta = s_points - t_points
    l1 = np.abs(delta).sum(axis=(-1, -2))
    logp_s = log_softmax(s_logits)
    logp_t = log_softmax(t_logits)
    p_t = np.exp(logp_t)
    kl = np.sum(p_t * (logp_t - logp_s), axis=-1).sum(axis=-1)
    g_logits = (np.exp(logp_s) - p_t) / R
    return (l1 + kl) / R, np.sign(delta) / R, g_logits


# ============================================================================
# Task losses
# ============================================================================

def _chamfer_from_pairs(pred, gt, a_to_b, b_to_a) -> LossValue:
    n, m = len(pred), len(gt)
    d_ab = pred - gt[a_to_b]
    d_ba = gt - pred[b_to_a]
    value = float(np.sum(d_ab * d_ab) / n + np.sum(d_ba * d_ba) / m)
    grad = 2.0 * d_ab / n
    np.add.at(grad, b_to_a, -2.0 * d_ba / m)
    return LossValue(value, {"pred": grad}, {"a_to_b": a_to_b, "b_to_a": b_to_a})


def chamfer_distance(pred: np.ndarray, gt: np.ndarray) -> LossValue:
    """
    Symmetric Chamfer distance with squared Euclidean distances and mean reduction.

    value = mean_a min_b ||a - b||^2 + mean_b min_a ||b - a||^2

    Example:
        >>> chamfer_distance(np.zeros((1, 3)), np.array([[1.0, 0, 0]])).value
        2.0
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise EmptySetError("chamfer_distance needs non-empty point sets")
    a_to_b, b_to_a = nearest_neighbor_pairs(pred, gt)
    return _chamfer_from_pairs(pred, gt, a_to_b, b_to_a)


def focal_loss(logits: np.ndarray, targets: np.ndarray, alpha: float = FOCAL_ALPHA,
               gamma: float = FOCAL_GAMMA) -> LossValue:
    """
    Multi-class focal loss, mean over rows: -alpha * (1 - p_t)^gamma * log(p_t).

    With gamma = 0 and alpha = 1 this is the mean cross-entropy.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if len(targets) != n:
        raise ShapeMismatchError(f"{n} logit rows but {len(targets)} targets")
    if n == 0:
        raise EmptySetError("focal_loss needs at least one row")
    if targets.min() < 0 or targets.max() >= k:
        raise InvalidClassError(f"targets must lie in [0, {k}), got range [{targets.min()}, {targets.max()}]")

    logp = log_softmax(logits)
    rows = np.arange(n)
    logp_t = logp[rows, targets]
    p_t = np.exp(logp_t)
    one_minus = -np.expm1(logp_t)
    modulator = one_minus ** gamma
    value = float(np.mean(-alpha * modulator * logp_t))

    # dL/dz = alpha * [gamma (1-p)^(gamma-1) p log p - (1-p)^gamma] * (onehot - softmax)
    if gamma == 0:
        focus = np.zeros(n)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            focus = np.where(one_minus > 0, gamma * one_minus ** (gamma - 1) * p_t * logp_t, 0.0)
    coeff = alpha * (focus - modulator)
    onehot = np.zeros_like(logits)
    onehot[rows, targets] = 1.0
    grad = coeff[:, None] * (onehot - np.exp(logp)) / n
    return LossValue(value, {"logits": grad})


def _layer_predictions(layer) -> PredictionSet:
    if isinstance(layer, PredictionSet):
        return layer
    if isinstance(layer, LayerSnapshot):
        return layer.predictions()
    return layer[0]  # (PredictionSet, snapshots) pair


def task_loss(layers: Sequence, gt: GroundTruthSet, alpha: float = FOCAL_ALPHA,
              gamma: float = FOCAL_GAMMA) -> LossValue:
    """
    Sum over decoder layers of Chamfer on positions plus focal on per-point logits.

    Each layer may be a PredictionSet, a LayerSnapshot or a (PredictionSet, snapshots)
    pair. Focal targets are the nearest ground-truth classes, shifted to semantic
    index space (class c -> logit c - 1).

    Returns:
        LossValue: gradients under ``layer{d}.positions`` and ``layer{d}.logits``
    """
    if not layers:
        raise EmptySetError("task_loss needs at least one layer")
    if gt.M == 0:
        raise EmptySetError("task_loss needs a non-empty ground-truth set")
    total = LossValue.zero()
    for d, layer in enumerate(layers):
        pred = _layer_predictions(layer)
        a_to_b, b_to_a = nearest_neighbor_pairs(pred.positions, gt.positions)
        cd = _chamfer_from_pairs(pred.positions, gt.positions, a_to_b, b_to_a)
        fl = focal_loss(pred.logits, gt.classes[a_to_b] - 1, alpha, gamma)
        total = total + LossValue(
            cd.value + fl.value,
            {f"layer{d}.positions": cd.grads["pred"], f"layer{d}.logits": fl.grads["logits"]},
            {f"layer{d}.a_to_b": a_to_b, f"layer{d}.b_to_a": b_to_a},
        )
    return total


# ============================================================================
# Distillation losses
# ============================================================================

def efa_loss(student_features: np.ndarray, teacher_features: np.ndarray) -> LossValue:
    """
    Encoder-level alignment: MSE between channel-normalized feature maps.

    Feature maps are (C, H, W); each spatial location's channel vector is
    L2-normalized before the element-wise mean squared error.
    """
    s = np.asarray(student_features, dtype=np.float64)
    t = np.asarray(teacher_features, dtype=np.float64)
    if s.shape != t.shape:
        raise ShapeMismatchError(f"feature maps differ: {s.shape} vs {t.shape}")
    value, grad = _normalized_mse(s, t, axis=0)
    return LossValue(value, {"student": grad})


def cfd_loss(student: QuerySnapshot, teacher: QuerySnapshot) -> LossValue:
    """
    Coarse feature-based distillation for one query pair.

    L1 summed over the three center coordinates plus the MSE (mean over C) of
    the L2-normalized query features.
    """
    if student.feature.shape != teacher.feature.shape:
        raise ShapeMismatchError(f"feature dims differ: {student.feature.shape} vs {teacher.feature.shape}")
    values, g_center, g_feature = _cfd_rows(
        student.center[None], student.feature[None], teacher.center[None], teacher.feature[None]
    )
    return LossValue(float(values[0]), {"center": g_center[0], "feature": g_feature[0]})


def fld_loss(student: QuerySnapshot, teacher: QuerySnapshot) -> LossValue:
    """
    Fine-grained logit-based distillation for one query pair.

    Mean over the R points of (L1 over coordinates + KL(teacher || student)).
    """
    if student.points.shape != teacher.points.shape or student.logits.shape != teacher.logits.shape:
        raise ShapeMismatchError(
            f"point sets differ: {student.points.shape}/{student.logits.shape} vs "
            f"{teacher.points.shape}/{teacher.logits.shape}"
        )
    values, g_points, g_logits = _fld_rows(
        student.points[None], student.logits[None], teacher.points[None], teacher.logits[None]
    )
    return LossValue(float(values[0]), {"points": g_points[0], "logits": g_logits[0]})


def _check_layers(student_layers, teacher_layers):
    if len(student_layers) != len(teacher_layers):
        raise ShapeMismatchError(f"{len(student_layers)} student layers vs {len(teacher_layers)} teacher layers")
    pairs = []
    for s, t in zip(student_layers, teacher_layers):
        s, t = _as_layer(s), _as_layer(t)
        if len(s) != len(t) or s.features.shape != t.features.shape:
            raise ShapeMismatchError(f"layer shapes differ: {s.features.shape} vs {t.features.shape}")
        pairs.append((s, t))
    return pairs


def _paired_layer_loss(d: int, s: LayerSnapshot, t: LayerSnapshot, mode: MatchMode) -> LossValue:
    """
    Mean pair loss over index-aligned queries of one layer (teacher already reordered).

    ``info["layer{d}.sign"]`` holds the sign pattern of the L1 term, the piecewise
    choice a finite-difference check must not step across.
    """
    n = len(s)
    if mode == "cfd":
        values, g_centers, g_features = _cfd_rows(s.centers, s.features, t.centers, t.features)
        grads = {f"layer{d}.centers": g_centers / n, f"layer{d}.features": g_features / n}
        sign = np.sign(g_centers).astype(np.int8)
    elif mode == "fld":
        if s.points.shape != t.points.shape or s.logits.shape != t.logits.shape:
            raise ShapeMismatchError(f"point sets differ: {s.points.shape} vs {t.points.shape}")
        values, g_points, g_logits = _fld_rows(s.points, s.logits, t.points, t.logits)
        grads = {f"layer{d}.points": g_points / n, f"layer{d}.point_logits": g_logits / n}
        sign = np.sign(g_points).astype(np.int8)
    else:
        raise ValueError(f"unknown match mode {mode!r}")
    return LossValue(float(values.mean()), grads, {f"layer{d}.sign": sign})


def ql_loss(student_layers: Sequence[LayerLike], teacher_layers: Sequence[LayerLike],
            mode: MatchMode = "cfd") -> LossValue:
    """
    Query-level distillation through per-layer bipartite matching.

    For every decoder layer the student/teacher center distance matrix is solved
    with the Hungarian algorithm and the pair loss (CFD or FLD) is averaged over
    the matched pairs; layers are summed.
    """
    total = LossValue.zero()
    for d, (s, t) in enumerate(_check_layers(student_layers, teacher_layers)):
        match = hungarian(build_query_cost_matrix(s.centers, t.centers))
        layer = _paired_layer_loss(d, s, t.take(match.assignment), mode)
        layer.info[f"layer{d}.assignment"] = match.assignment
        total = total + layer
    return total


def _aligned_loss(student_layers, teacher_layers, mode: MatchMode) -> LossValue:
    total = LossValue.zero()
    for d, (s, t) in enumerate(_check_layers(student_layers, teacher_layers)):
        total = total + _paired_layer_loss(d, s, t, mode)
    return total


def pl_loss(prior_layers: Sequence[LayerLike], teacher_layers: Sequence[LayerLike],
            mode: MatchMode = "cfd") -> LossValue:
    """Prior-level distillation: index-aligned pairs, no matching."""
    return _aligned_loss(prior_layers, teacher_layers, mode)


def al_loss(student_anchor_layers: Sequence[LayerLike], teacher_anchor_layers: Sequence[LayerLike],
            mode: MatchMode = "cfd") -> LossValue:
    """Anchor-level distillation: index-aligned pairs of anchor queries, no matching."""
    return _aligned_loss(student_anchor_layers, teacher_anchor_layers, mode)


def distill_loss(efa: LossValue, ql: LossValue, pl: LossValue, al: LossValue,
                 w: DistillWeights) -> LossValue:
    """
    Weighted sum of the four levels.

    Gradient keys are prefixed with the level (``efa:``, ``ql:``, ``pl:``, ``al:``)
    because each level differentiates a different forward pass.
    """
    total = LossValue.zero()
    for name, part, weight in (("efa", efa, w.l1), ("ql", ql, w.l2), ("pl", pl, w.l3), ("al", al, w.l4)):
        total = total + part.scaled(weight).prefixed(f"{name}:")
    return total
