"""
One training step of teacher-to-student distillation.

A step runs the student's main pass (task loss, query-level and encoder-level
terms), a prior pass that feeds the teacher's query embeddings through the
student, and an anchor pass in which both models start from queries pinned to
sampled ground-truth voxel centers. Disabled levels skip their passes entirely.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import EmptySetError, ShapeMismatchError
from .losses import (
    DistillWeights,
    LossValue,
    MatchMode,
    al_loss,
    distill_loss,
    efa_loss,
    pl_loss,
    ql_loss,
    task_loss,
)
from .model import SparseOccupancyModel
from .scene import GroundTruthSet

logger = logging.getLogger(__name__)

LEVELS = ("efa", "ql", "pl", "al")


class DistillPlan(BaseModel):
    """Which distillation levels run, their weights and the pair-loss variants."""

    model_config = ConfigDict(frozen=True)

    enable_efa: bool = False
    enable_ql: bool = False
    enable_pl: bool = False
    enable_al: bool = False
    enable_tgi: bool = False
    weights: DistillWeights = Field(default_factory=DistillWeights)
    ql_mode: MatchMode = "cfd"
    aligned_mode: MatchMode = "cfd"  # pair loss used by the prior and anchor levels
    copy_query_embeddings: bool = True

    @classmethod
    def off(cls) -> "DistillPlan":
        return cls()

    @classmethod
    def full(cls, **overrides) -> "DistillPlan":
        return cls(**{"enable_efa": True, "enable_ql": True, "enable_pl": True, "enable_al": True,
                      "enable_tgi": True, **overrides})

    @classmethod
    def from_levels(cls, levels: str, **overrides) -> "DistillPlan":
        """
        Build a plan from a comma-separated level list such as ``"efa,ql,pl,al"``.

        An empty string enables nothing.
        """
        names = [p.strip().lower() for p in levels.split(",") if p.strip()]
        unknown = sorted(set(names) - set(LEVELS))
        if unknown:
            raise ValueError(f"unknown distillation level(s) {unknown}; choose from {list(LEVELS)}")
        return cls(**{f"enable_{name}": True for name in names}, **overrides)

    @property
    def enabled_levels(self) -> List[str]:
        return [name for name in LEVELS if getattr(self, f"enable_{name}")]

    @property
    def any_level(self) -> bool:
        return bool(self.enabled_levels)


@dataclass(eq=False)
class AnchorSet:
    """Ground-truth voxel centers (and their classes) drawn as anchor query centers."""

    positions: np.ndarray
    classes: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if len(self.positions) != len(self.classes):
            raise ShapeMismatchError(f"{len(self.positions)} anchor positions vs {len(self.classes)} classes")

    def __len__(self):
        return len(self.classes)


def class_rebalanced_weights(gt: GroundTruthSet) -> np.ndarray:
    """
    Sampling weight 1 / (K_present * count(c_i)) per ground-truth voxel.

    Every present class receives the same total mass, so the weights sum to 1.

    Example:
        >>> w = class_rebalanced_weights(GroundTruthSet(np.zeros((100, 3)), [1] * 90 + [2] * 10))
        >>> w[0], w[-1]
        (0.005555555555555556, 0.05)
    """
    if gt.M == 0:
        raise EmptySetError("cannot weight an empty ground-truth set")
    present, inverse, counts = np.unique(gt.classes, return_inverse=True, return_counts=True)
    return 1.0 / (len(present) * counts[inverse].astype(np.float64))


def sample_anchors(gt: GroundTruthSet, n: int, rng_seed: int) -> AnchorSet:
    """Draw ``n`` voxels with replacement under the class-rebalanced weights."""
    if gt.M == 0:
        raise EmptySetError("cannot sample anchors from an empty ground-truth set")
    rng = np.random.default_rng(rng_seed)
    weights = class_rebalanced_weights(gt)
    idx = rng.choice(gt.M, size=n, replace=True, p=weights / weights.sum())
    return AnchorSet(gt.positions[idx], gt.classes[idx])


def make_query_override(anchors: AnchorSet, donor_embeddings: np.ndarray) -> np.ndarray:
    """Anchor positions in the center channels, the donor's own features in the rest."""
    donor = np.asarray(donor_embeddings, dtype=np.float64)
    if donor.ndim != 2 or donor.shape[1] < 4:
        raise ShapeMismatchError(f"donor embeddings must be (N, 3 + C), got {donor.shape}")
    if len(anchors) != len(donor):
        raise ShapeMismatchError(f"{len(anchors)} anchors for {len(donor)} queries")
    out = donor.copy()
    out[:, :3] = anchors.positions
    return out


@dataclass
class StepResult:
    """
    Outcome of one distillation step on one scene.

    ``loss.grads`` holds gradients for every student parameter; the scalar fields
    are the unweighted components and the weighted total.
    """

    loss: LossValue
    l_task: float
    l_efa: float = 0.0
    l_ql: float = 0.0
    l_pl: float = 0.0
    l_al: float = 0.0
    signature: tuple = field(default=(), repr=False)

    @property
    def total(self) -> float:
        return self.loss.value

    def components(self) -> Dict[str, float]:
        return {
            "l_task": self.l_task,
            "l_efa": self.l_efa,
            "l_ql": self.l_ql,
            "l_pl": self.l_pl,
            "l_al": self.l_al,
            "total": self.total,
        }


def _strip(grads: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    return {k[len(prefix):]: g for k, g in grads.items() if k.startswith(prefix)}


def _merge(into: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
    for k, g in grads.items():
        into[k] = into[k] + g if k in into else np.array(g, dtype=np.float64)


def _prior_image(model: SparseOccupancyModel, scene) -> Optional[np.ndarray]:
    return scene.prior(model.config.depth_prior) if model.config.depth_branch_enabled else None


def _info_signature(info: Dict[str, object]) -> tuple:
    return tuple((k, np.asarray(v).tobytes()) for k, v in sorted(info.items()))


def distill_step(student: SparseOccupancyModel, teacher: Optional[SparseOccupancyModel], scene,
                 plan: DistillPlan, rng_seed: int = 0) -> StepResult:
    """
    L_task plus the weighted distillation levels for one scene.

    Args:
        student: model being trained
        teacher: frozen model; may be None only when every level is disabled
        scene: a SceneSample (observation, camera, ground truth and depth priors)
        plan: enabled levels, weights and pair-loss modes
        rng_seed: seed of the anchor draw

    Returns:
        StepResult: total loss with gradients over student parameters
    """
    if plan.any_level and teacher is None:
        raise ValueError(f"levels {plan.enabled_levels} need a teacher model")
    obs, camera, gt = scene.depth, scene.camera, scene.gt
    s_prior = _prior_image(student, scene)
    signature = []

    s_main = student.forward(obs, camera, depth_prior=s_prior)
    task = task_loss(s_main.layers, gt)
    signature.append(s_main.discrete_state())
    signature.append(_info_signature(task.info))

    t_main = None
    if plan.enable_efa or plan.enable_ql or plan.enable_pl:
        t_main = teacher.forward(obs, camera, depth_prior=_prior_image(teacher, scene))

    efa = efa_loss(s_main.feature_map, t_main.feature_map) if plan.enable_efa else LossValue.zero()
    ql = ql_loss(s_main.layers, t_main.layers, plan.ql_mode) if plan.enable_ql else LossValue.zero()
    signature.append(_info_signature(ql.info))

    s_prior_pass = None
    pl = LossValue.zero()
    if plan.enable_pl:
        s_prior_pass = student.forward(obs, camera, query_override=teacher.params["queries.embedding"],
                                       depth_prior=s_prior)
        pl = pl_loss(s_prior_pass.layers, t_main.layers, plan.aligned_mode)
        signature.append(s_prior_pass.discrete_state())
        signature.append(_info_signature(pl.info))

    s_anchor_pass = None
    al = LossValue.zero()
    if plan.enable_al:
        anchors = sample_anchors(gt, student.config.n_queries, rng_seed)
        s_anchor_pass = student.forward(
            obs, camera, query_override=make_query_override(anchors, student.params["queries.embedding"]),
            depth_prior=s_prior,
        )
        t_anchor_pass = teacher.forward(
            obs, camera, query_override=make_query_override(anchors, teacher.params["queries.embedding"]),
            depth_prior=_prior_image(teacher, scene),
        )
        al = al_loss(s_anchor_pass.layers, t_anchor_pass.layers, plan.aligned_mode)
        signature.append(s_anchor_pass.discrete_state())
        signature.append(_info_signature(al.info))

    distill = distill_loss(efa, ql, pl, al, plan.weights)

    main_grads = dict(task.grads)
    _merge(main_grads, _strip(distill.grads, "ql:"))
    if "efa:student" in distill.grads:
        _merge(main_grads, {"feature_map": distill.grads["efa:student"]})
    param_grads, q_grad = student.backward(s_main, main_grads)
    param_grads["queries.embedding"] = param_grads["queries.embedding"] + q_grad

    if s_prior_pass is not None:
        # the override is the teacher's embedding: no gradient flows to the student's
        grads, _ = student.backward(s_prior_pass, _strip(distill.grads, "pl:"))
        _merge(param_grads, grads)

    if s_anchor_pass is not None:
        grads, q_grad = student.backward(s_anchor_pass, _strip(distill.grads, "al:"))
        grads["queries.embedding"] = grads["queries.embedding"].copy()
        grads["queries.embedding"][:, 3:] += q_grad[:, 3:]
        _merge(param_grads, grads)

    total = LossValue(task.value + distill.value, param_grads)
    return StepResult(
        loss=total,
        l_task=task.value,
        l_efa=efa.value,
        l_ql=ql.value,
        l_pl=pl.value,
        l_al=al.value,
        signature=tuple(signature),
    )
