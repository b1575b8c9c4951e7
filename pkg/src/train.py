"""
AdamW and the deterministic training loops for teacher and student models.

Both roles run the same loop: the teacher is a student trained with every
distillation level switched off and no teacher at all.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, NonNegativeFloat, NonNegativeInt, PositiveFloat, PositiveInt
from tqdm import tqdm

from .checkpoint import load_model, save_model
from .distill import DistillPlan, StepResult, distill_step
from .errors import ShapeMismatchError
from .model import ModelConfig, ModelParams, SparseOccupancyModel, teacher_guided_init
from .scene import MetricsReport, mean_reports, miou, predset_to_grid
from .syndata import SceneDataset

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8

COMPONENTS = ("l_task", "l_efa", "l_ql", "l_pl", "l_al", "total")
LOG_COLUMNS = ("epoch",) + COMPONENTS + ("iou", "miou")

CHECKPOINT_NAME = "model.dspk"
LOG_NAME = "train_log.jsonl"
HISTORY_NAME = "history.jsonl"


class TrainConfig(BaseModel):
    """Everything that determines a training run besides the dataset."""

    model_config = ConfigDict(frozen=True)

    epochs: PositiveInt = 10
    lr: PositiveFloat = 2e-4
    weight_decay: NonNegativeFloat = 0.01
    batch_size: PositiveInt = 4
    seed: int = 0
    role: Literal["teacher", "student"] = "teacher"
    plan: DistillPlan = Field(default_factory=DistillPlan)
    teacher_ckpt: Optional[Path] = None
    model: Optional[ModelConfig] = None
    holdout_fraction: float = Field(0.25, ge=0.0, lt=1.0)
    score_threshold: float = 0.0
    threads: NonNegativeInt = 0

    def model_config_for_role(self) -> ModelConfig:
        if self.model is not None:
            return self.model
        return ModelConfig.teacher() if self.role == "teacher" else ModelConfig.student()


# ============================================================================
# Optimizer
# ============================================================================

@dataclass
class OptState:
    """AdamW moments per parameter and the number of steps taken."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "OptState":
        return cls(params.zeros_like(), params.zeros_like(), 0)


def adamw_step(params: ModelParams, grads: Dict[str, np.ndarray], state: OptState, lr: float,
               beta1: float = BETA1, beta2: float = BETA2, eps: float = ADAM_EPS,
               weight_decay: float = 0.01):
    """
    One AdamW update with bias correction and decoupled weight decay.

    ``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)``

    Returns:
        tuple: (new params, new state); the inputs are not modified

    Raises:
        ShapeMismatchError: a gradient is missing or has the wrong shape
    """
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None or np.shape(g) != p.shape:
            raise ShapeMismatchError(f"gradient for {name}: expected {p.shape}, got {None if g is None else np.shape(g)}")
        m = beta1 * state.m.get(name, np.zeros_like(p)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(p)) + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_params[name] = p - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p)
        new_m[name], new_v[name] = m, v
    return ModelParams(new_params), OptState(new_m, new_v, t)


# ============================================================================
# Evaluation
# ============================================================================

def evaluate(model: SparseOccupancyModel, dataset: SceneDataset, ids: Optional[Sequence[int]] = None,
             score_threshold: float = 0.0) -> MetricsReport:
    """Mean IoU/mIoU of the last decoder layer's predictions over ``ids`` (default: all scenes)."""
    ids = range(len(dataset)) if ids is None else ids
    reports = []
    for i in ids:
        sample = dataset[i]
        prior = sample.prior(model.config.depth_prior) if model.config.depth_branch_enabled else None
        trace = model.forward(sample.depth, sample.camera, depth_prior=prior)
        pred = predset_to_grid(trace.predictions[-1], sample.grid.spec, score_threshold,
                               num_classes=sample.grid.num_classes)
        reports.append(miou(pred, sample.grid))
    return mean_reports(reports)


# ============================================================================
# Training loop
# ============================================================================

def resolve_threads(requested: int, batch_size: int) -> int:
    """0 means one worker per batch scene, capped by the CPU count."""
    if requested > 0:
        return requested
    return max(1, min(batch_size, os.cpu_count() or 1))


def scene_seed(seed: int, scene_id: int, step: int) -> int:
    return (seed ^ scene_id ^ step) & 0x7FFFFFFF


def check_compatible(model: SparseOccupancyModel, dataset: SceneDataset):
    if model.config.n_classes + 1 != dataset.recipe.num_classes:
        raise ShapeMismatchError(
            f"model predicts {model.config.n_classes} classes, dataset has {dataset.recipe.num_classes - 1}"
        )
    if tuple(model.config.image_hw) != tuple(dataset.recipe.image_hw):
        raise ShapeMismatchError(f"model image {model.config.image_hw} vs dataset image {dataset.recipe.image_hw}")


@dataclass
class TrainingRun:
    """Mutable state of a run: the model, optimizer state and per-step history."""

    model: SparseOccupancyModel
    state: OptState
    history: List[Dict[str, float]] = field(default_factory=list)


def batch_step(run: TrainingRun, teacher: Optional[SparseOccupancyModel], dataset: SceneDataset,
               batch: Sequence[int], config: TrainConfig, pool: Optional[ThreadPoolExecutor] = None) -> Dict[str, float]:
    """
    Mean gradient over the batch scenes followed by one AdamW update.

    Per-scene results are reduced in batch order, so the worker count never
    changes the outcome.
    """
    step = run.state.step
    model = run.model

    def one(scene_id: int) -> StepResult:
        return distill_step(model, teacher, dataset[scene_id], config.plan,
                            rng_seed=scene_seed(config.seed, scene_id, step))

    results = list(pool.map(one, batch)) if pool is not None else [one(i) for i in batch]
    grads = {name: np.zeros_like(p) for name, p in model.params.items()}
    for result in results:
        for name, g in result.loss.grads.items():
            grads[name] += g
    grads = {name: g / len(results) for name, g in grads.items()}

    run.model.params, run.state = adamw_step(model.params, grads, run.state, config.lr,
                                             weight_decay=config.weight_decay)
    record = {"step": step}
    for key in COMPONENTS:
        record[key] = float(np.mean([r.components()[key] for r in results]))
    run.history.append(record)
    return record


def iter_training(model: SparseOccupancyModel, dataset: SceneDataset, config: TrainConfig,
                  teacher: Optional[SparseOccupancyModel] = None, progress: bool = False,
                  run: Optional[TrainingRun] = None) -> Iterator[Dict[str, float]]:
    """
    Train ``model`` in place and yield one log record per epoch.

    Records carry the epoch's mean loss components plus IoU/mIoU on the
    held-out split: ``{epoch, l_task, l_efa, l_ql, l_pl, l_al, total, iou, miou}``.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    check_compatible(model, dataset)
    train_ids, val_ids = dataset.split(config.holdout_fraction)
    run = run if run is not None else TrainingRun(model, OptState.for_params(model.params))
    workers = resolve_threads(config.threads, config.batch_size)
    logger.info("training %s on %d scenes (%d held out), %d workers",
                config.role, len(train_ids), len(val_ids), workers)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        epochs = tqdm(range(config.epochs), desc=config.role, disable=not progress, leave=False)
        for epoch in epochs:
            order = np.random.default_rng([config.seed, epoch]).permutation(train_ids)
            first = len(run.history)
            for start in range(0, len(order), config.batch_size):
                batch_step(run, teacher, dataset, [int(i) for i in order[start:start + config.batch_size]],
                           config, pool if workers > 1 else None)
            steps = pd.DataFrame(run.history[first:])
            report = evaluate(model, dataset, val_ids, config.score_threshold)
            record = {"epoch": epoch, **{k: float(steps[k].mean()) for k in COMPONENTS},
                      "iou": report.iou, "miou": report.miou}
            logger.info("epoch %d: total %.5f l_task %.5f iou %.4f miou %s", epoch, record["total"],
                        record["l_task"], record["iou"], "n/a" if report.miou is None else f"{report.miou:.4f}")
            yield record


@dataclass
class TrainResult:
    model: SparseOccupancyModel
    log: pd.DataFrame
    history: pd.DataFrame
    checkpoint: Optional[Path] = None


def _write_outputs(out_dir: Optional[Union[str, Path]], model: SparseOccupancyModel,
                   log: pd.DataFrame, history: pd.DataFrame) -> Optional[Path]:
    if out_dir is None:
        return None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = save_model(out_dir / CHECKPOINT_NAME, model)
    log.to_json(out_dir / LOG_NAME, orient="records", lines=True, double_precision=15)
    history.to_json(out_dir / HISTORY_NAME, orient="records", lines=True, double_precision=15)
    logger.info("wrote %s", ckpt)
    return ckpt


def _run(model, dataset, config, teacher, out_dir, progress) -> TrainResult:
    run = TrainingRun(model, OptState.for_params(model.params))
    records = list(iter_training(model, dataset, config, teacher, progress, run))
    log = pd.DataFrame(records, columns=list(LOG_COLUMNS))
    history = pd.DataFrame(run.history)
    return TrainResult(model, log, history, _write_outputs(out_dir, model, log, history))


def train_teacher(config: TrainConfig, dataset: SceneDataset, out_dir: Optional[Union[str, Path]] = None,
                  progress: bool = False) -> TrainResult:
    """
    Minimize L_task alone.

    Example:
        >>> result = train_teacher(TrainConfig(epochs=2), SceneDataset.load("data"), "runs/teacher")
        >>> result.log[["epoch", "l_task", "miou"]]
    """
    model = SparseOccupancyModel(config.model_config_for_role(), seed=config.seed)
    plan = config.plan if not config.plan.any_level else DistillPlan.off()
    if config.plan.any_level:
        logger.warning("teacher training ignores distillation levels %s", config.plan.enabled_levels)
    return _run(model, dataset, config.model_copy(update={"plan": plan}), None, out_dir, progress)


def prepare_student(config: TrainConfig, teacher: SparseOccupancyModel) -> SparseOccupancyModel:
    """Fresh student from ``config.seed``, teacher-guided when the plan asks for it."""
    student = SparseOccupancyModel(config.model_config_for_role(), seed=config.seed)
    if config.plan.enable_tgi:
        student.params = teacher_guided_init(student.params, teacher.params, config.plan.copy_query_embeddings)
    return student


def train_student(config: TrainConfig, dataset: SceneDataset,
                  teacher: Union[SparseOccupancyModel, str, Path, None] = None,
                  out_dir: Optional[Union[str, Path]] = None, progress: bool = False) -> TrainResult:
    """
    Joint task + distillation training of a student against a frozen teacher.

    Args:
        teacher: a model or a checkpoint path; defaults to ``config.teacher_ckpt``

    Raises:
        ValueError: no teacher given
        RuntimeError: the teacher's parameters changed during training
    """
    if teacher is None:
        teacher = config.teacher_ckpt
    if teacher is None:
        raise ValueError("student training needs a teacher checkpoint")
    if not isinstance(teacher, SparseOccupancyModel):
        teacher = load_model(teacher)

    student = prepare_student(config, teacher)
    before = teacher.params.digest()
    result = _run(student, dataset, config, teacher, out_dir, progress)
    if teacher.params.digest() != before:
        raise RuntimeError("teacher parameters changed during student training")
    return result
