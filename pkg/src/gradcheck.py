"""
Central finite-difference verification of every analytic gradient.

Each registered component builds a small random problem: named float64 inputs,
an evaluation returning (value, gradients, signature) and a pass threshold.
The signature captures the piecewise choices of the evaluation (nearest
neighbors, assignments, view masks, sampling cells, L1 sign patterns); a
perturbation that changes it straddles a kink, so that entry is retried with a
smaller step or replaced. An input with no checkable entry fails the report.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .distill import DistillPlan, distill_step
from .losses import (
    DistillWeights,
    LayerSnapshot,
    QuerySnapshot,
    al_loss,
    cfd_loss,
    chamfer_distance,
    distill_loss,
    efa_loss,
    fld_loss,
    focal_loss,
    pl_loss,
    ql_loss,
    task_loss,
)
from .model import EncoderSpec, ModelConfig, ModelParams, SparseOccupancyModel
from .scene import GroundTruthSet, PredictionSet
from .syndata import SceneRecipe, SceneSample, generate_scene

logger = logging.getLogger(__name__)

FD_EPS = 1e-4
STEP_SHRINK = (1.0, 1e-2, 1e-4)  # retried steps, as fractions of eps, when a perturbation crosses a kink
GRAD_FLOOR = 1e-6
LOSS_THRESHOLD = 1e-4
MODEL_THRESHOLD = 1e-3

Evaluation = Tuple[float, Dict[str, np.ndarray], tuple]


@dataclass
class Problem:
    inputs: Dict[str, np.ndarray]
    evaluate: Callable[[Dict[str, np.ndarray]], Evaluation]
    threshold: float


@dataclass
class GradcheckReport:
    """Worst relative error per input over all trials."""

    component: str
    threshold: float
    max_rel_error: Dict[str, float] = field(default_factory=dict)
    trials: int = 0
    resamples: int = 0
    seconds: float = 0.0
    error: Optional[str] = None
    unchecked: List[str] = field(default_factory=list)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.error is None and not self.unchecked and self.worst < self.threshold

    def to_dict(self) -> dict:
        return {
            "component": self.component,
            "passed": self.passed,
            "worst": self.worst,
            "threshold": self.threshold,
            "max_rel_error": dict(self.max_rel_error),
            "trials": self.trials,
            "resamples": self.resamples,
            "seconds": self.seconds,
            "error": self.error,
            "unchecked": list(self.unchecked),
        }


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    """``max|a - n| / max(max|a|, max|n|, floor)``"""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    scale = max(float(np.abs(a).max()), float(np.abs(n).max()), floor)
    return float(np.abs(a - n).max()) / scale


def _central_difference(problem: Problem, name: str, idx: int, step: float, signature) -> Optional[float]:
    """Central difference of one entry, or None when either side changes the signature."""
    values = []
    for sign in (1.0, -1.0):
        perturbed = {k: v.copy() for k, v in problem.inputs.items()}
        perturbed[name].reshape(-1)[idx] += sign * step
        f, _, sig = problem.evaluate(perturbed)
        if sig != signature:
            return None
        values.append(f)
    return (values[0] - values[1]) / (2 * step)


def check_problem(problem: Problem, rng: np.random.Generator, eps: float = FD_EPS,
                  max_entries: int = 8, max_resamples: int = 20
                  ) -> Tuple[Dict[str, float], int, List[str]]:
    """
    Compare analytic gradients with central differences on sampled entries.

    An entry whose perturbation changes the signature is retried with the
    smaller steps of ``STEP_SHRINK``; if every step straddles a kink, another
    entry is drawn.

    Returns:
        tuple: (relative error per input, number of unstable perturbations,
        inputs for which no entry could be checked)
    """
    _, grads, signature = problem.evaluate(problem.inputs)
    errors: Dict[str, float] = {}
    unchecked: List[str] = []
    resamples = 0
    for name, value in problem.inputs.items():
        analytic = np.asarray(grads.get(name, np.zeros_like(value)), dtype=np.float64).reshape(-1)
        candidates = list(rng.permutation(value.size))
        picked, numeric = [], []
        budget = max_resamples
        while candidates and len(picked) < max_entries and budget >= 0:
            idx = int(candidates.pop())
            for shrink in STEP_SHRINK:
                slope = _central_difference(problem, name, idx, eps * shrink, signature)
                if slope is not None:
                    picked.append(idx)
                    numeric.append(slope)
                    break
                resamples += 1
                budget -= 1
        if not picked:
            logger.warning("no stable entries for %s", name)
            unchecked.append(name)
            continue
        errors[name] = relative_error(analytic[picked], np.asarray(numeric))
    if resamples:
        logger.debug("resampled %d unstable perturbations", resamples)
    return errors, resamples, unchecked


# ============================================================================
# Components
# ============================================================================

def _quadratic(rng: np.random.Generator) -> Problem:
    n = 5
    a = rng.normal(size=(n, n))
    a = a @ a.T + n * np.eye(n)
    b = rng.normal(size=n)

    def evaluate(inputs):
        x = inputs["x"]
        return float(0.5 * x @ a @ x + b @ x), {"x": a @ x + b}, ()

    return Problem({"x": rng.normal(size=n)}, evaluate, 1e-8)


def _chamfer(rng):
    gt = rng.normal(size=(9, 3))

    def evaluate(inputs):
        loss = chamfer_distance(inputs["pred"], gt)
        return loss.value, loss.grads, (loss.info["a_to_b"].tobytes(), loss.info["b_to_a"].tobytes())

    return Problem({"pred": rng.normal(size=(12, 3))}, evaluate, LOSS_THRESHOLD)


def _focal(rng):
    targets = rng.integers(0, 5, size=10)

    def evaluate(inputs):
        loss = focal_loss(inputs["logits"], targets)
        return loss.value, loss.grads, ()

    return Problem({"logits": rng.normal(size=(10, 5))}, evaluate, LOSS_THRESHOLD)


def _efa(rng):
    teacher = rng.normal(size=(6, 3, 3))

    def evaluate(inputs):
        loss = efa_loss(inputs["student"], teacher)
        return loss.value, loss.grads, ()

    return Problem({"student": rng.normal(size=(6, 3, 3))}, evaluate, LOSS_THRESHOLD)


def _random_query(rng, c=8, r=4, k=5) -> QuerySnapshot:
    return QuerySnapshot(rng.normal(size=3), rng.normal(size=c), rng.normal(size=(r, 3)), rng.normal(size=(r, k)))


def _cfd(rng):
    teacher = _random_query(rng)
    start = _random_query(rng)

    def evaluate(inputs):
        loss = cfd_loss(QuerySnapshot(inputs["center"], inputs["feature"], start.points, start.logits), teacher)
        return loss.value, loss.grads, (np.sign(inputs["center"] - teacher.center).tobytes(),)

    return Problem({"center": start.center, "feature": start.feature}, evaluate, LOSS_THRESHOLD)


def _fld(rng):
    teacher = _random_query(rng)
    start = _random_query(rng)

    def evaluate(inputs):
        loss = fld_loss(QuerySnapshot(start.center, start.feature, inputs["points"], inputs["logits"]), teacher)
        return loss.value, loss.grads, (np.sign(inputs["points"] - teacher.points).tobytes(),)

    return Problem({"points": start.points, "logits": start.logits}, evaluate, LOSS_THRESHOLD)


def _random_layers(rng, n=5, points=(1, 3), c=6, k=4) -> List[LayerSnapshot]:
    return [
        LayerSnapshot(rng.normal(size=(n, 3)), rng.normal(size=(n, c)), rng.normal(size=(n, r, 3)),
                      rng.normal(size=(n, r, k)))
        for r in points
    ]


def _layer_inputs(layers: List[LayerSnapshot], prefix: str = "") -> Dict[str, np.ndarray]:
    out = {}
    for d, layer in enumerate(layers):
        out[f"{prefix}layer{d}.centers"] = layer.centers
        out[f"{prefix}layer{d}.features"] = layer.features
        out[f"{prefix}layer{d}.points"] = layer.points
        out[f"{prefix}layer{d}.point_logits"] = layer.logits
    return out


def _layers_from(inputs: Dict[str, np.ndarray], depth: int, prefix: str = "") -> List[LayerSnapshot]:
    return [
        LayerSnapshot(inputs[f"{prefix}layer{d}.centers"], inputs[f"{prefix}layer{d}.features"],
                      inputs[f"{prefix}layer{d}.points"], inputs[f"{prefix}layer{d}.point_logits"])
        for d in range(depth)
    ]


def _sign_signature(inputs, teacher_layers, prefix="") -> tuple:
    out = []
    for d, t in enumerate(teacher_layers):
        out.append(np.sign(inputs[f"{prefix}layer{d}.centers"] - t.centers).tobytes())
        out.append(np.sign(inputs[f"{prefix}layer{d}.points"] - t.points).tobytes())
    return tuple(out)


def _layer_level(loss_fn, matched: bool):
    def build(rng):
        teacher = _random_layers(rng)
        start = _random_layers(rng)

        def evaluate(inputs):
            student = _layers_from(inputs, len(teacher))
            loss = loss_fn(student, teacher, "cfd") + loss_fn(student, teacher, "fld")
            sig = _sign_signature(inputs, teacher)
            if matched:
                sig += tuple(np.asarray(v).tobytes() for _, v in sorted(loss.info.items()))
            return loss.value, loss.grads, sig

        return Problem(_layer_inputs(start), evaluate, LOSS_THRESHOLD)

    return build


def _distill(rng):
    weights = DistillWeights()
    t_map = rng.normal(size=(6, 3, 3))
    t_layers = _random_layers(rng)
    t_anchor = _random_layers(rng)
    inputs = {"efa:student": rng.normal(size=(6, 3, 3))}
    inputs.update(_layer_inputs(_random_layers(rng), "ql:"))
    inputs.update(_layer_inputs(_random_layers(rng), "pl:"))
    inputs.update(_layer_inputs(_random_layers(rng), "al:"))
    depth = len(t_layers)

    def evaluate(inputs):
        loss = distill_loss(
            efa_loss(inputs["efa:student"], t_map),
            ql_loss(_layers_from(inputs, depth, "ql:"), t_layers, "cfd"),
            pl_loss(_layers_from(inputs, depth, "pl:"), t_layers, "fld"),
            al_loss(_layers_from(inputs, depth, "al:"), t_anchor, "cfd"),
            weights,
        )
        sig = (
            _sign_signature(inputs, t_layers, "ql:")
            + _sign_signature(inputs, t_layers, "pl:")
            + _sign_signature(inputs, t_anchor, "al:")
            + tuple(np.asarray(v).tobytes() for _, v in sorted(loss.info.items()))
        )
        return loss.value, loss.grads, sig

    return Problem(inputs, evaluate, LOSS_THRESHOLD)


def _task(rng):
    gt = GroundTruthSet(rng.normal(size=(15, 3)), rng.integers(1, 5, size=15))
    layers = [PredictionSet(rng.normal(size=(r, 3)), rng.normal(size=(r, 4))) for r in (4, 8)]
    inputs = {}
    for d, layer in enumerate(layers):
        inputs[f"layer{d}.positions"] = layer.positions
        inputs[f"layer{d}.logits"] = layer.logits

    def evaluate(inputs):
        preds = [PredictionSet(inputs[f"layer{d}.positions"], inputs[f"layer{d}.logits"]) for d in range(len(layers))]
        loss = task_loss(preds, gt)
        return loss.value, loss.grads, tuple(np.asarray(v).tobytes() for _, v in sorted(loss.info.items()))

    return Problem(inputs, evaluate, LOSS_THRESHOLD)


TINY_RECIPE = SceneRecipe(furniture_min=1, furniture_max=1, n_classes=4, image_hw=(16, 16))


def tiny_config(**overrides) -> ModelConfig:
    """N=4, D=2, C=8 model sized for finite-difference checks."""
    base = dict(
        n_queries=4, n_layers=2, points_per_layer=(1, 2), feature_dim=8, n_classes=4, hidden_dim=8,
        image_hw=(16, 16), map_hw=(4, 4), map_channels=8, depth_hidden=4,
        encoder=EncoderSpec(width=8, depth=1, out_channels=4),
    )
    return ModelConfig(**{**base, **overrides})


def tiny_scene(seed: int) -> SceneSample:
    grid, camera = generate_scene(TINY_RECIPE, seed)
    return SceneSample.build(0, seed, grid, camera, TINY_RECIPE.image_hw)


def _model_problem(student: SparseOccupancyModel, teacher: Optional[SparseOccupancyModel], scene,
                   plan: DistillPlan, seed: int) -> Problem:
    def evaluate(inputs):
        model = SparseOccupancyModel(student.config, ModelParams(inputs))
        result = distill_step(model, teacher, scene, plan, rng_seed=seed)
        return result.total, result.loss.grads, result.signature

    inputs = {name: value.copy() for name, value in student.params.items()}
    return Problem(inputs, evaluate, MODEL_THRESHOLD)


def _depth(rng):
    seed = int(rng.integers(1 << 30))
    config = tiny_config(depth_branch_enabled=True, depth_prior="fine")
    student = SparseOccupancyModel(config, seed=seed)
    # move the output layer off zero so the branch's first layer gets a gradient
    student.params["depth.mlp2.weight"] = rng.normal(scale=0.3, size=student.params["depth.mlp2.weight"].shape)
    student.params["depth.out_of_view"] = rng.normal(scale=0.1, size=student.params["depth.out_of_view"].shape)
    return _model_problem(student, None, tiny_scene(seed), DistillPlan.off(), seed)


def _model(rng):
    seed = int(rng.integers(1 << 30))
    student = SparseOccupancyModel(tiny_config(), seed=seed)
    teacher = SparseOccupancyModel(tiny_config(encoder=EncoderSpec(width=12, depth=2, out_channels=8)),
                                   seed=seed + 1)
    plan = DistillPlan.full(enable_tgi=False, ql_mode="fld")
    return _model_problem(student, teacher, tiny_scene(seed), plan, seed)


COMPONENTS: Dict[str, Callable[[np.random.Generator], Problem]] = {
    "quadratic": _quadratic,
    "chamfer": _chamfer,
    "focal": _focal,
    "efa": _efa,
    "cfd": _cfd,
    "fld": _fld,
    "ql": _layer_level(ql_loss, matched=True),
    "pl": _layer_level(pl_loss, matched=False),
    "al": _layer_level(al_loss, matched=False),
    "distill": _distill,
    "task": _task,
    "depth": _depth,
    "model": _model,
}


def gradcheck(component: str, trials: int = 3, seed: int = 0, eps: float = FD_EPS,
              max_entries: int = 8) -> GradcheckReport:
    """
    Run ``trials`` random problems of one registered component.

    Raises:
        KeyError: unknown component; the message lists the valid names
    """
    if component not in COMPONENTS:
        raise KeyError(f"unknown component {component!r}; valid: {', '.join(COMPONENTS)}")
    build = COMPONENTS[component]
    start = time.perf_counter()
    report = GradcheckReport(component, threshold=0.0)
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        try:
            problem = build(rng)
            errors, resamples, unchecked = check_problem(problem, rng, eps, max_entries)
        except Exception as e:
            report.error = f"trial {trial}: {type(e).__name__}: {e}"
            logger.error("gradcheck %s failed: %s", component, report.error)
            break
        report.threshold = problem.threshold
        report.resamples += resamples
        report.unchecked += [name for name in unchecked if name not in report.unchecked]
        report.trials += 1
        for name, err in errors.items():
            report.max_rel_error[name] = max(err, report.max_rel_error.get(name, 0.0))
    report.seconds = time.perf_counter() - start
    logger.info("gradcheck %s: worst %.3e (threshold %.0e) in %.2fs", component, report.worst,
                report.threshold, report.seconds)
    return report


def gradcheck_all(trials: int = 3, seed: int = 0, **kwargs) -> List[GradcheckReport]:
    return [gradcheck(name, trials, seed, **kwargs) for name in COMPONENTS]
