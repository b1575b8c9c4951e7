"""
Command-line entry points: ``python -m src.cli {gen,train,eval,gradcheck,info}``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 verification failure.
"""

import json
import logging
import os
import sys
from enum import Enum
from pathlib import Path
from typing import List, Optional

import click
import typer
from dotenv import load_dotenv
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from .checkpoint import checkpoint_info, load_model
from .distill import DistillPlan
from .errors import DiSceneError
from .gradcheck import COMPONENTS, gradcheck
from .losses import DistillWeights
from .model import ModelConfig, SparseOccupancyModel
from .syndata import SceneDataset, SceneRecipe, write_dataset
from .train import TrainConfig, check_compatible, evaluate, train_student, train_teacher

logger = logging.getLogger("src.cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_VERIFY = 3

console = Console()
app = typer.Typer(add_completion=False, no_args_is_help=True,
                  help="Multi-level teacher/student distillation for sparse occupancy prediction.")


class Role(str, Enum):
    teacher = "teacher"
    student = "student"


class GridName(str, Enum):
    toy = "toy"
    paper = "paper"


class PairMode(str, Enum):
    cfd = "cfd"
    fld = "fld"


class PriorName(str, Enum):
    none = "none"
    clean = "clean"
    fine = "fine"
    standard = "standard"
    coarse = "coarse"


def setup_logging():
    level = os.getenv("DISCENE_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=level,
        format="%(message)s",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


def env_threads() -> int:
    raw = os.getenv("DISCENE_THREADS", "0")
    try:
        return max(0, int(raw))
    except ValueError:
        raise click.UsageError(f"DISCENE_THREADS must be an integer, got {raw!r}")


# ============================================================================
# gen
# ============================================================================

@app.command()
def gen(
    out: Path = typer.Option(..., "--out", help="Dataset directory to create."),
    seed: int = typer.Option(0, "--seed", help="Seed of the first scene; scene i uses seed + i."),
    count: int = typer.Option(16, "--count", min=0, help="Number of scenes."),
    grid: GridName = typer.Option(GridName.toy, "--grid", help="toy: 24x24x16 @ 0.2 m; paper: 60x60x36 @ 0.08 m."),
    furniture_min: int = typer.Option(1, "--furniture-min", min=0, help="Fewest furniture boxes per room."),
    furniture_max: int = typer.Option(3, "--furniture-max", min=0, help="Most furniture boxes per room."),
):
    """Generate a synthetic scene dataset."""
    try:
        recipe = SceneRecipe(grid=grid.value, furniture_min=furniture_min, furniture_max=furniture_max)
    except ValidationError as e:
        raise click.UsageError(str(e))
    write_dataset(out, recipe, seed, count)
    console.print(f"wrote {count} scenes to {out}")


# ============================================================================
# train
# ============================================================================

def _plan_from_flags(base: dict, distill: Optional[str], ql_mode: Optional[PairMode], tgi: Optional[bool],
                     lambdas: Optional[str], aligned_mode: Optional[PairMode] = None) -> dict:
    plan = dict(base)
    try:
        if distill is not None:
            levels = DistillPlan.from_levels(distill)
            plan.update({f"enable_{name}": getattr(levels, f"enable_{name}") for name in ("efa", "ql", "pl", "al")})
        if lambdas is not None:
            plan["weights"] = DistillWeights.parse(lambdas).model_dump()
    except ValueError as e:
        raise click.UsageError(str(e))
    if ql_mode is not None:
        plan["ql_mode"] = ql_mode.value
    if aligned_mode is not None:
        plan["aligned_mode"] = aligned_mode.value
    if tgi is not None:
        plan["enable_tgi"] = tgi
    return plan


def _model_for(role: Role, recipe: SceneRecipe, base: Optional[dict], depth_prior: Optional[PriorName]) -> dict:
    if base is None:
        spec = recipe.spec
        factory = ModelConfig.teacher if role == Role.teacher else ModelConfig.student
        base = factory(
            n_classes=recipe.n_classes,
            image_hw=recipe.image_hw,
            scene_min=tuple(spec.lower.tolist()),
            scene_max=tuple(spec.upper.tolist()),
        ).model_dump()
    if depth_prior is not None:
        base = dict(base)
        base["depth_branch_enabled"] = depth_prior != PriorName.none
        if depth_prior != PriorName.none:
            base["depth_prior"] = depth_prior.value
    return base


@app.command()
def train(
    role: Role = typer.Option(Role.teacher, "--role", help="teacher (task loss only) or student (distilled)."),
    data: Path = typer.Option(..., "--data", help="Dataset directory written by `gen`."),
    out: Path = typer.Option(..., "--out", help="Output directory for checkpoint and logs."),
    config: Optional[Path] = typer.Option(None, "--config", help="JSON TrainConfig; flags override it."),
    epochs: Optional[int] = typer.Option(None, "--epochs", min=1, help="Training epochs [default: 10]."),
    lr: Optional[float] = typer.Option(None, "--lr", help="AdamW learning rate [default: 2e-4]."),
    weight_decay: Optional[float] = typer.Option(None, "--weight-decay", help="Decoupled weight decay [default: 0.01]."),
    batch_size: Optional[int] = typer.Option(None, "--batch-size", min=1, help="Scenes per step [default: 4]."),
    seed: Optional[int] = typer.Option(None, "--seed", help="Initialization, shuffling and anchor seed [default: 0]."),
    teacher_ckpt: Optional[Path] = typer.Option(None, "--teacher-ckpt", help="Teacher checkpoint (student role)."),
    distill: Optional[str] = typer.Option(None, "--distill", help="Comma-separated levels from efa,ql,pl,al; empty for none."),
    ql_mode: Optional[PairMode] = typer.Option(None, "--ql-mode", help="Pair loss of query-level distillation."),
    aligned_mode: Optional[PairMode] = typer.Option(None, "--aligned-mode", help="Pair loss of the prior and anchor levels."),
    tgi: Optional[bool] = typer.Option(None, "--tgi/--no-tgi", help="Teacher-guided decoder initialization."),
    lambdas: Optional[str] = typer.Option(None, "--lambdas", help="Level weights a,b,c,d [default: 1,0.2,0.2,0.5]."),
    depth_prior: Optional[PriorName] = typer.Option(None, "--depth-prior", help="Depth-branch prior quality; none disables the branch."),
    teacher_depth_prior: Optional[PriorName] = typer.Option(None, "--teacher-depth-prior", help="Override the teacher's prior quality."),
    progress: bool = typer.Option(False, "--progress", help="Show a progress bar."),
):
    """Train a teacher, or a student against a teacher checkpoint."""
    base = json.loads(config.read_text()) if config is not None else {}
    dataset = SceneDataset.load(data)

    flags = {
        "role": role.value, "epochs": epochs, "lr": lr, "weight_decay": weight_decay,
        "batch_size": batch_size, "seed": seed, "teacher_ckpt": teacher_ckpt,
    }
    settings = {**base, **{k: v for k, v in flags.items() if v is not None}}
    settings["plan"] = _plan_from_flags(base.get("plan", {}), distill, ql_mode, tgi, lambdas, aligned_mode)
    settings["model"] = _model_for(role, dataset.recipe, base.get("model"), depth_prior)
    settings.setdefault("threads", env_threads())
    if "lr" in settings and not settings["lr"] > 0:
        raise click.UsageError(f"--lr must be positive, got {settings['lr']}")
    cfg = TrainConfig.model_validate(settings)

    if cfg.role == "student":
        if cfg.teacher_ckpt is None:
            raise click.UsageError("--role student requires --teacher-ckpt")
        teacher = load_model(cfg.teacher_ckpt)
        if teacher_depth_prior is not None and teacher_depth_prior != PriorName.none:
            teacher = SparseOccupancyModel(
                teacher.config.model_copy(update={"depth_prior": teacher_depth_prior.value}), teacher.params
            )
        result = train_student(cfg, dataset, teacher, out, progress)
    else:
        result = train_teacher(cfg, dataset, out, progress)

    (Path(out) / "train_config.json").write_text(cfg.model_dump_json(indent=2))
    last = result.log.iloc[-1]
    console.print(
        f"[bold]{cfg.role}[/bold] trained {cfg.epochs} epochs: total {last['total']:.5f}, "
        f"l_task {last['l_task']:.5f}, iou {last['iou']:.4f} -> {result.checkpoint}"
    )


# ============================================================================
# eval / info / gradcheck
# ============================================================================

def _class_table(report) -> Table:
    table = Table(title="per-class IoU")
    table.add_column("class")
    table.add_column("IoU", justify="right")
    names = report.class_names or [str(i + 1) for i in range(len(report.per_class_iou))]
    for name, value in zip(names, report.per_class_iou):
        table.add_row(name, "-" if value is None else f"{value:.4f}")
    return table


@app.command("eval")
def evaluate_cmd(
    ckpt: Path = typer.Option(..., "--ckpt", help="Model checkpoint (with its .json sidecar)."),
    data: Path = typer.Option(..., "--data", help="Dataset directory."),
    report: Optional[Path] = typer.Option(None, "--report", help="Where to write the JSON report."),
    threshold: float = typer.Option(0.0, "--threshold", help="Minimum max-class probability for a point to vote."),
):
    """Mean IoU/mIoU of a checkpoint over a dataset."""
    model = load_model(ckpt)
    dataset = SceneDataset.load(data)
    check_compatible(model, dataset)
    metrics = evaluate(model, dataset, score_threshold=threshold)
    text = metrics.to_json()
    if report is not None:
        report.parent.mkdir(parents=True, exist_ok=True)
        report.write_text(text + "\n")
    console.print(_class_table(metrics))
    typer.echo(text)


@app.command()
def info(ckpt: Path = typer.Option(..., "--ckpt", help="Model checkpoint.")):
    """Print a checkpoint's architecture and parameter count."""
    config, n_params = checkpoint_info(ckpt)
    console.print(f"encoder: width {config.encoder.width}, depth {config.encoder.depth}, "
                  f"channels {config.encoder.out_channels} -> {config.map_channels}")
    console.print(f"queries {config.n_queries}, layers {config.n_layers}, points {list(config.points_per_layer)}, "
                  f"depth branch {'on (' + config.depth_prior + ')' if config.depth_branch_enabled else 'off'}")
    typer.echo(f"parameters: {n_params}")


@app.command("gradcheck")
def gradcheck_cmd(
    component: str = typer.Option("all", "--component", help=f"all or one of: {', '.join(COMPONENTS)}."),
    trials: int = typer.Option(2, "--trials", min=1, help="Random problems per component."),
    seed: int = typer.Option(0, "--seed", help="Problem seed."),
    report: Optional[Path] = typer.Option(None, "--report", help="Where to write the JSON report."),
):
    """Finite-difference check of analytic gradients; exits 3 on any failure."""
    if component != "all" and component not in COMPONENTS:
        raise click.UsageError(f"unknown component {component!r}; valid: all, {', '.join(COMPONENTS)}")
    names = list(COMPONENTS) if component == "all" else [component]
    reports = [gradcheck(name, trials, seed) for name in names]

    table = Table(title="gradient check")
    for col in ("component", "worst rel. error", "threshold", "status"):
        table.add_column(col)
    for r in reports:
        table.add_row(r.component, f"{r.worst:.2e}", f"{r.threshold:.0e}",
                      "[green]pass[/green]" if r.passed else f"[red]FAIL[/red] {r.error or ''}")
    console.print(table)
    if report is not None:
        report.write_text(json.dumps([r.to_dict() for r in reports], indent=2) + "\n")
    if not all(r.passed for r in reports):
        raise typer.Exit(code=EXIT_VERIFY)


# ============================================================================
# Entry point
# ============================================================================

def main(argv: Optional[List[str]] = None) -> int:
    """Run the CLI and return its exit code instead of calling sys.exit."""
    load_dotenv()
    setup_logging()
    args = sys.argv[1:] if argv is None else list(argv)
    try:
        rv = app(args=args, prog_name="discene", standalone_mode=False)
    except click.exceptions.Abort:
        console.print("aborted")
        return EXIT_USAGE
    except click.UsageError as e:
        console.print(f"[red]usage error:[/red] {e.format_message()}")
        return EXIT_USAGE
    except click.ClickException as e:
        console.print(f"[red]error:[/red] {e.format_message()}")
        return EXIT_USAGE
    except (DiSceneError, OSError, ValidationError, json.JSONDecodeError) as e:
        logger.error("%s: %s", type(e).__name__, e)
        return EXIT_DATA
    return rv if isinstance(rv, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
