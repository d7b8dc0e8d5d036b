"""Command-line entry point for training, merging, optimizing, evaluating,
ablating, landscape export, and efficiency sweeps.

Every command reads one config file (JSON or TOML; a previously written
manifest also works), writes its artifacts under the config's output
directory, and finishes by writing a manifest with a CRC32 checksum per
artifact. Exit codes: 0 success, 2 config error, 3 numerical failure,
4 I/O or container error.
"""

from __future__ import annotations

import csv
import functools
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .bayesopt import (
    BOConfig,
    ExpectedImprovement,
    UpperConfidenceBound,
    optimize,
    write_trajectory,
)
from .config import (
    ExperimentConfig,
    RunManifest,
    build_tasks,
    load_config,
    train_config,
)
from .errors import (
    ConfigError,
    ContainerError,
    DivergenceError,
    NumericalError,
)
from .harness import (
    EvalContext,
    ablate as run_ablation,
    evaluate_ctx,
    landscape as run_landscape,
    landscape_to_csv,
    make_fisher_provider,
    objective_fn,
    report_to_csv,
    report_to_json,
)
from .merge import (
    CoefficientVector,
    ImportanceWeights,
    MergeInputs,
    dare_task_arithmetic,
    merge_averaging,
    merge_df,
    merge_fisher,
    merge_task_arithmetic,
    ties_merge,
    unified_merge,
)
from .params import Checkpoint, load_checkpoint, save_checkpoint
from .seeding import derive_seed
from .toymodels import (
    finetune,
    generate_task,
    load_dataset,
    multitask_finetune,
    pretrain_shared_init,
    save_dataset,
)

MERGE_METHODS = ("averaging", "ta", "gta", "fisher", "df", "ties", "dare-ta")


def exit_codes(fn):
    """Map the exception taxonomy onto scriptable exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(2)
        except (DivergenceError, NumericalError) as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            sys.exit(3)
        except (ContainerError, OSError) as exc:
            click.echo(f"i/o error: {exc}", err=True)
            sys.exit(4)

    return wrapper


config_option = click.option(
    "--config", "config_path", required=True, type=click.Path(exists=True),
    help="Experiment config (JSON/TOML) or a previously written manifest.",
)
threads_option = click.option(
    "--threads", default=1, show_default=True, type=click.IntRange(min=1),
    help="Worker cap for embarrassingly parallel stages.",
)


@click.group()
@click.version_option(__version__)
def main() -> None:
    """Merge task-specific toy classifiers and search their coefficients."""


def _outdir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _paths(cfg: ExperimentConfig) -> dict:
    out = _outdir(cfg)
    return {
        "out": out,
        "datasets": out / "datasets",
        "checkpoints": out / "checkpoints",
    }


def _dataset_path(cfg: ExperimentConfig, task_id: str) -> Path:
    return _paths(cfg)["datasets"] / f"{task_id}.ds"


def _checkpoint_path(cfg: ExperimentConfig, name: str) -> Path:
    return _paths(cfg)["checkpoints"] / f"{name}.ckpt"


def _load_suite(cfg: ExperimentConfig):
    """Load datasets and checkpoints produced by `train`."""
    datasets = []
    for section in cfg.tasks:
        path = _dataset_path(cfg, section.task_id)
        if not path.exists():
            raise ConfigError(f"missing dataset {path}; run `taskfuse train` first")
        datasets.append(load_dataset(path))
    pre_path = _checkpoint_path(cfg, "pretrained")
    if not pre_path.exists():
        raise ConfigError(f"missing checkpoint {pre_path}; run `taskfuse train` first")
    pretrained = load_checkpoint(pre_path)
    finetuned = []
    for section in cfg.tasks:
        path = _checkpoint_path(cfg, section.task_id)
        if not path.exists():
            raise ConfigError(f"missing checkpoint {path}; run `taskfuse train` first")
        finetuned.append(load_checkpoint(path))
    inputs = MergeInputs.from_checkpoints(pretrained, finetuned)
    return datasets, pretrained, finetuned, inputs


def _eval_context(cfg: ExperimentConfig, datasets, split=None, ratio=None) -> EvalContext:
    return EvalContext(
        model_spec=cfg.model,
        datasets=tuple(datasets),
        split=cfg.eval_split if split is None else split,
        sample_ratio=cfg.eval_ratio if ratio is None else ratio,
        seed=derive_seed(cfg.seed, "eval"),
    )


def _bo_config(cfg: ExperimentConfig, acquisition: str | None = None,
               init_points: int | None = None, iterations: int | None = None) -> BOConfig:
    acq_name = cfg.bayesopt.acquisition if acquisition is None else acquisition
    if acq_name == "ucb":
        acq = UpperConfidenceBound(kappa=cfg.bayesopt.kappa)
    else:
        acq = ExpectedImprovement()
    return BOConfig(
        dims=len(cfg.tasks),
        init_points=cfg.bayesopt.init_points if init_points is None else init_points,
        iterations=cfg.bayesopt.iterations if iterations is None else iterations,
        seed=derive_seed(cfg.seed, "bo"),
        acquisition=acq,
    )


def _merged_checkpoint(cfg: ExperimentConfig, vector, method: str, extra: dict) -> Checkpoint:
    provenance = {"task": "merged", "method": method, "seed": cfg.seed, "steps": 0}
    provenance.update(extra)
    return Checkpoint(vector, cfg.model.meta(), provenance)


@main.command()
@config_option
@exit_codes
def train(config_path: str) -> None:
    """Generate datasets, pretrain the shared init, fine-tune per task."""
    cfg = load_config(config_path)
    paths = _paths(cfg)
    paths["datasets"].mkdir(parents=True, exist_ok=True)
    paths["checkpoints"].mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("train", cfg.seed, cfg.to_dict())

    datasets = []
    for task in build_tasks(cfg):
        ds = generate_task(task)
        datasets.append(ds)
        path = _dataset_path(cfg, task.task_id)
        save_dataset(ds, path)
        manifest.add_artifact(f"dataset/{task.task_id}", path, paths["out"])

    pre_cfg = train_config(cfg, "pretrain", steps=cfg.pretrain_steps)
    pretrained = pretrain_shared_init(
        cfg.model, datasets, pre_cfg, seed=derive_seed(cfg.seed, "pretrain-init")
    )
    pre_path = _checkpoint_path(cfg, "pretrained")
    save_checkpoint(pretrained, pre_path)
    manifest.add_artifact("checkpoint/pretrained", pre_path, paths["out"])

    for ds in datasets:
        ckpt = finetune(
            pretrained.param_vector, cfg.model, ds, train_config(cfg, f"train/{ds.task_id}")
        )
        path = _checkpoint_path(cfg, ds.task_id)
        save_checkpoint(ckpt, path)
        manifest.add_artifact(f"checkpoint/{ds.task_id}", path, paths["out"])

    if cfg.multitask_steps > 0:
        mt_cfg = train_config(cfg, "train/multitask", steps=cfg.multitask_steps)
        ckpt = multitask_finetune(pretrained.param_vector, cfg.model, datasets, mt_cfg)
        path = _checkpoint_path(cfg, "multitask")
        save_checkpoint(ckpt, path)
        manifest.add_artifact("checkpoint/multitask", path, paths["out"])

    manifest.write(paths["out"] / "manifest_train.json")
    click.echo(f"wrote {len(manifest.artifacts)} artifacts to {paths['out']}")


@main.command()
@config_option
@click.option("--method", required=True, type=click.Choice(MERGE_METHODS))
@click.option("--lam", default=None, type=float, help="Shared coefficient (ta/ties/dare-ta).")
@click.option("--lambdas", default=None, help="Comma-separated per-model coefficients (gta/df).")
@click.option("--keep-fraction", default=0.2, show_default=True, type=float,
              help="TIES trim fraction.")
@click.option("--drop-rate", default=0.5, show_default=True, type=float,
              help="DARE drop probability.")
@click.option("--allow-unbounded", is_flag=True,
              help="Permit per-model coefficients outside [0, 1].")
@exit_codes
def merge(config_path, method, lam, lambdas, keep_fraction, drop_rate, allow_unbounded):
    """Merge the fine-tuned checkpoints with one explicit method."""
    cfg = load_config(config_path)
    datasets, _, _, inputs = _load_suite(cfg)
    extra: dict = {}

    def parse_lambdas() -> CoefficientVector:
        if lambdas is None:
            raise ConfigError(f"--lambdas is required for method {method!r}")
        try:
            values = np.array([float(v) for v in lambdas.split(",")])
        except ValueError as exc:
            raise ConfigError(f"cannot parse --lambdas {lambdas!r}: {exc}") from exc
        if values.size != inputs.num_models:
            raise ConfigError(
                f"{values.size} coefficients given for {inputs.num_models} models"
            )
        try:
            return CoefficientVector(values, unbounded=allow_unbounded)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    if method == "averaging":
        merged = merge_averaging(inputs)
    elif method == "ta":
        if lam is None:
            raise ConfigError("--lam is required for method 'ta'")
        merged = merge_task_arithmetic(inputs, lam)
        extra["lam"] = lam
    elif method == "gta":
        coeffs = parse_lambdas()
        merged = unified_merge(inputs, coeffs, ImportanceWeights.identity())
        extra["lambdas"] = coeffs.lambdas.tolist()
    elif method == "fisher":
        fisher_seed = derive_seed(cfg.seed, "fisher-batch")
        provider = make_fisher_provider(
            inputs, cfg.model, datasets, cfg.fisher_batch, fisher_seed
        )
        fishers = [provider(i, 1.0) for i in range(inputs.num_models)]
        merged = merge_fisher(inputs, fishers)
        extra["fisher_batch"] = cfg.fisher_batch
        extra["fisher_batch_seed"] = fisher_seed
    elif method == "df":
        coeffs = parse_lambdas()
        fisher_seed = derive_seed(cfg.seed, "fisher-batch")
        provider = make_fisher_provider(
            inputs, cfg.model, datasets, cfg.fisher_batch, fisher_seed
        )
        merged = merge_df(inputs, coeffs, provider)
        extra["lambdas"] = coeffs.lambdas.tolist()
        extra["fisher_batch"] = cfg.fisher_batch
        extra["fisher_batch_seed"] = fisher_seed
    elif method == "ties":
        merged = ties_merge(inputs, keep_fraction, 1.0 if lam is None else lam)
        extra["keep_fraction"] = keep_fraction
        extra["lam"] = 1.0 if lam is None else lam
    else:  # dare-ta
        merged = dare_task_arithmetic(
            inputs, 1.0 if lam is None else lam, drop_rate, derive_seed(cfg.seed, "dare")
        )
        extra["drop_rate"] = drop_rate
        extra["lam"] = 1.0 if lam is None else lam

    out = _paths(cfg)["out"]
    path = _checkpoint_path(cfg, f"merged_{method}")
    save_checkpoint(_merged_checkpoint(cfg, merged, method, extra), path)
    manifest = RunManifest("merge", cfg.seed, cfg.to_dict(), summary={"method": method, **extra})
    manifest.add_artifact(f"checkpoint/merged_{method}", path, out)
    manifest.write(out / "manifest_merge.json")
    click.echo(f"merged checkpoint written to {path}")


@main.command(name="optimize")
@config_option
@click.option("--method", default="df", show_default=True, type=click.Choice(["df", "gta"]),
              help="Objective: Fisher-weighted merge or plain scaled sum.")
@click.option("--acquisition", default=None, type=click.Choice(["ei", "ucb"]),
              help="Override the config's acquisition function.")
@click.option("--iterations", default=None, type=click.IntRange(min=0))
@click.option("--init-points", default=None, type=click.IntRange(min=1))
@exit_codes
def optimize_cmd(config_path, method, acquisition, iterations, init_points):
    """Search merging coefficients; write best checkpoint and trajectory."""
    cfg = load_config(config_path)
    datasets, _, _, inputs = _load_suite(cfg)
    ctx = _eval_context(cfg, datasets)
    provider = make_fisher_provider(
        inputs, cfg.model, datasets, cfg.fisher_batch, derive_seed(cfg.seed, "fisher-batch")
    )
    objective = objective_fn(inputs, method, ctx, fisher_provider=provider)
    bo_cfg = _bo_config(cfg, acquisition, init_points, iterations)
    best, trajectory = optimize(objective, bo_cfg)

    acq_name = "ucb" if isinstance(bo_cfg.acquisition, UpperConfidenceBound) else "ei"
    tag = f"{method}_{acq_name}"
    out = _paths(cfg)["out"]
    traj_path = out / f"trajectory_{tag}.jsonl"
    write_trajectory(traj_path, trajectory)

    coeffs = CoefficientVector(np.array(best.lambdas))
    if method == "df":
        merged = merge_df(inputs, coeffs, provider)
    else:
        merged = unified_merge(inputs, coeffs, ImportanceWeights.identity())
    ckpt_path = _checkpoint_path(cfg, f"merged_{tag}")
    save_checkpoint(
        _merged_checkpoint(
            cfg, merged, method,
            {"lambdas": list(best.lambdas), "acquisition": acq_name,
             "fisher_batch": cfg.fisher_batch,
             "fisher_batch_seed": derive_seed(cfg.seed, "fisher-batch")},
        ),
        ckpt_path,
    )

    manifest = RunManifest(
        "optimize", cfg.seed, cfg.to_dict(),
        summary={
            "method": method,
            "acquisition": acq_name,
            "best_lambdas": list(best.lambdas),
            "best_objective": best.value,
            "evaluations": len(trajectory),
        },
    )
    manifest.add_artifact(f"trajectory/{tag}", traj_path, out)
    manifest.add_artifact(f"checkpoint/merged_{tag}", ckpt_path, out)
    manifest.write(out / "manifest_optimize.json")
    click.echo(
        f"best objective {best.value:.4f} at lambdas "
        f"{[round(v, 4) for v in best.lambdas]}"
    )


@main.command(name="eval")
@config_option
@click.option("--checkpoint", "checkpoint_name", required=True,
              help="Checkpoint name under <output_dir>/checkpoints (without .ckpt).")
@click.option("--split", default=None, type=click.Choice(["train", "validation", "test"]))
@click.option("--ratio", default=None, type=float, help="Validation-sample ratio in (0, 1].")
@exit_codes
def eval_cmd(config_path, checkpoint_name, split, ratio):
    """Score a stored checkpoint on every task."""
    cfg = load_config(config_path)
    if ratio is not None and not 0.0 < ratio <= 1.0:
        raise ConfigError(f"--ratio must be in (0, 1], got {ratio}")
    datasets = [load_dataset(_dataset_path(cfg, s.task_id)) for s in cfg.tasks]
    path = _checkpoint_path(cfg, checkpoint_name)
    if not path.exists():
        raise ConfigError(f"no checkpoint at {path}")
    ckpt = load_checkpoint(path)
    ctx = _eval_context(cfg, datasets, split=split, ratio=ratio)
    report = evaluate_ctx(ckpt.param_vector, ctx)

    out = _paths(cfg)["out"]
    csv_path = out / f"report_{checkpoint_name}.csv"
    json_path = out / f"report_{checkpoint_name}.json"
    report_to_csv(report, csv_path)
    report_to_json(report, json_path)
    manifest = RunManifest(
        "eval", cfg.seed, cfg.to_dict(),
        summary={"checkpoint": checkpoint_name, "split": ctx.split,
                 "ratio": ctx.sample_ratio, "average": report.average},
    )
    manifest.add_artifact("report/csv", csv_path, out)
    manifest.add_artifact("report/json", json_path, out)
    manifest.write(out / "manifest_eval.json")
    click.echo(f"{ctx.split} average accuracy: {report.average:.4f}")


@main.command()
@config_option
@threads_option
@exit_codes
def landscape(config_path, threads):
    """Export accuracy landscapes over the two task vectors' plane."""
    cfg = load_config(config_path)
    if len(cfg.tasks) != 2:
        raise ConfigError("the landscape command needs exactly two tasks")
    datasets, _, _, inputs = _load_suite(cfg)
    ctx = _eval_context(cfg, datasets)
    provider = make_fisher_provider(
        inputs, cfg.model, datasets, cfg.fisher_batch, derive_seed(cfg.seed, "fisher-batch")
    )
    out = _paths(cfg)["out"]
    manifest = RunManifest("landscape", cfg.seed, cfg.to_dict())
    for kind in ("gta", "df"):
        grid = run_landscape(
            inputs, ctx, kind=kind, bounds=cfg.landscape_bounds,
            resolution=cfg.landscape_resolution,
            fisher_provider=provider, threads=threads,
        )
        path = out / f"landscape_{kind}.csv"
        landscape_to_csv(grid, path)
        manifest.add_artifact(f"landscape/{kind}", path, out)
    manifest.write(out / "manifest_landscape.json")
    click.echo(f"landscape CSVs written to {out}")


@main.command()
@config_option
@exit_codes
def ablate(config_path):
    """Compare the coefficient search with its components removed."""
    cfg = load_config(config_path)
    datasets, _, _, inputs = _load_suite(cfg)
    ctx = _eval_context(cfg, datasets)
    rows = run_ablation(inputs, ctx, _bo_config(cfg), cfg.fisher_batch)

    out = _paths(cfg)["out"]
    path = out / "ablation.csv"
    task_ids = [s.task_id for s in cfg.tasks]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["method", "lambdas", "validation_objective", *task_ids, "avg_test"]
        )
        for row in rows:
            writer.writerow(
                [
                    row.method,
                    "" if row.lambdas is None else ";".join(f"{v:.6f}" for v in row.lambdas),
                    "" if row.validation_objective is None else f"{row.validation_objective:.6f}",
                    *(f"{row.test_report.per_task[t]:.6f}" for t in task_ids),
                    f"{row.test_report.average:.6f}",
                ]
            )
    manifest = RunManifest(
        "ablate", cfg.seed, cfg.to_dict(),
        summary={row.method: row.test_report.average for row in rows},
    )
    manifest.add_artifact("ablation/csv", path, out)
    manifest.write(out / "manifest_ablate.json")
    for row in rows:
        click.echo(f"{row.method:>10}: avg test accuracy {row.test_report.average:.4f}")


@main.command()
@config_option
@click.option("--axis", required=True, type=click.Choice(["iterations", "val_ratio"]))
@click.option("--values", required=True,
              help="Comma-separated axis values, e.g. '5,10,20' or '0.05,0.1,1.0'.")
@click.option("--method", default="df", show_default=True, type=click.Choice(["df", "gta"]))
@exit_codes
def sweep(config_path, axis, values, method):
    """Best accuracy as a function of iteration count or validation ratio.

    The iterations axis runs one search at the largest value and reads the
    shorter runs off the trajectory prefix (proposals are seeded per
    iteration index, so a truncated run and a short run coincide). The
    val_ratio axis runs one search per value on nested validation subsets,
    then scores each winner on the test split.
    """
    cfg = load_config(config_path)
    raw_values = [v for v in values.split(",") if v.strip()]
    if not raw_values:
        raise click.UsageError("--values must contain at least one value")
    try:
        parsed = [float(v) for v in raw_values]
    except ValueError as exc:
        raise click.UsageError(f"cannot parse --values {values!r}: {exc}") from exc
    datasets, _, _, inputs = _load_suite(cfg)
    provider = make_fisher_provider(
        inputs, cfg.model, datasets, cfg.fisher_batch, derive_seed(cfg.seed, "fisher-batch")
    )
    out = _paths(cfg)["out"]
    rows = []

    if axis == "iterations":
        counts = sorted({int(v) for v in parsed})
        if counts[0] < 0:
            raise ConfigError("iteration counts must be >= 0")
        ctx = _eval_context(cfg, datasets)
        objective = objective_fn(inputs, method, ctx, fisher_provider=provider)
        bo_cfg = _bo_config(cfg, iterations=counts[-1])
        _, trajectory = optimize(objective, bo_cfg)
        for count in counts:
            cutoff = bo_cfg.init_points + count
            prefix = [p for p in trajectory if p.iteration <= cutoff]
            rows.append((count, prefix[-1].best_so_far))
    else:
        for ratio in parsed:
            if not 0.0 < ratio <= 1.0:
                raise ConfigError(f"validation ratios must be in (0, 1], got {ratio}")
            ctx = _eval_context(cfg, datasets, ratio=ratio)
            objective = objective_fn(inputs, method, ctx, fisher_provider=provider)
            best, _ = optimize(objective, _bo_config(cfg))
            coeffs = CoefficientVector(np.array(best.lambdas))
            if method == "df":
                merged = merge_df(inputs, coeffs, provider)
            else:
                merged = unified_merge(inputs, coeffs, ImportanceWeights.identity())
            test_ctx = _eval_context(cfg, datasets, split="test", ratio=1.0)
            rows.append((ratio, best.value, evaluate_ctx(merged, test_ctx).average))

    path = out / f"sweep_{axis}.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if axis == "iterations":
            writer.writerow(["iterations", "best_validation_accuracy"])
            writer.writerows([(v, f"{acc:.6f}") for v, acc in rows])
        else:
            writer.writerow(["val_ratio", "best_validation_accuracy", "test_accuracy"])
            writer.writerows([(v, f"{a:.6f}", f"{t:.6f}") for v, a, t in rows])
    manifest = RunManifest(
        "sweep", cfg.seed, cfg.to_dict(),
        summary={"axis": axis, "method": method, "values": raw_values},
    )
    manifest.add_artifact(f"sweep/{axis}", path, out)
    manifest.write(out / f"manifest_sweep_{axis}.json")
    click.echo(f"sweep CSV written to {path}")


if __name__ == "__main__":
    main()
