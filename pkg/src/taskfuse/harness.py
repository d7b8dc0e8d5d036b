"""Evaluation, black-box objectives, grid searches, ablations, landscapes.

Everything here is deterministic for a fixed seed: evaluation subsets are
nested prefixes of a per-task permutation, the Fisher batch is selected
once per run, and the merge-then-evaluate objective is a pure function of
the coefficient vector, which is what GP modeling assumes.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .bayesopt import BOConfig, ExpectedImprovement, UpperConfidenceBound, optimize
from .errors import DegenerateBasisError
from .fisher import FisherDiagonal, fisher_at_scaled
from .merge import (
    CoefficientVector,
    FisherProvider,
    ImportanceWeights,
    MergeInputs,
    merge_averaging,
    merge_df,
    merge_fisher,
    merge_task_arithmetic,
    unified_merge,
)
from .params import ParamVector
from .seeding import spawn_rng
from .toymodels import ClassifierSpec, Dataset, predict

DEFAULT_FISHER_BATCH = 30


@dataclass(frozen=True)
class EvalReport:
    """Per-task accuracies; the average is the unweighted task mean."""

    split: str
    per_task: dict[str, float]
    sample_counts: dict[str, int]

    @property
    def average(self) -> float:
        return float(np.mean(list(self.per_task.values())))


@dataclass(frozen=True)
class EvalContext:
    """Everything needed to score a parameter vector on a task suite."""

    model_spec: ClassifierSpec
    datasets: tuple[Dataset, ...]
    split: str = "validation"
    sample_ratio: float = 1.0
    seed: int = 0


def _subset(x: np.ndarray, y: np.ndarray, ratio: float, seed: int, task_id: str):
    """Nested prefix subset: the r-fraction subset is contained in every
    r'-fraction subset with r' >= r, for a fixed seed."""
    n = x.shape[0]
    if n == 0:
        raise ValueError(f"split of task {task_id!r} is empty")
    k = max(1, int(np.ceil(ratio * n)))
    order = spawn_rng(seed, f"eval-subset/{task_id}").permutation(n)[:k]
    return x[order], y[order]


def evaluate(
    model: ParamVector,
    spec: ClassifierSpec,
    datasets: Sequence[Dataset],
    split: str = "validation",
    sample_ratio: float = 1.0,
    seed: int = 0,
) -> EvalReport:
    """Accuracy of the argmax prediction rule on each task."""
    if not 0.0 < sample_ratio <= 1.0:
        raise ValueError(f"sample_ratio must be in (0, 1], got {sample_ratio}")
    per_task: dict[str, float] = {}
    counts: dict[str, int] = {}
    for ds in datasets:
        x, y = ds.split(split)
        x, y = _subset(x, y, sample_ratio, seed, ds.task_id)
        per_task[ds.task_id] = float((predict(model, spec, x) == y).mean())
        counts[ds.task_id] = int(x.shape[0])
    return EvalReport(split=split, per_task=per_task, sample_counts=counts)


def evaluate_ctx(model: ParamVector, ctx: EvalContext) -> EvalReport:
    return evaluate(model, ctx.model_spec, ctx.datasets, ctx.split, ctx.sample_ratio, ctx.seed)


def make_fisher_provider(
    inputs: MergeInputs,
    spec: ClassifierSpec,
    datasets: Sequence[Dataset],
    batch_size: int = DEFAULT_FISHER_BATCH,
    seed: int = 0,
) -> FisherProvider:
    """Fisher provider over fixed, seed-selected unlabeled validation inputs.

    The subset for each task is chosen once, so the provider (and any
    objective built on it) is deterministic across a whole run.
    """
    if len(datasets) != inputs.num_models:
        raise ValueError(
            f"{len(datasets)} datasets for {inputs.num_models} task vectors"
        )
    batches = []
    for ds in datasets:
        x, _ = ds.split("validation")
        k = min(batch_size, x.shape[0])
        order = spawn_rng(seed, f"fisher-batch/{ds.task_id}").permutation(x.shape[0])[:k]
        batches.append(x[order])

    def provider(index: int, lam: float) -> FisherDiagonal:
        return fisher_at_scaled(
            inputs.pretrained, inputs.taus[index], lam, spec, batches[index]
        )

    return provider


def objective_fn(
    inputs: MergeInputs,
    method: str,
    ctx: EvalContext,
    fisher_provider: FisherProvider | None = None,
    fisher_batch_size: int = DEFAULT_FISHER_BATCH,
) -> Callable[[CoefficientVector], float]:
    """Black-box objective: merge with the given coefficients, return the
    average accuracy on the context's split.

    ``method`` is "df" (Fisher weights at the scaled points) or "gta"
    (identity weights); the latter powers the no-Fisher ablation.
    """
    if method not in ("df", "gta"):
        raise ValueError(f"unknown objective method {method!r}; use 'df' or 'gta'")
    if method == "df" and fisher_provider is None:
        fisher_provider = make_fisher_provider(
            inputs, ctx.model_spec, ctx.datasets, fisher_batch_size, ctx.seed
        )

    def objective(coeffs: CoefficientVector) -> float:
        if method == "df":
            merged = merge_df(inputs, coeffs, fisher_provider)
        else:
            merged = unified_merge(inputs, coeffs, ImportanceWeights.identity())
        return evaluate_ctx(merged, ctx).average

    return objective


def grid_search_ta(
    inputs: MergeInputs,
    grid: Sequence[float],
    ctx: EvalContext,
) -> tuple[float, EvalReport]:
    """Best shared task-arithmetic coefficient on the grid.

    Accuracy ties resolve to the smallest coefficient.
    """
    if len(grid) == 0:
        raise ValueError("grid must be nonempty")
    best_lam, best_report = None, None
    for lam in grid:
        report = evaluate_ctx(merge_task_arithmetic(inputs, float(lam)), ctx)
        if (
            best_report is None
            or report.average > best_report.average
            or (report.average == best_report.average and lam < best_lam)
        ):
            best_lam, best_report = float(lam), report
    return best_lam, best_report


# --- 2-D metric landscape ----------------------------------------------------


@dataclass(frozen=True)
class LandscapeGrid:
    """Average accuracy over a 2-D orthonormal slice of parameter space."""

    kind: str
    u_hat: np.ndarray
    v_hat: np.ndarray
    axis1: np.ndarray
    axis2: np.ndarray
    accuracy: np.ndarray
    lambdas1: np.ndarray
    lambdas2: np.ndarray

    def argmax_cell(self) -> tuple[int, int]:
        flat = int(np.argmax(self.accuracy))
        return np.unravel_index(flat, self.accuracy.shape)  # type: ignore[return-value]


def plane_basis(inputs: MergeInputs) -> tuple[np.ndarray, np.ndarray, float, float, float]:
    """Gram-Schmidt basis of the two task vectors' plane.

    Returns ``(u_hat, v_hat, r11, r21, r22)`` where the first model sits at
    plane coordinates ``(r11, 0)`` and the second at ``(r21, r22)``.
    """
    if inputs.num_models != 2:
        raise ValueError("the landscape needs exactly two task vectors")
    t1, t2 = inputs.taus[0].values, inputs.taus[1].values
    n1 = float(np.linalg.norm(t1))
    if n1 == 0.0:
        raise DegenerateBasisError("first task vector is zero")
    u_hat = t1 / n1
    r21 = float(t2 @ u_hat)
    v = t2 - r21 * u_hat
    n2 = float(np.linalg.norm(v))
    if n2 <= 1e-12 * max(1.0, float(np.linalg.norm(t2))):
        raise DegenerateBasisError("task vectors are parallel; no plane basis exists")
    return u_hat, v / n2, n1, r21, n2


def plane_point(
    pretrained: ParamVector, u_hat: np.ndarray, v_hat: np.ndarray, c1: float, c2: float
) -> ParamVector:
    """Model at plane coordinates (c1, c2)."""
    return ParamVector(pretrained.layout, pretrained.values + c1 * u_hat + c2 * v_hat)


def default_landscape_bounds(inputs: MergeInputs) -> tuple[tuple[float, float], tuple[float, float]]:
    """Box from the origin past both models' plane coordinates."""
    _, _, r11, r21, r22 = plane_basis(inputs)
    hi1 = 1.25 * max(r11, r21, 1e-9)
    hi2 = 1.25 * max(r22, 1e-9)
    return (0.0, hi1), (0.0, hi2)


def landscape(
    inputs: MergeInputs,
    ctx: EvalContext,
    kind: str = "gta",
    bounds: tuple[tuple[float, float], tuple[float, float]] | None = None,
    resolution: int = 15,
    fisher_provider: FisherProvider | None = None,
    fisher_batch_size: int = DEFAULT_FISHER_BATCH,
    threads: int = 1,
) -> LandscapeGrid:
    """Average accuracy over a grid in the task vectors' plane.

    Plane coordinates map back to per-model coefficients by solving
    ``l1 tau_1 + l2 tau_2 = c1 u_hat + c2 v_hat``. "gta" cells evaluate the
    plane point itself; "df" cells apply the Fisher-weighted merge at the
    mapped coefficients.
    """
    if kind not in ("gta", "df"):
        raise ValueError(f"unknown landscape kind {kind!r}; use 'gta' or 'df'")
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    u_hat, v_hat, r11, r21, r22 = plane_basis(inputs)
    if bounds is None:
        bounds = default_landscape_bounds(inputs)
    axis1 = np.linspace(bounds[0][0], bounds[0][1], resolution)
    axis2 = np.linspace(bounds[1][0], bounds[1][1], resolution)
    if kind == "df" and fisher_provider is None:
        fisher_provider = make_fisher_provider(
            inputs, ctx.model_spec, ctx.datasets, fisher_batch_size, ctx.seed
        )

    lambdas1 = np.empty((resolution, resolution))
    lambdas2 = np.empty((resolution, resolution))
    cells = []
    for i, c1 in enumerate(axis1):
        for j, c2 in enumerate(axis2):
            l2 = c2 / r22
            l1 = (c1 - l2 * r21) / r11
            lambdas1[i, j], lambdas2[i, j] = l1, l2
            cells.append((i, j, c1, c2, l1, l2))

    def score(cell) -> tuple[int, int, float]:
        i, j, c1, c2, l1, l2 = cell
        if kind == "gta":
            model = plane_point(inputs.pretrained, u_hat, v_hat, c1, c2)
        else:
            coeffs = CoefficientVector(np.array([l1, l2]), unbounded=True)
            model = merge_df(inputs, coeffs, fisher_provider)
        return i, j, evaluate_ctx(model, ctx).average

    accuracy = np.empty((resolution, resolution))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(score, cells))
    else:
        results = [score(cell) for cell in cells]
    for i, j, acc in results:
        accuracy[i, j] = acc
    return LandscapeGrid(
        kind=kind,
        u_hat=u_hat,
        v_hat=v_hat,
        axis1=axis1,
        axis2=axis2,
        accuracy=accuracy,
        lambdas1=lambdas1,
        lambdas2=lambdas2,
    )


# --- ablation ----------------------------------------------------------------


@dataclass(frozen=True)
class AblationRow:
    """One configuration of the component ablation."""

    method: str
    lambdas: tuple[float, ...] | None
    validation_objective: float | None
    test_report: EvalReport


def ablate(
    inputs: MergeInputs,
    ctx: EvalContext,
    cfg: BOConfig,
    fisher_batch_size: int = DEFAULT_FISHER_BATCH,
) -> list[AblationRow]:
    """Five configurations sharing seeds and data: the Fisher-weighted
    coefficient search with both acquisitions, the search without Fisher
    weighting, Fisher merging without the search, and plain averaging.

    Optimization runs on the context's split; every row is scored on the
    test split.
    """
    test_ctx = replace(ctx, split="test", sample_ratio=1.0)
    provider = make_fisher_provider(
        inputs, ctx.model_spec, ctx.datasets, fisher_batch_size, ctx.seed
    )
    rows: list[AblationRow] = []

    def bo_row(method: str, acq, label: str) -> AblationRow:
        obj = objective_fn(inputs, method, ctx, fisher_provider=provider)
        best, _ = optimize(obj, replace(cfg, acquisition=acq))
        coeffs = CoefficientVector(np.array(best.lambdas))
        if method == "df":
            model = merge_df(inputs, coeffs, provider)
        else:
            model = unified_merge(inputs, coeffs, ImportanceWeights.identity())
        return AblationRow(label, best.lambdas, best.value, evaluate_ctx(model, test_ctx))

    rows.append(bo_row("df", ExpectedImprovement(), "df-ei"))
    rows.append(bo_row("df", UpperConfidenceBound(), "df-ucb"))
    rows.append(bo_row("gta", ExpectedImprovement(), "wo-fisher"))

    fishers = [provider(i, 1.0) for i in range(inputs.num_models)]
    fisher_model = merge_fisher(inputs, fishers)
    rows.append(AblationRow("wo-bo", None, None, evaluate_ctx(fisher_model, test_ctx)))
    rows.append(
        AblationRow("averaging", None, None, evaluate_ctx(merge_averaging(inputs), test_ctx))
    )
    return rows


# --- exports -----------------------------------------------------------------


def report_to_csv(report: EvalReport, path) -> None:
    """One row per task plus an 'average' row."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "split", "samples", "accuracy"])
        for task, acc in report.per_task.items():
            writer.writerow([task, report.split, report.sample_counts[task], f"{acc:.6f}"])
        total = sum(report.sample_counts.values())
        writer.writerow(["average", report.split, total, f"{report.average:.6f}"])


def report_to_json(report: EvalReport, path) -> None:
    payload = {
        "split": report.split,
        "per_task": report.per_task,
        "sample_counts": report.sample_counts,
        "average": report.average,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def landscape_to_csv(grid: LandscapeGrid, path) -> None:
    """One row per cell."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "row", "col", "coord1", "coord2", "lambda1", "lambda2", "accuracy"])
        for i in range(grid.axis1.size):
            for j in range(grid.axis2.size):
                writer.writerow(
                    [
                        grid.kind,
                        i,
                        j,
                        f"{grid.axis1[i]:.6f}",
                        f"{grid.axis2[j]:.6f}",
                        f"{grid.lambdas1[i, j]:.6f}",
                        f"{grid.lambdas2[i, j]:.6f}",
                        f"{grid.accuracy[i, j]:.6f}",
                    ]
                )


def landscape_to_json(grid: LandscapeGrid, path) -> None:
    payload = {
        "kind": grid.kind,
        "axis1": grid.axis1.tolist(),
        "axis2": grid.axis2.tolist(),
        "accuracy": grid.accuracy.tolist(),
        "lambdas1": grid.lambdas1.tolist(),
        "lambdas2": grid.lambdas2.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
