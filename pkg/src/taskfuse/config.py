"""Experiment config loading/validation and run manifests.

One documented schema (see README) drives every CLI command. Configs load
from JSON or TOML; unknown keys are rejected at every level. A manifest
records the fully resolved config plus CRC32 checksums of every artifact a
command wrote, and can itself be passed back as ``--config`` to reproduce
the run.
"""

from __future__ import annotations

import json
import sys
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from .errors import ConfigError
from .seeding import derive_seed
from .toymodels import ClassifierSpec, SyntheticTask, TrainConfig, block_means

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised only on 3.10
    import tomli as tomllib


def _expect_mapping(value, where: str) -> dict:
    if not isinstance(value, Mapping):
        raise ConfigError(f"{where} must be a table/object, got {type(value).__name__}")
    return dict(value)


def _take(raw: dict, where: str, required: Sequence[str], optional: Sequence[str]) -> dict:
    unknown = set(raw) - set(required) - set(optional)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    missing = [k for k in required if k not in raw]
    if missing:
        raise ConfigError(f"missing keys in {where}: {missing}")
    return raw


@dataclass(frozen=True)
class TaskSpecSection:
    task_id: str
    informative_dims: tuple[int, ...]
    mean_scale: float
    sign: float
    cov_scale: float
    splits: tuple[int, int, int]
    means: tuple[tuple[float, ...], ...] | None = None
    conflict_dims: tuple[int, ...] = ()
    conflict_scale: float = 1.0
    conflict_sign: float = 1.0


@dataclass(frozen=True)
class SGDSection:
    learning_rate: float = 0.1
    steps: int = 400
    batch_size: int = 32
    weight_decay: float = 0.0


@dataclass(frozen=True)
class BOSection:
    init_points: int = 10
    iterations: int = 50
    acquisition: str = "ei"
    kappa: float = 2.576


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    output_dir: str
    model: ClassifierSpec
    tasks: tuple[TaskSpecSection, ...]
    train: SGDSection = SGDSection()
    pretrain_steps: int = 150
    multitask_steps: int = 0
    bayesopt: BOSection = BOSection()
    fisher_batch: int = 30
    eval_split: str = "validation"
    eval_ratio: float = 1.0
    landscape_resolution: int = 15
    landscape_bounds: tuple[tuple[float, float], tuple[float, float]] | None = None

    def to_dict(self) -> dict:
        out = {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "model": {
                "input_dim": self.model.input_dim,
                "hidden_dim": self.model.hidden_dim,
                "num_classes": self.model.num_classes,
            },
            "tasks": [
                {
                    "task_id": t.task_id,
                    "informative_dims": list(t.informative_dims),
                    "mean_scale": t.mean_scale,
                    "sign": t.sign,
                    "cov_scale": t.cov_scale,
                    "splits": list(t.splits),
                    **({"means": [list(row) for row in t.means]} if t.means else {}),
                    **(
                        {
                            "conflict_dims": list(t.conflict_dims),
                            "conflict_scale": t.conflict_scale,
                            "conflict_sign": t.conflict_sign,
                        }
                        if t.conflict_dims
                        else {}
                    ),
                }
                for t in self.tasks
            ],
            "train": {
                "learning_rate": self.train.learning_rate,
                "steps": self.train.steps,
                "batch_size": self.train.batch_size,
                "weight_decay": self.train.weight_decay,
            },
            "pretrain_steps": self.pretrain_steps,
            "multitask_steps": self.multitask_steps,
            "bayesopt": {
                "init_points": self.bayesopt.init_points,
                "iterations": self.bayesopt.iterations,
                "acquisition": self.bayesopt.acquisition,
                "kappa": self.bayesopt.kappa,
            },
            "fisher_batch": self.fisher_batch,
            "eval_split": self.eval_split,
            "eval_ratio": self.eval_ratio,
            "landscape_resolution": self.landscape_resolution,
        }
        if self.landscape_bounds is not None:
            out["landscape_bounds"] = [list(b) for b in self.landscape_bounds]
        return out


_TOP_KEYS_REQUIRED = ("seed", "output_dir", "model", "tasks")
_TOP_KEYS_OPTIONAL = (
    "train",
    "pretrain_steps",
    "multitask_steps",
    "bayesopt",
    "fisher_batch",
    "eval_split",
    "eval_ratio",
    "landscape_resolution",
    "landscape_bounds",
)


def resolve_config(raw: Mapping) -> ExperimentConfig:
    """Validate a raw mapping against the schema and fill defaults."""
    raw = _take(_expect_mapping(raw, "config"), "config", _TOP_KEYS_REQUIRED, _TOP_KEYS_OPTIONAL)

    seed = raw["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a nonnegative integer, got {seed!r}")

    model_raw = _take(
        _expect_mapping(raw["model"], "model"),
        "model",
        ("input_dim", "hidden_dim", "num_classes"),
        (),
    )
    try:
        model = ClassifierSpec(
            int(model_raw["input_dim"]),
            int(model_raw["hidden_dim"]),
            int(model_raw["num_classes"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    tasks_raw = raw["tasks"]
    if not isinstance(tasks_raw, Sequence) or isinstance(tasks_raw, (str, bytes)) or not tasks_raw:
        raise ConfigError("tasks must be a nonempty list of task tables")
    tasks = []
    seen_ids = set()
    for i, entry in enumerate(tasks_raw):
        entry = _take(
            _expect_mapping(entry, f"tasks[{i}]"),
            f"tasks[{i}]",
            ("task_id", "informative_dims"),
            ("mean_scale", "sign", "cov_scale", "splits", "means",
             "conflict_dims", "conflict_scale", "conflict_sign"),
        )
        task_id = str(entry["task_id"])
        if task_id in seen_ids:
            raise ConfigError(f"duplicate task_id {task_id!r}")
        seen_ids.add(task_id)
        dims = tuple(int(d) for d in entry["informative_dims"])
        conflict_dims = tuple(int(d) for d in entry.get("conflict_dims", ()))
        for key, values in (("informative_dims", dims), ("conflict_dims", conflict_dims)):
            if any(d < 0 or d >= model.input_dim for d in values):
                raise ConfigError(
                    f"tasks[{i}].{key} out of range [0, {model.input_dim})"
                )
        splits = tuple(int(n) for n in entry.get("splits", (256, 256, 512)))
        if len(splits) != 3:
            raise ConfigError(f"tasks[{i}].splits must have three entries")
        means = entry.get("means")
        if means is not None:
            means = tuple(tuple(float(v) for v in row) for row in means)
        tasks.append(
            TaskSpecSection(
                task_id=task_id,
                informative_dims=dims,
                mean_scale=float(entry.get("mean_scale", 1.5)),
                sign=float(entry.get("sign", 1.0)),
                cov_scale=float(entry.get("cov_scale", 1.0)),
                splits=splits,
                means=means,
                conflict_dims=conflict_dims,
                conflict_scale=float(entry.get("conflict_scale", 1.0)),
                conflict_sign=float(entry.get("conflict_sign", 1.0)),
            )
        )

    train_raw = _take(
        _expect_mapping(raw.get("train", {}), "train"),
        "train",
        (),
        ("learning_rate", "steps", "batch_size", "weight_decay"),
    )
    train = SGDSection(
        learning_rate=float(train_raw.get("learning_rate", 0.1)),
        steps=int(train_raw.get("steps", 400)),
        batch_size=int(train_raw.get("batch_size", 32)),
        weight_decay=float(train_raw.get("weight_decay", 0.0)),
    )

    bo_raw = _take(
        _expect_mapping(raw.get("bayesopt", {}), "bayesopt"),
        "bayesopt",
        (),
        ("init_points", "iterations", "acquisition", "kappa"),
    )
    acquisition = str(bo_raw.get("acquisition", "ei")).lower()
    if acquisition not in ("ei", "ucb"):
        raise ConfigError(f"bayesopt.acquisition must be 'ei' or 'ucb', got {acquisition!r}")
    bo = BOSection(
        init_points=int(bo_raw.get("init_points", 10)),
        iterations=int(bo_raw.get("iterations", 50)),
        acquisition=acquisition,
        kappa=float(bo_raw.get("kappa", 2.576)),
    )
    if bo.init_points < 1 or bo.iterations < 0:
        raise ConfigError("bayesopt needs init_points >= 1 and iterations >= 0")

    eval_split = str(raw.get("eval_split", "validation"))
    if eval_split not in ("train", "validation", "test"):
        raise ConfigError(f"eval_split must be train/validation/test, got {eval_split!r}")
    eval_ratio = float(raw.get("eval_ratio", 1.0))
    if not 0.0 < eval_ratio <= 1.0:
        raise ConfigError(f"eval_ratio must be in (0, 1], got {eval_ratio}")

    bounds = raw.get("landscape_bounds")
    if bounds is not None:
        bounds = tuple(tuple(float(v) for v in b) for b in bounds)
        if len(bounds) != 2 or any(len(b) != 2 for b in bounds):
            raise ConfigError("landscape_bounds must be [[lo1, hi1], [lo2, hi2]]")

    return ExperimentConfig(
        seed=seed,
        output_dir=str(raw["output_dir"]),
        model=model,
        tasks=tuple(tasks),
        train=train,
        pretrain_steps=int(raw.get("pretrain_steps", 150)),
        multitask_steps=int(raw.get("multitask_steps", 0)),
        bayesopt=bo,
        fisher_batch=int(raw.get("fisher_batch", 30)),
        eval_split=eval_split,
        eval_ratio=eval_ratio,
        landscape_resolution=int(raw.get("landscape_resolution", 15)),
        landscape_bounds=bounds,
    )


def load_config(path) -> ExperimentConfig:
    """Load a config from JSON or TOML; a manifest file is also accepted,
    in which case its embedded resolved config is used."""
    path = Path(path)
    try:
        if path.suffix == ".toml":
            raw = tomllib.loads(path.read_text(encoding="utf-8"))
        else:
            raw = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: cannot parse config: {exc}") from exc
    if isinstance(raw, Mapping) and "config" in raw and "command" in raw:
        raw = raw["config"]
    return resolve_config(raw)


def build_tasks(cfg: ExperimentConfig) -> list[SyntheticTask]:
    """Materialize the config's task sections as synthetic task specs."""
    tasks = []
    for section in cfg.tasks:
        if section.means is not None:
            means = np.array(section.means, dtype=np.float64)
        else:
            means = block_means(
                cfg.model.input_dim,
                cfg.model.num_classes,
                section.informative_dims,
                section.mean_scale,
                section.sign,
            )
            if section.conflict_dims:
                means = means + block_means(
                    cfg.model.input_dim,
                    cfg.model.num_classes,
                    section.conflict_dims,
                    section.conflict_scale,
                    section.conflict_sign,
                )
        tasks.append(
            SyntheticTask(
                task_id=section.task_id,
                input_dim=cfg.model.input_dim,
                num_classes=cfg.model.num_classes,
                class_means=means,
                cov_scale=section.cov_scale,
                split_sizes=section.splits,
                seed=derive_seed(cfg.seed, f"data/{section.task_id}"),
            )
        )
    return tasks


def train_config(cfg: ExperimentConfig, label: str, steps: int | None = None) -> TrainConfig:
    """Train config with the seed derived from the stage label."""
    return TrainConfig(
        learning_rate=cfg.train.learning_rate,
        steps=cfg.train.steps if steps is None else steps,
        batch_size=cfg.train.batch_size,
        seed=derive_seed(cfg.seed, label),
        weight_decay=cfg.train.weight_decay,
    )


# --- manifests ----------------------------------------------------------------


def file_crc32(path) -> int:
    return zlib.crc32(Path(path).read_bytes()) & 0xFFFFFFFF


@dataclass
class RunManifest:
    """Record of one command: resolved config, artifacts, checksums."""

    command: str
    seed: int
    config: dict
    artifacts: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    version: str = __version__

    def add_artifact(self, name: str, path, base_dir) -> None:
        rel = str(Path(path).relative_to(base_dir))
        self.artifacts[name] = {"path": rel, "crc32": file_crc32(path)}

    def write(self, path) -> None:
        payload = {
            "command": self.command,
            "version": self.version,
            "seed": self.seed,
            "config": self.config,
            "artifacts": self.artifacts,
            "summary": self.summary,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
            fh.write("\n")


def load_manifest(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
