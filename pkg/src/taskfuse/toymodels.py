"""Synthetic multi-task data and tiny softmax classifiers with manual gradients.

Tasks are Gaussian-mixture classification problems whose informative
dimensions can be placed per task: giving each task its own block makes
merging easy, while sharing dimensions with opposite class-mean signs
induces the parameter interference that makes merging hard.

Classifiers are linear softmax models or one-hidden-layer tanh networks.
Gradients are written out by hand (and checked against finite differences
in the test suite), which keeps the per-label gradient machinery needed
for Fisher estimation exact and dependency-free.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DivergenceError
from .params import Checkpoint, ParamVector, SegmentLayout, check_same_layout, read_container, write_container
from .seeding import derive_seed


@dataclass(frozen=True)
class SyntheticTask:
    """Spec for one Gaussian-mixture classification task.

    ``class_means`` has shape (num_classes, input_dim); features for class c
    are drawn as ``class_means[c] + sqrt(cov_scale) * N(0, I)``.
    """

    task_id: str
    input_dim: int
    num_classes: int
    class_means: np.ndarray
    cov_scale: float
    split_sizes: tuple[int, int, int]
    seed: int

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if any(int(n) < 1 for n in self.split_sizes):
            raise ValueError(f"all split sizes must be >= 1, got {self.split_sizes}")
        means = np.array(self.class_means, dtype=np.float64)
        if means.shape != (self.num_classes, self.input_dim):
            raise ValueError(
                f"class_means shape {means.shape} does not match "
                f"({self.num_classes}, {self.input_dim})"
            )
        means.flags.writeable = False
        object.__setattr__(self, "class_means", means)
        object.__setattr__(self, "split_sizes", tuple(int(n) for n in self.split_sizes))


@dataclass(frozen=True)
class Dataset:
    """Deterministic train/validation/test splits of one task."""

    task_id: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        try:
            return {
                "train": (self.x_train, self.y_train),
                "validation": (self.x_val, self.y_val),
                "test": (self.x_test, self.y_test),
            }[name]
        except KeyError:
            raise ValueError(f"unknown split {name!r}; use train/validation/test") from None


def generate_task(task: SyntheticTask) -> Dataset:
    """Sample the task's splits; identical output for identical specs."""
    if task.cov_scale <= 0:
        raise ValueError(f"cov_scale must be positive, got {task.cov_scale}")
    rng = np.random.default_rng(task.seed)
    std = float(np.sqrt(task.cov_scale))
    parts = []
    for n in task.split_sizes:
        y = rng.integers(0, task.num_classes, size=n)
        x = task.class_means[y] + std * rng.normal(size=(n, task.input_dim))
        parts.extend([x, y])
    return Dataset(task.task_id, *parts)


def block_means(
    input_dim: int,
    num_classes: int,
    informative_dims: Sequence[int],
    scale: float,
    sign: float = 1.0,
) -> np.ndarray:
    """Class means that differ only on the given dimensions.

    Classes are spread over ``linspace(-1, 1, num_classes) * scale * sign``
    on the informative dimensions and are zero elsewhere.
    """
    means = np.zeros((num_classes, input_dim))
    spread = np.linspace(-1.0, 1.0, num_classes)
    for c in range(num_classes):
        means[c, list(informative_dims)] = spread[c] * scale * sign
    return means


def conflict_suite(
    num_tasks: int,
    own_dims: int = 3,
    shared_dims: int = 2,
    num_classes: int = 2,
    mean_scale: float = 1.5,
    conflict_scale: float = 1.0,
    cov_scale: float = 1.0,
    split_sizes: tuple[int, int, int] = (256, 256, 512),
    seed: int = 0,
) -> list[SyntheticTask]:
    """Suite of tasks with disjoint informative blocks plus shared
    conflict dimensions whose class-mean signs alternate across tasks."""
    input_dim = num_tasks * own_dims + shared_dims
    tasks = []
    for t in range(num_tasks):
        own = range(t * own_dims, (t + 1) * own_dims)
        means = block_means(input_dim, num_classes, own, mean_scale)
        if shared_dims:
            shared = range(num_tasks * own_dims, input_dim)
            sign = 1.0 if t % 2 == 0 else -1.0
            means += block_means(input_dim, num_classes, shared, conflict_scale, sign)
        tasks.append(
            SyntheticTask(
                task_id=f"task-{t}",
                input_dim=input_dim,
                num_classes=num_classes,
                class_means=means,
                cov_scale=cov_scale,
                split_sizes=split_sizes,
                seed=derive_seed(seed, f"data/task-{t}"),
            )
        )
    return tasks


# --- classifiers ------------------------------------------------------------


@dataclass(frozen=True)
class ClassifierSpec:
    """Linear softmax (hidden_dim=0) or one-hidden-layer tanh classifier."""

    input_dim: int
    hidden_dim: int
    num_classes: int

    def __post_init__(self) -> None:
        if self.input_dim < 1 or self.num_classes < 2 or self.hidden_dim < 0:
            raise ValueError(f"invalid classifier spec: {self}")

    @property
    def param_count(self) -> int:
        d, h, c = self.input_dim, self.hidden_dim, self.num_classes
        if h == 0:
            return c * d + c
        return h * d + h + c * h + c

    def layout(self) -> SegmentLayout:
        d, h, c = self.input_dim, self.hidden_dim, self.num_classes
        if h == 0:
            return SegmentLayout.from_sizes([("w", c * d), ("b", c)])
        return SegmentLayout.from_sizes(
            [("w1", h * d), ("b1", h), ("w2", c * h), ("b2", c)]
        )

    def init_params(self, rng: np.random.Generator) -> ParamVector:
        """Gaussian fan-in scaled weights, zero biases."""
        d, h, c = self.input_dim, self.hidden_dim, self.num_classes
        if h == 0:
            w = rng.normal(size=(c, d)) / np.sqrt(d)
            flat = np.concatenate([w.ravel(), np.zeros(c)])
        else:
            w1 = rng.normal(size=(h, d)) / np.sqrt(d)
            w2 = rng.normal(size=(c, h)) / np.sqrt(h)
            flat = np.concatenate([w1.ravel(), np.zeros(h), w2.ravel(), np.zeros(c)])
        return ParamVector(self.layout(), flat)

    def meta(self) -> dict:
        return {
            "param_count": self.param_count,
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_meta(cls, meta) -> "ClassifierSpec":
        return cls(int(meta["input_dim"]), int(meta["hidden_dim"]), int(meta["num_classes"]))


@dataclass(frozen=True)
class TrainConfig:
    """Plain SGD with optional decoupled weight decay."""

    learning_rate: float
    steps: int
    batch_size: int
    seed: int
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def _unpack(params: ParamVector, spec: ClassifierSpec):
    d, h, c = spec.input_dim, spec.hidden_dim, spec.num_classes
    if h == 0:
        return (
            params.segment("w").reshape(c, d),
            params.segment("b"),
        )
    return (
        params.segment("w1").reshape(h, d),
        params.segment("b1"),
        params.segment("w2").reshape(c, h),
        params.segment("b2"),
    )


def _check_inputs(spec: ClassifierSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(
            f"inputs have shape {x.shape}, expected (*, {spec.input_dim})"
        )
    return x


def _logits_and_cache(params: ParamVector, spec: ClassifierSpec, x: np.ndarray):
    if len(params) != spec.param_count:
        raise ValueError(
            f"parameter vector has {len(params)} entries, spec needs {spec.param_count}"
        )
    if spec.hidden_dim == 0:
        w, b = _unpack(params, spec)
        return x @ w.T + b, (x,)
    w1, b1, w2, b2 = _unpack(params, spec)
    a1 = np.tanh(x @ w1.T + b1)
    return a1 @ w2.T + b2, (x, a1, w2)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    # keep every entry strictly inside (0, 1) even for saturated logits;
    # the clip distorts the sum by well under 1e-12
    return np.clip(p, 1e-300, 1.0 - 2.0**-53)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward_batch(params: ParamVector, spec: ClassifierSpec, x: np.ndarray) -> np.ndarray:
    """Class-probability rows for a batch of feature vectors."""
    logits, _ = _logits_and_cache(params, spec, _check_inputs(spec, x))
    return _softmax(logits)


def forward(params: ParamVector, spec: ClassifierSpec, x: np.ndarray) -> np.ndarray:
    """Class-probability vector for a single feature vector."""
    return forward_batch(params, spec, x)[0]


def predict(params: ParamVector, spec: ClassifierSpec, x: np.ndarray) -> np.ndarray:
    """Argmax class probability; ties go to the lowest class index."""
    return np.argmax(forward_batch(params, spec, x), axis=1)


def _backprop(spec: ClassifierSpec, cache, dlogits: np.ndarray) -> np.ndarray:
    """Gradient of the summed loss given d(loss)/d(logits) per sample."""
    if spec.hidden_dim == 0:
        (x,) = cache
        gw = dlogits.T @ x
        gb = dlogits.sum(axis=0)
        return np.concatenate([gw.ravel(), gb])
    x, a1, w2 = cache
    gw2 = dlogits.T @ a1
    gb2 = dlogits.sum(axis=0)
    dz1 = (dlogits @ w2) * (1.0 - a1 * a1)
    gw1 = dz1.T @ x
    gb1 = dz1.sum(axis=0)
    return np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])


def _nll_and_grad_raw(
    params: ParamVector, spec: ClassifierSpec, batch: tuple[np.ndarray, np.ndarray]
) -> tuple[float, np.ndarray]:
    x, y = batch
    x = _check_inputs(spec, x)
    y = np.asarray(y)
    if y.shape != (x.shape[0],):
        raise ValueError(f"labels have shape {y.shape}, expected ({x.shape[0]},)")
    if y.size and (y.min() < 0 or y.max() >= spec.num_classes):
        raise ValueError(f"labels out of range [0, {spec.num_classes})")
    logits, cache = _logits_and_cache(params, spec, x)
    logp = _log_softmax(logits)
    n = x.shape[0]
    loss = -float(logp[np.arange(n), y].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    return loss, _backprop(spec, cache, dlogits)


def nll_and_grad(
    params: ParamVector, spec: ClassifierSpec, batch: tuple[np.ndarray, np.ndarray]
) -> tuple[float, ParamVector]:
    """Mean negative log-likelihood and its gradient over a labeled batch."""
    loss, grad = _nll_and_grad_raw(params, spec, batch)
    return loss, ParamVector(params.layout, grad)


def per_label_grads(
    params: ParamVector, spec: ClassifierSpec, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Predictive probabilities and per-sample, per-label NLL gradients.

    Returns ``(probs, grads)`` with ``probs[n, y] = p(y | x_n)`` and
    ``grads[n, y] = d(-log p(y | x_n)) / d(params)``; this is the raw
    material for Fisher information taken over the model's own
    predictive distribution.
    """
    x = _check_inputs(spec, x)
    logits, cache = _logits_and_cache(params, spec, x)
    probs = _softmax(logits)
    n, c = probs.shape
    grads = np.empty((n, c, spec.param_count))
    if spec.hidden_dim == 0:
        (xs,) = cache
        d = spec.input_dim
        for y in range(c):
            dl = probs.copy()
            dl[:, y] -= 1.0
            gw = np.einsum("nc,nd->ncd", dl, xs).reshape(n, c * d)
            grads[:, y, :] = np.concatenate([gw, dl], axis=1)
    else:
        xs, a1, w2 = cache
        d, h = spec.input_dim, spec.hidden_dim
        dtanh = 1.0 - a1 * a1
        for y in range(c):
            dl = probs.copy()
            dl[:, y] -= 1.0
            dz1 = (dl @ w2) * dtanh
            gw1 = np.einsum("nh,nd->nhd", dz1, xs).reshape(n, h * d)
            gw2 = np.einsum("nc,nh->nch", dl, a1).reshape(n, c * h)
            grads[:, y, :] = np.concatenate([gw1, dz1, gw2, dl], axis=1)
    return probs, grads


# --- training ---------------------------------------------------------------


def _sgd(
    start: ParamVector,
    spec: ClassifierSpec,
    datasets: Sequence[Dataset],
    cfg: TrainConfig,
) -> ParamVector:
    """SGD over training splits, batches drawn round-robin across tasks."""
    rng = np.random.default_rng(cfg.seed)
    theta = start.values.copy()
    decay = 1.0 - cfg.learning_rate * cfg.weight_decay
    for step in range(cfg.steps):
        ds = datasets[step % len(datasets)]
        x, y = ds.x_train, ds.y_train
        idx = rng.integers(0, x.shape[0], size=cfg.batch_size)
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grad = _nll_and_grad_raw(start.with_values(theta), spec, (x[idx], y[idx]))
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise DivergenceError(
                f"training diverged at step {step} on {ds.task_id!r}: loss={loss}"
            )
        theta = decay * theta - cfg.learning_rate * grad
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(
                f"training diverged at step {step} on {ds.task_id!r}: "
                "parameters became non-finite"
            )
    return start.with_values(theta)


def finetune(
    pretrained: ParamVector,
    spec: ClassifierSpec,
    task: Dataset,
    cfg: TrainConfig,
) -> Checkpoint:
    """Fine-tune the shared initialization on one task."""
    check_same_layout(pretrained.layout, spec.layout(), "finetune")
    final = _sgd(pretrained, spec, [task], cfg)
    return Checkpoint(
        param_vector=final,
        model_meta=spec.meta(),
        provenance={"task": task.task_id, "seed": cfg.seed, "steps": cfg.steps},
    )


def multitask_finetune(
    pretrained: ParamVector,
    spec: ClassifierSpec,
    tasks: Sequence[Dataset],
    cfg: TrainConfig,
) -> Checkpoint:
    """Train one model on all tasks jointly, batches round-robin."""
    if not tasks:
        raise ValueError("multitask_finetune needs at least one task")
    check_same_layout(pretrained.layout, spec.layout(), "multitask_finetune")
    final = _sgd(pretrained, spec, list(tasks), cfg)
    name = "+".join(ds.task_id for ds in tasks)
    return Checkpoint(
        param_vector=final,
        model_meta=spec.meta(),
        provenance={"task": name, "seed": cfg.seed, "steps": cfg.steps},
    )


def pretrain_shared_init(
    spec: ClassifierSpec,
    tasks: Sequence[Dataset] = (),
    cfg: TrainConfig | None = None,
    seed: int = 0,
) -> Checkpoint:
    """Shared initialization, optionally lightly trained on a task mixture."""
    params = spec.init_params(np.random.default_rng(seed))
    steps = 0
    if tasks and cfg is not None and cfg.steps > 0:
        params = _sgd(params, spec, list(tasks), cfg)
        steps = cfg.steps
    return Checkpoint(
        param_vector=params,
        model_meta=spec.meta(),
        provenance={"task": "pretrain-mixture", "seed": seed, "steps": steps},
    )


# --- persistence ------------------------------------------------------------


def save_dataset(dataset: Dataset, path) -> None:
    """Persist a dataset in the container format (dataset payload variant)."""
    arrays = [
        dataset.x_train, dataset.y_train,
        dataset.x_val, dataset.y_val,
        dataset.x_test, dataset.y_test,
    ]
    meta = {
        "task_id": dataset.task_id,
        "shapes": [list(a.shape) for a in arrays],
    }
    payload = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])
    write_container(path, "dataset", meta, payload)


def load_dataset(path) -> Dataset:
    _, meta, payload = read_container(path, expect_kind="dataset")
    arrays = []
    cursor = 0
    for shape in meta["shapes"]:
        size = int(np.prod(shape))
        arrays.append(payload[cursor : cursor + size].reshape(shape))
        cursor += size
    x_tr, y_tr, x_va, y_va, x_te, y_te = arrays
    return Dataset(
        meta["task_id"],
        x_tr, y_tr.astype(np.int64),
        x_va, y_va.astype(np.int64),
        x_te, y_te.astype(np.int64),
    )
