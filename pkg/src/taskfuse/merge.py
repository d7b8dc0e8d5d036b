"""Model merging: one unified merge function and every named method on top.

The unified operation combines task vectors as

    merged = pretrained + [sum_i C_i]^(-1) [M * sum_i C_i * lambda_i * tau_i]

where ``C_i`` is either the identity or a per-model Fisher diagonal.
Averaging (lambda_i = 1/M, C = I), general task arithmetic (C = I), Fisher
merging (lambda_i = 1/M, C = Fisher) and the dynamically Fisher-weighted
variant (C evaluated at the scaled points) are all parameterizations of
this one formula. TIES (trim / elect sign / disjoint mean) and DARE
(drop + rescale) preprocessing are provided for baseline comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import NumericalError
from .fisher import FisherDiagonal, FisherFull
from .params import Checkpoint, ParamVector, axpy_into_pretrained, check_same_layout, task_vector

# Total floor added to the combined diagonal weights at each coordinate,
# split evenly across models so that coordinates where every Fisher entry
# is zero fall back to the plain scaled sum of task vectors.
EPS_WEIGHT_FLOOR = 1e-8

# Tikhonov term for the dense symmetric solve in full-Fisher merging.
EPS_TIKHONOV = 1e-12

TIES_DEFAULT_KEEP_FRACTION = 0.2
TIES_LAMBDA_GRID = tuple(np.round(np.arange(0.8, 1.81, 0.1), 10))
DARE_DROP_GRID = (0.1, 0.3, 0.5, 0.7, 0.9)
TA_LAMBDA_GRID = tuple(np.round(np.arange(0.0, 1.01, 0.1), 10))


@dataclass(frozen=True)
class MergeInputs:
    """A shared initialization plus one task vector per fine-tuned model."""

    pretrained: ParamVector
    taus: tuple[ParamVector, ...]
    task_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        taus = tuple(self.taus)
        if not taus:
            raise ValueError("merging needs at least one task vector")
        for i, tau in enumerate(taus):
            check_same_layout(self.pretrained.layout, tau.layout, f"task vector {i}")
        names = tuple(self.task_names) or tuple(f"model-{i}" for i in range(len(taus)))
        if len(names) != len(taus):
            raise ValueError(
                f"{len(names)} task names given for {len(taus)} task vectors"
            )
        object.__setattr__(self, "taus", taus)
        object.__setattr__(self, "task_names", names)

    @property
    def num_models(self) -> int:
        return len(self.taus)

    @classmethod
    def from_checkpoints(
        cls, pretrained: Checkpoint, finetuned: Sequence[Checkpoint]
    ) -> "MergeInputs":
        taus = tuple(
            task_vector(ckpt.param_vector, pretrained.param_vector) for ckpt in finetuned
        )
        names = tuple(str(ckpt.provenance.get("task", f"model-{i}"))
                      for i, ckpt in enumerate(finetuned))
        return cls(pretrained.param_vector, taus, names)


@dataclass(frozen=True, eq=False)
class CoefficientVector:
    """Per-model scaling coefficients, held to [0, 1] unless overridden."""

    lambdas: np.ndarray
    unbounded: bool = False

    def __post_init__(self) -> None:
        arr = np.array(self.lambdas, dtype=np.float64, copy=True).ravel()
        if arr.size == 0:
            raise ValueError("coefficient vector is empty")
        if not np.all(np.isfinite(arr)):
            raise ValueError("coefficient vector contains non-finite entries")
        if not self.unbounded and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError(
                f"coefficients outside [0, 1]: {arr}; pass unbounded=True to override"
            )
        arr.flags.writeable = False
        object.__setattr__(self, "lambdas", arr)

    def __len__(self) -> int:
        return self.lambdas.size

    @classmethod
    def uniform(cls, num_models: int) -> "CoefficientVector":
        return cls(np.full(num_models, 1.0 / num_models))


@dataclass(frozen=True)
class ImportanceWeights:
    """Identity weights or one Fisher diagonal per model."""

    fishers: tuple[FisherDiagonal, ...] | None = None

    @classmethod
    def identity(cls) -> "ImportanceWeights":
        return cls(None)

    @classmethod
    def diagonal(cls, fishers: Sequence[FisherDiagonal]) -> "ImportanceWeights":
        return cls(tuple(fishers))

    @property
    def is_identity(self) -> bool:
        return self.fishers is None


FisherProvider = Callable[[int, float], FisherDiagonal]
"""Callable mapping (model index, coefficient) to the Fisher diagonal at
the correspondingly scaled parameter point."""


def unified_merge(
    inputs: MergeInputs,
    coeffs: CoefficientVector,
    weights: ImportanceWeights,
) -> ParamVector:
    """The general merge; see the module docstring for the formula.

    With identity weights the weight sums cancel exactly and the result is
    the plain scaled sum. With diagonal weights, each model's diagonal gets
    a floor of EPS_WEIGHT_FLOOR / M per coordinate before combining, so
    coordinates where no model has Fisher mass revert smoothly to the
    scaled sum and no division can blow up.
    """
    m = inputs.num_models
    if len(coeffs) != m:
        raise ValueError(f"{len(coeffs)} coefficients for {m} models")
    lam = coeffs.lambdas
    taus = np.stack([tau.values for tau in inputs.taus])
    if weights.is_identity:
        merged = inputs.pretrained.values + (lam[:, None] * taus).sum(axis=0)
        return ParamVector(inputs.pretrained.layout, merged)
    if len(weights.fishers) != m:
        raise ValueError(f"{len(weights.fishers)} Fisher diagonals for {m} models")
    for i, fd in enumerate(weights.fishers):
        check_same_layout(inputs.pretrained.layout, fd.layout, f"Fisher diagonal {i}")
    c = np.stack([fd.values for fd in weights.fishers]) + EPS_WEIGHT_FLOOR / m
    numer = m * (c * (lam[:, None] * taus)).sum(axis=0)
    denom = c.sum(axis=0)
    merged = inputs.pretrained.values + numer / denom
    return ParamVector(inputs.pretrained.layout, merged)


def merge_averaging(inputs: MergeInputs) -> ParamVector:
    """Uniform average: coefficients 1/M with identity weights."""
    return unified_merge(
        inputs, CoefficientVector.uniform(inputs.num_models), ImportanceWeights.identity()
    )


def merge_task_arithmetic(inputs: MergeInputs, lam: float) -> ParamVector:
    """One shared coefficient applied to the sum of task vectors."""
    if not np.isfinite(lam):
        raise ValueError(f"coefficient is non-finite: {lam}")
    coeffs = CoefficientVector(np.full(inputs.num_models, float(lam)), unbounded=True)
    return unified_merge(inputs, coeffs, ImportanceWeights.identity())


def merge_fisher(inputs: MergeInputs, fishers: Sequence[FisherDiagonal]) -> ParamVector:
    """Diagonal Fisher merging: coefficients 1/M with Fisher weights."""
    return unified_merge(
        inputs,
        CoefficientVector.uniform(inputs.num_models),
        ImportanceWeights.diagonal(fishers),
    )


def merge_fisher_full(
    inputs: MergeInputs,
    fishers: Sequence[FisherFull],
    dim_cap: int = 500,
    tikhonov: float = EPS_TIKHONOV,
) -> ParamVector:
    """Full-matrix Fisher merging via a symmetric PSD solve.

    Solves ``(sum_i F_i + eps I) theta = sum_i F_i theta_i`` where
    ``theta_i = pretrained + tau_i``. Only for small instances.
    """
    d = len(inputs.pretrained)
    if d > dim_cap:
        raise ValueError(f"full-Fisher merging needs {d} <= dim_cap ({dim_cap})")
    if len(fishers) != inputs.num_models:
        raise ValueError(
            f"{len(fishers)} Fisher matrices for {inputs.num_models} models"
        )
    for i, f in enumerate(fishers):
        if f.dim != d:
            raise ValueError(f"Fisher matrix {i} has dim {f.dim}, expected {d}")
    a = np.zeros((d, d))
    b = np.zeros(d)
    for f, tau in zip(fishers, inputs.taus):
        theta_i = inputs.pretrained.values + tau.values
        a += f.matrix
        b += f.matrix @ theta_i
    jitter = tikhonov
    while True:
        try:
            factor = cho_factor(a + jitter * np.eye(d), lower=True)
            break
        except np.linalg.LinAlgError:
            jitter *= 10.0
            if jitter > 1e-2:
                raise NumericalError(
                    "combined Fisher matrix is not positive definite even "
                    "after Tikhonov escalation"
                ) from None
    merged = cho_solve(factor, b)
    return ParamVector(inputs.pretrained.layout, merged)


def merge_df(
    inputs: MergeInputs,
    coeffs: CoefficientVector,
    fisher_fn: FisherProvider,
) -> ParamVector:
    """Fisher-weighted merge with diagonals evaluated at the scaled points.

    For each model the Fisher diagonal is taken at ``pretrained +
    lambda_i * tau_i`` (supplied by ``fisher_fn``), then combined through
    the unified merge with the same coefficients.
    """
    if len(coeffs) != inputs.num_models:
        raise ValueError(f"{len(coeffs)} coefficients for {inputs.num_models} models")
    fishers = [fisher_fn(i, float(lam)) for i, lam in enumerate(coeffs.lambdas)]
    return unified_merge(inputs, coeffs, ImportanceWeights.diagonal(fishers))


# --- TIES -------------------------------------------------------------------


def ties_preprocess(tau: ParamVector, keep_fraction: float) -> ParamVector:
    """Trim: zero all but the top ``keep_fraction`` of entries by magnitude.

    At least one entry is always kept; magnitude ties at the threshold are
    resolved in favor of the lower index.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    d = len(tau)
    k = min(d, max(1, int(round(keep_fraction * d))))
    order = np.argsort(-np.abs(tau.values), kind="stable")
    mask = np.zeros(d, dtype=bool)
    mask[order[:k]] = True
    return tau.with_values(np.where(mask, tau.values, 0.0))


def ties_combine(trimmed: Sequence[ParamVector]) -> ParamVector:
    """Elect the majority-magnitude sign per coordinate, then average only
    the entries agreeing with it (zero-sum coordinates elect positive)."""
    stack = np.stack([t.values for t in trimmed])
    pos_mass = np.where(stack > 0, stack, 0.0).sum(axis=0)
    neg_mass = np.where(stack < 0, -stack, 0.0).sum(axis=0)
    sign = np.where(pos_mass >= neg_mass, 1.0, -1.0)
    agree = (stack * sign) > 0
    counts = agree.sum(axis=0)
    total = np.where(agree, stack, 0.0).sum(axis=0)
    merged = np.divide(total, counts, out=np.zeros_like(total), where=counts > 0)
    return trimmed[0].with_values(merged)


def ties_merge(
    inputs: MergeInputs,
    keep_fraction: float = TIES_DEFAULT_KEEP_FRACTION,
    lam: float = 1.0,
) -> ParamVector:
    """Full trim / elect / disjoint-mean pipeline, scaled onto the base."""
    trimmed = [ties_preprocess(tau, keep_fraction) for tau in inputs.taus]
    merged_tau = ties_combine(trimmed)
    return axpy_into_pretrained(inputs.pretrained, [(lam, merged_tau)])


# --- DARE -------------------------------------------------------------------


def dare_preprocess(tau: ParamVector, drop_rate: float, seed: int) -> ParamVector:
    """Drop entries independently with probability ``drop_rate`` and rescale
    survivors by 1/(1 - drop_rate); unbiased and deterministic per seed."""
    if not 0.0 <= drop_rate < 1.0:
        raise ValueError(f"drop_rate must be in [0, 1), got {drop_rate}")
    if drop_rate == 0.0:
        return tau
    rng = np.random.default_rng(seed)
    keep = rng.random(len(tau)) >= drop_rate
    return tau.with_values(np.where(keep, tau.values / (1.0 - drop_rate), 0.0))


def dare_task_arithmetic(
    inputs: MergeInputs, lam: float, drop_rate: float, seed: int
) -> ParamVector:
    """Task arithmetic on drop-and-rescaled task vectors."""
    dropped = tuple(
        dare_preprocess(tau, drop_rate, seed + i) for i, tau in enumerate(inputs.taus)
    )
    sparse = MergeInputs(inputs.pretrained, dropped, inputs.task_names)
    return merge_task_arithmetic(sparse, lam)
