"""Empirical Fisher information over the model's own predictive distribution.

The diagonal estimator is the production path used by merging; the full
matrix is only for small instances, where it serves as an oracle for the
diagonal and for the geometric merging objective. Both take the exact
expectation over the label space (toy label spaces are small), never over
true labels — inputs are unlabeled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ParamVector, SegmentLayout, axpy_into_pretrained, read_container, write_container
from .toymodels import ClassifierSpec, per_label_grads

FULL_FISHER_DIM_CAP = 500


@dataclass(frozen=True, eq=False)
class FisherDiagonal:
    """Per-parameter nonnegative importance weights."""

    layout: SegmentLayout
    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=np.float64, copy=True).ravel()
        if arr.size != self.layout.total_len:
            raise ValueError(
                f"Fisher diagonal has {arr.size} entries, layout declares "
                f"{self.layout.total_len}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("Fisher diagonal contains non-finite entries")
        if np.any(arr < 0):
            raise ValueError("Fisher diagonal contains negative entries")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)


@dataclass(frozen=True, eq=False)
class FisherFull:
    """Dense symmetric PSD Fisher matrix for small instances."""

    dim: int
    matrix: np.ndarray

    def __post_init__(self) -> None:
        mat = np.array(self.matrix, dtype=np.float64, copy=True)
        if mat.shape != (self.dim, self.dim):
            raise ValueError(f"matrix shape {mat.shape} does not match dim {self.dim}")
        if not np.allclose(mat, mat.T, atol=1e-12, rtol=0):
            raise ValueError("Fisher matrix is not symmetric to 1e-12")
        eigs = np.linalg.eigvalsh(mat)
        if eigs.min() < -1e-10:
            raise ValueError(f"Fisher matrix has eigenvalue {eigs.min()} < -1e-10")
        mat.flags.writeable = False
        object.__setattr__(self, "matrix", mat)


def _probs_and_grads(params: ParamVector, spec: ClassifierSpec, inputs: np.ndarray):
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise ValueError("Fisher estimation needs a nonempty 2-D input batch")
    probs, grads = per_label_grads(params, spec, inputs)
    if not np.all(np.isfinite(grads)):
        raise ValueError("non-finite gradient encountered during Fisher estimation")
    return probs, grads


def empirical_fisher_diag(
    params: ParamVector, spec: ClassifierSpec, inputs: np.ndarray
) -> FisherDiagonal:
    """Diagonal empirical Fisher: mean over inputs of the label-expected
    squared gradient, element-wise."""
    probs, grads = _probs_and_grads(params, spec, inputs)
    diag = np.einsum("ny,nyd->d", probs, grads * grads) / inputs.shape[0]
    return FisherDiagonal(params.layout, diag)


def empirical_fisher_full(
    params: ParamVector,
    spec: ClassifierSpec,
    inputs: np.ndarray,
    dim_cap: int = FULL_FISHER_DIM_CAP,
) -> FisherFull:
    """Dense empirical Fisher; refuses dimensions above ``dim_cap``."""
    if len(params) > dim_cap:
        raise ValueError(
            f"full Fisher needs {len(params)} <= dim_cap ({dim_cap}) parameters"
        )
    probs, grads = _probs_and_grads(params, spec, inputs)
    mat = np.einsum("ny,nyd,nye->de", probs, grads, grads) / inputs.shape[0]
    mat = 0.5 * (mat + mat.T)
    return FisherFull(len(params), mat)


def fisher_at_scaled(
    pretrained: ParamVector,
    tau: ParamVector,
    lam: float,
    spec: ClassifierSpec,
    inputs: np.ndarray,
) -> FisherDiagonal:
    """Diagonal Fisher at the interpolated point ``pretrained + lam * tau``."""
    if not np.isfinite(lam):
        raise ValueError(f"interpolation coefficient is non-finite: {lam}")
    point = axpy_into_pretrained(pretrained, [(lam, tau)])
    return empirical_fisher_diag(point, spec, inputs)


def save_fisher(fisher: FisherDiagonal, path) -> None:
    """Persist a Fisher diagonal in the container format."""
    write_container(path, "fisher", {"layout": fisher.layout.to_json()}, fisher.values)


def load_fisher(path) -> FisherDiagonal:
    _, meta, values = read_container(path, expect_kind="fisher")
    return FisherDiagonal(SegmentLayout.from_json(meta["layout"]), values)
