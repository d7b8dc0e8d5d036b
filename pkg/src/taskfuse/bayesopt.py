"""Gaussian-process surrogate and sequential coefficient optimization.

The surrogate is a GP with a constant mean (the mean of the observed
values unless overridden) and a Matern-5/2 or RBF kernel over the unit
box of merging coefficients. Hyperparameters are refit every iteration by
maximizing the log marginal likelihood: the output scale has a closed
form given the length scale, and the length scale is found by a coarse
log-grid scan plus golden-section refinement, so fitting is deterministic.

Numerical jitter is expressed relative to the output variance: the factor
actually added to the kernel matrix is ``noise_jitter * output_scale**2``.
It starts at 1e-6 and doubles on Cholesky failure up to 1e-2, after which
fitting raises.

Proposals maximize the acquisition over a 4096-point scrambled Sobol
candidate set, refined by coordinate-wise golden-section ascent from the
best eight candidates. Ties resolve to the lowest-index candidate.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.spatial.distance import cdist
from scipy.stats import norm, qmc

from .errors import NumericalError
from .merge import CoefficientVector
from .seeding import derive_seed

KERNEL_FAMILIES = ("matern52", "rbf")

_DUPLICATE_TOL = 1e-10
_LS_MIN = 0.05
_OS2_FLOOR = 1e-10
_OS2_VAR_CAP = 100.0  # output variance may not exceed 100x the data variance
_JITTER_MAX = 1e-2
_SOBOL_LOG2_CANDIDATES = 12
_REFINE_TOP_K = 8
_REFINE_SWEEPS = 2
_GOLDEN_ITERS = 40


@dataclass(frozen=True)
class Kernel:
    family: str = "matern52"
    length_scale: float = 0.5
    output_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.family not in KERNEL_FAMILIES:
            raise ValueError(f"kernel family must be one of {KERNEL_FAMILIES}")
        if not (self.length_scale > 0 and self.output_scale > 0):
            raise ValueError("kernel scales must be positive")


def _correlation(family: str, length_scale: float, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    r = cdist(a, b) / length_scale
    if family == "rbf":
        return np.exp(-0.5 * r * r)
    s = math.sqrt(5.0) * r
    return (1.0 + s + s * s / 3.0) * np.exp(-s)


def kernel_matrix(kernel: Kernel, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Covariance matrix between two point sets."""
    return kernel.output_scale**2 * _correlation(kernel.family, kernel.length_scale, a, b)


@dataclass(frozen=True, eq=False)
class GPState:
    """Fitted GP: observations, kernel, and the cached Cholesky factor of
    the kernel matrix plus effective jitter."""

    points: np.ndarray
    values: np.ndarray
    kernel: Kernel
    noise_jitter: float
    mean_const: float
    chol: np.ndarray
    alpha: np.ndarray

    @property
    def effective_jitter(self) -> float:
        return self.noise_jitter * self.kernel.output_scale**2

    @property
    def num_observations(self) -> int:
        return self.points.shape[0]


def _as_points(points, dims: int | None = None) -> np.ndarray:
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if dims is not None and x.shape[1] != dims:
        raise ValueError(f"points have dimension {x.shape[1]}, expected {dims}")
    if x.min() < -1e-9 or x.max() > 1.0 + 1e-9:
        raise ValueError("coefficient points must lie in the unit box [0, 1]^M")
    return np.clip(x, 0.0, 1.0)


def _merge_duplicates(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    groups: list[list[int]] = []
    for i in range(x.shape[0]):
        for group in groups:
            if np.max(np.abs(x[group[0]] - x[i])) < _DUPLICATE_TOL:
                group.append(i)
                break
        else:
            groups.append([i])
    if len(groups) == x.shape[0]:
        return x, y
    xd = np.stack([x[g[0]] for g in groups])
    yd = np.array([y[g].mean() for g in groups])
    return xd, yd


def _chol_with_escalation(corr: np.ndarray, jitter: float) -> tuple[np.ndarray, float]:
    t = corr.shape[0]
    while jitter <= _JITTER_MAX:
        try:
            return cholesky(corr + jitter * np.eye(t), lower=True), jitter
        except np.linalg.LinAlgError:
            jitter *= 2.0
    raise NumericalError(
        f"kernel matrix is not positive definite even at jitter {_JITTER_MAX}"
    )


def _profiled_nlml(family: str, ls: float, x: np.ndarray, resid: np.ndarray, jitter: float):
    """Negative log marginal likelihood with the output scale profiled out.

    Returns ``(score, os2, jitter_used)``; lower score is better. The
    unconstrained optimum of the output variance given a length scale is
    ``resid' R^-1 resid / t``; it is clamped to a multiple of the data
    variance so near-degenerate correlation matrices cannot reward
    arbitrarily large output scales.
    """
    t = x.shape[0]
    corr = _correlation(family, ls, x, x)
    try:
        low, jitter_used = _chol_with_escalation(corr, jitter)
    except NumericalError:
        return np.inf, _OS2_FLOOR, jitter
    a = cho_solve((low, True), resid)
    s = float(resid @ a)
    data_var = float(resid @ resid) / t
    os2 = min(max(s / t, _OS2_FLOOR), max(_OS2_VAR_CAP * data_var, _OS2_FLOOR))
    logdet = 2.0 * float(np.log(np.diag(low)).sum())
    # general (non-profiled) form so the score stays valid when os2 is clamped
    return t * math.log(os2) + s / os2 + logdet, os2, jitter_used


def _golden_max(fn: Callable[[float], float], lo: float, hi: float, iters: int = _GOLDEN_ITERS):
    """Golden-section maximization on [lo, hi]; returns (x, fn(x))."""
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(iters):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = fn(d)
    return (c, fc) if fc >= fd else (d, fd)


def gp_fit(
    points,
    values,
    kernel_init: Kernel | None = None,
    jitter: float = 1e-6,
    mean: float | None = None,
    optimize_hyperparams: bool = True,
) -> GPState:
    """Fit the GP to observations, refitting kernel hyperparameters.

    Duplicate points (within 1e-10, max-abs) are merged by averaging their
    values. ``mean=None`` uses the mean of the observed values as the
    constant prior mean. With ``optimize_hyperparams=False`` (or fewer than
    two distinct observations) the given kernel is used as-is.
    """
    x = _as_points(points).copy()
    y = np.array(values, dtype=np.float64, copy=True).ravel()
    if x.shape[0] != y.size or y.size == 0:
        raise ValueError("need one value per point and at least one observation")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("observations contain non-finite entries")
    x, y = _merge_duplicates(x, y)
    t = x.shape[0]
    kernel = kernel_init if kernel_init is not None else Kernel()
    mean_const = float(np.mean(y)) if mean is None else float(mean)
    resid = y - mean_const

    if optimize_hyperparams and t >= 2 and float(resid @ resid) > 0.0:
        ls_hi = 2.0 * math.sqrt(x.shape[1])  # twice the unit-box diameter
        ls_grid = list(np.geomspace(_LS_MIN, ls_hi, 24))
        pairwise = cdist(x, x)
        med = float(np.median(pairwise[np.triu_indices(t, k=1)]))
        if med > 0:
            ls_grid.append(min(max(med, _LS_MIN), ls_hi))
        scores = [_profiled_nlml(kernel.family, ls, x, resid, jitter)[0] for ls in ls_grid]
        best = int(np.argmin(scores))
        log_lo = math.log(max(ls_grid[best] / 3.0, _LS_MIN))
        log_hi = math.log(min(ls_grid[best] * 3.0, ls_hi))
        log_ls, _ = _golden_max(
            lambda u: -_profiled_nlml(kernel.family, math.exp(u), x, resid, jitter)[0],
            log_lo,
            log_hi,
            iters=24,
        )
        candidates = [ls_grid[best], math.exp(log_ls)]
        scored = [
            (_profiled_nlml(kernel.family, ls, x, resid, jitter)[0], ls) for ls in candidates
        ]
        _, ls = min(scored)
        _, os2, _ = _profiled_nlml(kernel.family, ls, x, resid, jitter)
        kernel = Kernel(kernel.family, float(ls), float(math.sqrt(os2)))

    corr = _correlation(kernel.family, kernel.length_scale, x, x)
    low, jitter_used = _chol_with_escalation(corr, jitter)
    chol = kernel.output_scale * low
    # guard against an underflowing output variance (degenerate kernels)
    os2 = max(kernel.output_scale**2, np.finfo(np.float64).tiny)
    alpha = cho_solve((low, True), resid) / os2
    for arr in (x, y, chol, alpha):
        arr.flags.writeable = False
    return GPState(
        points=x,
        values=y,
        kernel=kernel,
        noise_jitter=jitter_used,
        mean_const=mean_const,
        chol=chol,
        alpha=alpha,
    )


def _posterior_batch(state: GPState, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    kq = kernel_matrix(state.kernel, state.points, queries)
    means = state.mean_const + kq.T @ state.alpha
    v = solve_triangular(state.chol, kq, lower=True)
    var = state.kernel.output_scale**2 - np.einsum("ij,ij->j", v, v)
    return means, np.sqrt(np.maximum(var, 0.0))


def gp_posterior(state: GPState, query) -> tuple[float, float]:
    """Posterior mean and standard deviation at one coefficient point."""
    if isinstance(query, CoefficientVector):
        query = query.lambdas
    q = _as_points(query, dims=state.points.shape[1])
    means, stds = _posterior_batch(state, q)
    return float(means[0]), float(stds[0])


@dataclass(frozen=True)
class ExpectedImprovement:
    """Expected positive excess over the best observed value."""

    best_so_far: float = float("-inf")


@dataclass(frozen=True)
class UpperConfidenceBound:
    """Posterior mean plus kappa standard deviations.

    kappa = 0 degenerates to pure exploitation (the posterior mean).
    """

    kappa: float = 2.576

    def __post_init__(self) -> None:
        if not self.kappa >= 0:
            raise ValueError(f"kappa must be nonnegative, got {self.kappa}")


Acquisition = Union[ExpectedImprovement, UpperConfidenceBound]


def _acquisition_batch(state: GPState, queries: np.ndarray, acq: Acquisition) -> np.ndarray:
    mu, sd = _posterior_batch(state, queries)
    if isinstance(acq, UpperConfidenceBound):
        return mu + acq.kappa * sd
    best = acq.best_so_far
    if not np.isfinite(best):
        best = float(state.values.max())
    improve = mu - best
    out = np.maximum(improve, 0.0)
    live = sd >= 1e-12
    if np.any(live):
        z = improve[live] / sd[live]
        out[live] = sd[live] * (z * norm.cdf(z) + norm.pdf(z))
    return out


def acquisition_value(state: GPState, query, acq: Acquisition) -> float:
    """Closed-form acquisition value at one coefficient point."""
    if isinstance(query, CoefficientVector):
        query = query.lambdas
    q = _as_points(query, dims=state.points.shape[1])
    return float(_acquisition_batch(state, q, acq)[0])


def propose_next(
    state: GPState,
    acq: Acquisition,
    bounds: np.ndarray | None = None,
    seed: int = 0,
) -> CoefficientVector:
    """Deterministic argmax of the acquisition over the bounded box."""
    m = state.points.shape[1]
    if bounds is None:
        bounds = np.tile([0.0, 1.0], (m, 1))
    bounds = np.asarray(bounds, dtype=np.float64)
    if bounds.shape != (m, 2):
        raise ValueError(f"bounds must have shape ({m}, 2)")
    lo, hi = bounds[:, 0], bounds[:, 1]

    sobol = qmc.Sobol(d=m, scramble=True, seed=seed)
    unit = sobol.random_base2(_SOBOL_LOG2_CANDIDATES)
    cand = lo + unit * (hi - lo)
    vals = _acquisition_batch(state, cand, acq)
    order = np.argsort(-vals, kind="stable")[:_REFINE_TOP_K]

    # Refine the top candidates by coordinate-wise golden-section ascent,
    # run in lockstep so each golden step costs one batched evaluation.
    pts = cand[order].copy()
    best = vals[order].copy()
    k = pts.shape[0]
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0

    def eval_coord(d: int, u: np.ndarray) -> np.ndarray:
        probe = pts.copy()
        probe[:, d] = u
        return _acquisition_batch(state, probe, acq)

    for _ in range(_REFINE_SWEEPS):
        for d in range(m):
            a = np.full(k, lo[d])
            b = np.full(k, hi[d])
            c = b - inv_phi * (b - a)
            e = a + inv_phi * (b - a)
            fc = eval_coord(d, c)
            fe = eval_coord(d, e)
            for _ in range(_GOLDEN_ITERS):
                left = fc >= fe
                b = np.where(left, e, b)
                a = np.where(left, a, c)
                c_cand = b - inv_phi * (b - a)
                e_cand = a + inv_phi * (b - a)
                probe = np.where(left, c_cand, e_cand)
                fp = eval_coord(d, probe)
                # rotate: on the left branch the old c becomes the new e,
                # on the right branch the old e becomes the new c
                e_next = np.where(left, c, e_cand)
                fe_next = np.where(left, fc, fp)
                c = np.where(left, c_cand, e)
                fc = np.where(left, fp, fe)
                e, fe = e_next, fe_next
            u_star = np.where(fc >= fe, c, e)
            f_star = np.maximum(fc, fe)
            for u_edge in (lo[d], hi[d]):
                f_edge = eval_coord(d, np.full(k, u_edge))
                better = f_edge > f_star
                u_star = np.where(better, u_edge, u_star)
                f_star = np.where(better, f_edge, f_star)
            improved = f_star > best
            pts[improved, d] = u_star[improved]
            best = np.where(improved, f_star, best)

    winner = int(np.argmax(best))  # first max wins: lowest-index candidate on ties
    return CoefficientVector(np.clip(pts[winner], 0.0, 1.0))


@dataclass(frozen=True)
class BOConfig:
    """Coefficient-search settings over the unit box [0, 1]^dims."""

    dims: int
    init_points: int = 10
    iterations: int = 50
    seed: int = 0
    acquisition: Acquisition = ExpectedImprovement()
    kernel: Kernel = Kernel()
    jitter: float = 1e-6

    def __post_init__(self) -> None:
        if self.dims < 1:
            raise ValueError("dims must be >= 1")
        if self.init_points < 1:
            raise ValueError("init_points must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


@dataclass(frozen=True)
class CoefficientPoint:
    """One evaluated coefficient vector and its objective value."""

    lambdas: tuple[float, ...]
    value: float


@dataclass(frozen=True)
class TrajectoryPoint:
    """One record of the optimization trajectory, in evaluation order."""

    iteration: int
    lambdas: tuple[float, ...]
    objective: float
    best_so_far: float
    phase: str


def _evaluate(objective, lambdas: np.ndarray) -> float:
    value = float(objective(CoefficientVector(lambdas)))
    if not np.isfinite(value):
        raise NumericalError(
            f"objective returned non-finite value {value} at lambdas={lambdas.tolist()}",
            lambdas=tuple(float(v) for v in lambdas),
        )
    return value


def optimize(
    objective: Callable[[CoefficientVector], float],
    cfg: BOConfig,
) -> tuple[CoefficientPoint, list[TrajectoryPoint]]:
    """Random initialization followed by sequential GP-guided proposals.

    The objective must be deterministic in its argument. Returns the best
    observed point and the full trajectory; the run is bit-reproducible
    given the config.
    """
    rng = np.random.default_rng(derive_seed(cfg.seed, "bo-init"))
    xs: list[np.ndarray] = []
    ys: list[float] = []
    trajectory: list[TrajectoryPoint] = []
    best = -np.inf

    def record(lambdas: np.ndarray, value: float, phase: str) -> None:
        nonlocal best
        best = max(best, value)
        trajectory.append(
            TrajectoryPoint(
                iteration=len(trajectory) + 1,
                lambdas=tuple(float(v) for v in lambdas),
                objective=value,
                best_so_far=best,
                phase=phase,
            )
        )

    for _ in range(cfg.init_points):
        lam = rng.random(cfg.dims)
        value = _evaluate(objective, lam)
        xs.append(lam)
        ys.append(value)
        record(lam, value, "init")

    for it in range(cfg.iterations):
        state = gp_fit(np.stack(xs), np.array(ys), kernel_init=cfg.kernel, jitter=cfg.jitter)
        acq = cfg.acquisition
        if isinstance(acq, ExpectedImprovement):
            acq = replace(acq, best_so_far=float(np.max(ys)))
        proposal = propose_next(
            state, acq, seed=derive_seed(cfg.seed, f"bo-propose/{it}")
        )
        lam = proposal.lambdas
        value = _evaluate(objective, lam)
        xs.append(np.asarray(lam))
        ys.append(value)
        record(lam, value, "bo")

    best_idx = int(np.argmax(ys))
    best_point = CoefficientPoint(
        lambdas=tuple(float(v) for v in xs[best_idx]), value=float(ys[best_idx])
    )
    return best_point, trajectory


def write_trajectory(path, trajectory: Sequence[TrajectoryPoint]) -> None:
    """Export a trajectory as JSON lines, one record per evaluation."""
    with open(path, "w", encoding="utf-8") as fh:
        for point in trajectory:
            fh.write(
                json.dumps(
                    {
                        "iteration": point.iteration,
                        "lambdas": list(point.lambdas),
                        "objective": point.objective,
                        "best_so_far": point.best_so_far,
                        "phase": point.phase,
                    },
                    sort_keys=True,
                )
            )
            fh.write("\n")


def load_trajectory(path) -> list[TrajectoryPoint]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        out.append(
            TrajectoryPoint(
                iteration=int(rec["iteration"]),
                lambdas=tuple(float(v) for v in rec["lambdas"]),
                objective=float(rec["objective"]),
                best_so_far=float(rec["best_so_far"]),
                phase=str(rec["phase"]),
            )
        )
    return out
