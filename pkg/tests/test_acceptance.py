"""Acceptance suite: every criterion at its stated tolerance, one pass/fail
line per criterion.

The behavioral criteria run on two fixed toy suites:
- a 3-task suite with disjoint informative blocks plus shared
  conflicting dimensions (method ordering, validation-ratio robustness);
- a 2-task suite with mild conflict (search efficiency, landscapes).
Both are trained once per seed and shared across criteria.
"""

import json
import time
import zlib
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest
from click.testing import CliRunner

import taskfuse as tf
from taskfuse.bayesopt import (
    BOConfig,
    ExpectedImprovement,
    Kernel,
    _acquisition_batch,
    gp_fit,
    gp_posterior,
    acquisition_value,
    kernel_matrix,
    optimize,
)
from taskfuse.cli import main as cli_main
from taskfuse.harness import (
    EvalContext,
    evaluate_ctx,
    landscape,
    make_fisher_provider,
    objective_fn,
)
from taskfuse.merge import (
    CoefficientVector,
    EPS_WEIGHT_FLOOR,
    ImportanceWeights,
    MergeInputs,
    merge_averaging,
    merge_df,
    merge_fisher,
    merge_fisher_full,
    unified_merge,
)
from taskfuse.seeding import derive_seed

SEEDS = (0, 1, 2, 3, 4)


@contextmanager
def criterion(number, name, budget_seconds, fixture_seconds=0.0):
    """Charge shared fixture build time against every criterion using it."""
    start = time.time()
    try:
        yield
    except BaseException:
        print(f"[acceptance] criterion {number} ({name}): FAIL")
        raise
    elapsed = time.time() - start + fixture_seconds
    assert elapsed < budget_seconds, (
        f"criterion {number} took {elapsed:.1f}s, budget {budget_seconds}s"
    )
    print(f"[acceptance] criterion {number} ({name}): PASS in {elapsed:.1f}s")


# --- shared trained suites ---------------------------------------------------


def build_suite(seed, num_tasks, conflict_scale, pretrain, finetune_cfg):
    tasks = tf.conflict_suite(
        num_tasks,
        own_dims=3,
        shared_dims=2,
        mean_scale=1.2,
        conflict_scale=conflict_scale,
        cov_scale=1.0,
        split_sizes=(256, 300, 512),
        seed=seed,
    )
    datasets = [tf.generate_task(t) for t in tasks]
    spec = tf.ClassifierSpec(tasks[0].input_dim, 0, 2)
    pre = tf.pretrain_shared_init(
        spec,
        datasets,
        tf.TrainConfig(*pretrain, seed=derive_seed(seed, "pretrain")),
        seed=derive_seed(seed, "pretrain-init"),
    )
    lr, steps, batch, wd = finetune_cfg
    fts = [
        tf.finetune(
            pre.param_vector,
            spec,
            ds,
            tf.TrainConfig(lr, steps, batch,
                           seed=derive_seed(seed, f"train/{ds.task_id}"),
                           weight_decay=wd),
        )
        for ds in datasets
    ]
    inputs = MergeInputs.from_checkpoints(pre, fts)
    ctx = EvalContext(spec, tuple(datasets), "validation", 1.0,
                      seed=derive_seed(seed, "eval"))
    test_ctx = replace(ctx, split="test")
    provider = make_fisher_provider(inputs, spec, datasets, 30,
                                    derive_seed(seed, "fisher"))
    return {
        "spec": spec,
        "datasets": datasets,
        "pretrained": pre,
        "finetuned": fts,
        "inputs": inputs,
        "ctx": ctx,
        "test_ctx": test_ctx,
        "provider": provider,
        "seed": seed,
    }


@pytest.fixture(scope="module")
def suite3():
    """Per-seed 3-task runs: DF(EI), GTA+BO, Fisher, Averaging, and the
    10%-validation DF run, all sharing seeds and data."""
    start = time.time()
    runs = {}
    for seed in SEEDS:
        s = build_suite(seed, num_tasks=3, conflict_scale=1.2,
                        pretrain=(0.05, 40, 32), finetune_cfg=(0.1, 400, 32, 0.0))
        bo = BOConfig(dims=3, init_points=10, iterations=30,
                      seed=derive_seed(seed, "bo"),
                      acquisition=ExpectedImprovement())

        obj_df = objective_fn(s["inputs"], "df", s["ctx"], fisher_provider=s["provider"])
        best_df, traj_df = optimize(obj_df, bo)
        model_df = merge_df(
            s["inputs"], CoefficientVector(np.array(best_df.lambdas)), s["provider"]
        )

        obj_gta = objective_fn(s["inputs"], "gta", s["ctx"], fisher_provider=s["provider"])
        best_gta, traj_gta = optimize(obj_gta, bo)
        model_gta = unified_merge(
            s["inputs"], CoefficientVector(np.array(best_gta.lambdas)),
            ImportanceWeights.identity(),
        )

        fishers = [s["provider"](i, 1.0) for i in range(3)]
        model_fisher = merge_fisher(s["inputs"], fishers)
        model_avg = merge_averaging(s["inputs"])

        ctx10 = replace(s["ctx"], sample_ratio=0.1)
        obj10 = objective_fn(s["inputs"], "df", ctx10, fisher_provider=s["provider"])
        best10, traj10 = optimize(obj10, bo)
        model10 = merge_df(
            s["inputs"], CoefficientVector(np.array(best10.lambdas)), s["provider"]
        )

        runs[seed] = {
            **s,
            "bo": bo,
            "test_df": evaluate_ctx(model_df, s["test_ctx"]).average,
            "test_gta": evaluate_ctx(model_gta, s["test_ctx"]).average,
            "test_fisher": evaluate_ctx(model_fisher, s["test_ctx"]).average,
            "test_avg": evaluate_ctx(model_avg, s["test_ctx"]).average,
            "test_df10": evaluate_ctx(model10, s["test_ctx"]).average,
            "zero_shot": evaluate_ctx(s["pretrained"].param_vector, s["test_ctx"]),
            "trajectories": [traj_df, traj_gta, traj10],
        }
    runs["build_seconds"] = time.time() - start
    return runs


@pytest.fixture(scope="module")
def suite2():
    """Per-seed 2-task runs: BO against the exhaustive coefficient grid,
    plus both landscape kinds."""
    start = time.time()
    runs = {}
    for seed in SEEDS:
        s = build_suite(seed, num_tasks=2, conflict_scale=0.3,
                        pretrain=(0.05, 15, 32), finetune_cfg=(0.05, 150, 32, 0.01))
        obj = objective_fn(s["inputs"], "df", s["ctx"], fisher_provider=s["provider"])
        grid_best = max(
            obj(CoefficientVector(np.array([l1, l2])))
            for l1 in np.linspace(0.0, 1.0, 21)
            for l2 in np.linspace(0.0, 1.0, 21)
        )
        bo = BOConfig(dims=2, init_points=10, iterations=20,
                      seed=derive_seed(seed, "bo"),
                      acquisition=ExpectedImprovement())
        best, trajectory = optimize(obj, bo)
        grids = {
            kind: landscape(s["inputs"], s["ctx"], kind=kind, resolution=15,
                            fisher_provider=s["provider"])
            for kind in ("gta", "df")
        }
        runs[seed] = {
            **s,
            "grid_best": grid_best,
            "bo_best": best,
            "trajectory": trajectory,
            "bo_config": bo,
            "landscapes": grids,
        }
    runs["build_seconds"] = time.time() - start
    return runs


# --- criteria ----------------------------------------------------------------


def test_criterion_1_reduction_suite(rng):
    with criterion(1, "unified merge reductions", budget_seconds=1.0):
        for _ in range(100):
            m = int(rng.integers(1, 5))
            d = int(rng.integers(3, 12))
            lay = tf.SegmentLayout.from_sizes([("w", d)])
            pre = tf.ParamVector(lay, rng.normal(size=d))
            taus = tuple(tf.ParamVector(lay, rng.normal(size=d)) for _ in range(m))
            inputs = MergeInputs(pre, taus)

            # Averaging: lambda = 1/M, identity weights
            avg = unified_merge(inputs, CoefficientVector.uniform(m),
                                ImportanceWeights.identity())
            expected = pre.values + sum(t.values for t in taus) / m
            assert np.abs(avg.values - expected).max() <= 1e-12

            # General task arithmetic: identity weights, arbitrary lambdas
            lam = rng.random(m)
            gta = unified_merge(inputs, CoefficientVector(lam),
                                ImportanceWeights.identity())
            expected = pre.values + sum(l * t.values for l, t in zip(lam, taus))
            assert np.abs(gta.values - expected).max() <= 1e-12

            # Fisher merging: lambda = 1/M, diagonal weights; scalar-loop oracle
            fishers = [tf.FisherDiagonal(lay, rng.uniform(0.05, 3.0, d))
                       for _ in range(m)]
            fm = unified_merge(inputs, CoefficientVector.uniform(m),
                               ImportanceWeights.diagonal(fishers))
            assert np.array_equal(fm.values, merge_fisher(inputs, fishers).values)
            eps = EPS_WEIGHT_FLOOR / m
            for k in range(d):
                num = sum((fishers[i].values[k] + eps) * (1.0 / m) * taus[i].values[k]
                          for i in range(m)) * m
                den = sum(fishers[i].values[k] + eps for i in range(m))
                assert abs(fm.values[k] - (pre.values[k] + num / den)) <= 1e-12


def test_criterion_2_geometric_objective_oracle(rng):
    def gd_minimizer(eigs, thetas, x0):
        # gradient of sum_i ||L_i^(1/2) Q_i' (theta_i - x)||^2 assembled from
        # the eigendecompositions, minimized by fixed-step gradient descent
        mats = [(q, lam) for q, lam in eigs]
        lam_max = sum(lam.max() for _, lam in mats)
        step = 1.0 / (2.0 * lam_max)
        x = x0.copy()
        for _ in range(60_000):
            grad = np.zeros_like(x)
            for (q, lam), theta_i in zip(mats, thetas):
                grad += 2.0 * (q @ (lam * (q.T @ (x - theta_i))))
            x -= step * grad
            if np.linalg.norm(grad) <= 1e-12 * max(1.0, np.linalg.norm(x)):
                break
        return x

    with criterion(2, "full-Fisher merge vs geometric minimizer", budget_seconds=30.0):
        for trial in range(10):
            d = int(rng.integers(10, 51))
            m = int(rng.integers(2, 4))
            lay = tf.SegmentLayout.from_sizes([("w", d)])
            pre = tf.ParamVector(lay, rng.normal(size=d))
            taus = tuple(tf.ParamVector(lay, rng.normal(size=d)) for _ in range(m))
            inputs = MergeInputs(pre, taus)
            eigs, fishers = [], []
            for _ in range(m):
                q, _ = np.linalg.qr(rng.normal(size=(d, d)))
                lam = rng.uniform(0.1, 3.0, d)
                eigs.append((q, lam))
                fishers.append(tf.FisherFull(d, q @ np.diag(lam) @ q.T))

            merged = merge_fisher_full(inputs, fishers)
            thetas = [pre.values + t.values for t in taus]
            oracle = gd_minimizer(eigs, thetas, x0=np.mean(thetas, axis=0))
            rel_err = np.linalg.norm(merged.values - oracle) / np.linalg.norm(merged.values)
            assert rel_err <= 1e-6, f"trial {trial}: relative error {rel_err}"

            residual = np.zeros(d)
            for f, theta_i in zip(fishers, thetas):
                residual += f.matrix @ (merged.values - theta_i)
            assert np.linalg.norm(residual) <= 1e-8 * np.linalg.norm(merged.values)


def test_criterion_3_fisher_oracle(rng):
    with criterion(3, "diagonal Fisher vs full; gradients vs differences",
                   budget_seconds=10.0):
        specs = [tf.ClassifierSpec(3, 0, 2), tf.ClassifierSpec(3, 4, 3),
                 tf.ClassifierSpec(5, 6, 2)]
        for spec in specs:
            params = tf.ParamVector(
                spec.layout(), 0.6 * rng.normal(size=spec.param_count)
            )
            x = rng.normal(size=(12, spec.input_dim))
            diag = tf.empirical_fisher_diag(params, spec, x)
            full = tf.empirical_fisher_full(params, spec, x)
            assert np.abs(np.diag(full.matrix) - diag.values).max() <= 1e-10

            y = rng.integers(0, spec.num_classes, size=12)
            _, grad = tf.nll_and_grad(params, spec, (x, y))
            fd = np.empty(spec.param_count)
            h = 1e-5
            for i in range(spec.param_count):
                plus, minus = params.values.copy(), params.values.copy()
                plus[i] += h
                minus[i] -= h
                lp, _ = tf.nll_and_grad(params.with_values(plus), spec, (x, y))
                lm, _ = tf.nll_and_grad(params.with_values(minus), spec, (x, y))
                fd[i] = (lp - lm) / (2 * h)
            assert np.abs(grad.values - fd).max() <= 1e-6


def test_criterion_4_gp_correctness(rng):
    with criterion(4, "GP posterior, EI closed form", budget_seconds=60.0):
        # posterior dense-inverse oracle on 20 instances
        for trial in range(20):
            m = int(rng.integers(1, 4))
            t = int(rng.integers(1, 16))
            x = rng.random((t, m))
            y = rng.normal(size=t)
            kernel = Kernel(
                family=("matern52", "rbf")[trial % 2],
                length_scale=float(rng.uniform(0.1, 2.0)),
                output_scale=float(rng.uniform(0.2, 2.0)),
            )
            state = gp_fit(x, y, kernel_init=kernel, jitter=1e-4,
                           optimize_hyperparams=False)
            q = rng.random((1, m))
            k_xx = kernel_matrix(state.kernel, state.points, state.points)
            k_xx += state.effective_jitter * np.eye(state.num_observations)
            k_qx = kernel_matrix(state.kernel, q, state.points)
            k_inv = np.linalg.inv(k_xx)
            resid = state.values - state.mean_const
            ref_mean = float((state.mean_const + k_qx @ k_inv @ resid)[0])
            ref_var = float((state.kernel.output_scale**2 - k_qx @ k_inv @ k_qx.T)[0, 0])
            mean, std = gp_posterior(state, q[0])
            assert abs(mean - ref_mean) <= 1e-8
            assert abs(std - np.sqrt(max(ref_var, 0.0))) <= 1e-8

        # EI closed form vs 1e6-draw Monte Carlo at 5 queries
        x = rng.random((8, 2))
        y = np.sin(5 * x[:, 0]) + 0.4 * x[:, 1]
        state = gp_fit(x, y, jitter=1e-8)
        acq = ExpectedImprovement(best_so_far=float(y.max()))
        mc_rng = np.random.default_rng(2024)
        for q in rng.random((5, 2)):
            mean, std = gp_posterior(state, q)
            draws = mean + std * mc_rng.standard_normal(1_000_000)
            mc = float(np.maximum(draws - acq.best_so_far, 0.0).mean())
            assert abs(acquisition_value(state, q, acq) - mc) <= 1e-3

        # EI at observed points of a noiseless GP
        xo = np.array([[0.15, 0.3], [0.55, 0.75], [0.85, 0.2]])
        yo = np.array([0.2, 0.9, 0.4])
        state = gp_fit(xo, yo, kernel_init=Kernel("matern52", 0.4, 1.0),
                       jitter=1e-18, optimize_hyperparams=False)
        acq = ExpectedImprovement(best_so_far=float(yo.max()))
        for row in xo:
            assert acquisition_value(state, row, acq) <= 1e-8


def test_criterion_5_bo_efficiency(suite2):
    with criterion(5, "BO within 1 point of the exhaustive grid", budget_seconds=300.0,
                   fixture_seconds=suite2["build_seconds"]):
        hits = 0
        for seed in SEEDS:
            run = suite2[seed]
            gap = run["grid_best"] - run["bo_best"].value
            hits += gap <= 0.01 + 1e-12
        assert hits >= 4, f"only {hits}/5 seeds within 1 point of the grid optimum"


def test_criterion_6_method_ordering(suite3):
    with criterion(6, "method ordering on the conflict suite", budget_seconds=600.0,
                   fixture_seconds=suite3["build_seconds"]):
        df = float(np.mean([suite3[s]["test_df"] for s in SEEDS]))
        gta = float(np.mean([suite3[s]["test_gta"] for s in SEEDS]))
        fisher = float(np.mean([suite3[s]["test_fisher"] for s in SEEDS]))
        avg = float(np.mean([suite3[s]["test_avg"] for s in SEEDS]))
        assert df >= avg, f"DF {df:.4f} < Averaging {avg:.4f}"
        assert df >= fisher, f"DF {df:.4f} < Fisher merging {fisher:.4f}"
        assert df >= gta - 0.005, f"DF {df:.4f} < GTA+BO {gta:.4f} - 0.5pt"
        for seed in SEEDS:
            run = suite3[seed]
            zero = run["zero_shot"].per_task
            for ft, ds in zip(run["finetuned"], run["datasets"]):
                own = evaluate_ctx(ft.param_vector, run["test_ctx"]).per_task[ds.task_id]
                assert own > zero[ds.task_id], (
                    f"seed {seed}: fine-tuned {ds.task_id} does not beat zero-shot"
                )


def test_criterion_7_validation_ratio_robustness(suite3):
    with criterion(7, "10% validation within 2 points of full", budget_seconds=600.0,
                   fixture_seconds=suite3["build_seconds"]):
        hits = sum(
            abs(suite3[s]["test_df10"] - suite3[s]["test_df"]) <= 0.02 for s in SEEDS
        )
        assert hits >= 3, f"only {hits}/5 seeds within 2 points"


def test_criterion_8_trajectory_properties(suite2, suite3):
    with criterion(8, "monotone best-so-far, exact lengths", budget_seconds=60.0):
        checked = 0
        for seed in SEEDS:
            for trajectory in suite3[seed]["trajectories"]:
                cfg = suite3[seed]["bo"]
                assert len(trajectory) == cfg.init_points + cfg.iterations
                best = [p.best_so_far for p in trajectory]
                assert all(b2 >= b1 for b1, b2 in zip(best, best[1:]))
                checked += 1
            trajectory = suite2[seed]["trajectory"]
            cfg = suite2[seed]["bo_config"]
            assert len(trajectory) == cfg.init_points + cfg.iterations
            best = [p.best_so_far for p in trajectory]
            assert all(b2 >= b1 for b1, b2 in zip(best, best[1:]))
            checked += 1
        assert checked == 20


def test_criterion_9_landscape_structure(suite2):
    with criterion(9, "argmax cell away from the low-coefficient corner",
                   budget_seconds=300.0, fixture_seconds=suite2["build_seconds"]):
        hits = 0
        for seed in SEEDS:
            ok = True
            for kind in ("gta", "df"):
                grid = suite2[seed]["landscapes"][kind]
                i, j = grid.argmax_cell()
                frac1 = grid.axis1[i] / grid.axis1[-1]
                frac2 = grid.axis2[j] / grid.axis2[-1]
                ok = ok and frac1 > 0.25 and frac2 > 0.25
            hits += ok
        assert hits >= 4, f"only {hits}/5 seeds place the optimum away from the corner"


def test_criterion_10_reproducibility(tmp_path):
    with criterion(10, "manifest reruns reproduce artifact checksums",
                   budget_seconds=120.0):
        config = {
            "seed": 11,
            "output_dir": str(tmp_path / "run"),
            "model": {"input_dim": 8, "hidden_dim": 0, "num_classes": 2},
            "tasks": [
                {"task_id": "a", "informative_dims": [0, 1, 2],
                 "splits": [128, 100, 100]},
                {"task_id": "b", "informative_dims": [3, 4, 5],
                 "splits": [128, 100, 100]},
            ],
            "train": {"learning_rate": 0.05, "steps": 80, "batch_size": 32},
            "pretrain_steps": 10,
            "bayesopt": {"init_points": 3, "iterations": 2},
        }
        config_path = tmp_path / "exp.json"
        config_path.write_text(json.dumps(config))
        runner = CliRunner()

        def crcs():
            run = tmp_path / "run"
            return {
                str(p.relative_to(run)): zlib.crc32(p.read_bytes())
                for p in sorted(run.rglob("*"))
                if p.is_file() and p.suffix in (".ckpt", ".ds", ".jsonl", ".csv")
            }

        for command in (["train"], ["optimize"]):
            result = runner.invoke(cli_main, command + ["--config", str(config_path)])
            assert result.exit_code == 0, result.output
        before = crcs()

        for command, manifest in (
            (["train"], "manifest_train.json"),
            (["optimize"], "manifest_optimize.json"),
        ):
            result = runner.invoke(
                cli_main,
                command + ["--config", str(tmp_path / "run" / manifest)],
            )
            assert result.exit_code == 0, result.output
        assert crcs() == before
