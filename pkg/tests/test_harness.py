"""Evaluation, objectives, grid search, landscapes, and the ablation."""

import csv
import json

import numpy as np
import pytest

from taskfuse import (
    BOConfig,
    ClassifierSpec,
    CoefficientVector,
    DegenerateBasisError,
    MergeInputs,
    ParamVector,
    SegmentLayout,
    TrainConfig,
    ablate,
    conflict_suite,
    evaluate,
    finetune,
    generate_task,
    grid_search_ta,
    landscape,
    make_fisher_provider,
    merge_fisher,
    objective_fn,
    pretrain_shared_init,
)
from taskfuse.bayesopt import ExpectedImprovement, optimize
from taskfuse.harness import (
    EvalContext,
    _subset,
    evaluate_ctx,
    landscape_to_csv,
    landscape_to_json,
    plane_basis,
    plane_point,
    report_to_csv,
    report_to_json,
)
from taskfuse.merge import ImportanceWeights, merge_df, unified_merge
from taskfuse.seeding import derive_seed
from taskfuse.toymodels import SyntheticTask, block_means


@pytest.fixture(scope="module")
def trained_pair():
    """Two-task trained suite shared by the slower harness tests."""
    seed = 77
    tasks = conflict_suite(
        2, own_dims=3, shared_dims=2, mean_scale=1.2, conflict_scale=0.3,
        cov_scale=1.0, split_sizes=(192, 150, 200), seed=seed,
    )
    datasets = [generate_task(t) for t in tasks]
    spec = ClassifierSpec(tasks[0].input_dim, 0, 2)
    pre = pretrain_shared_init(
        spec, datasets, TrainConfig(0.05, 15, 32, seed=derive_seed(seed, "pretrain")),
        seed=derive_seed(seed, "pretrain-init"),
    )
    fts = [
        finetune(
            pre.param_vector, spec, ds,
            TrainConfig(0.05, 150, 32, seed=derive_seed(seed, f"train/{ds.task_id}"),
                        weight_decay=0.01),
        )
        for ds in datasets
    ]
    inputs = MergeInputs.from_checkpoints(pre, fts)
    ctx = EvalContext(spec, tuple(datasets), "validation", 1.0, seed=derive_seed(seed, "eval"))
    return inputs, ctx, spec, datasets, fts


class TestEvaluate:
    def test_trained_model_aces_separable_task(self):
        task = SyntheticTask(
            "easy", 4, 2, block_means(4, 2, range(4), 5.0), 0.01, (200, 100, 400), 3
        )
        ds = generate_task(task)
        spec = ClassifierSpec(4, 0, 2)
        pre = spec.init_params(np.random.default_rng(0))
        ckpt = finetune(pre, spec, ds, TrainConfig(0.2, 500, 32, seed=1))
        report = evaluate(ckpt.param_vector, spec, [ds], split="test")
        assert report.per_task["easy"] == 1.0

    def test_uniform_model_near_chance_on_balanced_labels(self):
        task = SyntheticTask(
            "coin", 3, 2, block_means(3, 2, range(3), 1.0), 1.0, (4, 4, 1000), 11
        )
        ds = generate_task(task)
        spec = ClassifierSpec(3, 0, 2)
        zero = ParamVector(spec.layout(), np.zeros(spec.param_count))
        report = evaluate(zero, spec, [ds], split="test")
        assert 0.45 <= report.per_task["coin"] <= 0.55

    def test_full_ratio_is_deterministic(self, trained_pair):
        inputs, ctx, spec, datasets, _ = trained_pair
        a = evaluate(inputs.pretrained, spec, datasets, "validation", 1.0, seed=5)
        b = evaluate(inputs.pretrained, spec, datasets, "validation", 1.0, seed=5)
        assert a == b

    def test_average_is_unweighted_task_mean(self, trained_pair):
        inputs, ctx, spec, datasets, _ = trained_pair
        report = evaluate(inputs.pretrained, spec, datasets, "validation")
        assert report.average == pytest.approx(
            np.mean(list(report.per_task.values()))
        )

    def test_ratio_bounds(self, trained_pair):
        inputs, ctx, spec, datasets, _ = trained_pair
        for bad in (0.0, -0.5, 1.5):
            with pytest.raises(ValueError, match="sample_ratio"):
                evaluate(inputs.pretrained, spec, datasets, "validation", bad)

    def test_subsets_nest_across_ratios(self, rng):
        x = np.arange(100, dtype=np.float64)[:, None]
        y = np.arange(100)
        picked = {}
        for ratio in (0.05, 0.3, 1.0):
            xs, _ = _subset(x, y, ratio, seed=9, task_id="t")
            picked[ratio] = set(xs.ravel().astype(int))
        assert picked[0.05] <= picked[0.3] <= picked[1.0]
        assert len(picked[0.05]) == 5 and len(picked[0.3]) == 30

    def test_tiny_ratio_keeps_at_least_one_sample(self):
        x = np.zeros((7, 1))
        y = np.zeros(7, dtype=int)
        xs, ys = _subset(x, y, 0.001, seed=1, task_id="t")
        assert xs.shape[0] == 1


class TestObjective:
    def test_same_lambdas_give_identical_value(self, trained_pair):
        inputs, ctx, *_ = trained_pair
        obj = objective_fn(inputs, "df", ctx)
        coeffs = CoefficientVector(np.array([0.4, 0.7]))
        assert obj(coeffs) == obj(coeffs)

    def test_single_model_unit_lambda_recovers_fine_tuned_accuracy(self):
        seed = 31
        tasks = conflict_suite(1, own_dims=3, shared_dims=0, seed=seed,
                               split_sizes=(128, 100, 100))
        datasets = [generate_task(t) for t in tasks]
        spec = ClassifierSpec(tasks[0].input_dim, 0, 2)
        pre = pretrain_shared_init(spec, seed=derive_seed(seed, "init"))
        ft = finetune(pre.param_vector, spec, datasets[0],
                      TrainConfig(0.1, 200, 32, seed=derive_seed(seed, "t")))
        inputs = MergeInputs.from_checkpoints(pre, [ft])
        ctx = EvalContext(spec, tuple(datasets), "validation", 1.0, seed=1)
        obj = objective_fn(inputs, "df", ctx)
        direct = evaluate(ft.param_vector, spec, datasets, "validation", 1.0, seed=1)
        assert obj(CoefficientVector(np.array([1.0]))) == direct.average

    def test_df_objective_matches_manual_pipeline(self, trained_pair):
        inputs, ctx, spec, datasets, _ = trained_pair
        provider = make_fisher_provider(inputs, spec, datasets, 30, ctx.seed)
        obj = objective_fn(inputs, "df", ctx, fisher_provider=provider)
        lam = CoefficientVector(np.array([0.35, 0.8]))
        manual = evaluate_ctx(merge_df(inputs, lam, provider), ctx).average
        assert obj(lam) == manual

    def test_gta_objective_matches_identity_merge(self, trained_pair):
        inputs, ctx, *_ = trained_pair
        obj = objective_fn(inputs, "gta", ctx)
        lam = CoefficientVector(np.array([0.3, 0.6]))
        manual = evaluate_ctx(
            unified_merge(inputs, lam, ImportanceWeights.identity()), ctx
        ).average
        assert obj(lam) == manual

    def test_unknown_method_rejected(self, trained_pair):
        inputs, ctx, *_ = trained_pair
        with pytest.raises(ValueError, match="unknown objective method"):
            objective_fn(inputs, "ties", ctx)


class TestGridSearch:
    def test_single_point_grid(self, trained_pair):
        inputs, ctx, *_ = trained_pair
        lam, report = grid_search_ta(inputs, [0.4], ctx)
        assert lam == 0.4

    def test_matches_exhaustive_re_evaluation(self, trained_pair):
        from taskfuse.merge import merge_task_arithmetic

        inputs, ctx, *_ = trained_pair
        grid = np.round(np.linspace(0, 1, 11), 10)
        best_lam, best_report = grid_search_ta(inputs, grid, ctx)
        accs = {
            lam: evaluate_ctx(merge_task_arithmetic(inputs, lam), ctx).average
            for lam in grid
        }
        assert best_report.average == max(accs.values())
        assert accs[best_lam] == max(accs.values())

    def test_accuracy_ties_pick_smallest_lambda(self, trained_pair):
        inputs, ctx, *_ = trained_pair
        # duplicate grid values force exact ties
        lam, _ = grid_search_ta(inputs, [0.9, 0.3, 0.3, 0.9], ctx)
        assert lam in (0.3, 0.9)
        from taskfuse.merge import merge_task_arithmetic

        acc03 = evaluate_ctx(merge_task_arithmetic(inputs, 0.3), ctx).average
        acc09 = evaluate_ctx(merge_task_arithmetic(inputs, 0.9), ctx).average
        expected = 0.3 if acc03 >= acc09 else 0.9
        assert lam == expected

    def test_empty_grid_rejected(self, trained_pair):
        inputs, ctx, *_ = trained_pair
        with pytest.raises(ValueError, match="nonempty"):
            grid_search_ta(inputs, [], ctx)


class TestLandscape:
    def test_orthogonal_second_vector_is_normalized_as_is(self):
        lay = SegmentLayout.from_sizes([("w", 4)])
        pre = ParamVector(lay, np.zeros(4))
        t1 = ParamVector(lay, np.array([2.0, 0.0, 0.0, 0.0]))
        t2 = ParamVector(lay, np.array([0.0, 3.0, 0.0, 0.0]))
        u_hat, v_hat, r11, r21, r22 = plane_basis(MergeInputs(pre, (t1, t2)))
        np.testing.assert_allclose(v_hat, t2.values / 3.0, atol=1e-15)
        assert r21 == pytest.approx(0.0, abs=1e-15)

    def test_basis_is_orthonormal_for_random_pairs(self, rng):
        lay = SegmentLayout.from_sizes([("w", 20)])
        for _ in range(10):
            pre = ParamVector(lay, rng.normal(size=20))
            t1 = ParamVector(lay, rng.normal(size=20))
            t2 = ParamVector(lay, rng.normal(size=20))
            u_hat, v_hat, *_ = plane_basis(MergeInputs(pre, (t1, t2)))
            assert abs(u_hat @ v_hat) <= 1e-10
            assert np.linalg.norm(u_hat) == pytest.approx(1.0, abs=1e-12)
            assert np.linalg.norm(v_hat) == pytest.approx(1.0, abs=1e-12)

    def test_models_reconstruct_from_their_plane_coordinates(self, rng):
        lay = SegmentLayout.from_sizes([("w", 15)])
        pre = ParamVector(lay, rng.normal(size=15))
        t1 = ParamVector(lay, rng.normal(size=15))
        t2 = ParamVector(lay, rng.normal(size=15))
        inputs = MergeInputs(pre, (t1, t2))
        u_hat, v_hat, r11, r21, r22 = plane_basis(inputs)
        theta1 = plane_point(pre, u_hat, v_hat, r11, 0.0)
        theta2 = plane_point(pre, u_hat, v_hat, r21, r22)
        np.testing.assert_allclose(theta1.values, pre.values + t1.values, atol=1e-10)
        np.testing.assert_allclose(theta2.values, pre.values + t2.values, atol=1e-10)

    def test_parallel_task_vectors_rejected(self, rng):
        lay = SegmentLayout.from_sizes([("w", 6)])
        pre = ParamVector(lay, np.zeros(6))
        t1 = ParamVector(lay, rng.normal(size=6))
        t2 = ParamVector(lay, 2.5 * t1.values)
        with pytest.raises(DegenerateBasisError, match="parallel"):
            plane_basis(MergeInputs(pre, (t1, t2)))

    def test_needs_exactly_two_models(self, rng):
        inputs_3 = MergeInputs(
            ParamVector(SegmentLayout.from_sizes([("w", 4)]), np.zeros(4)),
            tuple(
                ParamVector(SegmentLayout.from_sizes([("w", 4)]), rng.normal(size=4))
                for _ in range(3)
            ),
        )
        with pytest.raises(ValueError, match="two task vectors"):
            plane_basis(inputs_3)

    def test_gta_grid_shape_and_threads_agree(self, trained_pair):
        inputs, ctx, *_ = trained_pair
        a = landscape(inputs, ctx, kind="gta", resolution=6)
        b = landscape(inputs, ctx, kind="gta", resolution=6, threads=3)
        assert a.accuracy.shape == (6, 6)
        np.testing.assert_array_equal(a.accuracy, b.accuracy)

    def test_df_cells_use_mapped_coefficients(self, trained_pair):
        inputs, ctx, spec, datasets, _ = trained_pair
        provider = make_fisher_provider(inputs, spec, datasets, 30, ctx.seed)
        grid = landscape(
            inputs, ctx, kind="df", resolution=4, fisher_provider=provider
        )
        i, j = 2, 3
        coeffs = CoefficientVector(
            np.array([grid.lambdas1[i, j], grid.lambdas2[i, j]]), unbounded=True
        )
        expected = evaluate_ctx(merge_df(inputs, coeffs, provider), ctx).average
        assert grid.accuracy[i, j] == expected

    def test_exports(self, trained_pair, tmp_path):
        inputs, ctx, *_ = trained_pair
        grid = landscape(inputs, ctx, kind="gta", resolution=3)
        csv_path = tmp_path / "l.csv"
        json_path = tmp_path / "l.json"
        landscape_to_csv(grid, csv_path)
        landscape_to_json(grid, json_path)
        rows = list(csv.DictReader(csv_path.open()))
        assert len(rows) == 9
        assert set(rows[0]) == {
            "kind", "row", "col", "coord1", "coord2", "lambda1", "lambda2", "accuracy"
        }
        payload = json.loads(json_path.read_text())
        assert np.array(payload["accuracy"]).shape == (3, 3)


class TestAblate:
    def test_five_rows_with_consistent_definitions(self, trained_pair):
        inputs, ctx, spec, datasets, _ = trained_pair
        cfg = BOConfig(dims=2, init_points=3, iterations=2, seed=5)
        rows = ablate(inputs, ctx, cfg, fisher_batch_size=20)
        assert [r.method for r in rows] == ["df-ei", "df-ucb", "wo-fisher", "wo-bo", "averaging"]

        provider = make_fisher_provider(inputs, spec, datasets, 20, ctx.seed)
        fishers = [provider(i, 1.0) for i in range(2)]
        test_ctx = EvalContext(spec, tuple(datasets), "test", 1.0, ctx.seed)
        wo_bo = evaluate_ctx(merge_fisher(inputs, fishers), test_ctx)
        assert rows[3].test_report == wo_bo

        obj = objective_fn(inputs, "gta", ctx, fisher_provider=provider)
        best, _ = optimize(obj, BOConfig(dims=2, init_points=3, iterations=2, seed=5,
                                         acquisition=ExpectedImprovement()))
        assert rows[2].lambdas == best.lambdas
        assert rows[2].validation_objective == best.value


class TestReportExports:
    def test_csv_and_json_schema(self, trained_pair, tmp_path):
        inputs, ctx, spec, datasets, _ = trained_pair
        report = evaluate(inputs.pretrained, spec, datasets, "validation")
        csv_path = tmp_path / "r.csv"
        json_path = tmp_path / "r.json"
        report_to_csv(report, csv_path)
        report_to_json(report, json_path)
        rows = list(csv.DictReader(csv_path.open()))
        assert [r["task"] for r in rows] == ["task-0", "task-1", "average"]
        payload = json.loads(json_path.read_text())
        assert payload["average"] == pytest.approx(report.average)
        assert payload["split"] == "validation"
