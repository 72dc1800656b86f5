"""
攻击损失、生成先验、简单反演与三阶段流水线单元测试
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError

import mia_lab.inversion as inversion
from mia_lab.classifier import MlpClassifier, MlpConfig
from mia_lab.data import BlobSpec, JitterTransform, apply_jitter, gen_blobs
from mia_lab.inversion import (
    AttackConfig,
    AttackRun,
    LossKind,
    OptimizationResult,
    Prior,
    PriorKind,
    ce_identity_loss,
    evaluate_loss,
    fit_pca_prior,
    optimize_latents,
    parse_loss_kind,
    poincare_distance,
    poincare_loss,
    read_attack_run,
    robust_confidence,
    run_ppa,
    sample_candidates,
    select_results,
    simple_invert,
)
from mia_lab.optim import OptimizerConfig
from mia_lab.smoothing import smooth_labels, softmax
from mia_lab.verification import central_difference
from utils.artifacts import derive_seed
from utils.error_handler import (
    DegenerateInputError,
    InvalidArgumentError,
    InvalidStateError,
    NumericFailureError,
    StageError,
)


def ppa_config(**overrides) -> AttackConfig:
    settings_ = dict(
        loss=LossKind.POINCARE,
        optimizer=OptimizerConfig(kind="adam", lr=0.05, betas=(0.1, 0.1)),
        max_steps=5,
        stop_confidence=None,
        pool_size=12,
        candidates_per_class=3,
        final_per_class=2,
        transform=JitterTransform(sigma=0.1, seed=17),
        transform_count=2,
        seed=23,
    )
    settings_.update(overrides)
    return AttackConfig(**settings_)


@pytest.fixture(scope="module")
def pca_prior():
    aux = gen_blobs(BlobSpec.toy_default(seed=31).model_copy(update={"samples_per_class": 20}))
    return fit_pca_prior(aux.features, 2)


class TestLosses:
    """logits 空间的攻击损失"""

    def test_ce_identity_matches_hard_smoothed_ce(self, rng):
        logits = rng.normal(size=4)
        evaluation = evaluate_loss(LossKind.SMOOTHED_CE, logits, 2, alpha=0.0)
        assert evaluation.value == pytest.approx(ce_identity_loss(logits, 2))
        expected = softmax(logits)
        expected[2] -= 1.0
        np.testing.assert_allclose(evaluation.logit_grad, expected)

    def test_smoothed_ce_gradient(self, rng):
        logits = rng.normal(size=5)
        evaluation = evaluate_loss(LossKind.SMOOTHED_CE, logits, 1, alpha=0.1)
        np.testing.assert_allclose(evaluation.logit_grad, softmax(logits) - smooth_labels(1, 0.1, 5).values)

    def test_identity_logit(self):
        evaluation = evaluate_loss(LossKind.IDENTITY_LOGIT, np.array([0.5, -1.0, 2.0]), 1)
        assert evaluation.value == 1.0
        np.testing.assert_array_equal(evaluation.logit_grad, [0.0, -1.0, 0.0])

    @given(
        u=st.lists(st.floats(-0.5, 0.5), min_size=3, max_size=3),
        v=st.lists(st.floats(-0.5, 0.5), min_size=3, max_size=3),
    )
    @settings(max_examples=100, deadline=None)
    def test_poincare_distance_symmetric(self, u, v):
        assert poincare_distance(u, v) == pytest.approx(poincare_distance(v, u), rel=1e-12, abs=1e-12)
        assert poincare_distance(u, u) == 0.0

    def test_poincare_distance_requires_ball(self):
        with pytest.raises(InvalidArgumentError):
            poincare_distance([1.0, 0.0], [0.0, 0.0])

    def test_poincare_gradient_matches_finite_differences(self, rng):
        for _ in range(10):
            logits = rng.normal(size=4)
            evaluation = evaluate_loss(LossKind.POINCARE, logits, 3)
            numeric = central_difference(lambda o: poincare_loss(o, 3), logits)
            np.testing.assert_allclose(evaluation.logit_grad, numeric, atol=1e-6)

    def test_poincare_clamps_one_hot_logits(self):
        evaluation = evaluate_loss(LossKind.POINCARE, np.array([5.0, 0.0, 0.0]), 1)
        assert evaluation.clamped
        assert np.isfinite(evaluation.value)
        assert np.all(np.isfinite(evaluation.logit_grad))

    def test_poincare_zero_logits(self):
        with pytest.raises(DegenerateInputError):
            poincare_loss(np.zeros(3), 0)

    def test_unknown_kind_and_class(self):
        with pytest.raises(InvalidArgumentError):
            parse_loss_kind("triplet")
        with pytest.raises(InvalidArgumentError):
            evaluate_loss(LossKind.CE_IDENTITY, np.zeros(3), 3)


class TestPrior:
    """生成先验"""

    def test_identity_prior_copies(self):
        prior = Prior.identity(2)
        z = np.array([1.0, 2.0])
        decoded = prior.decode(z)
        np.testing.assert_array_equal(decoded, z)
        decoded[0] = 9.0
        assert z[0] == 1.0

    def test_pca_matches_covariance(self, rng):
        data = rng.normal(size=(200, 3)) * np.array([3.0, 1.0, 0.2]) + np.array([1.0, -2.0, 0.5])
        prior = fit_pca_prior(data, 2)
        eigenvalues = np.sort(np.linalg.eigvalsh(np.cov(data, rowvar=False)))[::-1]
        np.testing.assert_allclose(prior.explained_variance, eigenvalues[:2])
        np.testing.assert_allclose(prior.components.T @ prior.components, np.eye(2), atol=1e-12)
        np.testing.assert_allclose(prior.mean, data.mean(axis=0))
        pivots = np.argmax(np.abs(prior.components), axis=0)
        assert np.all(prior.components[pivots, [0, 1]] > 0.0)
        assert prior.kind == PriorKind.PCA

    def test_full_rank_round_trip(self, rng):
        data = rng.normal(size=(50, 2))
        prior = fit_pca_prior(data, 2)
        np.testing.assert_allclose(prior.decode(prior.encode(data[0])), data[0], atol=1e-12)

    def test_pullback_is_transpose(self, pca_prior, rng):
        g = rng.normal(size=2)
        np.testing.assert_allclose(pca_prior.pullback(g), pca_prior.components.T @ g)

    @pytest.mark.parametrize("k", [0, 3])
    def test_invalid_latent_dim(self, rng, k):
        with pytest.raises(InvalidArgumentError):
            fit_pca_prior(rng.normal(size=(10, 2)), k)

    def test_latent_dim_bounded_by_samples(self, rng):
        with pytest.raises(InvalidArgumentError):
            fit_pca_prior(rng.normal(size=(2, 3)), 2)

    def test_decode_dimension_check(self, pca_prior):
        with pytest.raises(InvalidArgumentError):
            pca_prior.decode(np.zeros(3))


class TestAttackConfig:
    """攻击配置校验"""

    def test_defaults(self):
        config = AttackConfig()
        assert config.loss == LossKind.CE_IDENTITY
        assert config.optimizer.lr == 0.1
        assert config.max_steps == 5000
        assert config.stop_confidence == 0.95

    def test_pool_ordering(self):
        with pytest.raises(ValidationError):
            AttackConfig(pool_size=4, candidates_per_class=5, final_per_class=1)
        with pytest.raises(ValidationError):
            AttackConfig(pool_size=4, candidates_per_class=2, final_per_class=3)

    def test_stop_confidence_range(self):
        with pytest.raises(ValidationError):
            AttackConfig(stop_confidence=0.0)


class TestSimpleInversion:
    """输入空间的简单梯度攻击"""

    def test_requires_eval_mode(self):
        model = MlpClassifier(MlpConfig(input_dim=2, hidden_dims=[4], num_classes=3), seed=0)
        with pytest.raises(InvalidStateError):
            simple_invert(model, 1, np.zeros(2), AttackConfig())

    def test_reaches_confidence_threshold(self, trained_model):
        start = np.asarray(BlobSpec.toy_default().centers[1])
        trajectory = simple_invert(trained_model, 2, start, AttackConfig())
        assert trajectory.stop_reason == "confidence"
        assert trajectory.final_confidence >= 0.95
        assert trajectory.points.shape == (trajectory.steps + 1, 2)
        np.testing.assert_array_equal(trajectory.points[0], start)
        assert trajectory.update_gradients.shape == (trajectory.steps, 2)

    def test_uncapped_runs_all_steps(self, trained_model):
        config = AttackConfig(stop_confidence=None, max_steps=10)
        trajectory = simple_invert(trained_model, 0, np.zeros(2), config)
        assert trajectory.steps == 10
        assert trajectory.stop_reason == "max_steps"
        assert len(trajectory.losses) == 11

    def test_sgd_step_follows_gradient(self, trained_model):
        config = AttackConfig(stop_confidence=None, max_steps=1)
        trajectory = simple_invert(trained_model, 2, np.array([0.2, 0.1]), config)
        np.testing.assert_allclose(
            trajectory.points[1], trajectory.points[0] - 0.1 * trajectory.gradients[0], atol=1e-15
        )

    def test_frame_round_trip(self, trained_model):
        trajectory = simple_invert(trained_model, 0, np.zeros(2), AttackConfig(stop_confidence=None, max_steps=4))
        restored = inversion.Trajectory.from_frame(trajectory.to_frame(), trajectory.summary())
        np.testing.assert_array_equal(restored.points, trajectory.points)
        np.testing.assert_array_equal(restored.gradients, trajectory.gradients)
        assert restored.latents is None
        assert restored.stop_reason == trajectory.stop_reason


class TestPipeline:
    """三阶段流水线"""

    def test_robust_confidence_uses_indexed_draws(self, trained_model):
        transform = JitterTransform(sigma=0.3, seed=4)
        point = np.array([0.5, 0.5])
        scores = robust_confidence(trained_model, point[None, :], [3], transform, 2)
        expected = trained_model.predict_proba(
            np.stack([apply_jitter(point, transform, 6), apply_jitter(point, transform, 7)])
        ).mean(axis=0)
        np.testing.assert_allclose(scores[0], expected)

    def test_candidates_sorted_by_score(self, trained_model, pca_prior):
        selections = sample_candidates(trained_model, pca_prior, [0, 1, 2], ppa_config())
        for c, selection in selections.items():
            assert len(selection.indices) == 3
            assert np.all(np.diff(selection.scores) <= 0.0)
            assert selection.target_class == c

    def test_full_run(self, trained_model, pca_prior):
        run = run_ppa(trained_model, pca_prior, [0, 1, 2], ppa_config())
        reconstructions = run.reconstructions()
        assert sorted(reconstructions) == [0, 1, 2]
        for points in reconstructions.values():
            assert points.shape == (2, 2)
        assert len(run.trajectories()) == 9
        assert [s["status"] for s in run.stages] == ["completed"] * 3
        assert run.stage_models["sampling"] == "target"
        for trajectory in run.trajectories():
            assert trajectory.latents.shape == (6, 2)

    def test_parallel_matches_serial(self, trained_model, pca_prior):
        serial = run_ppa(trained_model, pca_prior, [0, 2], ppa_config(), jobs=1)
        parallel = run_ppa(trained_model, pca_prior, [0, 2], ppa_config(), jobs=3)
        for c in (0, 2):
            np.testing.assert_array_equal(serial.selected[c].points, parallel.selected[c].points)
            np.testing.assert_array_equal(serial.selected[c].candidate_indices, parallel.selected[c].candidate_indices)
        for a, b in zip(serial.trajectories(), parallel.trajectories()):
            np.testing.assert_array_equal(a.points, b.points)

    def test_stage_models_can_be_swapped(self, trained_model, pca_prior):
        other = trained_model.copy()
        run = run_ppa(trained_model, pca_prior, [1], ppa_config(), sampling_model=other, selection_model=other)
        assert run.stage_models == {
            "sampling": "sampling_model",
            "optimization": "target",
            "selection": "selection_model",
        }
        baseline = run_ppa(trained_model, pca_prior, [1], ppa_config())
        np.testing.assert_array_equal(run.selected[1].points, baseline.selected[1].points)

    def test_failed_candidates_are_skipped(self, trained_model, pca_prior, mocker):
        original = inversion._run_optimization

        def flaky(model, prior, z, c, config, candidate_index=0):
            if candidate_index == 1:
                raise NumericFailureError("梯度溢出", layer="input", step=0)
            return original(model, prior, z, c, config, candidate_index)

        mocker.patch("mia_lab.inversion._run_optimization", side_effect=flaky)
        result = optimize_latents(
            trained_model, pca_prior, np.zeros((3, 2)), 0, ppa_config(), candidate_indices=[0, 1, 2]
        )
        assert [t.candidate_index for t in result.trajectories] == [0, 2]
        assert result.failures[0]["candidate_index"] == 1
        assert result.failures[0]["error_type"] == "numeric_failure"

    def test_selection_shortfall(self, trained_model, pca_prior):
        config = ppa_config()
        single = optimize_latents(trained_model, pca_prior, np.zeros((1, 2)), 0, config)
        selected = select_results(trained_model, pca_prior, {0: single}, config)
        assert selected[0].points.shape == (1, 2)
        assert selected[0].shortfall is not None

    def test_stage_failure_keeps_partial_results(self, trained_model, pca_prior, mocker):
        mocker.patch("mia_lab.inversion.optimize_latents", side_effect=NumericFailureError("失败"))
        with pytest.raises(StageError) as excinfo:
            run_ppa(trained_model, pca_prior, [0], ppa_config())
        error = excinfo.value
        assert error.stage == "optimization"
        assert error.exit_code == 4
        assert 0 in error.partial_run.candidates
        assert [s["status"] for s in error.partial_run.stages] == ["completed", "failed", "pending"]

    def test_empty_optimization_result_rejected(self, trained_model, pca_prior):
        with pytest.raises(InvalidArgumentError):
            select_results(trained_model, pca_prior, {0: OptimizationResult(target_class=0)}, ppa_config())

    def test_saved_run_reads_back(self, trained_model, pca_prior, tmp_path):
        run = run_ppa(trained_model, pca_prior, [0, 1, 2], ppa_config())
        path = run.save(tmp_path / "ppa", provenance={"test": True})
        artifacts = read_attack_run(path)
        for c, points in run.reconstructions().items():
            np.testing.assert_array_equal(artifacts.reconstructions[c], points)
        assert len(artifacts.trajectories) == 9
        for a, b in zip(artifacts.trajectories, run.trajectories()):
            np.testing.assert_array_equal(a.gradients, b.gradients)
            assert a.steps == b.steps

    def test_simple_run_wraps_trajectory(self, trained_model):
        trajectory = simple_invert(trained_model, 1, np.zeros(2), AttackConfig(stop_confidence=None, max_steps=3))
        run = AttackRun.from_simple(trajectory, AttackConfig(stop_confidence=None, max_steps=3))
        np.testing.assert_array_equal(run.reconstructions()[1][0], trajectory.final_point)
        assert run.trajectory_name(trajectory) == "class1_cand0000.csv"


def brute_force_robust_score(model, point, transform, draw_base, copies, target_class) -> float:
    """逐个副本计算再求平均"""
    total = 0.0
    for t in range(copies):
        total += model.predict_proba(apply_jitter(point, transform, draw_base * copies + t)[None, :])[0, target_class]
    return total / copies


def brute_force_top(scores, indices, keep):
    """穷举所有 (分数, 下标) 对，按分数降序、下标升序取前 keep 个"""
    pairs = sorted(zip(scores, indices), key=lambda pair: (-pair[0], pair[1]))
    return [index for _, index in pairs[:keep]]


def fixed_trajectory(point, target_class, candidate_index) -> inversion.Trajectory:
    point = np.asarray(point, dtype=np.float64)
    return inversion.Trajectory(
        target_class=target_class,
        points=point[None, :],
        losses=np.zeros(1),
        confidences=np.zeros(1),
        gradients=np.zeros((1, point.shape[0])),
        steps=0,
        stop_reason="max_steps",
        candidate_index=candidate_index,
    )


class TestPipelineOracles:
    """各阶段与穷举、逐步计算结果的对照"""

    def test_sampling_matches_brute_force(self, trained_model, pca_prior):
        config = ppa_config(pool_size=50, candidates_per_class=7, transform_count=3)
        transform = config.transform.reseeded(derive_seed(config.transform.seed, inversion.SAMPLING_SALT))
        pool_seed = derive_seed(config.seed, "latent_pool")
        latents = [np.random.default_rng([pool_seed, i]).standard_normal(2) for i in range(50)]
        points = [pca_prior.decode(z) for z in latents]

        selections = sample_candidates(trained_model, pca_prior, [0, 1, 2], config)
        for c, selection in selections.items():
            scores = [brute_force_robust_score(trained_model, p, transform, i, 3, c) for i, p in enumerate(points)]
            expected = brute_force_top(scores, list(range(50)), 7)
            assert selection.indices.tolist() == expected
            np.testing.assert_allclose(selection.scores, [scores[i] for i in expected], rtol=0, atol=1e-10)
            np.testing.assert_array_equal(selection.latents, np.stack([latents[i] for i in expected]))

    def test_selection_matches_brute_force(self, trained_model, pca_prior, rng):
        config = ppa_config(pool_size=200, candidates_per_class=50, final_per_class=6, transform_count=3)
        transform = config.transform.reseeded(derive_seed(config.transform.seed, inversion.SELECTION_SALT))
        points = rng.normal(scale=2.0, size=(50, 2))
        indices = rng.permutation(200)[:50]
        optimized = OptimizationResult(
            target_class=1,
            trajectories=[fixed_trajectory(p, 1, int(i)) for p, i in zip(points, indices)],
        )

        selected = select_results(trained_model, pca_prior, {1: optimized}, config)[1]
        scores = [brute_force_robust_score(trained_model, p, transform, int(i), 3, 1) for p, i in zip(points, indices)]
        expected = brute_force_top(scores, indices.tolist(), 6)
        assert selected.candidate_indices.tolist() == expected
        position = {int(i): j for j, i in enumerate(indices)}
        np.testing.assert_array_equal(selected.points, np.stack([points[position[i]] for i in expected]))

    def test_selection_ignores_candidate_order(self, trained_model, pca_prior, rng):
        config = ppa_config(pool_size=30, candidates_per_class=30, final_per_class=5)
        trajectories = [fixed_trajectory(p, 2, i) for i, p in enumerate(rng.normal(size=(30, 2)))]
        shuffled = [trajectories[j] for j in rng.permutation(30)]
        a = select_results(trained_model, pca_prior, {2: OptimizationResult(2, trajectories)}, config)[2]
        b = select_results(trained_model, pca_prior, {2: OptimizationResult(2, shuffled)}, config)[2]
        np.testing.assert_array_equal(a.candidate_indices, b.candidate_indices)
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.robust_scores, b.robust_scores)

    def test_identity_prior_single_candidate_is_simple_attack(self, trained_model):
        config = AttackConfig(
            max_steps=40,
            pool_size=1,
            candidates_per_class=1,
            final_per_class=1,
            transform=JitterTransform(sigma=0.1, seed=2),
            seed=8,
        )
        run = run_ppa(trained_model, Prior.identity(2), [2], config)
        start = np.random.default_rng([derive_seed(8, "latent_pool"), 0]).standard_normal(2)
        simple = simple_invert(trained_model, 2, start, config)
        [trajectory] = run.trajectories()
        assert trajectory.steps == simple.steps
        assert trajectory.stop_reason == simple.stop_reason
        np.testing.assert_array_equal(trajectory.points, simple.points)
        np.testing.assert_array_equal(trajectory.gradients, simple.gradients)
        np.testing.assert_array_equal(run.selected[2].points[0], simple.final_point)

    @pytest.mark.parametrize("optimizer", [
        OptimizerConfig(kind="sgd", lr=0.0),
        OptimizerConfig(kind="adam", lr=0.0, betas=(0.1, 0.1)),
    ])
    def test_zero_learning_rate_keeps_latents(self, trained_model, pca_prior, rng, optimizer):
        latents = rng.normal(size=(4, 2))
        config = ppa_config(optimizer=optimizer, loss=LossKind.CE_IDENTITY, max_steps=6)
        result = optimize_latents(trained_model, pca_prior, latents, 0, config)
        for z, trajectory in zip(latents, result.trajectories):
            assert trajectory.steps == 6
            np.testing.assert_array_equal(trajectory.latents, np.tile(z, (7, 1)))

    def test_most_candidates_gain_confidence(self, trained_model, pca_prior):
        config = ppa_config(
            loss=LossKind.CE_IDENTITY,
            optimizer=OptimizerConfig(kind="sgd", lr=0.1),
            max_steps=30,
            pool_size=50,
            candidates_per_class=10,
        )
        improved = []
        for c, selection in sample_candidates(trained_model, pca_prior, [0, 1, 2], config).items():
            result = optimize_latents(
                trained_model, pca_prior, selection.latents, c, config, candidate_indices=selection.indices
            )
            assert not result.failures
            improved += [t.final_confidence > t.initial_confidence for t in result.trajectories]
        assert len(improved) == 30
        assert np.mean(improved) >= 0.9

    def test_simple_run_with_several_starts(self, trained_model):
        config = AttackConfig(stop_confidence=None, max_steps=3)
        starts = [np.zeros(2), np.array([1.0, -1.0]), np.array([-0.5, 0.5])]
        trajectories = [simple_invert(trained_model, 1, s, config, candidate_index=i) for i, s in enumerate(starts)]
        run = AttackRun.from_simple(trajectories, config)
        assert run.selected[1].candidate_indices.tolist() == [0, 1, 2]
        np.testing.assert_array_equal(run.reconstructions()[1], np.stack([t.final_point for t in trajectories]))
        assert [run.trajectory_name(t) for t in trajectories][2] == "class1_cand0002.csv"

    def test_simple_run_rejects_mixed_targets(self, trained_model):
        config = AttackConfig(stop_confidence=None, max_steps=1)
        a = simple_invert(trained_model, 0, np.zeros(2), config)
        b = simple_invert(trained_model, 1, np.zeros(2), config, candidate_index=1)
        with pytest.raises(InvalidArgumentError):
            AttackRun.from_simple([a, b], config)
        with pytest.raises(InvalidArgumentError):
            AttackRun.from_simple([], config)
