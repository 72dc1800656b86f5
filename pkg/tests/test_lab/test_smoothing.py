"""
广义标签平滑单元测试
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError

from mia_lab.smoothing import (
    SmoothingSchedule,
    decomposed_ce_loss,
    log_softmax,
    logit_gradient,
    saturation_thresholds,
    schedule_alpha,
    smooth_label_matrix,
    smooth_labels,
    smoothed_ce_loss,
    softmax,
    softmax_jacobian,
)
from utils.error_handler import InvalidArgumentError, NumericInputError


class TestSmoothLabels:
    """平滑目标构造"""

    def test_positive_smoothing(self):
        target = smooth_labels(1, 0.1, 4)
        np.testing.assert_allclose(target.values, [0.025, 0.925, 0.025, 0.025])
        assert target.alpha == 0.1
        assert target.num_classes == 4

    def test_negative_smoothing_pushes_target_above_one(self):
        target = smooth_labels(0, -0.05, 3)
        assert target.values[0] == pytest.approx(1.05 - 0.05 / 3)
        assert target.values[1] == pytest.approx(-0.05 / 3)
        assert target.values[1] < 0.0

    def test_alpha_one_is_uniform(self):
        np.testing.assert_allclose(smooth_labels(2, 1.0, 5).values, np.full(5, 0.2))

    def test_hard_label(self):
        np.testing.assert_array_equal(smooth_labels(2, 0.0, 3).values, [0.0, 0.0, 1.0])

    @pytest.mark.parametrize("alpha", [1.01, float("nan"), float("inf")])
    def test_invalid_alpha(self, alpha):
        with pytest.raises(InvalidArgumentError):
            smooth_labels(0, alpha, 3)

    def test_invalid_label_and_classes(self):
        with pytest.raises(InvalidArgumentError):
            smooth_labels(3, 0.1, 3)
        with pytest.raises(InvalidArgumentError):
            smooth_labels(0, 0.1, 1)

    @given(
        alpha=st.floats(min_value=-5.0, max_value=1.0, allow_nan=False),
        num_classes=st.integers(min_value=2, max_value=50),
        data=st.data(),
    )
    @settings(max_examples=200, deadline=None)
    def test_targets_sum_to_one(self, alpha, num_classes, data):
        label = data.draw(st.integers(min_value=0, max_value=num_classes - 1))
        values = smooth_labels(label, alpha, num_classes).values
        assert abs(values.sum() - 1.0) <= 1e-12 * max(1.0, abs(alpha))

    def test_matrix_rows_match_single_targets(self):
        labels = np.array([0, 2, 1, 2])
        matrix = smooth_label_matrix(labels, -0.2, 3)
        for row, label in zip(matrix, labels):
            np.testing.assert_array_equal(row, smooth_labels(label, -0.2, 3).values)


class TestSoftmax:
    """softmax 及其导数"""

    def test_stable_for_large_logits(self):
        p = softmax([1000.0, 1001.0])
        assert np.all(np.isfinite(p))
        assert p.sum() == pytest.approx(1.0)
        assert p[1] > p[0]

    def test_rejects_non_finite(self):
        with pytest.raises(NumericInputError):
            softmax([0.0, np.nan])
        with pytest.raises(NumericInputError):
            log_softmax([np.inf, 0.0])

    def test_log_softmax_matches_log_of_softmax(self, rng):
        logits = rng.normal(size=(5, 4))
        np.testing.assert_allclose(log_softmax(logits), np.log(softmax(logits)), atol=1e-12)

    def test_jacobian_rows_sum_to_zero(self, rng):
        jacobian = softmax_jacobian(rng.normal(0.0, 3.0, size=7))
        np.testing.assert_allclose(jacobian.sum(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(jacobian, jacobian.T)

    def test_jacobian_rejects_batches(self):
        with pytest.raises(InvalidArgumentError):
            softmax_jacobian(np.zeros((2, 3)))


class TestSmoothedLoss:
    """平滑交叉熵、分解恒等式与解析梯度"""

    @pytest.mark.parametrize("alpha", [-0.5, -0.05, 0.0, 0.1, 1.0])
    def test_decomposition_identity(self, rng, alpha):
        p = softmax(rng.normal(size=6))
        direct = smoothed_ce_loss(p, smooth_labels(4, alpha, 6))
        assert direct == pytest.approx(decomposed_ce_loss(p, 4, alpha), abs=1e-12)

    def test_gradient_sums_to_zero(self, rng):
        p = softmax(rng.normal(size=5))
        grad = logit_gradient(p, smooth_labels(1, -0.3, 5))
        assert grad.sum() == pytest.approx(0.0, abs=1e-12)

    def test_gradient_is_p_minus_target(self):
        p = np.array([0.7, 0.2, 0.1])
        target = smooth_labels(0, 0.3, 3)
        np.testing.assert_allclose(logit_gradient(p, target), p - target.values)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            smoothed_ce_loss([0.5, 0.5], smooth_labels(0, 0.1, 3))
        with pytest.raises(InvalidArgumentError):
            logit_gradient([0.5, 0.5], np.ones(3) / 3)

    def test_loss_floor_keeps_value_finite(self):
        assert np.isfinite(smoothed_ce_loss([1.0, 0.0], smooth_labels(0, 0.1, 2)))


class TestSaturation:
    """梯度饱和阈值"""

    def test_positive_alpha_thresholds(self):
        thresholds = saturation_thresholds(0.1, 3)
        assert thresholds.target_threshold == pytest.approx(1.0 - 0.1 + 0.1 / 3)
        assert thresholds.other_threshold == pytest.approx(0.1 / 3)

    def test_negative_alpha_never_saturates(self):
        thresholds = saturation_thresholds(-0.05, 3)
        assert thresholds.target_threshold > 1.0
        assert thresholds.other_threshold < 0.0

    def test_hard_labels(self):
        thresholds = saturation_thresholds(0.0, 10)
        assert thresholds.target_threshold == 1.0
        assert thresholds.other_threshold == 0.0


class TestSchedule:
    """按轮次的平滑因子调度"""

    def test_negative_alpha_warmup_and_ramp(self):
        schedule = SmoothingSchedule.for_training(-0.05, 100)
        assert (schedule.warmup_epochs, schedule.ramp_epochs) == (10, 20)
        assert schedule_alpha(schedule, 0) == 0.0
        assert schedule_alpha(schedule, 9) == 0.0
        assert schedule_alpha(schedule, 10) == 0.0
        assert schedule_alpha(schedule, 20) == pytest.approx(-0.025)
        assert schedule_alpha(schedule, 30) == pytest.approx(-0.05)
        assert schedule_alpha(schedule, 99) == pytest.approx(-0.05)

    def test_positive_alpha_is_constant(self):
        schedule = SmoothingSchedule.for_training(0.05, 100)
        assert [schedule_alpha(schedule, e) for e in (0, 50, 99)] == [0.05, 0.05, 0.05]

    def test_negative_epoch(self):
        with pytest.raises(InvalidArgumentError):
            schedule_alpha(SmoothingSchedule.constant(0.1), -1)

    def test_alpha_above_one_rejected(self):
        with pytest.raises(ValidationError):
            SmoothingSchedule(target_alpha=1.5)
