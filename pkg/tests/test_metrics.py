import numpy as np
import pytest

from taxocodec.errors import ShapeMismatchError
from taxocodec.metrics import MetricSuite

suite = MetricSuite()


class TestMetricSuite:

    def test_accuracy(self):
        assert suite.accuracy([0, 1, 2, 2], [0, 1, 1, 2]) == pytest.approx(0.75)

    def test_mean_iou_skips_absent_classes(self):
        pred = np.array([[0, 0], [1, 1]])
        label = np.array([[0, 1], [1, 1]])
        # class 0: 1 / 2, class 1: 2 / 3, classes 2 and 3 absent
        assert suite.mean_iou(pred, label, num_classes=4) == pytest.approx((0.5 + 2 / 3) / 2)
        assert set(suite.per_class_iou(pred, label, 4)) == {0, 1}

    def test_non_background_accuracy(self):
        assert suite.non_background_accuracy([0, 2, 0, 1], [0, 2, 1, 1]) == pytest.approx(2 / 3)
        assert suite.non_background_accuracy([1, 0], [0, 0]) is None

    def test_cross_entropy(self):
        logits = np.log(np.array([[0.5, 0.25, 0.25], [0.1, 0.8, 0.1]]))
        assert suite.cross_entropy(logits, [0, 1]) == pytest.approx(-(np.log(0.5) + np.log(0.8)) / 2)

    def test_dense_cross_entropy(self):
        logits = np.zeros((2, 4, 3, 3))
        assert suite.cross_entropy(logits, np.zeros((2, 3, 3), dtype=int)) == pytest.approx(np.log(4.0))

    def test_l1(self):
        pred = np.zeros((2, 1, 2, 2))
        target = np.full((2, 1, 2, 2), 0.5)
        target[1] = -1.0
        assert suite.l1(pred, target) == pytest.approx(0.75)

    def test_evaluate_keys(self):
        assert list(suite.evaluate("classification", [1], [1])) == ["accuracy"]
        seg = suite.evaluate("segmentation", np.array([0, 1, 1]), np.array([0, 1, 0]), num_classes=2)
        assert list(seg) == ["miou", "pixel_accuracy", "non_background_accuracy"]
        assert list(suite.evaluate("regression", [0.1], [0.2])) == ["l1"]
        with pytest.raises(ValueError):
            suite.evaluate("ranking", [0], [0])

    def test_empty_and_mismatched_inputs(self):
        with pytest.raises(ShapeMismatchError):
            suite.accuracy([], [])
        with pytest.raises(ShapeMismatchError):
            suite.l1(np.zeros(3), np.zeros(4))
        with pytest.raises(ShapeMismatchError):
            suite.cross_entropy(np.zeros((2, 3)), [0])
