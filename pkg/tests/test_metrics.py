import math

import numpy as np
import pytest

from midre import metrics
from midre.errors import DegenerateError, MissingIdentityError, ShapeError
from midre.nn import FeatureSet
from midre.synthdata import ImageBatch

# Every defended row of the 64x64 multi-attack results table:
# (Acc NoDef, AttAcc NoDef, Acc defended, AttAcc defended, printed delta)
DELTA_ROWS = [
    (86.90, 74.53, 79.16, 54.53, 2.58),
    (86.90, 74.53, 79.85, 53.73, 2.95),
    (86.90, 74.53, 79.85, 31.93, 6.04),
    (86.90, 81.80, 79.16, 67.20, 1.89),
    (86.90, 81.80, 79.85, 63.00, 2.67),
    (86.90, 81.80, 79.85, 43.07, 5.49),
    (86.90, 97.47, 79.16, 93.00, 0.58),
    (86.90, 97.47, 79.85, 92.40, 0.72),
    (86.90, 97.47, 79.85, 66.60, 4.38),
    (86.90, 20.07, 79.16, 20.93, -0.11),
    (86.90, 20.07, 79.85, 6.13, 1.98),
    (86.90, 20.07, 79.85, 3.20, 2.39),
    (86.90, 78.47, 79.16, 53.33, 3.25),
    (86.90, 78.47, 79.85, 43.53, 4.96),
    (86.90, 78.47, 79.85, 34.73, 6.20),
    (86.90, 57.40, 79.16, 39.20, 2.35),
    (86.90, 57.40, 79.85, 37.40, 2.84),
    (86.90, 57.40, 79.85, 21.73, 5.06),
]


@pytest.mark.parametrize("row", DELTA_ROWS)
def test_delta_reproduces_printed_values(row):
    *args, want = row
    assert metrics.tradeoff_delta(*args) == pytest.approx(want, abs=0.01)


def test_delta_combination_rows():
    assert metrics.tradeoff_delta(95.43, 86.51, 91.50, 13.94) == pytest.approx(18.47, abs=0.01)
    assert metrics.tradeoff_delta(86.90, 81.80, 82.15, 39.00) == pytest.approx(9.01, abs=0.01)
    # defended model more accurate than the baseline: reported as "OP"
    assert metrics.tradeoff_delta(95.43, 86.51, 95.47, 15.97) is None
    assert metrics.delta_flag(95.43, 86.51, 95.47, 15.97) == "OP"
    # the printed 47.65 for this row does not follow from its own columns
    assert metrics.tradeoff_delta(95.43, 86.51, 93.69, 3.75) == pytest.approx(82.76 / 1.74)


def test_delta_equal_accuracy():
    assert metrics.tradeoff_delta(80, 70, 80, 50) is None
    assert metrics.delta_flag(80, 70, 80, 50) == "degenerate"
    with pytest.raises(DegenerateError):
        metrics.tradeoff_delta(80, 70, 80, 50, strict=True)
    with pytest.raises(ValueError):
        metrics.tradeoff_delta(101, 70, 80, 50)


def test_knn_distance_arithmetic():
    recon = FeatureSet(np.array([[0.0, 0.0]]), np.zeros((1, 2)), np.array([1]))
    priv = FeatureSet(np.array([[3.0, 4.0], [6.0, 8.0], [0.1, 0.0]]), np.zeros((3, 2)), np.array([1, 1, 0]))
    assert metrics.nearest_same_identity(recon, priv) == pytest.approx([5.0])
    with pytest.raises(MissingIdentityError):
        metrics.nearest_same_identity(FeatureSet(np.zeros((1, 2)), np.zeros((1, 2)), np.array([7])), priv)


def test_ffd_closed_forms(rng):
    x = rng.normal(size=(400, 3))
    assert metrics.frechet_feature_distance(x, x) == pytest.approx(0.0, abs=1e-6)
    d = np.array([0.5, 1.0, -2.0])
    assert metrics.frechet_feature_distance(x, x + d) == pytest.approx(d @ d, abs=1e-6)
    assert metrics.frechet_from_stats([0.0], [[9.0]], [0.0], [[4.0]]) == pytest.approx(1.0, abs=1e-9)


def test_ffd_against_scipy_sqrtm(rng):
    scipy_linalg = pytest.importorskip("scipy.linalg")
    a, b = rng.normal(size=(200, 5)), rng.normal(size=(150, 5)) @ rng.normal(size=(5, 5))
    mu_a, mu_b = a.mean(0), b.mean(0)
    ca, cb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    ref = ((mu_a - mu_b) ** 2).sum() + np.trace(ca + cb - 2 * scipy_linalg.sqrtm(ca @ cb).real)
    assert metrics.frechet_from_stats(mu_a, ca, mu_b, cb) == pytest.approx(ref, rel=1e-6)


def test_ffd_shapes_and_rank():
    with pytest.raises(ShapeError):
        metrics.frechet_feature_distance(np.zeros((5, 2)), np.zeros((5, 3)))
    with pytest.raises(DegenerateError):
        metrics.frechet_feature_distance(np.ones((2, 4)), np.ones((2, 4)) * 2, shrinkage=False)
    # shrinkage keeps tiny sets usable
    assert math.isfinite(metrics.frechet_feature_distance(np.eye(2, 4), np.eye(2, 4)[::-1]))


def test_attack_accuracy_and_interval(tiny_classifier, tiny_splits):
    train, _ = tiny_splits
    p, ci = metrics.attack_accuracy(tiny_classifier, train)
    assert 0.0 <= p <= 1.0
    assert ci == pytest.approx(metrics.Z_95 * math.sqrt(p * (1 - p) / len(train)))
    with pytest.raises(ShapeError):
        metrics.attack_accuracy(tiny_classifier, ImageBatch(np.zeros((2, 3, 8, 8), np.float32), np.zeros(2, np.int64)))


def test_report_formatting():
    rep = metrics.MetricsReport(acc=0.9123, att_acc=0.25, att_acc_ci=0.1, knn_dist=1.5, ffd=0.2, delta=None)
    assert rep.as_percent() == {"Acc": "91.23", "AttAcc": "25.00", "KNN Dist": "1.50", "Delta": "OP"}
    with pytest.raises(ValueError):
        metrics.MetricsReport(acc=1.5, att_acc=0.2, att_acc_ci=0, knn_dist=0, ffd=0)
