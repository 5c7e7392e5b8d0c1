import csv
import io
import math
from fractions import Fraction

import numpy as np
import pytest

from ravnet.errors import ShapeError
from ravnet.losses import (
    CSV_HEADER,
    ConfusionCounts,
    aggregate,
    bce_loss,
    binarize,
    confusion_counts,
    dice_loss,
    evaluate_pair,
    format_loss_table,
    metrics_from_counts,
    report_csv_text,
    soft_dice,
)
from ravnet.tensor import Tape, Tensor


def t(a):
    return Tensor(np.asarray(a, dtype=np.float64).reshape(1, 1, 2, 2))


def test_dice_loss_perfect_cases_are_exactly_zero():
    assert dice_loss(t([1, 1, 1, 1]), t([1, 1, 1, 1])).item() == 0.0
    assert dice_loss(t([0, 0, 0, 0]), t([0, 0, 0, 0])).item() == 0.0


def test_dice_loss_ones_vs_zeros():
    assert dice_loss(t([1, 1, 1, 1]), t([0, 0, 0, 0])).item() == pytest.approx(0.8, abs=1e-15)


def test_dice_loss_hand_value_and_soft_dice():
    p, y = t([0.5, 0.5, 0, 1]), t([1, 0, 0, 1])
    # (2 * 1.5 + 1) / (2 + 2 + 1)
    assert dice_loss(p, y).item() == pytest.approx(1 - 4 / 5)
    assert soft_dice(p, y) == pytest.approx(4 / 5)


def test_bce_half_is_ln2_and_clamped_extremes_are_finite():
    y = t([1, 1, 1, 1])
    assert bce_loss(t([0.5] * 4), y).item() == pytest.approx(math.log(2), abs=1e-12)
    worst = bce_loss(t([0, 0, 0, 0]), y).item()
    assert math.isfinite(worst) and worst == pytest.approx(-math.log(1e-7), rel=1e-6)


def test_loss_gradients_flow_to_prediction():
    p = Tensor(np.full((1, 1, 2, 2), 0.3), requires_grad=True)
    with Tape() as tape:
        tape.backward(dice_loss(p, np.ones((1, 1, 2, 2))))
    assert np.all(p.grad < 0)


def test_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        dice_loss(t([1, 1, 1, 1]), np.ones((1, 1, 4, 1)))
    with pytest.raises(ShapeError):
        evaluate_pair(np.ones((2, 2)), np.ones((2, 3)))


def test_binarize_threshold_is_inclusive():
    assert binarize(np.array([0.4999, 0.5, 0.9])).tolist() == [False, True, True]


def test_metric_hand_values():
    truth = np.array([1, 1, 1, 1, 0, 0, 0, 0])
    pred = np.array([1, 1, 0, 0, 1, 1, 0, 0], dtype=float)
    r = evaluate_pair(pred, truth)
    assert (r.dsc, r.jsc, r.precision, r.accuracy) == (0.5, 2 / 6, 0.5, 0.5)


def test_metric_empty_conventions():
    z = np.zeros((3, 3))
    r = evaluate_pair(z, z)
    assert (r.accuracy, r.precision, r.dsc, r.jsc) == (1.0, 1.0, 1.0, 1.0)
    disjoint = evaluate_pair(np.eye(3), 1 - np.eye(3))
    assert disjoint.dsc == 0.0 and disjoint.jsc == 0.0


def test_dsc_jsc_identity_exact_on_counts():
    rng = np.random.default_rng(0)
    for _ in range(200):
        tp, fp, fn = (int(v) for v in rng.integers(0, 50, 3))
        if tp + fp + fn == 0:
            continue
        jsc = Fraction(tp, tp + fp + fn)
        assert Fraction(2 * tp, 2 * tp + fp + fn) == 2 * jsc / (1 + jsc)


def test_confusion_counts_partition_the_image():
    rng = np.random.default_rng(1)
    c = confusion_counts(rng.random((7, 5)), rng.random((7, 5)) < 0.3)
    assert c.total == 35


def test_aggregate_mean_and_pooled_differ():
    a, b = ConfusionCounts(tp=1, tn=0, fp=1, fn=0), ConfusionCounts(tp=10, tn=0, fp=0, fn=0)
    reps = [metrics_from_counts(a), metrics_from_counts(b)]
    assert aggregate(reps).dsc == pytest.approx((2 / 3 + 1.0) / 2)
    assert aggregate(reps, [a, b], pooled=True).dsc == pytest.approx(22 / 23)
    with pytest.raises(ValueError):
        aggregate([])


def test_report_csv_round_trips_exact_floats():
    rep = evaluate_pair(np.array([1.0, 0, 1]), np.array([1, 1, 0]))
    rows = list(csv.reader(io.StringIO(report_csv_text([("s1", rep)]))))
    assert rows[0] == CSV_HEADER
    assert rows[1][0] == "s1" and float(rows[1][3]) == rep.dsc
    assert "dsc=0.5\n" in rep.to_text()


def test_loss_table_layout():
    text = format_loss_table([("dice", 0.9, 0.8, 0.7), ("bce", 0.6, 0.5, 0.4)])
    assert text.splitlines() == ["loss\tacc\tpre\tdsc", "dice\t0.9000\t0.8000\t0.7000", "bce\t0.6000\t0.5000\t0.4000"]
