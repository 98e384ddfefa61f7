import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from csad.errors import ParameterError, ShapeError
from csad.objectives import (
    LossConfig,
    MetricsReport,
    dice_loss,
    dice_loss_backward,
    evaluate,
    parse_metrics_report,
    threshold_mask,
    total_loss,
    wbce_loss,
    wbce_loss_backward,
)
from csad.verify import brute_metrics, numeric_grad

masks = arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.integers(0, 1))


def square_masks():
    a = np.zeros((4, 4), np.uint8)
    b = np.zeros((4, 4), np.uint8)
    a[0, :4] = 1  # |A| = 4
    b[0, 1:4] = 1
    b[1, :3] = 1  # |B| = 6, overlap 3
    return a, b


def test_dice_examples():
    t = np.zeros((3, 3))
    t[1, 1] = t[0, 0] = 1
    assert dice_loss(t, t) == 0.0
    assert dice_loss(np.zeros((2, 2)), np.zeros((2, 2))) == 0.0
    p = np.array([1, 1, 1, 1, 0, 0, 0, 0, 0, 0], float)
    q = np.array([0, 0, 1, 1, 1, 1, 0, 0, 0, 0], float)
    assert abs(dice_loss(p, q) - (1 - 5 / 9)) < 1e-12
    assert abs(dice_loss(p, q) - 0.4444) < 1e-4


@given(st.integers(0, 2**32 - 1))
def test_dice_range(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(size=(4, 5))
    t = (rng.uniform(size=(4, 5)) < 0.5).astype(float)
    assert 0.0 <= dice_loss(p, t) < 1.0


def test_dice_errors():
    with pytest.raises(ShapeError):
        dice_loss(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ParameterError):
        dice_loss(np.zeros(2), np.zeros(2), sigma=0)


def test_dice_gradient(rng):
    p = rng.uniform(0.1, 0.9, size=(4, 4))
    t = (rng.uniform(size=(4, 4)) < 0.4).astype(float)
    np.testing.assert_allclose(dice_loss_backward(p, t, 1.5), numeric_grad(lambda q: dice_loss(q, t, 1.5), p), rtol=1e-7)


def test_wbce_examples():
    assert wbce_loss(np.array([1.0, 0.0]), np.array([1.0, 0.0])) <= 1e-6
    assert abs(wbce_loss(np.array([0.5]), np.array([1.0])) - 0.95 * math.log(2)) < 1e-12
    assert abs(wbce_loss(np.array([0.5]), np.array([1.0])) - 0.65849) < 1e-5
    assert abs(wbce_loss(np.array([0.5]), np.array([0.0])) - 0.03466) < 1e-5


def test_wbce_is_pixel_mean():
    p = np.array([0.5, 0.5])
    t = np.array([1.0, 0.0])
    assert abs(wbce_loss(p, t) - (0.95 + 0.05) * math.log(2) / 2) < 1e-12


def test_wbce_clamps_and_stops_gradient():
    p = np.array([0.0, 1.0, 0.3])
    t = np.array([1.0, 0.0, 1.0])
    assert math.isfinite(wbce_loss(p, t))
    g = wbce_loss_backward(p, t)
    assert g[0] == 0.0 and g[1] == 0.0 and g[2] != 0.0


def test_wbce_gradient(rng):
    p = rng.uniform(0.1, 0.9, size=(3, 5))
    t = (rng.uniform(size=(3, 5)) < 0.4).astype(float)
    np.testing.assert_allclose(wbce_loss_backward(p, t, 0.8), numeric_grad(lambda q: wbce_loss(q, t, 0.8), p), rtol=1e-7)


def test_total_loss_arithmetic():
    t = np.ones((2, 2))
    # a perfect prediction only leaves the distillation term and clamp residue
    assert abs(total_loss(t, t, 0.0)) < 1e-6
    cfg = LossConfig(alpha=1.0, beta=0.1)
    p = np.full((1, 1), 0.5)
    truth = np.ones((1, 1))
    expected = dice_loss(p, truth) + 0.1 * wbce_loss(p, truth) + 0.1
    assert total_loss(p, truth, 0.1, cfg) == expected
    assert abs(0.4 + 0.1 * 0.2 + 1.0 * 0.1 - 0.52) < 1e-12


def test_loss_config_validation():
    with pytest.raises(ParameterError):
        LossConfig(alpha=-1)
    with pytest.raises(ParameterError):
        LossConfig(lam=1.0)
    with pytest.raises(ParameterError):
        LossConfig(sigma=0.0)


def test_evaluate_examples():
    a = np.array([[1, 1, 0], [0, 1, 0]], np.uint8)
    assert evaluate(a, a) == (100.0, 100.0, 100.0, 0.0, 0.0)
    a, b = square_masks()
    dice, sens, prec, voe, rvd = evaluate(a, b)
    assert dice == 60.0 and sens == 50.0 and prec == 75.0 and rvd == 50.0
    assert abs(voe - 100 * (1 - 3 / 7)) < 1e-12 and abs(voe - 57.14) < 0.01
    dice, sens, prec, voe, rvd = evaluate(np.zeros_like(b), b)
    assert dice == 0.0 and sens == 0.0 and voe == 100.0
    assert math.isnan(rvd)
    assert evaluate(np.zeros((2, 2)), np.zeros((2, 2))) == (100.0, 100.0, 100.0, 0.0, 0.0)


def test_evaluate_shape_error():
    with pytest.raises(ShapeError):
        evaluate(np.zeros((2, 2)), np.zeros((3, 2)))


@given(masks, st.data())
def test_evaluate_matches_counting_oracle(a, data):
    b = data.draw(arrays(np.uint8, a.shape, elements=st.integers(0, 1)))
    got, ref = evaluate(a, b), brute_metrics(a, b)
    for x, y in zip(got, ref):
        assert x == y or (math.isnan(x) and math.isnan(y))


@given(masks, st.data())
def test_metric_ranges(a, data):
    b = data.draw(arrays(np.uint8, a.shape, elements=st.integers(0, 1)))
    dice, sens, prec, voe, _ = evaluate(a, b)
    for v in (dice, sens, prec, voe):
        assert 0.0 <= v <= 100.0
    if a.any() or b.any():
        # VOE and Dice are monotone transforms of each other
        j = 1 - voe / 100
        assert abs(dice / 100 - 2 * j / (1 + j)) < 1e-12


def test_threshold_mask():
    pred = np.array([[0.6, 0.4], [0.4, 0.6]])
    assert threshold_mask(pred).tolist() == [[1, 0], [0, 1]]
    assert threshold_mask(pred, 0.0).all()
    assert not threshold_mask(pred, 1.0 + 1e-9).any()


def test_report_roundtrip():
    a, b = square_masks()
    report = MetricsReport.from_masks([a, b, np.zeros_like(a)], [b, b, b], fold="val", ckpt="x.ckpt")
    text = report.to_text()
    assert "dice: " in text and "±" in text
    parsed = parse_metrics_report(text)
    assert parsed["fold"] == "val" and parsed["samples"] == "3"
    assert len(parsed["per_sample"]) == 3
    assert parsed["per_sample"][0]["dice"] == 60.0
    mean, std = parsed["summary"]["dice"]
    assert abs(mean - round(report.dice, 1)) < 1e-9
    assert parsed["rvd_undefined"] == "1"
    assert abs(report.rvd - 25.0) < 1e-12  # mean of 50 and 0, NaN excluded


def test_report_summary_in_order():
    rows = [(1.0, 2.0, 3.0, 4.0, 5.0), (3.0, 2.0, 1.0, 0.0, -1.0)]
    report = MetricsReport(rows)
    assert report.summary("dice") == (2.0, 1.0)
    assert report.values("rvd") == [5.0, -1.0]


def test_report_parse_rejects_garbage():
    with pytest.raises(ValueError):
        parse_metrics_report("no separator here\n")
