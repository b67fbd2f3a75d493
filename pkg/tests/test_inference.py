"""Prediction-time behaviour: TTA, tiling, corruptions, evaluation.

Most tests drive the machinery with small pure-numpy stub predictors whose
exact output is known, so flip bookkeeping, tile averaging and corruption
plumbing are checked against values computed right here. One integration
test runs the real model to tie the stubs back to reality.
"""

import logging

import numpy as np
import pytest

from conftest import random_sample, tiny_inputs, tiny_model
from multimod.data import Sample
from multimod.inference import (
    CORRUPTION_KINDS,
    corrupt_modality,
    evaluate,
    make_predictor,
    robustness_eval,
    sliding_window_predict,
    softmax,
    tta_predict,
)
from multimod.model import multimodal_forward
from multimod.tensor import Tensor


def identity_predictor(scale=(1.0, 2.0)):
    """Logits are the input channel scaled per class: flip-equivariant."""

    def predict(mods):
        x = next(iter(mods.values()))[0]
        return np.stack([s * x for s in scale])

    return predict


# ---------------------------------------------------------------------------
# softmax


def test_softmax_matches_formula(rng):
    x = rng.standard_normal((3, 4, 4))
    p = softmax(x, axis=0)
    expected = np.exp(x) / np.exp(x).sum(axis=0, keepdims=True)
    np.testing.assert_allclose(p, expected, atol=1e-12)
    np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-12)


def test_softmax_survives_huge_logits():
    x = np.array([[[30000.0]], [[29999.0]]])
    p = softmax(x, axis=0)
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# predictors and TTA


def test_make_predictor_matches_eval_forward(rng):
    cfg, params = tiny_model()
    sample = {k: v[0] for k, v in tiny_inputs(rng, cfg, n=1, size=32).items()}
    predict = make_predictor(params)
    got = predict(sample)
    inputs = {k: Tensor(v[None]) for k, v in sample.items()}
    want = multimodal_forward(inputs, params, mode="eval").data[0]
    assert got.shape == (4, 32, 32)
    assert np.array_equal(got, want)


def test_tta_is_identity_for_equivariant_predictors(rng):
    # when the predictor commutes with flips, every variant contributes the
    # same probabilities and the average changes nothing
    mods = {"m": rng.random((1, 6, 6), dtype=np.float32)}
    predict = identity_predictor()
    plain = softmax(predict(mods), axis=0)
    np.testing.assert_allclose(tta_predict(predict, mods), plain, atol=1e-7)


def test_tta_averages_probabilities_not_logits():
    # the predictor recognises which flip variant it received from a marker
    # pixel and returns variant-specific constant logits; probability
    # averaging and logit averaging then disagree measurably
    marker = np.zeros((1, 2, 2), dtype=np.float32)
    marker[0, 0, 0] = 1.0
    variants = {
        (0, 0): (0.0, 0.0),
        (0, 1): (4.0, 0.0),
        (1, 0): (0.0, 2.0),
        (1, 1): (-3.0, 1.0),
    }

    def predict(mods):
        x = mods["m"][0]
        where = (int(x[0, 1] == 1.0) or int(x[1, 1] == 1.0), int(x[1, 0] == 1.0) or int(x[1, 1] == 1.0))
        a, b = variants[where]
        out = np.empty((2, 2, 2))
        out[0] = a
        out[1] = b
        return out

    got = tta_predict(predict, {"m": marker})
    prob_mean = np.mean(
        [softmax(np.array(v, dtype=np.float64))[None].T for v in variants.values()],
        axis=0,
    ).reshape(2, 1, 1)
    np.testing.assert_allclose(got, np.broadcast_to(prob_mean, (2, 2, 2)), atol=1e-12)

    logit_mean = softmax(np.mean([np.array(v) for v in variants.values()], axis=0))
    assert not np.allclose(got[:, 0, 0], logit_mean, atol=1e-3)


# ---------------------------------------------------------------------------
# sliding window


def test_single_tile_equals_whole_image(rng):
    mods = {"m": rng.random((1, 8, 8), dtype=np.float32)}
    predict = identity_predictor()
    whole = softmax(predict(mods), axis=0)
    tiled = sliding_window_predict(predict, mods, window=8, stride=8)
    assert np.array_equal(tiled, whole.astype(np.float64))


def test_tiling_matches_independent_accumulation(rng):
    mods = {"m": rng.random((1, 8, 10), dtype=np.float32)}
    predict = identity_predictor((0.5, 1.5, -1.0))
    window, stride = 4, 3
    got = sliding_window_predict(predict, mods, window, stride)

    def starts(extent):
        pos = list(range(0, extent - window + 1, stride))
        if pos[-1] != extent - window:
            pos.append(extent - window)
        return pos

    acc = np.zeros((3, 8, 10))
    cnt = np.zeros((8, 10))
    for top in starts(8):
        for left in starts(10):
            tile = {"m": mods["m"][:, top : top + window, left : left + window]}
            acc[:, top : top + window, left : left + window] += softmax(
                predict(tile), axis=0
            )
            cnt[top : top + window, left : left + window] += 1.0
    assert cnt.min() >= 1.0  # clamped last row/column reach the borders
    np.testing.assert_allclose(got, acc / cnt, atol=1e-12)
    assert {2.0} < set(np.unique(cnt))  # tiles genuinely overlap


def test_sliding_window_with_tta(rng):
    mods = {"m": rng.random((1, 6, 6), dtype=np.float32)}
    predict = identity_predictor()
    got = sliding_window_predict(predict, mods, 6, 6, tta=True)
    np.testing.assert_allclose(got, tta_predict(predict, mods), atol=1e-12)


def test_sliding_window_validation(rng):
    mods = {"m": rng.random((1, 4, 4), dtype=np.float32)}
    predict = identity_predictor()
    with pytest.raises(ValueError, match="positive"):
        sliding_window_predict(predict, mods, 0, 1)
    with pytest.raises(ValueError, match="positive"):
        sliding_window_predict(predict, mods, 2, 0)
    with pytest.raises(ValueError, match="exceeds"):
        sliding_window_predict(predict, mods, 8, 2)


# ---------------------------------------------------------------------------
# corruptions


def test_corruption_kinds(rng):
    mods = {
        "color": rng.random((3, 4, 4), dtype=np.float32),
        "height": rng.random((1, 4, 4), dtype=np.float32),
    }
    zeroed = corrupt_modality(mods, "missing_zero", "height")
    assert np.array_equal(zeroed["height"], np.zeros((1, 4, 4)))
    maxed = corrupt_modality(mods, "interfered_max", "height")
    assert np.array_equal(maxed["height"], np.ones((1, 4, 4)))
    noisy = corrupt_modality(
        mods, "white_noise", "height", rng=np.random.default_rng(0)
    )
    assert noisy["height"].min() >= 0.0 and noisy["height"].max() <= 1.0
    assert not np.array_equal(noisy["height"], mods["height"])
    again = corrupt_modality(
        mods, "white_noise", "height", rng=np.random.default_rng(0)
    )
    assert np.array_equal(noisy["height"], again["height"])

    # untouched modality passes through by reference; input dict unharmed
    assert zeroed["color"] is mods["color"]
    assert mods["height"].max() > 0.0


def test_corruption_contract(rng):
    mods = {"color": rng.random((3, 4, 4), dtype=np.float32)}
    with pytest.raises(KeyError, match="height"):
        corrupt_modality(mods, "missing_zero", "height")
    with pytest.raises(ValueError, match="unknown corruption"):
        corrupt_modality(mods, "fog", "color")
    with pytest.raises(ValueError, match="random generator"):
        corrupt_modality(mods, "white_noise", "color")
    assert CORRUPTION_KINDS == ("missing_zero", "white_noise", "interfered_max")


def test_corrupting_primary_logs_warning(rng, caplog):
    mods = {"color": rng.random((3, 4, 4), dtype=np.float32)}
    with caplog.at_level(logging.WARNING, logger="multimod.inference"):
        corrupt_modality(mods, "missing_zero", "color", primary="color")
    assert any("primary" in r.message for r in caplog.records)


# ---------------------------------------------------------------------------
# evaluation


def threshold_sample(values, labels):
    """Single-channel sample scored by the 0.5-threshold stub below."""
    arr = np.asarray(values, dtype=np.float32)[None]
    return Sample(
        modalities={"m": arr},
        labels=np.asarray(labels, dtype=np.int64),
        valid_mask=np.ones(arr.shape[1:], dtype=bool),
    )


def threshold_predictor(mods):
    x = mods["m"][0]
    return np.stack([0.5 - x, x - 0.5])  # class 1 wherever x > 0.5


def test_evaluate_against_hand_counted_metrics():
    # sample 1: predictions 0,1 / labels 0,1 -> both right
    # sample 2: predictions 1,1 / labels 0,1 -> one wrong
    # oa = 3/4; tp = [1,2], fp = [0,1], fn = [1,0]
    # iou0 = 1/2, iou1 = 2/3
    samples = [
        threshold_sample([[0.1, 0.9]], [[0, 1]]),
        threshold_sample([[0.8, 0.7]], [[0, 1]]),
    ]
    metrics, conf = evaluate(threshold_predictor, samples, 2)
    assert metrics["oa"] == 0.75
    np.testing.assert_allclose(metrics["iou"], [0.5, 2.0 / 3.0])
    assert metrics["miou"] == pytest.approx(7.0 / 12.0)
    assert conf.matrix.sum() == 4


def test_evaluate_autodetects_multi_label():
    stack = np.zeros((2, 1, 2), dtype=np.uint8)
    stack[0, 0, 0] = 1
    stack[0, 0, 1] = stack[1, 0, 1] = 1
    sample = Sample(
        modalities={"m": np.array([[[0.2, 0.9]]], dtype=np.float32)},
        labels=stack,
        valid_mask=np.ones((1, 2), dtype=bool),
    )
    metrics, conf = evaluate(threshold_predictor, [sample], 2)
    assert conf.multi_label
    # predictions 0 and 1, both inside their pixel's label set
    assert metrics["oa"] == 1.0


def test_evaluate_corruption_plumbing():
    samples = [threshold_sample([[0.1, 0.9]], [[0, 1]])]
    clean, _ = evaluate(threshold_predictor, samples, 2)
    dead, _ = evaluate(
        threshold_predictor, samples, 2, corruption=("missing_zero", "m")
    )
    assert clean["oa"] == 1.0
    assert dead["oa"] == 0.5  # zeros predict class 0 everywhere

    same_a, _ = evaluate(
        threshold_predictor, samples, 2, corruption=("white_noise", "m"),
        corruption_seed=9,
    )
    same_b, _ = evaluate(
        threshold_predictor, samples, 2, corruption=("white_noise", "m"),
        corruption_seed=9,
    )
    assert same_a["oa"] == same_b["oa"]


def test_robustness_eval_is_evaluate_with_corruption():
    samples = [threshold_sample([[0.1, 0.9]], [[0, 1]])]
    direct, _ = evaluate(
        threshold_predictor, samples, 2, corruption=("interfered_max", "m")
    )
    wrapped = robustness_eval(threshold_predictor, samples, 2, "interfered_max", "m")
    assert wrapped["oa"] == direct["oa"]
    assert wrapped["miou"] == direct["miou"]


def test_evaluate_requires_samples():
    with pytest.raises(ValueError, match="no samples"):
        evaluate(threshold_predictor, [], 2)


def test_evaluate_real_model_window_equals_whole(rng):
    cfg, params = tiny_model()
    predict = make_predictor(params)
    samples = [random_sample(rng, size=32) for _ in range(2)]
    whole, _ = evaluate(predict, samples, 4)
    tiled, _ = evaluate(predict, samples, 4, window=32, stride=32)
    assert whole["miou"] == tiled["miou"]
    assert whole["oa"] == tiled["oa"]
