"""Scoring against a slow per-pixel recount.

The oracle walks every pixel and keeps plain counters, one branch per case,
so it cannot share a bug with the vectorised tally. Frozen cases carry the
arithmetic in comments.
"""

import numpy as np
import pytest

from multimod.metrics import Confusion, compute_metrics


def oracle_single(cases, k):
    tp = np.zeros(k, dtype=np.int64)
    fp = np.zeros(k, dtype=np.int64)
    fn = np.zeros(k, dtype=np.int64)
    correct = total = 0
    for pred, labels, mask in cases:
        for i in range(labels.shape[0]):
            for j in range(labels.shape[1]):
                if not mask[i, j]:
                    continue
                y, p = int(labels[i, j]), int(pred[i, j])
                total += 1
                if p == y:
                    correct += 1
                    tp[y] += 1
                else:
                    fp[p] += 1
                    fn[y] += 1
    return finish(tp, fp, fn, correct, total, k)


def oracle_multi(cases, k):
    tp = np.zeros(k, dtype=np.int64)
    fp = np.zeros(k, dtype=np.int64)
    fn = np.zeros(k, dtype=np.int64)
    correct = total = 0
    for pred, stack, mask in cases:
        for i in range(mask.shape[0]):
            for j in range(mask.shape[1]):
                if not mask[i, j]:
                    continue
                p = int(pred[i, j])
                members = [c for c in range(k) if stack[c, i, j]]
                total += 1
                if p in members:
                    correct += 1
                    for c in members:
                        tp[c] += 1
                else:
                    fp[p] += 1
                    for c in members:
                        fn[c] += 1
    return finish(tp, fp, fn, correct, total, k)


def finish(tp, fp, fn, correct, total, k):
    f1 = np.full(k, np.nan)
    iou = np.full(k, np.nan)
    supported = []
    for c in range(k):
        if tp[c] + fp[c] + fn[c] == 0:
            continue
        supported.append(c)
        iou[c] = tp[c] / (tp[c] + fp[c] + fn[c])
        f1[c] = 2 * tp[c] / (2 * tp[c] + fp[c] + fn[c])
    return {
        "oa": correct / total if total else float("nan"),
        "f1": f1,
        "iou": iou,
        "mf1": float(np.mean(f1[supported])) if supported else float("nan"),
        "miou": float(np.mean(iou[supported])) if supported else float("nan"),
        "absent": [c for c in range(k) if c not in supported],
    }


def assert_same_metrics(got, want):
    assert got["absent"] == want["absent"]
    for key in ("oa", "mf1", "miou"):
        if np.isnan(want[key]):
            assert np.isnan(got[key])
        else:
            assert got[key] == pytest.approx(want[key], abs=1e-12)
    for key in ("f1", "iou"):
        np.testing.assert_allclose(got[key], want[key], atol=1e-12, equal_nan=True)


def test_single_label_matches_recount_oracle(rng):
    for _ in range(30):
        k = int(rng.integers(2, 7))
        h, w = rng.integers(2, 9, size=2)
        cases = []
        conf = Confusion.empty(k)
        for _ in range(int(rng.integers(1, 4))):
            labels = rng.integers(0, k, (h, w))
            pred = rng.integers(0, k, (h, w))
            mask = rng.random((h, w)) < 0.8
            cases.append((pred, labels, mask))
            conf.update(pred, labels, mask)
        assert_same_metrics(compute_metrics(conf), oracle_single(cases, k))


def test_multi_label_matches_recount_oracle(rng):
    for _ in range(30):
        k = int(rng.integers(2, 5))
        h, w = rng.integers(2, 7, size=2)
        cases = []
        conf = Confusion.empty(k, multi_label=True)
        for _ in range(int(rng.integers(1, 3))):
            stack = (rng.random((k, h, w)) < 0.4).astype(np.uint8)
            pred = rng.integers(0, k, (h, w))
            mask = rng.random((h, w)) < 0.8
            cases.append((pred, stack, mask))
            conf.update(pred, stack, mask)
        assert_same_metrics(compute_metrics(conf), oracle_multi(cases, k))


def test_single_label_hand_case():
    # pixels (label, pred): (0,0) hit, (0,1) fp1 fn0, (1,1) hit, (2,1) fp1 fn2
    # tp = [1,1,0]  fp = [0,2,0]  fn = [1,0,1]
    # iou = [1/2, 1/3, 0]  f1 = [2/3, 1/2, 0]  oa = 1/2
    conf = Confusion.empty(3)
    conf.update(np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 2]]))
    m = compute_metrics(conf)
    assert m["oa"] == 0.5
    np.testing.assert_allclose(m["iou"], [0.5, 1 / 3, 0.0])
    np.testing.assert_allclose(m["f1"], [2 / 3, 0.5, 0.0])
    assert m["miou"] == pytest.approx((0.5 + 1 / 3 + 0.0) / 3)
    assert m["mf1"] == pytest.approx((2 / 3 + 0.5 + 0.0) / 3)
    assert m["absent"] == []


def test_multi_label_hand_case():
    # sets {0}, {0,1}, {1,2}, {2}; preds 0, 1, 0, 2
    # hits add a tp for every member; the miss adds fp0 and fn for {1,2}
    # tp = [2,1,1]  fp = [1,0,0]  fn = [0,1,1]  oa = 3/4
    stack = np.zeros((3, 2, 2), dtype=np.uint8)
    stack[0, 0, 0] = 1
    stack[0, 0, 1] = stack[1, 0, 1] = 1
    stack[1, 1, 0] = stack[2, 1, 0] = 1
    stack[2, 1, 1] = 1
    conf = Confusion.empty(3, multi_label=True)
    conf.update(np.array([[0, 1], [0, 2]]), stack)
    m = compute_metrics(conf)
    assert m["oa"] == 0.75
    np.testing.assert_allclose(m["iou"], [2 / 3, 0.5, 0.5])
    np.testing.assert_allclose(m["f1"], [4 / 5, 2 / 3, 2 / 3])
    assert m["miou"] == pytest.approx(5 / 9)
    assert m["mf1"] == pytest.approx(32 / 45)


def test_absent_classes_get_nan_and_are_excluded():
    conf = Confusion.empty(4)
    conf.update(np.array([[0, 1]]), np.array([[0, 1]]))
    m = compute_metrics(conf)
    assert m["absent"] == [2, 3]
    assert np.isnan(m["f1"][2]) and np.isnan(m["iou"][3])
    assert m["miou"] == 1.0 and m["mf1"] == 1.0


def test_empty_tally_is_all_nan():
    m = compute_metrics(Confusion.empty(3))
    assert np.isnan(m["oa"]) and np.isnan(m["miou"]) and np.isnan(m["mf1"])
    assert m["absent"] == [0, 1, 2]


def test_masked_pixels_never_inspected():
    # the masked-out pixel holds an illegal label id and must not trip the
    # range check or the tallies
    conf = Confusion.empty(2)
    labels = np.array([[0, 99]])
    mask = np.array([[True, False]])
    conf.update(np.array([[0, 1]]), labels, mask)
    m = compute_metrics(conf)
    assert m["oa"] == 1.0
    assert conf.matrix.sum() == 1


def test_update_validation():
    conf = Confusion.empty(2)
    with pytest.raises(ValueError, match="label id out of range"):
        conf.update(np.array([[0]]), np.array([[5]]))
    with pytest.raises(ValueError, match="prediction id out of range"):
        conf.update(np.array([[5]]), np.array([[0]]))
    with pytest.raises(ValueError, match="vs labels"):
        conf.update(np.zeros((2, 2), dtype=int), np.zeros((2, 3), dtype=int))
    ml = Confusion.empty(2, multi_label=True)
    with pytest.raises(ValueError, match="K, H, W"):
        ml.update(np.zeros((2, 2), dtype=int), np.zeros((2, 2), dtype=int))


def test_merge_equals_single_pass(rng):
    k = 4
    whole = Confusion.empty(k)
    part_a = Confusion.empty(k)
    part_b = Confusion.empty(k)
    for i in range(6):
        pred = rng.integers(0, k, (5, 5))
        labels = rng.integers(0, k, (5, 5))
        whole.update(pred, labels)
        (part_a if i < 3 else part_b).update(pred, labels)
    part_a.merge(part_b)
    assert np.array_equal(part_a.matrix, whole.matrix)
    assert_same_metrics(compute_metrics(part_a), compute_metrics(whole))


def test_merge_rejects_layout_mismatch():
    with pytest.raises(ValueError, match="merge"):
        Confusion.empty(3).merge(Confusion.empty(4))
    with pytest.raises(ValueError, match="merge"):
        Confusion.empty(3).merge(Confusion.empty(3, multi_label=True))
