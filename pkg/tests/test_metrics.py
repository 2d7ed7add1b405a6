import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from irisusformer.metrics import ConfusionCounts, aggregate, compute_metrics, confusion, evaluate_masks, \
    format_table, per_image_records

masks = arrays(np.uint8, (8, 8), elements=st.integers(0, 1))


def brute(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def test_confusion_examples(rng):
    gt = rng.integers(0, 2, size=(8, 8))
    c = confusion(gt, gt)
    assert c.fp == c.fn == 0
    c = confusion(1 - gt, gt)
    assert c.tp == c.tn == 0


@given(masks, masks)
def test_confusion_matches_brute_force(pred, gt):
    c = confusion(pred, gt)
    assert (c.tp, c.fp, c.fn, c.tn) == brute(pred, gt)
    m = compute_metrics(c)
    assert m["e1"] + m["acc"] == 100.0


def test_metric_examples():
    assert compute_metrics(ConfusionCounts(10, 0, 0, 54)) == {"e1": 0.0, "f1": 100.0, "miou": 100.0, "acc": 100.0}
    m = compute_metrics(ConfusionCounts(40, 10, 10, 40))
    assert m["e1"] == 20.0 and m["f1"] == 80.0 and m["acc"] == 80.0
    assert m["miou"] == pytest.approx(200 / 3)
    assert compute_metrics(confusion(np.zeros((4, 4)), np.zeros((4, 4))))["f1"] == 100.0


def test_aggregate_examples(rng):
    one = compute_metrics(ConfusionCounts(3, 1, 2, 10))
    assert aggregate([one]).aggregate == one
    a, b = dict(one, e1=0.0), dict(one, e1=2.0)
    assert aggregate([a, b]).aggregate["e1"] == 1.0
    per = [compute_metrics(ConfusionCounts(*rng.integers(0, 20, size=4) + 1)) for _ in range(6)]
    shuffled = [per[i] for i in rng.permutation(6)]
    for k, v in aggregate(per).aggregate.items():
        assert aggregate(shuffled).aggregate[k] == pytest.approx(v, rel=1e-15)


def test_pooled_aggregation(rng):
    preds = [rng.integers(0, 2, size=(8, 8)) for _ in range(3)]
    gts = [rng.integers(0, 2, size=(8, 8)) for _ in range(3)]
    pooled = evaluate_masks(preds, gts, pooled=True).aggregate
    c = confusion(np.concatenate(preds), np.concatenate(gts))
    assert pooled == compute_metrics(c)


def test_rejects_bad_masks():
    with pytest.raises(ValueError):
        confusion(np.full((2, 2), 2), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        confusion(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        aggregate([])


def test_report_formats(rng):
    gts = [rng.integers(0, 2, size=(8, 8)) for _ in range(4)]
    rep = evaluate_masks(gts, gts, names=[f"im{i}" for i in range(4)])
    table = format_table(rep)
    assert table.splitlines()[0].split() == ["E1↓", "F1↑", "mIoU↑", "Acc↑"]
    assert table.splitlines()[1].split() == ["0.00", "100.00", "100.00", "100.00"]
    rows = per_image_records(rep).splitlines()
    assert rows[0] == "name\te1\tf1\tmiou\tacc" and len(rows) == 5
    assert rows[1].split("\t")[0] == "im0"
