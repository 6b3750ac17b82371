import json
import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from transnorm.errors import ContractError, DimensionError
from transnorm.metrics import (
    COLUMNS,
    ConfusionCounts,
    boundary,
    confusion,
    dataset_report,
    hausdorff,
    multiclass_report,
    parse_csv_report,
    ratios,
)


# ---------------------------------------------------------------- oracles


def brute_counts(pred, truth):
    tp = tn = fp = fn = 0
    h, w = pred.shape
    for i in range(h):
        for j in range(w):
            p, t = bool(pred[i, j]), bool(truth[i, j])
            if p and t:
                tp += 1
            elif p:
                fp += 1
            elif t:
                fn += 1
            else:
                tn += 1
    return tp, tn, fp, fn


def brute_ratios(tp, tn, fp, fn):
    def div(a, b):
        return a / b if b else None

    return {
        "acc": div(tp + tn, tp + tn + fp + fn),
        "se": div(tp, tp + fn),
        "sp": div(tn, tn + fp),
        "f1": div(2 * tp, 2 * tp + fp + fn),
        "miou": div(tp, tp + fp + fn),
        "dsc": div(2 * tp, 2 * tp + fp + fn),
    }


def brute_boundary(mask):
    h, w = mask.shape
    out = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                a, b = i + di, j + dj
                if not (0 <= a < h and 0 <= b < w) or not mask[a, b]:
                    out.append((i, j))
                    break
    return out


def brute_directed(src, dst):
    return [min(math.sqrt((a - c) ** 2 + (b - d) ** 2) for c, d in dst) for a, b in src]


def brute_hausdorff(pred, truth, percentile=None):
    bp, bt = brute_boundary(pred), brute_boundary(truth)
    if not bp or not bt:
        return None
    d1, d2 = brute_directed(bp, bt), brute_directed(bt, bp)
    if percentile is None:
        return max(max(d1), max(d2))
    return float(max(np.percentile(d1, percentile), np.percentile(d2, percentile)))


def random_pair(rng, size, density=None):
    d = rng.uniform(0.05, 0.6) if density is None else density
    return rng.random((size, size)) < d, rng.random((size, size)) < d


# ---------------------------------------------------------------- confusion


def test_confusion_perfect():
    truth = np.zeros((10, 10), dtype=bool)
    truth.flat[:10] = True
    assert confusion(truth, truth) == ConfusionCounts(tp=10, tn=90, fp=0, fn=0)


def test_confusion_inverted():
    rng = np.random.default_rng(0)
    truth = rng.random((8, 8)) < 0.3
    c = confusion(~truth, truth)
    assert c.tp == 0 and c.tn == 0
    assert c.total == 64


def test_confusion_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(20):
        pred, truth = random_pair(rng, 32)
        c = confusion(pred, truth)
        assert (c.tp, c.tn, c.fp, c.fn) == brute_counts(pred, truth)


def test_confusion_shape_mismatch():
    with pytest.raises(DimensionError, match=r"\(4, 4\).*\(4, 5\)"):
        confusion(np.zeros((4, 4)), np.zeros((4, 5)))


# ---------------------------------------------------------------- ratios


def test_ratios_worked_example():
    r = ratios(ConfusionCounts(tp=2, tn=6, fp=1, fn=1))
    assert r["dsc"] == pytest.approx(4 / 6, abs=1e-15)
    assert r["miou"] == 0.5
    assert r["acc"] == 0.8


def test_ratios_perfect_prediction():
    r = ratios(ConfusionCounts(tp=5, tn=5, fp=0, fn=0))
    assert all(v == 1.0 for v in r.values())


def test_zero_denominator_is_undefined():
    r = ratios(ConfusionCounts(tp=0, tn=10, fp=0, fn=0))
    assert r["se"] is None and r["dsc"] is None and r["miou"] is None and r["f1"] is None
    assert r["sp"] == 1.0
    r = ratios(ConfusionCounts(tp=10, tn=0, fp=0, fn=0))
    assert r["sp"] is None


counts = st.builds(
    ConfusionCounts,
    st.integers(0, 10_000),
    st.integers(0, 10_000),
    st.integers(0, 10_000),
    st.integers(0, 10_000),
)


@given(counts)
def test_ratio_properties(c):
    r = ratios(c)
    assert r["f1"] == r["dsc"]
    for v in r.values():
        assert v is None or 0.0 <= v <= 1.0
    if r["dsc"] is not None:
        assert r["miou"] <= r["dsc"]


@settings(max_examples=50, deadline=None)
@given(arrays(bool, (12, 12)), arrays(bool, (12, 12)))
def test_symmetric_metrics_under_swap(pred, truth):
    a, b = ratios(confusion(pred, truth)), ratios(confusion(truth, pred))
    assert a["dsc"] == b["dsc"] and a["miou"] == b["miou"] and a["acc"] == b["acc"]
    assert hausdorff(pred, truth) == hausdorff(truth, pred)
    c = confusion(pred, truth)
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else None
    assert b["se"] == precision


# ---------------------------------------------------------------- hausdorff


def test_boundary_four_connectivity():
    m = np.zeros((5, 5), dtype=bool)
    m[1:4, 1:4] = True
    b = boundary(m)
    assert not b[2, 2] and b[1, 1] and b[1, 2]
    assert b.sum() == 8


def test_boundary_image_edge_counts_as_background():
    m = np.ones((3, 3), dtype=bool)
    assert boundary(m).sum() == 8


def test_boundary_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(20):
        m = rng.random((16, 16)) < 0.6
        assert sorted(map(tuple, np.argwhere(boundary(m)))) == brute_boundary(m)


def test_hausdorff_identical_is_zero():
    rng = np.random.default_rng(3)
    m = rng.random((16, 16)) < 0.4
    assert hausdorff(m, m) == 0.0


def test_hausdorff_three_four_five():
    a = np.zeros((8, 8), dtype=bool)
    b = np.zeros((8, 8), dtype=bool)
    a[0, 0] = True
    b[3, 4] = True
    assert hausdorff(a, b) == 5.0


def test_hausdorff_empty_is_undefined():
    a = np.zeros((4, 4), dtype=bool)
    b = a.copy()
    b[1, 1] = True
    assert hausdorff(a, b) is None
    assert hausdorff(b, a) is None


def test_hausdorff_matches_brute_force():
    rng = np.random.default_rng(4)
    for _ in range(30):
        pred, truth = random_pair(rng, 16)
        assert hausdorff(pred, truth) == brute_hausdorff(pred, truth)


def test_hd95_matches_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(10):
        pred, truth = random_pair(rng, 16)
        assert hausdorff(pred, truth, 95) == brute_hausdorff(pred, truth, 95)
        assert hausdorff(pred, truth, 95) <= hausdorff(pred, truth)


# ---------------------------------------------------------------- reports


def test_multiclass_perfect_prediction():
    truth = np.zeros((16, 16), dtype=int)
    truth[4:10, 4:10] = 1
    rep = multiclass_report(truth, truth, 2)
    assert rep.mean["dsc"] == 1.0
    assert rep.mean["hd"] == 0.0


def test_absent_class_is_undefined_and_excluded():
    truth = np.zeros((16, 16), dtype=int)
    truth[2:6, 2:6] = 1
    rep = multiclass_report(truth, truth, 3)
    assert all(v is None for v in rep.per_class[2].values())
    assert rep.mean["dsc"] == 1.0
    assert rep.counts["dsc"] == 1


def test_multiclass_matches_per_class_loop():
    rng = np.random.default_rng(6)
    pred = rng.integers(0, 3, size=(16, 16))
    truth = rng.integers(0, 3, size=(16, 16))
    rep = multiclass_report(pred, truth, 3)
    means = {m: [] for m in ("acc", "se", "sp", "f1", "miou", "dsc", "hd")}
    for k in range(3):
        expect = brute_ratios(*brute_counts(pred == k, truth == k))
        expect["hd"] = brute_hausdorff(pred == k, truth == k)
        for m, v in expect.items():
            assert rep.per_class[k][m] == v, (k, m)
            if k > 0 and v is not None:
                means[m].append(v)
    for m, vals in means.items():
        assert rep.mean[m] == pytest.approx(np.mean(vals), abs=1e-15)


def test_report_rejects_bad_ids():
    with pytest.raises(ContractError):
        multiclass_report(np.full((4, 4), 3), np.zeros((4, 4), dtype=int), 3)


def test_dataset_report_pools_counts():
    rng = np.random.default_rng(7)
    preds = [rng.integers(0, 2, size=(8, 8)) for _ in range(3)]
    truths = [rng.integers(0, 2, size=(8, 8)) for _ in range(3)]
    rep = dataset_report(preds, truths, 2)
    pooled = confusion(np.concatenate(preds) == 1, np.concatenate(truths) == 1)
    assert rep.per_class[1]["dsc"] == ratios(pooled)["dsc"]
    hds = [hausdorff(p == 1, t == 1) for p, t in zip(preds, truths)]
    assert rep.per_class[1]["hd"] == pytest.approx(np.mean(hds), abs=1e-15)


def test_csv_and_json_agree():
    rng = np.random.default_rng(8)
    rep = multiclass_report(rng.integers(0, 3, (16, 16)), rng.integers(0, 3, (16, 16)), 3)
    text = rep.to_csv()
    assert text.splitlines()[0] == ",".join(COLUMNS)
    from_csv = parse_csv_report(text)
    from_json = json.loads(rep.to_json())["rows"]
    assert from_csv == from_json
    assert [r["class"] for r in from_csv] == ["0", "1", "2", "mean"]


def test_csv_writes_undefined_as_empty():
    truth = np.zeros((8, 8), dtype=int)
    truth[1:3, 1:3] = 1
    rep = multiclass_report(truth, truth, 3)
    row2 = rep.to_csv().splitlines()[3]
    assert row2 == "2,,,,,,,"
    npt.assert_equal(json.loads(rep.to_json())["rows"][2]["dsc"], None)
