import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_confusion, brute_metrics
from sslparsing.errors import MetricsError
from sslparsing.metrics import (
    ConfusionMatrix,
    accumulate_confusion,
    area_bucket,
    compute_metrics,
    merge_confusion,
    reduce_confusion,
    report_to_json,
    sliced_evaluation,
)
from sslparsing.raster_io import load_manifest, read_label_map, write_label_map
from sslparsing.synthgen import FigureConfig, generate_dataset

EX_GT = np.array([[0, 0], [1, 1]])
EX_PRED = np.array([[0, 1], [1, 1]])


def random_pair(rng, c, size=16, ignore_frac=0.1):
    gt = rng.integers(0, c, (size, size))
    gt[rng.random((size, size)) < ignore_frac] = 255
    pred = np.where(rng.random((size, size)) < 0.6, np.where(gt == 255, 0, gt), rng.integers(0, c, (size, size)))
    return gt, pred


def test_perfect_prediction_is_diagonal(rng):
    gt = rng.integers(0, 4, (7, 9))
    cm = accumulate_confusion(gt, gt, 4)
    assert np.array_equal(cm.counts, np.diag(np.bincount(gt.ravel(), minlength=4)))
    rep = compute_metrics(accumulate_confusion(np.array([[0, 1]]), np.array([[0, 1]]), 2))
    assert (rep.overall_accuracy, rep.mean_accuracy, rep.mean_iou) == (1.0, 1.0, 1.0)


def test_two_by_two_example():
    cm = accumulate_confusion(EX_GT, EX_PRED, 2)
    assert cm.counts.tolist() == [[1, 1], [0, 2]]
    rep = compute_metrics(cm)
    assert rep.overall_accuracy == 0.75
    assert rep.iou(0) == pytest.approx(0.5, abs=1e-15)
    assert rep.iou(1) == pytest.approx(2 / 3, abs=1e-15)
    assert rep.mean_iou == pytest.approx(7 / 12, abs=1e-15)
    assert rep.mean_accuracy == 0.75


def test_all_ignored():
    cm = accumulate_confusion(np.full((3, 4), 255), np.zeros((3, 4), int), 3)
    assert cm.counts.sum() == 0 and cm.total_ignored == 12
    with pytest.raises(MetricsError, match="no evaluated pixels"):
        compute_metrics(cm)


def test_absent_class_excluded():
    gt = np.array([[0, 1, 2]])
    rep = compute_metrics(accumulate_confusion(gt, gt, 6))
    assert {3, 4, 5} == rep.classes_excluded
    assert rep.mean_iou == 1.0
    zero = compute_metrics(accumulate_confusion(gt, gt, 6), absent_class_rule="zero")
    assert zero.mean_iou == pytest.approx(0.5)


def test_accumulate_errors():
    with pytest.raises(MetricsError, match="shape"):
        accumulate_confusion(np.zeros((2, 2), int), np.zeros((2, 3), int), 2)
    with pytest.raises(MetricsError):
        accumulate_confusion(np.zeros((2, 2), int), np.full((2, 2), 5), 2)
    with pytest.raises(MetricsError):
        merge_confusion(ConfusionMatrix.zeros(2), ConfusionMatrix.zeros(3))


@pytest.mark.parametrize("c", [2, 7, 20])
def test_matches_brute_force(rng, c):
    for _ in range(30):
        gt, pred = random_pair(rng, c)
        counts, ignored = brute_confusion(gt, pred, c)
        cm = accumulate_confusion(gt, pred, c)
        assert cm.total_ignored == ignored
        assert {k: int(v) for k, v in np.ndenumerate(cm.counts) if v} == counts
        rep, ref = compute_metrics(cm), brute_metrics(counts, c)
        assert rep.overall_accuracy == pytest.approx(ref["overall_accuracy"], abs=1e-12)
        assert rep.mean_iou == pytest.approx(ref["mean_iou"], abs=1e-12)


def test_merge_identity_and_commutativity(rng):
    a = accumulate_confusion(*random_pair(rng, 5), 5)
    b = accumulate_confusion(*random_pair(rng, 5), 5)
    assert merge_confusion(a, ConfusionMatrix.zeros(5)) == a
    assert merge_confusion(a, b) == merge_confusion(b, a)


def test_one_by_one_equals_single_pass(rng):
    pairs = [random_pair(rng, 7) for _ in range(10)]
    merged = reduce_confusion((accumulate_confusion(g, p, 7) for g, p in pairs), 7)
    gts = np.concatenate([g for g, _ in pairs])
    preds = np.concatenate([p for _, p in pairs])
    counts, ignored = brute_confusion(gts, preds, 7)
    assert merged.total_ignored == ignored
    assert {k: int(v) for k, v in np.ndenumerate(merged.counts) if v} == counts


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([2, 5, 9]))
def test_permutation_invariance(seed, c):
    rng = np.random.default_rng(seed)
    gt, pred = random_pair(rng, c, size=8)
    perm = rng.permutation(c)
    lut = np.concatenate([perm, np.arange(c, 256)])
    lut[255] = 255
    a = compute_metrics(accumulate_confusion(gt, pred, c))
    b = compute_metrics(accumulate_confusion(lut[gt], lut[pred], c))
    assert a.overall_accuracy == b.overall_accuracy
    assert a.mean_iou == pytest.approx(b.mean_iou, abs=1e-12)
    assert a.mean_accuracy == pytest.approx(b.mean_accuracy, abs=1e-12)
    for cid, v in a.per_class_iou:
        assert b.iou(int(perm[cid])) == v


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_iou_bounded_by_recall(seed):
    rng = np.random.default_rng(seed)
    gt, pred = random_pair(rng, 6, size=8)
    rep = compute_metrics(accumulate_confusion(gt, pred, 6))
    recall = dict(rep.per_class_accuracy)
    for cid, iou in rep.per_class_iou:
        if iou is not None and recall[cid] is not None:
            assert 0 <= iou <= recall[cid] + 1e-15
        for v in (rep.overall_accuracy, rep.mean_accuracy, rep.mean_iou):
            assert 0.0 <= v <= 1.0


def test_all_ignore_image_changes_nothing(rng):
    gt, pred = random_pair(rng, 4)
    base = accumulate_confusion(gt, pred, 4)
    extra = accumulate_confusion(np.full((5, 5), 255), np.zeros((5, 5), int), 4)
    a, b = compute_metrics(base), compute_metrics(base + extra)
    assert report_to_json(a) == report_to_json(b)


def test_report_json_format():
    text = report_to_json(compute_metrics(accumulate_confusion(EX_GT, EX_PRED, 3)))
    data = json.loads(text)
    assert list(data) == [
        "overall_accuracy", "mean_accuracy", "mean_iou", "per_class_iou",
        "excluded_classes", "absent_class_rule", "pixel_counts",
    ]
    assert '"mean_iou": 0.583333' in text
    assert '"overall_accuracy": 0.750000' in text
    assert data["per_class_iou"]["2"] is None
    assert data["excluded_classes"] == [2]
    assert data["pixel_counts"] == {"0": 2, "1": 2, "2": 0}


def test_area_buckets(rng):
    assert area_bucket(np.zeros((10, 10), int)) == "small"
    m = np.zeros((160, 160), np.uint8)
    m.ravel()[: 153 ** 2] = 5
    assert area_bucket(m) == "medium"
    m.ravel()[153 ** 2 - 1] = 0
    assert area_bucket(m) == "small"
    big = np.ones((330, 330), np.uint8)
    assert area_bucket(big) == "large"
    r = rng.integers(0, 3, (40, 40))
    r[r == 2] = 255
    count = sum(1 for v in r.ravel().tolist() if v not in (0, 255))
    assert area_bucket(r, thresholds=(500, 1000)) == ("small" if count < 500 else "medium" if count < 1000 else "large")


@pytest.fixture(scope="module")
def small_set(tmp_path_factory):
    root = tmp_path_factory.mktemp("slices")
    cfg = FigureConfig(head_missed_prob=0.0, upper_body_prob=0.0)
    manifest = generate_dataset(5, 12, cfg, root / "data")
    return root, manifest


def test_full_body_slice_equals_all(small_set, lip):
    root, manifest = small_set
    index = load_manifest(manifest)
    pred_dir = root / "pred_full"
    pred_dir.mkdir()
    rng = np.random.default_rng(0)
    for r in index:
        gt = read_label_map(r.label_path)
        noisy = np.where(rng.random(gt.shape) < 0.2, rng.integers(0, 20, gt.shape), gt)
        write_label_map(noisy, pred_dir / f"{r.image_id}.png")
    res = sliced_evaluation(index, pred_dir, lip)
    assert res.ok
    assert report_to_json(res.reports["full-body"]) == report_to_json(res.reports["all"])
    assert "head-missed" not in res.reports
    assert any("head-missed" in n for n in res.notes)
    assert "upper-body" not in res.reports
    parallel = sliced_evaluation(index, pred_dir, lip, jobs=4)
    for name, rep in res.reports.items():
        assert report_to_json(parallel.reports[name]) == report_to_json(rep)


def test_missing_prediction_reported(small_set, lip):
    root, manifest = small_set
    index = load_manifest(manifest)
    pred_dir = root / "pred_partial"
    pred_dir.mkdir()
    for r in index.records[1:]:
        write_label_map(read_label_map(r.label_path), pred_dir / f"{r.image_id}.png")
    res = sliced_evaluation(index, pred_dir, lip)
    assert not res.ok and len(res.errors) == 1
    assert index.records[0].image_id in res.errors[0]
    assert res.reports["all"].mean_iou == 1.0
