import csv
import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ashplus.config import TrainConfig
from ashplus.dft import DualFeatureTransform
from ashplus.errors import ShapeError
from ashplus.metrics import (accumulate, avg_miou, classwise_style_diff, dump_features, evaluate,
                             iou_per_class, miou, new_confusion, rel_diff, summarize,
                             write_eval_report)
from ashplus.nets import Decoder, Encoder, SegNet
from ashplus.objectives import IGNORE_INDEX
from ashplus.synthdata import default_spec, generate_domain


def _oracle(pred, truth, k):
    """Per-pixel counting of TP/FP/FN and mIoU over classes with a nonzero union."""
    tp, fp, fn = [0] * k, [0] * k, [0] * k
    for p, t in zip(np.ravel(pred).tolist(), np.ravel(truth).tolist()):
        if t == IGNORE_INDEX:
            continue
        if p == t:
            tp[t] += 1
        else:
            fp[p] += 1
            fn[t] += 1
    ious = [tp[c] / (tp[c] + fp[c] + fn[c]) if tp[c] + fp[c] + fn[c] else None for c in range(k)]
    present = [v for v in ious if v is not None]
    return ious, (sum(present) / len(present) if present else float("nan"))


def test_accumulate_diagonal():
    cm = new_confusion(4)
    accumulate(cm, np.full(10, 2), np.full(10, 2))
    assert cm[2, 2] == 10 and cm.sum() == 10


def test_accumulate_all_ignored_unchanged():
    cm = new_confusion(3)
    accumulate(cm, np.zeros((4, 4), int), np.full((4, 4), IGNORE_INDEX))
    assert cm.sum() == 0


def test_accumulate_errors():
    with pytest.raises(ShapeError):
        accumulate(new_confusion(3), np.zeros(4, int), np.zeros(5, int))
    with pytest.raises(ShapeError):
        accumulate(new_confusion(3), np.zeros(4, int), np.full(4, 3))


def test_oracle_equivalence_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(50):
        k = int(rng.integers(2, 6))
        truth = rng.integers(0, k, (8, 8))
        truth[rng.random((8, 8)) < 0.1] = IGNORE_INDEX
        pred = rng.integers(0, k, (8, 8))
        cm = accumulate(new_confusion(k), pred, truth)
        ious, expected = _oracle(pred, truth, k)
        got, present = iou_per_class(cm)
        for c in range(k):
            if ious[c] is None:
                assert not present[c] and np.isnan(got[c])
            else:
                assert got[c] == pytest.approx(ious[c], abs=1e-12)
        assert miou(cm) == pytest.approx(expected, abs=1e-12)
        counted = int((truth != IGNORE_INDEX).sum())
        assert cm.sum() == counted and (cm >= 0).all()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_accumulate_order_independent(seed):
    rng = np.random.default_rng(seed)
    pairs = [(rng.integers(0, 4, (3, 3)), rng.integers(0, 4, (3, 3))) for _ in range(5)]
    forward = new_confusion(4)
    for p, t in pairs:
        accumulate(forward, p, t)
    backward = new_confusion(4)
    for p, t in reversed(pairs):
        accumulate(backward, p, t)
    assert np.array_equal(forward, backward)


def test_iou_hand_cases():
    perfect = accumulate(new_confusion(3), np.array([0, 1, 1, 2]), np.array([0, 1, 1, 2]))
    assert np.all(iou_per_class(perfect)[0] == 1.0) and miou(perfect) == 1.0
    disjoint = accumulate(new_confusion(2), np.array([1, 1]), np.array([0, 0]))
    assert iou_per_class(disjoint)[0][0] == 0.0
    # class 0: TP=2, FP=1, FN=1
    cm = accumulate(new_confusion(2), np.array([0, 0, 0, 1, 1]), np.array([0, 0, 1, 0, 1]))
    assert iou_per_class(cm)[0][0] == pytest.approx(0.5)


def test_miou_two_classes_mean():
    # class 0: TP 1, union 5 -> 0.2; class 1: TP 6, union 10 -> 0.6
    cm = np.array([[1, 2], [2, 6]])
    assert miou(cm) == pytest.approx(0.4)


def test_miou_excludes_absent():
    cm = new_confusion(4)
    accumulate(cm, np.array([0, 1]), np.array([0, 1]))
    assert miou(cm) == 1.0
    assert np.isnan(miou(new_confusion(3)))


def test_avg_miou_published_row():
    row = [30.70, 30.00, 27.30, 31.20, 27.30, 52.30, 50.10, 43.50, 45.60, 25.00]
    assert avg_miou(row) == pytest.approx(36.30, abs=5e-3)
    assert avg_miou([0.42]) == 0.42
    for perm in itertools.islice(itertools.permutations(row[:5]), 20):
        assert avg_miou(perm) == pytest.approx(avg_miou(row[:5]), rel=1e-12)
    with pytest.raises(ValueError):
        avg_miou([])


def test_rel_diff_published_rows():
    assert rel_diff(36.30, 18.70) == pytest.approx(48.48, abs=5e-3)
    assert rel_diff(40.80, 32.60) == pytest.approx(20.10, abs=5e-3)
    assert rel_diff(12.3, 12.3) == 0.0


@settings(max_examples=50, deadline=None)
@given(ours=st.floats(0.01, 100.0), theirs=st.floats(0.0, 100.0))
def test_rel_diff_sign(ours, theirs):
    assert np.sign(rel_diff(ours, theirs)) == np.sign(ours - theirs)


# ---- model-level helpers -------------------------------------------------

@pytest.fixture(scope="module")
def tiny():
    torch.manual_seed(0)
    spec = default_spec()
    ds = generate_domain(spec, 6, seed=3)
    return ds, SegNet(8, width=8, stem=6), Encoder(), Decoder()


def test_evaluate_matches_manual_confusion(tiny, tmp_path):
    ds, seg, _, _ = tiny
    result = evaluate(seg, ds)
    with torch.no_grad():
        pred = seg(ds.image_tensor()).argmax(1).numpy()
    _, expected = _oracle(pred, ds.labels, 8)
    assert result.miou == pytest.approx(expected, abs=1e-12)
    path = write_eval_report(tmp_path / "eval.csv", [result])
    rows = list(csv.reader(path.open()))
    assert rows[0][0] == "domain" and rows[0][-1] == "miou" and len(rows[0]) == 10
    assert float(rows[1][-1]) == pytest.approx(result.miou)
    assert "average" in summarize([result])


def test_classwise_diff_blend_corner_is_reconstruction_error(tiny):
    ds, seg, enc, dec = tiny
    X = ds.image_tensor()[:2]
    cfg = TrainConfig(sigma1=1.0, sigma2=0.0)
    dft = DualFeatureTransform(8, enc.channels[-1])
    with torch.no_grad():
        recon_err = (dec(enc(X)[-1]).clamp(0, 1) - X).abs()
    for k in range(8):
        res = classwise_style_diff(X, k, seg, dft, enc, dec, cfg, seed=0)
        assert torch.equal(res.diff_map, recon_err)
        assert torch.isfinite(res.diff_map).all() and (res.diff_map >= 0).all()
        with torch.no_grad():
            count = int((seg(X).argmax(1) == k).sum())
        assert res.predicted_pixels == count
        if count == 0:
            assert res.absent and res.score is None
        else:
            assert res.score == pytest.approx(float(recon_err.sum()) / count)


def test_dump_features(tiny, tmp_path):
    ds, seg, _, _ = tiny
    X, y = dump_features(seg, ds, 200, seed=4, n_images=3, path=tmp_path / "f.csv")
    assert X.shape == (200, seg.feature_dim) and y.shape == (200,)
    assert set(np.unique(y)) <= set(range(8))
    X2, y2 = dump_features(seg, ds, 200, seed=4, n_images=3)
    assert np.array_equal(X, X2) and np.array_equal(y, y2)
    rows = list(csv.reader((tmp_path / "f.csv").open()))
    assert len(rows) == 201 and rows[0][-1] == "class_id"
