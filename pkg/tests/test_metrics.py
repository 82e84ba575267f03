import numpy as np
import pytest

from cstr import Rng, epe, occ_iou, three_px_error

F32 = np.float32


def test_perfect_prediction():
    gt = Rng(1).generator.random((4, 4), dtype=F32) * 10
    mask = np.ones((4, 4), dtype=bool)
    assert epe(gt, gt, mask) == 0.0
    assert three_px_error(gt, gt, mask) == 0.0


def test_constant_offset():
    gt = Rng(2).generator.random((4, 4), dtype=F32) * 10
    mask = np.ones((4, 4), dtype=bool)
    assert epe(gt + 4, gt, mask) == pytest.approx(4.0, abs=1e-5)
    assert three_px_error(gt + 4, gt, mask) == 100.0


def test_half_and_half():
    gt = np.zeros((2, 4), dtype=F32)
    pred = np.array([[2, 2, 2, 2], [6, 6, 6, 6]], dtype=F32)
    mask = np.ones((2, 4), dtype=bool)
    assert epe(pred, gt, mask) == 4.0
    assert three_px_error(pred, gt, mask) == 50.0


def test_exactly_three_px_is_not_an_error():
    gt = np.zeros((1, 2), dtype=F32)
    pred = np.array([[3.0, 3.5]], dtype=F32)
    mask = np.ones((1, 2), dtype=bool)
    assert three_px_error(pred, gt, mask) == 50.0


def test_mask_restricts_evaluation():
    gt = np.zeros((2, 2), dtype=F32)
    pred = np.array([[0.0, 100.0], [0.0, 100.0]], dtype=F32)
    mask = np.array([[True, False], [True, False]])
    assert epe(pred, gt, mask) == 0.0


def test_empty_mask_raises():
    z = np.zeros((2, 2), dtype=F32)
    with pytest.raises(ValueError):
        epe(z, z, np.zeros((2, 2), dtype=bool))


def test_metrics_permutation_invariant():
    rng = Rng(3)
    gt = rng.generator.random((3, 5), dtype=F32) * 8
    pred = gt + rng.generator.random((3, 5), dtype=F32) * 4
    mask = np.ones((3, 5), dtype=bool)
    perm = rng.generator.permutation(15)
    gt_p = gt.ravel()[perm].reshape(3, 5)
    pred_p = pred.ravel()[perm].reshape(3, 5)
    assert epe(pred, gt, mask) == pytest.approx(epe(pred_p, gt_p, mask), abs=1e-9)
    assert three_px_error(pred, gt, mask) == three_px_error(pred_p, gt_p, mask)


def test_epe_scale_covariant():
    rng = Rng(4)
    gt = rng.generator.random((3, 5), dtype=F32) * 8
    pred = gt + rng.generator.random((3, 5), dtype=F32)
    mask = np.ones((3, 5), dtype=bool)
    for a in (2.0, 0.5):
        scaled = epe(
            (a * pred).astype(F32), (a * gt).astype(F32), mask
        )
        assert scaled == pytest.approx(a * epe(pred, gt, mask), rel=1e-5)


def test_iou_identical_and_disjoint():
    a = np.zeros((3, 3), dtype=bool)
    a[0] = True
    b = np.zeros((3, 3), dtype=bool)
    b[1] = True
    assert occ_iou(a, a) == 1.0
    assert occ_iou(a, b) == 0.0


def test_iou_partial_overlap():
    a = np.array([[True, True, False]])
    b = np.array([[False, True, True]])
    assert occ_iou(a, b) == pytest.approx(1 / 3)


def test_iou_both_empty_is_one():
    e = np.zeros((2, 2), dtype=bool)
    assert occ_iou(e, e) == 1.0


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        epe(np.zeros((2, 2), dtype=F32), np.zeros((2, 3), dtype=F32),
            np.ones((2, 2), dtype=bool))
    with pytest.raises(ValueError):
        occ_iou(np.zeros((2, 2), dtype=bool), np.zeros((3, 2), dtype=bool))
