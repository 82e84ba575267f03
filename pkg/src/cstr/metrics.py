"""Disparity and occlusion evaluation metrics."""

from __future__ import annotations

import numpy as np

__all__ = ["epe", "three_px_error", "occ_iou"]


def _masked_abs_error(pred, gt, mask) -> np.ndarray:
    if pred.shape != gt.shape or pred.shape != mask.shape:
        raise ValueError("pred, gt and mask must share a shape")
    mask = mask.astype(bool)
    if not mask.any():
        raise ValueError("evaluation mask selects no pixels")
    return np.abs(pred.astype(np.float64) - gt.astype(np.float64))[mask]


def epe(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """Mean absolute disparity error over the masked pixels, in pixels."""
    return float(_masked_abs_error(pred, gt, mask).mean())


def three_px_error(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """Percentage of masked pixels whose absolute error exceeds 3 pixels."""
    err = _masked_abs_error(pred, gt, mask)
    return float(100.0 * (err > 3.0).mean())


def occ_iou(pred_occ: np.ndarray, gt_occ: np.ndarray) -> float:
    """Intersection over union of two binary occlusion masks.

    Both masks empty counts as perfect agreement (1.0).
    """
    if pred_occ.shape != gt_occ.shape:
        raise ValueError("occlusion mask shapes differ")
    a = pred_occ.astype(bool)
    b = gt_occ.astype(bool)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return float((a & b).sum() / union)
