"""Pose and segmentation accuracy metrics."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose


def _points(M):
    p = M.points if hasattr(M, "points") else M
    p = np.asarray(p, dtype=float).reshape(-1, 3)
    if len(p) == 0:
        raise ValueError("need at least one model point")
    return p


def add_metric(M, est: Pose, gt: Pose) -> float:
    """Mean distance between model points under the estimated and true poses."""
    p = _points(M)
    return float(np.mean(np.linalg.norm(est.apply(p) - gt.apply(p), axis=1)))


def adds_metric(M, est: Pose, gt: Pose) -> float:
    """Mean closest-point distance (symmetric objects). Exact nearest neighbors."""
    p = _points(M)
    d, _ = cKDTree(gt.apply(p)).query(est.apply(p), k=1)
    return float(np.mean(d))


def f1_details(pred, gt, object_id=None):
    """``(f1, precision, recall, vacuous)``; ``vacuous`` when both masks are empty (then f1 = 1)."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError("mask resolution mismatch")
    if object_id is not None:
        pred, gt = pred == object_id, gt == object_id
    else:
        pred, gt = pred.astype(bool), gt.astype(bool)
    tp = np.count_nonzero(pred & gt)
    n_pred, n_gt = np.count_nonzero(pred), np.count_nonzero(gt)
    if n_pred == 0 and n_gt == 0:
        return 1.0, 1.0, 1.0, True
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gt if n_gt else 0.0
    if precision + recall == 0:
        return 0.0, precision, recall, False
    return 2 * precision * recall / (precision + recall), precision, recall, False


def f1_segmentation(pred, gt, object_id=None) -> float:
    """Pixelwise F1 of a predicted label/boolean mask against ground truth."""
    return float(f1_details(pred, gt, object_id)[0])


def accuracy_curve(errors, max_threshold=0.1, n=101):
    """Fraction of errors ``<= thr`` for ``n`` thresholds in ``[0, max_threshold]``."""
    thr = np.linspace(0.0, max_threshold, n)
    e = np.asarray(errors, dtype=float).ravel()
    if e.size == 0:
        return thr, np.zeros(n)
    return thr, (e[None, :] <= thr[:, None]).mean(axis=1)


def auc(errors, max_threshold=0.1, n=101) -> float:
    """Area under the accuracy-threshold curve, normalized to [0, 1] (trapezoidal)."""
    thr, acc = accuracy_curve(errors, max_threshold, n)
    return float(np.sum((acc[1:] + acc[:-1]) * np.diff(thr)) / 2.0 / max_threshold)
