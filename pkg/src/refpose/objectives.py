"""Training objectives for the three pipeline stages, as pure functions.

Nothing here is optimized by the deterministic pipeline; these exist so the
quantities the stages are supposed to minimize are pinned down exactly and
can be evaluated against candidate outputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch, NonPositive

# positives are pixels strictly closer than this to the projected center
HEAT_RADIUS = 1.5
# probability clamp for the similarity BCE
PROB_EPS = 1e-7


@dataclass(frozen=True)
class LabeledHeat:
    """Detector predictions over a pixel grid plus the ground-truth target.

    heat_logits and log_scale are (H, W); center is the projected object
    center in continuous image coordinates; log_scale_gt is log s_gt.
    """

    heat_logits: np.ndarray
    log_scale: np.ndarray
    center: np.ndarray
    log_scale_gt: float


def _pixel_distances(shape, center) -> np.ndarray:
    h, w = shape
    gy, gx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    return np.hypot(gx - center[0], gy - center[1])


def _bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    # stable: max(z,0) - z*y + log(1 + exp(-|z|))
    z = np.asarray(logits, dtype=np.float64)
    return np.maximum(z, 0.0) - z * labels + np.log1p(np.exp(-np.abs(z)))


def loss_heat(lh: LabeledHeat) -> float:
    """Per-pixel binary cross entropy on center-heat logits, summed.

    A pixel is positive iff its distance to the projected center is
    strictly below 1.5 px.
    """
    d = _pixel_distances(lh.heat_logits.shape, lh.center)
    labels = (d < HEAT_RADIUS).astype(np.float64)
    return float(_bce_with_logits(lh.heat_logits, labels).sum())


def loss_scale(lh: LabeledHeat) -> float:
    """Squared log-scale error summed over positive pixels only."""
    d = _pixel_distances(lh.log_scale.shape, lh.center)
    pos = d < HEAT_RADIUS
    return float(((lh.log_scale_gt - lh.log_scale[pos]) ** 2).sum())


def gt_scale(f: float, l: float, ref_size: float = 120.0) -> float:
    """Ground-truth detector scale s_gt = 2 f / (l * ref_size).

    f is the (virtual) focal length, l the distance from the camera center
    to the object center in normalized units.
    """
    if not np.isfinite(l) or l <= 0:
        raise NonPositive(f"distance must be positive, got {l}")
    if not np.isfinite(f) or f <= 0:
        raise NonPositive(f"focal must be positive, got {f}")
    if ref_size <= 0:
        raise NonPositive(f"reference size must be positive, got {ref_size}")
    return 2.0 * f / (l * ref_size)


def loss_sim(pred, gt) -> float:
    """Binary cross entropy between predicted and target view similarities.

    Predictions are probabilities, clamped to (1e-7, 1 - 1e-7) before the
    logs; targets may be soft.
    """
    pred = np.asarray(pred, dtype=np.float64).ravel()
    gt = np.asarray(gt, dtype=np.float64).ravel()
    if pred.shape != gt.shape:
        raise LengthMismatch(f"{pred.shape} vs {gt.shape}")
    p = np.clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    return float(-(gt * np.log(p) + (1.0 - gt) * np.log(1.0 - p)).sum())


def loss_angle(alpha_pred: float, alpha_gt: float) -> float:
    """Squared in-plane angle error with wrap-around on the circle."""
    d = (alpha_pred - alpha_gt + np.pi) % (2.0 * np.pi) - np.pi
    return float(d * d)


def loss_ref(pred, gt, points) -> float:
    """Pose-refinement objective: sum of distances between transformed points.

    pred and gt are similarity residuals (s, txy, R); each acts on a sample
    point p as s * R @ (p + t') with t' = (tx, ty, 0). Returns
    sum_k || T_pred(p_k) - T_gt(p_k) ||_2 (norms, not squared norms).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)

    def apply(res, p):
        t = np.array([res.txy[0], res.txy[1], 0.0])
        return res.s * (p + t) @ res.Rres.T

    diff = apply(pred, pts) - apply(gt, pts)
    return float(np.linalg.norm(diff, axis=1).sum())
