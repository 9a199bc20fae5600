"""Viewpoint selection: nearest reference view plus in-plane rotation.

The query crop is scored by masked NCC against every selector-subset
reference crop at every bank angle. Scores are normalized globally
(zero mean, unit variance over the whole matrix) so downstream
consumers see comparable magnitudes across queries; the argmax picks
the view, and a parabola over the three angles around the winner
sharpens alpha beyond the bank spacing.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .correlation import default_angles, ncc
from .geometry import RigidPose, rot_z, unit

# below this variance the score matrix carries no preference at all
SCORE_VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class ViewpointScores:
    """Masked-NCC scores of one query crop against the rotated ref bank.

    raw and normalized are [n_refs x n_angles]; degenerate marks an
    all-flat matrix whose normalization would divide by ~0.
    """

    raw: np.ndarray
    normalized: np.ndarray
    angles: np.ndarray
    best_ref: int
    best_angle: int
    degenerate: bool = False


def score_views(query_crop, refs, angles=None, query_mask=None) -> ViewpointScores:
    """Score a query crop against every reference view and bank angle.

    refs is either a ReferenceDatabase (its selector banks and angles
    are used) or a plain per-view list of [(rotated image, mask), ...]
    bank rows. Ties resolve to the lowest ref index, then lowest angle.
    """
    if hasattr(refs, "selector_banks"):
        banks = refs.selector_banks
        if angles is None:
            angles = refs.angles
    else:
        banks = refs
    if angles is None:
        angles = default_angles()
    angles = np.asarray(angles, dtype=np.float64)
    query = np.asarray(query_crop, dtype=np.float64)

    raw = np.zeros((len(banks), len(angles)))
    for i, row in enumerate(banks):
        for a, (img, mask) in enumerate(row):
            raw[i, a] = ncc(img, query, template_mask=mask, window_mask=query_mask)
    return scores_from_raw(raw, angles)


def scores_from_raw(raw, angles) -> ViewpointScores:
    """Normalize a raw score matrix and locate its argmax."""
    raw = np.asarray(raw, dtype=np.float64)
    angles = np.asarray(angles, dtype=np.float64)
    var = float(raw.var())
    degenerate = var < SCORE_VARIANCE_FLOOR
    if degenerate:
        normalized = np.zeros_like(raw)
    else:
        normalized = (raw - raw.mean()) / np.sqrt(var)
    bi, ba = np.unravel_index(int(np.argmax(normalized)), raw.shape)
    return ViewpointScores(raw, normalized, angles, int(bi), int(ba), degenerate)


def _parabola(lo: float, mid: float, hi: float) -> float:
    """Sub-sample offset of the vertex through three uniform samples."""
    denom = lo - 2.0 * mid + hi
    if denom >= -1e-12:
        return 0.0
    return float(np.clip(0.5 * (lo - hi) / denom, -0.5, 0.5))


def select(scores: ViewpointScores) -> tuple[int, float]:
    """Winning reference index and the interpolated in-plane angle.

    A degenerate (all-equal) matrix carries no rotation evidence and
    yields ref 0 with the neutral angle 0, clamped to the bank range.
    """
    angles = scores.angles
    if scores.degenerate:
        return 0, float(np.clip(0.0, angles[0], angles[-1]))
    i, a = scores.best_ref, scores.best_angle
    row = scores.raw[i]
    off = 0.0
    if 0 < a < len(row) - 1:
        off = _parabola(row[a - 1], row[a], row[a + 1])
    if len(angles) > 1:
        alpha = angles[a] + off * (angles[1] - angles[0])
        alpha = float(np.clip(alpha, angles[0], angles[-1]))
    else:
        alpha = float(angles[a])
    return i, alpha


def initial_rotation(ref_pose: RigidPose, alpha: float) -> np.ndarray:
    """Initial query rotation: in-plane correction on top of the ref view.

    Positive alpha turns image content clockwise on screen (y down).
    """
    return rot_z(alpha) @ ref_pose.R


def gt_view_similarity(u, v) -> float:
    """Viewpoint similarity of two directions, affinely mapped to [0, 1]."""
    return float((unit(u) @ unit(v) + 1.0) / 2.0)


def viewpoint_angle(u, v) -> float:
    """Angle between two viewpoint directions, in radians."""
    return float(np.arccos(np.clip(unit(u) @ unit(v), -1.0, 1.0)))
