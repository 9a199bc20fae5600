"""Pose-accuracy metrics and report assembly.

Errors are computed over a model point cloud in object coordinates (raw
units). ADD is the mean distance between correspondingly transformed points;
ADD-S substitutes the nearest transformed point (for symmetric objects);
projection error measures mean pixel displacement.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyList, EmptyModel, NonPositive, NonPositiveDepth
from .geometry import Intrinsics, RigidPose, project

# upper integration limit for ADD-AUC, in object units
AUC_MAX_THRESHOLD = 0.10
PRJ_THRESHOLD_PX = 5.0
FLOAT_DIGITS = 9


def _check_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyModel("metric needs at least one model point")
    return pts


def add_error(pose_gt: RigidPose, pose_pred: RigidPose, points) -> float:
    """Mean distance between points under the two poses."""
    pts = _check_points(points)
    return float(
        np.linalg.norm(pose_gt.transform(pts) - pose_pred.transform(pts), axis=1).mean()
    )


def add_s_error(pose_gt: RigidPose, pose_pred: RigidPose, points) -> float:
    """Symmetric variant: mean nearest-neighbor distance into the predicted cloud."""
    pts = _check_points(points)
    gt = pose_gt.transform(pts)
    pred = pose_pred.transform(pts)
    d, _ = cKDTree(pred).query(gt, k=1)
    return float(np.mean(d))


def proj_error(pose_gt: RigidPose, pose_pred: RigidPose, points, K: Intrinsics) -> float:
    """Mean 2D distance between the two projections of the model points."""
    pts = _check_points(points)
    p_gt = project(K, pose_gt, pts)
    p_pred = project(K, pose_pred, pts)
    return float(np.linalg.norm(p_gt - p_pred, axis=1).mean())


def recall_at(errors, threshold: float) -> float:
    """Fraction of errors strictly below the threshold."""
    e = np.asarray(errors, dtype=np.float64).ravel()
    if len(e) == 0:
        raise EmptyList("recall over an empty error list")
    if not np.isfinite(threshold) or threshold <= 0:
        raise NonPositive(f"threshold must be positive, got {threshold}")
    return float(np.mean(e < threshold))


def add_01d(errors, diameter: float) -> float:
    """ADD recall at 10% of the object diameter."""
    if not np.isfinite(diameter) or diameter <= 0:
        raise NonPositive(f"diameter must be positive, got {diameter}")
    return recall_at(errors, 0.1 * diameter)


def add_auc(errors, max_threshold: float = AUC_MAX_THRESHOLD) -> float:
    """Exact area under the recall-vs-threshold step curve, normalized to [0, 1].

    recall(tau) = mean(e < tau); integrating the step function over
    [0, max_threshold] gives mean(clip(1 - e/max_threshold, 0, 1)).
    """
    e = np.asarray(errors, dtype=np.float64).ravel()
    if len(e) == 0:
        raise EmptyList("AUC over an empty error list")
    if not np.isfinite(max_threshold) or max_threshold <= 0:
        raise NonPositive(f"max threshold must be positive, got {max_threshold}")
    return float(np.mean(np.clip(1.0 - e / max_threshold, 0.0, 1.0)))


def prj5(errors) -> float:
    """Projection recall at 5 px."""
    return recall_at(errors, PRJ_THRESHOLD_PX)


@dataclass
class EvalRecord:
    """Per-query metric bundle; view differences are optional diagnostics."""

    query_id: str
    add: float
    add_s: float
    prj: float
    view_diff_gt: float | None = None
    view_diff_sel: float | None = None

    def __post_init__(self):
        for name in ("add", "add_s", "prj"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        for name in ("view_diff_gt", "view_diff_sel"):
            v = getattr(self, name)
            if v is not None and (not np.isfinite(v) or v < 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class EvalReport:
    """Aggregated metrics for one object, JSON-serializable."""

    object_name: str
    diameter: float
    records: list = field(default_factory=list)

    def summary(self) -> dict:
        if not self.records:
            raise EmptyList("report over zero records")
        adds = [r.add for r in self.records]
        add_ss = [r.add_s for r in self.records]
        prjs = [r.prj for r in self.records]
        out = {
            "object": self.object_name,
            "diameter": self.diameter,
            "n_queries": len(self.records),
            "add_01d": add_01d(adds, self.diameter),
            "add_s_01d": add_01d(add_ss, self.diameter),
            "add_auc": add_auc(adds),
            "prj_5": prj5(prjs),
            "add_mean": float(np.mean(adds)),
            "add_median": float(np.median(adds)),
        }
        vg = [r.view_diff_gt for r in self.records if r.view_diff_gt is not None]
        vs = [r.view_diff_sel for r in self.records if r.view_diff_sel is not None]
        if vg:
            out["view_diff_gt_mean"] = float(np.mean(vg))
            out["view_diff_gt_median"] = float(np.median(vg))
        if vs:
            out["view_diff_sel_mean"] = float(np.mean(vs))
            out["view_diff_sel_median"] = float(np.median(vs))
        return out

    def to_dict(self) -> dict:
        out = self.summary()
        out["records"] = [
            {
                "id": r.query_id,
                "add": r.add,
                "add_s": r.add_s,
                "prj": r.prj,
                **(
                    {"view_diff_gt": r.view_diff_gt}
                    if r.view_diff_gt is not None
                    else {}
                ),
                **(
                    {"view_diff_sel": r.view_diff_sel}
                    if r.view_diff_sel is not None
                    else {}
                ),
            }
            for r in sorted(self.records, key=lambda r: r.query_id)
        ]
        return out

    def to_json(self) -> str:
        return dumps_canonical(self.to_dict())


def _round_floats(obj):
    if isinstance(obj, float):
        return float(f"{obj:.{FLOAT_DIGITS}g}")
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def dumps_canonical(obj) -> str:
    """Deterministic JSON: sorted keys, floats at 9 significant digits."""
    import json

    return json.dumps(_round_floats(obj), sort_keys=True, indent=1)


def report(records, object_name: str, diameter: float) -> EvalReport:
    if not np.isfinite(diameter) or diameter <= 0:
        raise NonPositive(f"diameter must be positive, got {diameter}")
    return EvalReport(object_name=object_name, diameter=diameter, records=list(records))
