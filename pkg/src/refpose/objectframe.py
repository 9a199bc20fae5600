"""Object-centric normalization: center/diameter frame and reference warping.

Normalized object coordinates are x_norm = (x - center) / diameter * 2, which
puts the object inside the unit sphere (diameter 2). All detection, selection,
and refinement geometry operates in this frame; raw poses are converted on
load and back on output.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .correlation import warp_homography
from .errors import DegenerateCloud
from .geometry import Intrinsics, RigidPose, look_at_warp

# subsample threshold for the exact O(n^2) diameter
EXACT_DIAMETER_LIMIT = 2000


@dataclass(frozen=True)
class ObjectFrame:
    """Object center and diameter in raw coordinates."""

    center: np.ndarray
    diameter: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(c)):
            raise ValueError("center must be finite")
        if not np.isfinite(self.diameter) or self.diameter <= 0:
            raise DegenerateCloud(f"diameter must be positive, got {self.diameter}")
        object.__setattr__(self, "center", c)


@dataclass(frozen=True)
class RawView:
    """A reference image as loaded: pixels, intrinsics, raw-frame pose."""

    image: np.ndarray
    intrinsics: Intrinsics
    pose: RigidPose


@dataclass(frozen=True)
class ReferenceView:
    """A look-at-normalized reference crop.

    pose maps normalized object coordinates to the warped camera; viewpoint
    is the unit direction from the object center to the camera center.
    """

    image: np.ndarray
    mask: np.ndarray
    intrinsics: Intrinsics
    pose: RigidPose
    viewpoint: np.ndarray
    inplane_id: int | None = None


def _max_pairwise(points: np.ndarray) -> float:
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    return float(np.sqrt(d2.max()))


def _fps_euclidean(points: np.ndarray, k: int) -> np.ndarray:
    """Greedy farthest-point subsample (seed index 0), for diameter estimation."""
    n = len(points)
    chosen = [0]
    dist = np.linalg.norm(points - points[0], axis=1)
    while len(chosen) < k:
        idx = int(np.argmax(dist))
        chosen.append(idx)
        dist = np.minimum(dist, np.linalg.norm(points - points[idx], axis=1))
    return points[chosen]


def estimate_frame(points) -> ObjectFrame:
    """Centroid and max pairwise distance of a point cloud.

    Exact for up to 2000 points; larger clouds are farthest-point subsampled
    to 256 before the O(n^2) pass (the subsample keeps the extremes, so the
    diameter is exact for practical clouds). Raises DegenerateCloud when all
    points coincide.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 2:
        raise DegenerateCloud("need at least two points")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    center = pts.mean(axis=0)
    if len(pts) > EXACT_DIAMETER_LIMIT:
        d = _max_pairwise(_fps_euclidean(pts, 256))
    else:
        d = _max_pairwise(pts)
    if d <= 0.0:
        raise DegenerateCloud("all points coincide")
    return ObjectFrame(center=center, diameter=d)


def normalize_point(frame: ObjectFrame, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (x - frame.center) / frame.diameter * 2.0


def denormalize_point(frame: ObjectFrame, x_norm) -> np.ndarray:
    x_norm = np.asarray(x_norm, dtype=np.float64)
    return x_norm * frame.diameter / 2.0 + frame.center


def normalize_pose(frame: ObjectFrame, pose: RigidPose) -> RigidPose:
    """Pose in normalized coordinates projecting identically to the raw pose.

    R is unchanged; t_norm = (R c + t) * 2/d. Projection is invariant because
    camera-frame points only pick up the positive factor 2/d along each ray.
    """
    t_norm = (pose.R @ frame.center + pose.t) * (2.0 / frame.diameter)
    return RigidPose(pose.R, t_norm)


def denormalize_pose(frame: ObjectFrame, pose_norm: RigidPose) -> RigidPose:
    t_raw = pose_norm.t * (frame.diameter / 2.0) - pose_norm.R @ frame.center
    return RigidPose(pose_norm.R, t_raw)


def normalize_reference(view: RawView, frame: ObjectFrame, out_size: int = 120) -> ReferenceView:
    """Warp a raw view so the object is centered, upright, and fills the crop.

    The camera is rotated to look at the object center and zoomed so the
    normalized unit sphere spans out_size pixels; the image is resampled
    through the induced homography. The returned pose is in normalized
    object coordinates.
    """
    pose_n = normalize_pose(frame, view.pose)
    H, K_new, pose_new = look_at_warp(view.intrinsics, pose_n, np.zeros(3), out_size)
    warped, valid = warp_homography(view.image, H, (out_size, out_size))
    return ReferenceView(
        image=warped,
        mask=valid,
        intrinsics=K_new,
        pose=pose_new,
        viewpoint=pose_new.viewpoint(),
    )
