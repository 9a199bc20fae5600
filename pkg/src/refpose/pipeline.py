"""End-to-end pose estimation from posed reference views.

Composition: detect the object and its apparent size in the query image,
crop around it, pick the best-matching reference viewpoint and in-plane
angle, assemble an initial pose from the two, then iterate the volume
refiner. All intermediate poses live in the normalized object frame
(diameter-2, centered); the result is converted back to the raw frame of
the reference poses at the end.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .config import PipelineConfig
from .correlation import to_gray
from .detection import Detection, crop_query, detect, detection_to_translation
from .errors import TooFewReferences
from .geometry import Intrinsics, RigidPose, look_rotation
from .objectframe import denormalize_pose
from .refinement import RefinerConfig, RefineStep, refine
from .selection import initial_rotation, score_views, select


@dataclass(frozen=True)
class EstimationResult:
    """Final pose plus the evidence each stage contributed."""

    pose: RigidPose                  # raw reference-frame pose
    pose_normalized: RigidPose       # diameter-2 object frame
    detection: Detection
    ref_index: int                   # winning view, index into db.views
    alpha: float                     # in-plane angle, radians
    steps: list[RefineStep] = field(default_factory=list)

    @property
    def aborted(self) -> bool:
        return any(s.aborted for s in self.steps)


def initial_pose(det: Detection, K: Intrinsics, ref_pose: RigidPose, alpha: float) -> RigidPose:
    """Initial normalized pose from a detection and a selected view.

    Rotation: the selector compares the query crop, whose virtual camera
    axis passes through the detected center q, against references whose
    axis passes through the object center; the in-plane estimate alpha
    therefore lives in the crop's rotated frame and is carried back into
    the query camera through the look-rotation at q. Translation: the
    detected depth along the ray through q.
    """
    R_virt = look_rotation(K.ray(det.q))
    R0 = R_virt.T @ initial_rotation(ref_pose, alpha)
    t0 = detection_to_translation(det, K)
    return RigidPose(R0, t0)


def estimate_pose(
    query_image,
    K: Intrinsics,
    db,
    cfg: PipelineConfig | None = None,
) -> EstimationResult:
    """Estimate the 6-DoF pose of the database's object in a query image."""
    cfg = cfg or PipelineConfig()
    if len(db.views) < cfg.n_neighbors:
        raise TooFewReferences(
            f"{len(db.views)} reference views < n_neighbors={cfg.n_neighbors}"
        )
    gray = to_gray(query_image)

    det = detect(gray, K, db, cfg)
    crop = crop_query(gray, det, out_size=cfg.crop_size, margin=cfg.crop_margin)
    scores = score_views(crop.image, db, query_mask=crop.mask)
    bank_idx, alpha = select(scores)
    ref_index = int(db.selector_subset[bank_idx])

    pose0 = initial_pose(det, K, db.views[ref_index].pose, alpha)
    pose_n, steps = refine(pose0, db, gray, K, RefinerConfig.from_pipeline(cfg))
    return EstimationResult(
        pose=denormalize_pose(db.frame, pose_n),
        pose_normalized=pose_n,
        detection=det,
        ref_index=ref_index,
        alpha=float(alpha),
        steps=steps,
    )
