"""Pinhole cameras, rigid transforms, and the scale/depth bookkeeping.

Conventions used throughout the package:

- A pose maps object coordinates to camera coordinates: x_cam = R @ x + t.
  R is world-to-camera (row vectors are the camera axes), t is the world
  origin expressed in the camera frame. The camera center in object
  coordinates is C = -R.T @ t.
- Camera frame: x right, y down, z forward. Points are visible only with
  z > 0.
- Continuous image coordinates: pixel (row i, col j) covers the unit
  square with center (x, y) = (j + 0.5, i + 0.5). An HxW image spans
  [0, W] x [0, H], so the image center is (W/2, H/2).
- Normalized object coordinates put the object inside the unit sphere
  (see objectframe); "unit sphere" below always means radius 1 in those
  coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidScale, NonPositiveDepth, ZeroVector

# max |R R^T - I| and |det R - 1| tolerated when validating rotations
ROTATION_TOL = 1e-9


def _check_rotation(R: np.ndarray, tol: float = ROTATION_TOL) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise ValueError("rotation must be a finite 3x3 matrix")
    err = np.abs(R @ R.T - np.eye(3)).max()
    if err > tol:
        raise ValueError(f"matrix is not orthonormal (|R R^T - I| = {err:.3e})")
    det = np.linalg.det(R)
    if abs(det - 1.0) > max(tol, 1e-9):
        raise ValueError(f"matrix is not a proper rotation (det = {det:.12f})")
    return R


def unit(v: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Normalize a vector, raising ZeroVector for (near-)zero input."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n < eps:
        raise ZeroVector("cannot normalize a zero-length vector")
    return v / n


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics (fx, fy, cx, cy), no skew, no distortion."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def f(self) -> float:
        """Scalar focal length: mean of fx and fy."""
        return 0.5 * (self.fx + self.fy)

    def ray(self, q) -> np.ndarray:
        """Unnormalized ray K^-1 (q, 1) through pixel(s) q, z-component 1."""
        q = np.asarray(q, dtype=np.float64)
        x = (q[..., 0] - self.cx) / self.fx
        y = (q[..., 1] - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=-1)

    @classmethod
    def from_matrix(cls, K) -> "Intrinsics":
        K = np.asarray(K, dtype=np.float64)
        return cls(fx=float(K[0, 0]), fy=float(K[1, 1]), cx=float(K[0, 2]), cy=float(K[1, 2]))


@dataclass(frozen=True)
class RigidPose:
    """Rigid transform x_cam = R @ x + t, validated on construction."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = _check_rotation(self.R)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    @property
    def center(self) -> np.ndarray:
        """Camera center in object coordinates, -R^T t."""
        return -self.R.T @ self.t

    def viewpoint(self) -> np.ndarray:
        """Unit vector from the object origin toward the camera center."""
        return unit(self.center)

    def transform(self, pts) -> np.ndarray:
        """Map object points (..., 3) into the camera frame."""
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.R.T + self.t


def compose(a: RigidPose, b: RigidPose) -> RigidPose:
    """Composition a after b: compose(a, b).transform(x) == a.transform(b.transform(x))."""
    return RigidPose(a.R @ b.R, a.R @ b.t + a.t)


def invert(a: RigidPose) -> RigidPose:
    return RigidPose(a.R.T, -a.R.T @ a.t)


@dataclass(frozen=True)
class SimilarityResidual:
    """In-plane similarity correction: scale s, image-plane offset, small rotation.

    s > 1 means the query appears larger than the current pose predicts;
    txy is the in-plane offset in camera units at the object; Rres is the
    residual rotation applied on the camera side (R_out = Rres @ R_in).
    """

    s: float
    txy: np.ndarray
    Rres: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.s) or self.s <= 0:
            raise InvalidScale(f"similarity scale must be positive, got {self.s}")
        txy = np.asarray(self.txy, dtype=np.float64).reshape(2)
        if not np.all(np.isfinite(txy)):
            raise ValueError("offset must be finite")
        object.__setattr__(self, "txy", txy)
        object.__setattr__(self, "Rres", _check_rotation(self.Rres))

    @classmethod
    def identity(cls) -> "SimilarityResidual":
        return cls(1.0, np.zeros(2), np.eye(3))

    def inverse(self) -> "SimilarityResidual":
        return SimilarityResidual(1.0 / self.s, -self.txy / self.s, self.Rres.T)


@dataclass(frozen=True)
class Homography:
    """Invertible 3x3 map on homogeneous pixel coordinates (source -> dest)."""

    H: np.ndarray

    def __post_init__(self):
        H = np.asarray(self.H, dtype=np.float64)
        if H.shape != (3, 3) or not np.all(np.isfinite(H)):
            raise ValueError("homography must be a finite 3x3 matrix")
        if abs(np.linalg.det(H)) < 1e-12:
            raise ValueError("homography is singular")
        object.__setattr__(self, "H", H)

    def apply(self, pts) -> np.ndarray:
        """Map (..., 2) pixel coordinates through the homography."""
        pts = np.asarray(pts, dtype=np.float64)
        ones = np.ones(pts.shape[:-1] + (1,))
        h = np.concatenate([pts, ones], axis=-1) @ self.H.T
        return h[..., :2] / h[..., 2:3]

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.H))


def pinhole(K: Intrinsics, pts_cam) -> np.ndarray:
    """Project camera-frame points (..., 3) to pixels; no depth check."""
    pts_cam = np.asarray(pts_cam, dtype=np.float64)
    z = pts_cam[..., 2]
    return np.stack(
        [K.fx * pts_cam[..., 0] / z + K.cx, K.fy * pts_cam[..., 1] / z + K.cy], axis=-1
    )


def project(K: Intrinsics, pose: RigidPose, x) -> np.ndarray:
    """Project object points (..., 3) to pixel coordinates (..., 2).

    Raises NonPositiveDepth if any point is at or behind the camera plane.
    """
    cam = pose.transform(x)
    if np.any(cam[..., 2] <= 0):
        raise NonPositiveDepth("point(s) at or behind the camera plane")
    return pinhole(K, cam)


def project_points(K: Intrinsics, pose: RigidPose, pts) -> tuple[np.ndarray, np.ndarray]:
    """Batched projection without depth checks: returns (pixels, depths).

    Callers mask on depth themselves; pixels where z <= 0 are meaningless.
    """
    cam = pose.transform(pts)
    z = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack(
            [K.fx * cam[..., 0] / z + K.cx, K.fy * cam[..., 1] / z + K.cy], axis=-1
        )
    return uv, z


def virtual_focal(K: Intrinsics, q) -> float:
    """Focal length of a camera rotated so its axis passes through pixel q.

    f_virtual = f / cos(theta) with f = (fx + fy)/2 and theta the angle
    between the principal axis and the ray through q. Rotating the camera
    toward an off-center object keeps its apparent size consistent with the
    fronto-parallel size/depth relation (see depth_from_scale).
    """
    r = K.ray(q)
    # z-component of the ray is 1, so |r| = sec(theta)
    return K.f * float(np.linalg.norm(r))


def depth_from_scale(f_virtual: float, box_px: float) -> float:
    """Distance of the object center given its apparent box size in pixels.

    The normalized object has diameter 2, so a box of S pixels under the
    virtual focal f means the center lies at distance d = 2 f / S.
    """
    if not np.isfinite(box_px) or box_px <= 0:
        raise InvalidScale(f"box size must be positive, got {box_px}")
    if not np.isfinite(f_virtual) or f_virtual <= 0:
        raise InvalidScale(f"virtual focal must be positive, got {f_virtual}")
    return 2.0 * f_virtual / box_px


def box_size_from_scale(s: float, ref_size: float = 120.0) -> float:
    """Apparent box size S_q = ref_size * s for a detector scale s."""
    if not np.isfinite(s) or s <= 0:
        raise InvalidScale(f"scale must be positive, got {s}")
    if ref_size <= 0:
        raise InvalidScale(f"reference size must be positive, got {ref_size}")
    return ref_size * s


def rot_z(angle: float) -> np.ndarray:
    """Rotation about the camera axis; positive angle turns image content clockwise."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def axis_angle(r) -> np.ndarray:
    """Rodrigues: rotation vector (3,) to matrix. Zero vector gives identity."""
    r = np.asarray(r, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(r)
    if theta < 1e-12:
        return np.eye(3)
    k = r / theta
    Kx = np.array(
        [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]]
    )
    return np.eye(3) + np.sin(theta) * Kx + (1.0 - np.cos(theta)) * (Kx @ Kx)


def rotation_angle(R) -> float:
    """Angle of a rotation matrix in radians."""
    R = np.asarray(R, dtype=np.float64)
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def look_rotation(direction, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Rotation taking `direction` to the +z axis with minimal roll.

    Rows of the result are the new camera axes expressed in the old frame.
    `up` picks the roll; if direction is (anti)parallel to it an alternate
    up vector is used.
    """
    z = unit(direction)
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(up, z)
    if np.linalg.norm(x) < 1e-8:
        x = np.cross(np.array([0.0, 0.0, 1.0]), z)
        if np.linalg.norm(x) < 1e-8:
            x = np.cross(np.array([1.0, 0.0, 0.0]), z)
    x = unit(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=0)


def look_at_warp(
    K: Intrinsics, pose: RigidPose, center, out_size: int
) -> tuple[Homography, Intrinsics, RigidPose]:
    """Rotate the camera so its axis passes through `center` and fix its zoom.

    Returns (H, K', pose') where H = K' R_look K^-1 maps source pixels to
    destination pixels, K' is isotropic with the principal point at the
    crop center, and pose' is the rotated pose (R_look R, R_look t). The
    focal of K' is chosen so the unit sphere at `center` spans exactly
    out_size pixels under the fronto-parallel diameter convention
    S = 2 f' / l; `center` projects to (out_size/2, out_size/2).
    """
    center = np.asarray(center, dtype=np.float64).reshape(3)
    c_cam = pose.transform(center)
    if c_cam[2] <= 0:
        raise NonPositiveDepth("object center is behind the camera")
    l = float(np.linalg.norm(c_cam))
    R_look = look_rotation(c_cam)
    f_new = out_size * l / 2.0
    K_new = Intrinsics(f_new, f_new, out_size / 2.0, out_size / 2.0)
    H = Homography(K_new.K @ R_look @ np.linalg.inv(K.K))
    pose_new = RigidPose(R_look @ pose.R, R_look @ pose.t)
    return H, K_new, pose_new


def similarity_to_rigid(res: SimilarityResidual, c_cam) -> tuple[np.ndarray, np.ndarray]:
    """Convert a similarity residual into a rigid update at object center c_cam.

    The similarity first offsets the in-plane position and then rescales the
    apparent size by s, which moves the center to
    ((c_x + t_x)/s, (c_y + t_y)/s, c_z/s). Returns (R', t') to be applied as
    R_out = R' @ R_in, t_out = t_in + t'.
    """
    c = np.asarray(c_cam, dtype=np.float64).reshape(3)
    if c[2] <= 0:
        raise NonPositiveDepth("object center must be in front of the camera")
    s = res.s
    moved = np.array(
        [(c[0] + res.txy[0]) / s, (c[1] + res.txy[1]) / s, c[2] / s]
    )
    return res.Rres.copy(), moved - c
