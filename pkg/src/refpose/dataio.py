"""Reference/query set I/O, sparse geometry utilities, and synthetic scenes.

Reference set directory layout::

    meta.json            {"object": str, "units": "m",
                          "center": [x,y,z]?, "diameter": d?}
    views/NNNN.png       8-bit grayscale or RGB
    views/NNNN.json      {"fx","fy","cx","cy","R": 9 row-major world->cam,
                          "t": [3]}
    points.json          optional: [[x,y,z], ...] object points (raw frame)
    keypoints.json       optional: {"images": {"NNNN": [[x,y]|null, ...]}}

Query sets use the same per-image json schema under queries/; R and t there
are optional ground truth. When meta.json lacks center/diameter the frame is
estimated from points.json or from triangulated keypoints, with a safety
margin on the diameter.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .config import PipelineConfig
from .correlation import rotate_image, to_gray
from .errors import (
    Collinear,
    DegenerateRays,
    InconsistentIntrinsics,
    MissingPose,
    ParseError,
    TooFewReferences,
    ZeroVector,
)
from .geometry import Intrinsics, RigidPose, look_rotation, project, rot_z, unit
from .objectframe import (
    ObjectFrame,
    RawView,
    ReferenceView,
    estimate_frame,
    normalize_reference,
)

MIN_REFERENCE_VIEWS = 8
# rays closer than this are useless for triangulation
MIN_RAY_ANGLE = np.deg2rad(0.1)


# ---------------------------------------------------------------------------
# basic file I/O

def read_image(path) -> np.ndarray:
    """Load a PNG as float64 grayscale in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except Exception as e:
        raise ParseError(f"cannot read image {path}: {e}") from e
    return to_gray(arr)


def write_image(path, image: np.ndarray) -> None:
    """Save a float [0,1] grayscale image as 8-bit PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L").save(path)


def _read_json(path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise ParseError(f"malformed JSON in {path}: {e}") from e


def read_camera_json(path) -> tuple[Intrinsics, RigidPose | None]:
    """Parse a view json; pose is None when R/t are absent (query without GT)."""
    d = _read_json(path)
    try:
        vals = [float(d[k]) for k in ("fx", "fy", "cx", "cy")]
    except KeyError as e:
        raise InconsistentIntrinsics(f"{path}: missing intrinsics field {e}") from e
    except (TypeError, ValueError) as e:
        raise InconsistentIntrinsics(f"{path}: bad intrinsics value: {e}") from e
    if not all(np.isfinite(v) for v in vals) or vals[0] <= 0 or vals[1] <= 0:
        raise InconsistentIntrinsics(f"{path}: non-positive or non-finite focal")
    K = Intrinsics(*vals)
    if "R" not in d and "t" not in d:
        return K, None
    try:
        R = np.asarray(d["R"], dtype=np.float64).reshape(3, 3)
        t = np.asarray(d["t"], dtype=np.float64).reshape(3)
        pose = RigidPose(R, t)
    except Exception as e:
        raise ParseError(f"{path}: invalid pose: {e}") from e
    return K, pose


def write_camera_json(path, K: Intrinsics, pose: RigidPose | None) -> None:
    d = {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy}
    if pose is not None:
        d["R"] = [float(v) for v in pose.R.ravel()]
        d["t"] = [float(v) for v in pose.t]
    with open(path, "w") as f:
        json.dump(d, f, sort_keys=True, indent=1)
        f.write("\n")


# ---------------------------------------------------------------------------
# sparse geometry

def fps_sample(viewpoints, k: int) -> list[int]:
    """Greedy farthest-point sampling on unit viewpoint vectors.

    Seeds at index 0, then repeatedly adds the viewpoint with maximal
    angular distance to the chosen set; ties go to the lowest index.
    k >= n returns all indices.
    """
    vp = np.asarray(viewpoints, dtype=np.float64).reshape(-1, 3)
    n = len(vp)
    if n == 0:
        return []
    norms = np.linalg.norm(vp, axis=1)
    if np.any(norms < 1e-12):
        raise ZeroVector("viewpoints must be nonzero vectors")
    vp = vp / norms[:, None]
    if k >= n:
        return list(range(n))
    chosen = [0]
    dist = np.arccos(np.clip(vp @ vp[0], -1.0, 1.0))
    while len(chosen) < k:
        idx = int(np.argmax(dist))
        chosen.append(idx)
        d_new = np.arccos(np.clip(vp @ vp[idx], -1.0, 1.0))
        dist = np.minimum(dist, d_new)
    return chosen


def triangulate(
    kp_a, pose_a: RigidPose, K_a: Intrinsics, kp_b, pose_b: RigidPose, K_b: Intrinsics
) -> np.ndarray:
    """Two-view triangulation: midpoint of the common perpendicular.

    Raises DegenerateRays when the rays are within 0.1 degrees of parallel
    or the camera centers coincide.
    """
    c_a, c_b = pose_a.center, pose_b.center
    baseline = np.linalg.norm(c_a - c_b)
    if baseline < 1e-12 * max(1.0, np.linalg.norm(c_a)):
        raise DegenerateRays("camera centers coincide")
    d_a = unit(pose_a.R.T @ K_a.ray(np.asarray(kp_a, dtype=np.float64)))
    d_b = unit(pose_b.R.T @ K_b.ray(np.asarray(kp_b, dtype=np.float64)))
    angle = np.arccos(np.clip(abs(d_a @ d_b), -1.0, 1.0))
    if angle < MIN_RAY_ANGLE:
        raise DegenerateRays(f"ray angle {np.rad2deg(angle):.4f} deg below 0.1 deg")
    w = c_a - c_b
    a = d_a @ d_a
    b = d_a @ d_b
    c = d_b @ d_b
    d = d_a @ w
    e = d_b @ w
    denom = a * c - b * b
    s = (b * e - c * d) / denom
    r = (a * e - b * d) / denom
    return 0.5 * (c_a + s * d_a + c_b + r * d_b)


@dataclass(frozen=True)
class SequenceAlignment:
    """Similarity transform a ~ s R b + t between two point sequences."""

    s: float
    R: np.ndarray
    t: np.ndarray


def align_sequences(points_a, points_b) -> SequenceAlignment:
    """Least-squares similarity alignment (closed form, reflection-safe).

    Solves min sum ||a_i - (s R b_i + t)||^2. Needs at least 3 points that
    are not collinear.
    """
    A = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    B = np.asarray(points_b, dtype=np.float64).reshape(-1, 3)
    if A.shape != B.shape:
        raise ValueError(f"sequence shapes differ: {A.shape} vs {B.shape}")
    n = len(A)
    if n < 3:
        raise Collinear("need at least 3 correspondences")
    mu_a, mu_b = A.mean(axis=0), B.mean(axis=0)
    Ac, Bc = A - mu_a, B - mu_b
    H = (Ac.T @ Bc) / n
    U, D, Vt = np.linalg.svd(H)
    if D[1] <= 1e-12 * max(D[0], 1e-300):
        raise Collinear("correspondences are collinear")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_b = (Bc**2).sum() / n
    s = float(np.trace(np.diag(D) @ S) / var_b)
    t = mu_a - s * (R @ mu_b)
    return SequenceAlignment(s=s, R=R, t=t)


# ---------------------------------------------------------------------------
# reference database

@dataclass
class ReferenceDatabase:
    """Normalized reference views plus the FPS working subsets."""

    frame: ObjectFrame
    views: list                      # ReferenceView at crop_size
    detector_views: list             # ReferenceView at detector_size
    detector_subset: list            # indices into views
    selector_subset: list
    raw_views: list = field(default_factory=list)
    view_ids: list = field(default_factory=list)
    object_name: str = "object"
    points: np.ndarray | None = None  # raw-frame model points when known
    selector_banks: list = field(default_factory=list)  # per subset view: [(img, mask)]
    angles: np.ndarray | None = None

    @property
    def viewpoints(self) -> np.ndarray:
        return np.stack([v.viewpoint for v in self.views])


def build_database(
    raw_views,
    frame: ObjectFrame,
    cfg: PipelineConfig | None = None,
    view_ids=None,
    object_name: str = "object",
    points=None,
) -> ReferenceDatabase:
    """Normalize raw views and precompute the detector/selector subsets."""
    cfg = cfg or PipelineConfig()
    if not raw_views:
        raise TooFewReferences("reference set is empty")
    views = [normalize_reference(v, frame, cfg.crop_size) for v in raw_views]
    det_views = [normalize_reference(v, frame, cfg.detector_size) for v in raw_views]
    vps = np.stack([v.viewpoint for v in views])
    det_subset = fps_sample(vps, cfg.n_detector_templates)
    sel_subset = fps_sample(vps, cfg.n_selector_views)
    angles = cfg.angles()
    banks = []
    for i in sel_subset:
        v = views[i]
        rots = []
        for a in angles:
            img, ok = rotate_image(v.image, float(a))
            mask_rot, _ = rotate_image(v.mask.astype(np.float64), float(a), fill=0.0)
            rots.append((img, ok & (mask_rot > 0.5)))
        banks.append(rots)
    return ReferenceDatabase(
        frame=frame,
        views=views,
        detector_views=det_views,
        detector_subset=det_subset,
        selector_subset=sel_subset,
        raw_views=list(raw_views),
        view_ids=list(view_ids) if view_ids is not None else [f"{i:04d}" for i in range(len(views))],
        object_name=object_name,
        points=None if points is None else np.asarray(points, dtype=np.float64),
        selector_banks=banks,
        angles=angles,
    )


def _frame_from_meta_or_points(meta: dict, points, cfg: PipelineConfig):
    if "center" in meta and "diameter" in meta:
        try:
            center = np.asarray(meta["center"], dtype=np.float64).reshape(3)
            diameter = float(meta["diameter"])
        except Exception as e:
            raise ParseError(f"meta.json: bad center/diameter: {e}") from e
        return ObjectFrame(center=center, diameter=diameter)
    if points is not None and len(points) >= 2:
        est = estimate_frame(points)
        return ObjectFrame(est.center, est.diameter * cfg.diameter_margin)
    raise ParseError(
        "meta.json lacks center/diameter and no points are available to estimate them"
    )


def _triangulate_keypoints(kp_spec: dict, views_by_id: dict) -> np.ndarray:
    """Triangulate labeled keypoints from the first two images that share them."""
    images = kp_spec.get("images", {})
    ids = sorted(k for k in images if k in views_by_id)
    if len(ids) < 2:
        raise ParseError("keypoints.json needs two images with poses")
    pts = []
    a_id, b_id = ids[0], ids[1]
    va, vb = views_by_id[a_id], views_by_id[b_id]
    kps_a, kps_b = images[a_id], images[b_id]
    for kp_a, kp_b in zip(kps_a, kps_b):
        if kp_a is None or kp_b is None:
            continue
        pts.append(
            triangulate(kp_a, va.pose, va.intrinsics, kp_b, vb.pose, vb.intrinsics)
        )
    if not pts:
        raise ParseError("keypoints.json has no keypoint visible in both images")
    return np.stack(pts)


def load_reference_set(path, cfg: PipelineConfig | None = None) -> ReferenceDatabase:
    """Load a reference directory into a ready-to-use database.

    Views failing pose validation raise ParseError; an image without a
    camera json raises MissingPose.
    """
    cfg = cfg or PipelineConfig()
    root = Path(path)
    if not root.is_dir():
        raise ParseError(f"reference set directory not found: {root}")
    meta = _read_json(root / "meta.json") if (root / "meta.json").exists() else {}
    views_dir = root / "views"
    if not views_dir.is_dir():
        raise ParseError(f"missing views/ directory under {root}")
    raw_views, ids = [], []
    for png in sorted(views_dir.glob("*.png")):
        cam_path = png.with_suffix(".json")
        if not cam_path.exists():
            raise MissingPose(f"no camera file for {png.name}")
        try:
            K, pose = read_camera_json(cam_path)
        except FileNotFoundError as e:
            raise MissingPose(str(e)) from e
        if pose is None:
            raise MissingPose(f"{cam_path.name} lacks R/t")
        raw_views.append(RawView(image=read_image(png), intrinsics=K, pose=pose))
        ids.append(png.stem)

    points = None
    if (root / "points.json").exists():
        pts = _read_json(root / "points.json")
        try:
            points = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        except Exception as e:
            raise ParseError(f"points.json: {e}") from e
    elif (root / "keypoints.json").exists():
        by_id = dict(zip(ids, raw_views))
        points = _triangulate_keypoints(_read_json(root / "keypoints.json"), by_id)

    frame = _frame_from_meta_or_points(meta, points, cfg)
    return build_database(
        raw_views,
        frame,
        cfg,
        view_ids=ids,
        object_name=str(meta.get("object", "object")),
        points=points,
    )


def save_reference_set(raw_views, path, meta: dict | None = None, view_ids=None, points=None) -> Path:
    """Write raw views (images + cameras + meta) in the directory format."""
    root = Path(path)
    (root / "views").mkdir(parents=True, exist_ok=True)
    meta = dict(meta or {})
    meta.setdefault("object", "object")
    meta.setdefault("units", "m")
    with open(root / "meta.json", "w") as f:
        json.dump(meta, f, sort_keys=True, indent=1)
        f.write("\n")
    ids = list(view_ids) if view_ids is not None else [f"{i:04d}" for i in range(len(raw_views))]
    for vid, view in zip(ids, raw_views):
        write_image(root / "views" / f"{vid}.png", view.image)
        write_camera_json(root / "views" / f"{vid}.json", view.intrinsics, view.pose)
    if points is not None:
        with open(root / "points.json", "w") as f:
            json.dump([[float(x) for x in p] for p in np.asarray(points)], f, indent=1)
            f.write("\n")
    return root


# ---------------------------------------------------------------------------
# synthetic planar-object scenes

def _value_noise(rng: np.random.Generator, size: int) -> np.ndarray:
    """Multi-octave band-limited noise in [0.05, 0.95]; high contrast, smooth."""
    from .correlation import resize

    img = np.zeros((size, size))
    amp = 1.0
    for cells in (4, 8, 16, 32, 64):
        img += amp * resize(rng.random((cells, cells)), (size, size))
        amp *= 0.55
    lo, hi = img.min(), img.max()
    return 0.05 + 0.9 * (img - lo) / (hi - lo)


def _hemisphere_dirs_spiral(n: int, elev_range=(np.deg2rad(30), np.deg2rad(80))) -> np.ndarray:
    """Deterministic golden-angle spiral over an elevation band of the +z hemisphere."""
    golden = np.pi * (3.0 - np.sqrt(5.0))
    lo, hi = np.sin(elev_range[0]), np.sin(elev_range[1])
    out = np.zeros((n, 3))
    for i in range(n):
        z = lo + (hi - lo) * (i + 0.5) / n
        r = np.sqrt(max(0.0, 1.0 - z * z))
        phi = golden * i
        out[i] = (r * np.cos(phi), r * np.sin(phi), z)
    return out


def _camera_for_direction(
    direction, target, distance: float, roll: float
) -> RigidPose:
    """World->camera pose for a camera on `direction` looking at `target`."""
    C = np.asarray(target) + distance * np.asarray(direction)
    z_axis = unit(np.asarray(target) - C)
    R = rot_z(roll) @ look_rotation(z_axis)
    return RigidPose(R, -R @ C)


@dataclass
class SynthScene:
    """Handles to a generated scene on disk."""

    root: Path
    refs_dir: Path
    queries_dir: Path
    center: np.ndarray
    diameter: float
    half_side: float
    points: np.ndarray
    query_ids: list


def render_plane_view(
    texture: np.ndarray,
    half_side: float,
    center,
    K: Intrinsics,
    pose: RigidPose,
    shape: tuple[int, int],
    background: float = 0.45,
) -> np.ndarray:
    """Render the textured square {center + (u, v, 0), |u|,|v| <= half_side}.

    Pure homography resampling of the texture; pixels off the square take the
    background value. Exact with respect to project(): a texture point and
    its rendered location agree to float precision.
    """
    center = np.asarray(center, dtype=np.float64)
    T = texture.shape[0]
    # plane (u, v, 1) -> image homography
    cols = np.stack(
        [pose.R[:, 0], pose.R[:, 1], pose.R @ center + pose.t], axis=1
    )
    P = K.K @ cols
    Pinv = np.linalg.inv(P)
    h, w = shape
    gy, gx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    ones = np.ones_like(gx)
    plane = np.stack([gx, gy, ones], axis=-1) @ Pinv.T
    wcoord = plane[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = plane[..., 0] / wcoord
        v = plane[..., 1] / wcoord
    on_plane = (wcoord > 1e-12) & (np.abs(u) <= half_side) & (np.abs(v) <= half_side)
    tx = (u + half_side) / (2 * half_side) * T
    ty = (v + half_side) / (2 * half_side) * T
    tx = np.clip(tx, 0.0, T)
    ty = np.clip(ty, 0.0, T)
    from .correlation import bilinear_sample

    vals, _ = bilinear_sample(texture, tx, ty, fill=background)
    return np.where(on_plane, vals, background)


def make_synth_scene(
    out_dir,
    texture_seed: int = 0,
    n_ref: int = 32,
    n_query: int = 16,
    noise: float = 0.0,
    ref_shape: tuple[int, int] = (400, 400),
    query_shape: tuple[int, int] = (416, 544),
    focal: float = 600.0,
    include_ref_pose_query: bool = False,
    dist_range: tuple[float, float] = (9.0, 13.0),
) -> SynthScene:
    """Generate a planar-object scene: reference set + posed query set.

    Everything is a deterministic function of the arguments; two calls with
    the same inputs produce byte-identical files. Ground-truth poses land in
    the query jsons; the square's corner/grid points go to points.json.
    """
    rng = np.random.default_rng(texture_seed)
    texture = _value_noise(rng, 256)
    half_side = 0.35
    center = np.array([0.25, -0.15, 0.8])
    diameter = 2.0 * np.sqrt(2.0) * half_side
    grid = np.linspace(-half_side, half_side, 5)
    points = np.array([[center[0] + u, center[1] + v, center[2]] for u in grid for v in grid])

    root = Path(out_dir)
    refs_dir = root / "refs"
    queries_dir = root / "queries"
    (refs_dir / "views").mkdir(parents=True, exist_ok=True)
    queries_dir.mkdir(parents=True, exist_ok=True)

    def intrinsics_for(shape):
        return Intrinsics(focal, focal, shape[1] / 2.0, shape[0] / 2.0)

    # references: spiral viewpoints, mild look-target offset, no roll
    ref_dirs = _hemisphere_dirs_spiral(n_ref)
    raw_views = []
    K_ref = intrinsics_for(ref_shape)
    for i in range(n_ref):
        dist_norm = float(rng.uniform(*dist_range))
        dist = dist_norm * diameter / 2.0
        target = center + rng.uniform(-0.08, 0.08, size=3) * diameter
        pose = _camera_for_direction(ref_dirs[i], target, dist, roll=0.0)
        img = render_plane_view(texture, half_side, center, K_ref, pose, ref_shape)
        raw_views.append(RawView(image=img, intrinsics=K_ref, pose=pose))
    meta = {
        "object": f"synth-{texture_seed}",
        "units": "m",
        "center": [float(c) for c in center],
        "diameter": float(diameter),
    }
    save_reference_set(raw_views, refs_dir, meta=meta, points=points)

    # queries: random viewpoints in the same band, with mild camera roll
    K_q = intrinsics_for(query_shape)
    query_ids = []
    for j in range(n_query):
        qrng = np.random.default_rng([texture_seed, 1000 + j])
        if include_ref_pose_query and j == 0:
            pose = raw_views[0].pose
            Kj = K_ref
            shape = ref_shape
        else:
            z = float(qrng.uniform(np.sin(np.deg2rad(32)), np.sin(np.deg2rad(78))))
            phi = float(qrng.uniform(0.0, 2 * np.pi))
            r = np.sqrt(1.0 - z * z)
            direction = np.array([r * np.cos(phi), r * np.sin(phi), z])
            dist = float(qrng.uniform(*dist_range)) * diameter / 2.0
            # modest camera roll: detection correlates unrotated templates,
            # so queries stay within the backend's in-plane tolerance while
            # still exercising the selector's rotation estimate
            roll = float(qrng.uniform(-np.pi / 15.0, np.pi / 15.0))
            # keep the object inside the frame but off-center
            target = center + qrng.uniform(-0.6, 0.6, size=3) * diameter * np.array([1, 1, 0.3])
            pose = _camera_for_direction(direction, target, dist, roll=roll)
            Kj = K_q
            shape = query_shape
        img = render_plane_view(texture, half_side, center, Kj, pose, shape)
        if noise > 0:
            img = np.clip(img + qrng.normal(scale=noise, size=img.shape), 0.0, 1.0)
        qid = f"{j:04d}"
        query_ids.append(qid)
        write_image(queries_dir / f"{qid}.png", img)
        write_camera_json(queries_dir / f"{qid}.json", Kj, pose)

    return SynthScene(
        root=root,
        refs_dir=refs_dir,
        queries_dir=queries_dir,
        center=center,
        diameter=diameter,
        half_side=half_side,
        points=points,
        query_ids=query_ids,
    )


def load_query_set(path) -> list[tuple[str, np.ndarray, Intrinsics, RigidPose | None]]:
    """Read (id, image, K, gt_pose_or_None) tuples, sorted by id."""
    root = Path(path)
    if not root.is_dir():
        raise ParseError(f"query directory not found: {root}")
    out = []
    for png in sorted(root.glob("*.png")):
        cam = png.with_suffix(".json")
        if not cam.exists():
            raise MissingPose(f"no camera file for query {png.name}")
        K, pose = read_camera_json(cam)
        out.append((png.stem, read_image(png), K, pose))
    return out
