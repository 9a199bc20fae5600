"""Iterative pose refinement through a voxel feature volume.

A 32^3 vertex grid spanning the normalized object cube is projected
into a handful of nearby reference views and into the query crop. The
cross-reference mean and variance at each vertex summarize what the
object should look like from the current pose; a pattern search then
finds the in-plane similarity residual (scale, offset, small rotation)
whose re-sampled query features best match that summary, weighting
each vertex by the inverse variance so background and occlusion
disagreements are discounted. The residual is converted to a rigid
update about the current object center, and the loop re-crops and
repeats.

Poses here live in normalized object coordinates (object centered at
the origin with diameter 2); the query image and intrinsics are the
raw ones, since normalization leaves projections unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .correlation import bilinear_sample, to_gray
from .detection import crop_for_pose
from .errors import EmptyVolume, NonPositive, TooFewReferences
from .geometry import (
    Intrinsics,
    RigidPose,
    SimilarityResidual,
    axis_angle,
    similarity_to_rigid,
    unit,
)
from .selection import viewpoint_angle

VOLUME_RES = 32
# crop margin for refinement: candidate offsets up to offset_range must
# stay sampleable inside the crop, so leave room around the object
CROP_MARGIN = 1.25
# candidates that push more than this share of the vertices off the
# image are rejected; shrinking the overlap must not look like a win
COVERAGE_GUARD = 0.9
INITIAL_STEP = 0.1
MIN_STEP = 1e-4
# squared half-width of the residual rotation range the solver explores
# (15 deg); the per-vertex variance must cover prediction error over this
# whole range, since every candidate in it is compared against the same
# interpolated statistics
ROT_RANGE_SQ = float(np.deg2rad(15.0) ** 2)
# probe switches for the interpolation design
QUAD_MODE = "r2"
QUAD_RIDGE = 1e-3


@dataclass(frozen=True)
class RefinerConfig:
    """Residual search bounds and iteration budget.

    The six residual parameters (log scale, two offsets in camera units
    at the object, axis-angle rotation) are dimensionless and comparably
    scaled, so a single step size drives the pattern search. With the
    object spanning diameter 2, offset_range 0.3 allows the center to
    move by 15% of the apparent size per iteration.
    """

    n_neighbors: int = 6
    iterations: int = 3
    volume_size: int = VOLUME_RES
    max_rot_residual: float = float(np.deg2rad(15.0))
    scale_range: tuple = (0.8, 1.25)
    offset_range: float = 0.3
    budget: int = 1500
    weight_eps: float = 1e-3
    min_valid_fraction: float = 0.01

    def __post_init__(self):
        lo, hi = self.scale_range
        if self.n_neighbors < 1 or self.volume_size < 2 or self.budget < 1:
            raise NonPositive("n_neighbors, volume_size and budget must be positive")
        if self.iterations < 0:
            raise NonPositive("iterations must be >= 0")
        if not (0.0 < lo <= hi):
            raise NonPositive(f"scale_range must be positive and ordered, got {self.scale_range}")
        if self.offset_range <= 0 or self.max_rot_residual <= 0 or self.weight_eps <= 0:
            raise NonPositive("offset_range, max_rot_residual and weight_eps must be positive")
        if not (0.0 < self.min_valid_fraction <= 1.0):
            raise NonPositive("min_valid_fraction must be in (0, 1]")

    @classmethod
    def from_pipeline(cls, cfg) -> "RefinerConfig":
        return cls(
            n_neighbors=cfg.n_neighbors,
            iterations=cfg.iterations,
            volume_size=cfg.volume_size,
            max_rot_residual=cfg.max_rot_residual,
            scale_range=(cfg.scale_lo, cfg.scale_hi),
            offset_range=cfg.offset_range,
            budget=cfg.search_budget,
            weight_eps=cfg.weight_eps,
            min_valid_fraction=cfg.min_valid_fraction,
        )


@dataclass(frozen=True)
class FeatureVolume:
    """Per-vertex statistics over a cubic grid spanning [-1, 1]^3.

    ref_mean / ref_var summarize the neighbor views' features at each
    vertex as seen from the query viewpoint; query holds the features
    sampled through pose_in; valid is false wherever any contributing
    projection left its image. The
    query image, camera and pose are kept so a candidate residual can
    re-sample the query exactly instead of warping inside the volume.
    """

    ref_mean: np.ndarray
    ref_var: np.ndarray
    query: np.ndarray
    valid: np.ndarray
    pose_in: RigidPose
    query_image: np.ndarray
    query_K: Intrinsics

    @property
    def resolution(self) -> int:
        return int(self.ref_mean.shape[0])

    @property
    def valid_fraction(self) -> float:
        return float(self.valid.mean())


@dataclass(frozen=True)
class RefineStep:
    """Diagnostics for one refinement pass."""

    residual: SimilarityResidual | None
    objective_init: float
    objective_final: float
    valid_fraction: float
    aborted: bool = False


def volume_vertices(res: int = VOLUME_RES) -> np.ndarray:
    """Vertex coordinates of the res^3 grid over [-1, 1]^3.

    Row-major over (x, y, z) indices: reshaping a per-vertex array to
    (res, res, res) puts the vertex (axis[i], axis[j], axis[k]) at
    [i, j, k].
    """
    axis = np.linspace(-1.0, 1.0, res)
    xx, yy, zz = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([xx, yy, zz], axis=-1).reshape(-1, 3)


def select_neighbors(pose_in: RigidPose, refs, n: int = 6) -> list:
    """The n references with viewpoints closest to pose_in's.

    Ties keep database order. refs may be a ReferenceDatabase or any
    sequence with per-view .viewpoint unit vectors.
    """
    views = list(refs.views) if hasattr(refs, "views") else list(refs)
    if len(views) < n:
        raise TooFewReferences(f"need {n} reference views, have {len(views)}")
    vp = pose_in.viewpoint()
    ang = np.array([viewpoint_angle(vp, v.viewpoint) for v in views])
    order = np.argsort(ang, kind="stable")
    return [views[i] for i in order[:n]]


def _interp_design(u_query, dirs: np.ndarray):
    """View-interpolation functionals for aggregating neighbor features.

    A vertex off the object surface samples surface texture displaced in
    proportion to the observing camera's offset from the query camera, so
    a plain mean over neighbors is a parallax-shifted copy of the texture
    and drags the residual search toward the neighbors' average direction.
    Reading a per-vertex linear fit over the neighbors' gnomonic direction
    offsets at the query's own viewpoint (the offset origin) cancels that
    pull. Direction offsets are the only regressors: normalized views
    make distance-induced appearance changes sub-pixel, and a distance
    column mostly opens a leakage channel that biases the prediction
    whenever the neighbors sit to one side of the query's distance.

    Returns (pi, X, P, hat): pi is the n-vector prediction functional
    (mean = pi @ features), X/P the design and its least-squares
    projection, hat the leverage diagonal; the fit's leave-one-out
    residuals estimate per-vertex uncertainty. The slope ridge keeps
    degenerate viewpoint layouts solvable.
    """
    u = unit(np.asarray(u_query, dtype=np.float64))
    dirs = np.asarray(dirs, dtype=np.float64)
    e1 = unit(np.cross(u, np.eye(3)[int(np.argmin(np.abs(u)))]))
    e2 = np.cross(u, e1)
    # gnomonic projection about the query direction; the clamp keeps
    # near-orthogonal neighbors from blowing up the design
    dots = np.maximum(dirs @ u, 0.2)
    gn = dirs / dots[:, None] - u
    g1, g2 = gn @ e1, gn @ e2
    cols = [np.ones(len(dirs)), g1, g2]
    ridge = [0.0, 1e-3, 1e-3]
    if QUAD_MODE == "r2":
        cols.append(g1**2 + g2**2)
        ridge.append(QUAD_RIDGE)
    elif QUAD_MODE == "full":
        cols.extend([g1**2, g1 * g2, g2**2])
        ridge.extend([QUAD_RIDGE] * 3)
    X = np.column_stack(cols)
    A = X.T @ X + np.diag(ridge)
    P = np.linalg.solve(A, X.T)
    hat = np.einsum("ij,ji->i", X, P)
    pi = X @ np.linalg.solve(A, np.eye(len(cols))[0])
    return pi, X, P, hat


def _sample_view(image, mask, K: Intrinsics, pose: RigidPose, verts):
    uv = pose.transform(verts)
    z = uv[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        x = K.fx * uv[:, 0] / z + K.cx
        y = K.fy * uv[:, 1] / z + K.cy
    vals, ok = bilinear_sample(image, x, y)
    ok = ok & (z > 0)
    if mask is not None:
        mvals, _ = bilinear_sample(np.asarray(mask, dtype=np.float64), x, y, fill=0.0)
        ok = ok & (mvals > 0.5)
    return vals, ok


def build_volume(
    pose_in: RigidPose,
    neighbors,
    query_image: np.ndarray,
    query_K: Intrinsics,
    query_mask: np.ndarray | None = None,
    res: int = VOLUME_RES,
) -> FeatureVolume:
    """Project every grid vertex into the neighbors and the query.

    Neighbors project through their own poses, the query through
    pose_in; features are bilinear grayscale samples. ref_mean is the
    first-order view interpolation of the neighbor features at the
    query viewpoint and ref_var the interpolation's residual spread.
    Vertices are flagged invalid rather than dropped when a projection
    leaves an image or its validity mask.
    """
    neighbors = list(neighbors)
    if not neighbors:
        raise TooFewReferences("volume needs at least one neighbor view")
    verts = volume_vertices(res)
    feats = []
    inside = np.ones(len(verts), dtype=bool)
    for v in neighbors:
        vals, ok = _sample_view(v.image, v.mask, v.intrinsics, v.pose, verts)
        feats.append(vals)
        inside &= ok
    feats = np.stack(feats)
    dirs = np.stack([np.asarray(v.viewpoint, dtype=np.float64) for v in neighbors])
    pi, X, P, hat = _interp_design(pose_in.viewpoint(), dirs)
    beta = P @ feats
    mean = pi @ feats
    # leave-one-out residuals of the fit estimate how far the appearance
    # deviates from the interpolation model at each vertex; ||pi||^2
    # propagates that into the prediction so layouts that force
    # extrapolation lose influence in the solver
    resid = feats - X @ beta
    denom = np.clip(1.0 - hat, 0.05, None)[:, None]
    var = np.mean((resid / denom) ** 2, axis=0) * (1.0 + float(pi @ pi))
    # the prediction must hold across the whole candidate rotation range,
    # not just at the input viewpoint: a vertex whose appearance slides
    # with viewpoint (an off-surface vertex seeing parallax) cannot
    # adjudicate between residual rotations, and trusting it drags the
    # solver toward keeping the input pose instead of correcting it
    var = var + (beta[1] ** 2 + beta[2] ** 2) * ROT_RANGE_SQ
    gray = to_gray(query_image)
    qvals, qok = _sample_view(gray, query_mask, query_K, pose_in, verts)
    inside &= qok
    shape = (res, res, res)
    return FeatureVolume(
        ref_mean=mean.reshape(shape),
        ref_var=var.reshape(shape),
        query=qvals.reshape(shape),
        valid=inside.reshape(shape),
        pose_in=pose_in,
        query_image=gray,
        query_K=query_K,
    )


def _volume_matcher(vol: FeatureVolume, cfg: RefinerConfig):
    """Candidate scorer over the volume's valid vertices.

    Returns the variance-weighted mean squared difference between the
    query features re-sampled through the residually transformed pose
    and the cross-reference mean. Candidates that lose more than the
    coverage guard's share of vertices score infinity.
    """
    valid = vol.valid.ravel()
    verts = volume_vertices(vol.resolution)[valid]
    mean = vol.ref_mean.ravel()[valid]
    w = 1.0 / (vol.ref_var.ravel()[valid] + cfg.weight_eps)
    pose = vol.pose_in
    base = verts @ pose.R.T
    t_in = pose.t
    K, img = vol.query_K, vol.query_image

    def score(res: SimilarityResidual) -> float:
        Rr, dt = similarity_to_rigid(res, t_in)
        cam = base @ Rr.T + (t_in + dt)
        z = cam[:, 2]
        if np.any(z <= 1e-9):
            return float("inf")
        x = K.fx * cam[:, 0] / z + K.cx
        y = K.fy * cam[:, 1] / z + K.cy
        vals, ok = bilinear_sample(img, x, y)
        if float(ok.mean()) < COVERAGE_GUARD:
            return float("inf")
        ww = w[ok]
        d = vals[ok] - mean[ok]
        return float(np.sum(ww * d * d) / np.sum(ww))

    return score


def _check_volume(vol: FeatureVolume, cfg: RefinerConfig) -> None:
    if vol.valid_fraction < cfg.min_valid_fraction:
        raise EmptyVolume(
            f"only {vol.valid_fraction:.2%} of volume vertices are valid"
        )


def residual_objective(
    vol: FeatureVolume, res: SimilarityResidual, cfg: RefinerConfig | None = None
) -> float:
    """Solver objective for one candidate residual (lower is better)."""
    cfg = cfg or RefinerConfig()
    _check_volume(vol, cfg)
    return _volume_matcher(vol, cfg)(res)


def solve_residual(
    vol: FeatureVolume, cfg: RefinerConfig | None = None
) -> SimilarityResidual:
    """Pattern-search the similarity residual that re-aligns the query.

    Coordinate search with step halving over (log s, t_x, t_y, r_xyz),
    started at identity and clamped to the configured ranges, spending
    at most cfg.budget objective evaluations. The incumbent only moves
    on strict improvement, so the result never scores worse than the
    identity residual.
    """
    cfg = cfg or RefinerConfig()
    _check_volume(vol, cfg)
    score = _volume_matcher(vol, cfg)
    lo, hi = np.log(cfg.scale_range[0]), np.log(cfg.scale_range[1])

    def clamp(p: np.ndarray) -> np.ndarray:
        q = p.copy()
        q[0] = np.clip(q[0], lo, hi)
        q[1:3] = np.clip(q[1:3], -cfg.offset_range, cfg.offset_range)
        n = float(np.linalg.norm(q[3:]))
        if n > cfg.max_rot_residual:
            q[3:] *= cfg.max_rot_residual / n
        return q

    def residual(p: np.ndarray) -> SimilarityResidual:
        return SimilarityResidual(float(np.exp(p[0])), p[1:3].copy(), axis_angle(p[3:]))

    p = clamp(np.zeros(6))
    best = score(residual(p))
    evals = 1
    step = INITIAL_STEP
    while evals < cfg.budget and step > MIN_STEP:
        moved = False
        for i in range(6):
            for sgn in (1.0, -1.0):
                if evals >= cfg.budget:
                    break
                cand = p.copy()
                cand[i] += sgn * step
                cand = clamp(cand)
                if np.array_equal(cand, p):
                    continue
                val = score(residual(cand))
                evals += 1
                if val < best:
                    p, best = cand, val
                    moved = True
                    break
        if not moved:
            step *= 0.5
    return residual(p)


def apply_residual(pose_in: RigidPose, res: SimilarityResidual) -> RigidPose:
    """Rigid update at the current object center.

    The rotation composes on the camera side; the translation follows
    the similarity's motion of the center (offset, then rescale depth).
    """
    Rr, dt = similarity_to_rigid(res, pose_in.t)
    return RigidPose(Rr @ pose_in.R, pose_in.t + dt)


def refine(
    pose_init: RigidPose,
    refs,
    query_image: np.ndarray,
    K: Intrinsics,
    cfg: RefinerConfig | None = None,
) -> tuple[RigidPose, list[RefineStep]]:
    """Iteratively tighten a coarse pose against the reference views.

    Each pass re-crops the query around the current estimate, rebuilds
    the volume from the closest references, solves the residual and
    applies it. If the volume degenerates (object off-image), the loop
    stops and the last pose is returned with the step marked aborted.
    """
    cfg = cfg or RefinerConfig()
    gray = to_gray(query_image)
    pose = pose_init
    trace: list[RefineStep] = []
    for _ in range(cfg.iterations):
        neighbors = select_neighbors(pose, refs, cfg.n_neighbors)
        out_size = int(neighbors[0].image.shape[0])
        crop = crop_for_pose(gray, K, pose, out_size=out_size, margin=CROP_MARGIN)
        vol = build_volume(
            pose,
            neighbors,
            crop.image,
            crop.intrinsics(K),
            query_mask=crop.mask,
            res=cfg.volume_size,
        )
        if vol.valid_fraction < cfg.min_valid_fraction:
            trace.append(
                RefineStep(None, float("nan"), float("nan"), vol.valid_fraction, aborted=True)
            )
            break
        matcher = _volume_matcher(vol, cfg)
        res = solve_residual(vol, cfg)
        trace.append(
            RefineStep(
                res,
                matcher(SimilarityResidual.identity()),
                matcher(res),
                vol.valid_fraction,
            )
        )
        pose = apply_residual(pose, res)
    return pose, trace
