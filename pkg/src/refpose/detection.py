"""Locating the object in a query image.

The detector slides the normalized reference templates over a centered
scale pyramid of the query, fuses the per-template NCC maps by pixelwise
max, and reads the object center projection q, matched scale s, box size
and ray depth off the global peak. A local log-scale sweep then sharpens
s beyond the pyramid quantization.

Scale semantics: s is the object's apparent size relative to the
templates, so its box spans box_px = template_size * s query pixels.
Enlargement levels (s < 1) are realized by shrinking the templates and
correlating on the original image, which scores the same match at a
quarter of the FFT cost of upsampling the query.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import PipelineConfig
from .correlation import (
    ScoreMap,
    bilinear_sample,
    build_pyramid,
    correlate_all,
    correlate_bank,
    resize,
    to_gray,
)
from .errors import ImageTooSmall, NoDetection
from .geometry import (
    Intrinsics,
    RigidPose,
    box_size_from_scale,
    depth_from_scale,
    project,
    unit,
    virtual_focal,
)

# local scale sweep: +-18% in log scale, refined by a parabola over 7 samples
FINE_SWEEP_HALF = 0.18
FINE_SWEEP_STEPS = 7
FINE_SWEEP_PAD = 4
# slide radius (template px) when re-localizing q at the refined scale;
# the coarse peak can sit several px off under a mis-scaled level match
RELOC_PAD = 10
# candidate refinement: how many coarse peaks to polish, when a candidate
# keeps its template without re-picking, and the score that ends the search
DETECT_CANDIDATES = 5
RESELECT_SKIP = 0.9
EARLY_ACCEPT = 0.95
# how many top-ranked templates get their own scale sweep at the winner
TEMPLATE_RECHECK = 4


@dataclass(frozen=True)
class Detection:
    """Detector output: the object center projection and its apparent size.

    depth is the distance along the ray through q, in units where the
    object diameter is 2 (the normalized object frame).
    """

    q: np.ndarray
    s: float
    box_px: float
    depth: float
    score: float
    heatmap: ScoreMap | None = None
    level: float = 0
    template_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=np.float64))
        if self.q.shape != (2,):
            raise ValueError(f"q must be a 2-vector, got {self.q.shape}")
        if not (self.s > 0 and self.box_px > 0 and self.depth > 0):
            raise ValueError("s, box_px and depth must be positive")
        if not np.isfinite(self.score):
            raise ValueError("score must be finite")


def make_detection(
    q,
    s: float,
    score: float,
    K: Intrinsics,
    ref_size: float = 120.0,
    heatmap: ScoreMap | None = None,
    level: float = 0,
    template_id: int = 0,
) -> Detection:
    """Build a Detection with box and depth derived consistently from s."""
    q = np.asarray(q, dtype=np.float64)
    box = box_size_from_scale(float(s), ref_size)
    depth = depth_from_scale(virtual_focal(K, q), box)
    return Detection(q, float(s), box, depth, float(score), heatmap, level, template_id)


def _parabola(lo: float, mid: float, hi: float) -> float:
    """Sub-sample offset of the vertex through three uniform samples."""
    denom = lo - 2.0 * mid + hi
    if denom >= -1e-12:
        return 0.0
    return float(np.clip(0.5 * (lo - hi) / denom, -0.5, 0.5))


def _sample_patch(image: np.ndarray, center, side: float, out_size: int):
    """Square crop of `side` px around `center`, resampled to out_size."""
    step = side / out_size
    coords = (np.arange(out_size) + 0.5 - out_size / 2.0) * step
    xs, ys = np.meshgrid(center[0] + coords, center[1] + coords)
    return bilinear_sample(image, xs, ys)


def _local_score(gray: np.ndarray, q, template: np.ndarray, s_cand: float) -> float:
    """Best NCC of `template` near q when the image is read at scale s_cand."""
    tsize = template.shape[0]
    side_t = tsize + 2 * FINE_SWEEP_PAD
    window, _ = _sample_patch(gray, q, side_t * s_cand, side_t)
    return float(correlate_all(template, window).values.max())


def _fine_scale(gray: np.ndarray, q, template: np.ndarray, s_center: float):
    """Parabola-refined log-scale sweep of the template match around q.

    Returns (scale, best sweep score).
    """
    deltas = np.linspace(-FINE_SWEEP_HALF, FINE_SWEEP_HALF, FINE_SWEEP_STEPS)
    step = deltas[1] - deltas[0]
    scores = [_local_score(gray, q, template, s_center * np.exp(d)) for d in deltas]
    b = int(np.argmax(scores))
    off = 0.0
    if 0 < b < len(scores) - 1:
        off = _parabola(scores[b - 1], scores[b], scores[b + 1])
    return float(s_center * np.exp(deltas[b] + off * step)), float(scores[b])


def _relocalize(gray: np.ndarray, q, template: np.ndarray, s: float) -> np.ndarray:
    """Sub-pixel peak of the template match at scale s, within +-RELOC_PAD."""
    tsize = template.shape[0]
    side_t = tsize + 2 * RELOC_PAD
    window, _ = _sample_patch(gray, q, side_t * s, side_t)
    rm = correlate_all(template, window).values
    ri, rj = np.unravel_index(int(np.argmax(rm)), rm.shape)
    rdy = rdx = 0.0
    if 0 < ri < rm.shape[0] - 1:
        rdy = _parabola(rm[ri - 1, rj], rm[ri, rj], rm[ri + 1, rj])
    if 0 < rj < rm.shape[1] - 1:
        rdx = _parabola(rm[ri, rj - 1], rm[ri, rj], rm[ri, rj + 1])
    return q + s * np.array([rj + rdx - RELOC_PAD, ri + rdy - RELOC_PAD])


def _centered_levels(n: int) -> list[int]:
    return list(range(-(n // 2), n - n // 2))


def detect(query_image, K: Intrinsics, refs, cfg: PipelineConfig | None = None) -> Detection:
    """Find the object center projection and scale in a query image.

    Raises NoDetection when the best fused NCC score falls below
    cfg.min_score, and ImageTooSmall when no pyramid level can host a
    template.
    """
    cfg = cfg or PipelineConfig()
    gray = to_gray(query_image)
    tsize = cfg.detector_size
    factor = cfg.scale_factor
    tpls = [refs.detector_views[i].image for i in refs.detector_subset]
    base = _centered_levels(cfg.n_scales)
    # midpoint scales between adjacent levels: at half-level scales the
    # per-level NCC peak can sit tens of px off the object center, past
    # the reach of local refinement, so candidates need a finer ladder
    ks = sorted(set(base) | {k + 0.5 for k in base[:-1]})

    pyramid = build_pyramid(gray, int(base[-1]) + 1, factor) if base[-1] >= 0 else None
    levels = {}
    for k in ks:
        # realize scale factor**k as a shrunk template on the nearest
        # pyramid level not larger than the target scale
        p = max(int(np.ceil(k)), 0)
        img = pyramid.levels[p] if p > 0 else gray
        tl = int(np.ceil(tsize * factor ** (k - p)))
        bank = tpls if tl == tsize else [resize(t, (tl, tl)) for t in tpls]
        if img.shape[0] < tl or img.shape[1] < tl:
            continue
        maps = correlate_bank(bank, img)
        fused = maps.max(axis=0)
        pi, pj = np.unravel_index(int(np.argmax(fused)), fused.shape)
        peaks = [(int(pi), int(pj))]
        # second, well-separated local max of the same level
        g = fused.copy()
        g[max(pi - tl // 2, 0) : pi + tl // 2 + 1,
          max(pj - tl // 2, 0) : pj + tl // 2 + 1] = -2.0
        if g.max() > -1.5:
            qi, qj = np.unravel_index(int(np.argmax(g)), g.shape)
            peaks.append((int(qi), int(qj)))
        levels[k] = {
            "fused": fused,
            "tl": tl,
            "ratio": (gray.shape[0] / img.shape[0], gray.shape[1] / img.shape[1]),
            "peaks": [
                (float(fused[i, j]), (i, j), int(np.argmax(maps[:, i, j])))
                for i, j in peaks
            ],
        }
    if not levels:
        raise ImageTooSmall(
            f"query {gray.shape} cannot host a {tsize}px template at any level"
        )

    coarse_best = max(ln["peaks"][0][0] for ln in levels.values())
    if coarse_best < cfg.min_score:
        raise NoDetection(
            f"best score {coarse_best:.3f} below min_score {cfg.min_score}"
        )

    # refine the strongest coarse candidates; the fused peak of a level is
    # unreliable when the true scale falls between levels, so each candidate
    # re-picks its template at the refined scale and the best match wins
    cands = sorted(
        (
            (-value, abs(k), k, peak, tid)
            for k, ln in levels.items()
            for value, peak, tid in ln["peaks"]
        ),
    )[:DETECT_CANDIDATES]
    winner = None
    tried = []
    for negv, _, k, (pi, pj), tid in cands:
        ln = levels[k]
        fused, tl = ln["fused"], ln["tl"]
        ry, rx = ln["ratio"]
        dy = dx = 0.0
        if 0 < pi < fused.shape[0] - 1:
            dy = _parabola(fused[pi - 1, pj], fused[pi, pj], fused[pi + 1, pj])
        if 0 < pj < fused.shape[1] - 1:
            dx = _parabola(fused[pi, pj - 1], fused[pi, pj], fused[pi, pj + 1])
        q0 = np.array([(pj + dx + tl / 2.0) * rx, (pi + dy + tl / 2.0) * ry])
        box0 = tsize * factor**k
        if any(
            abs(k - k2) <= 1 and np.hypot(*(q0 - q2)) < 0.5 * box0
            for k2, q2 in tried
        ):
            continue
        tried.append((k, q0))

        # the sweep half-width exceeds half the level spacing, and the
        # sweep / relocalize / sweep chain recenters, so the level scale
        # is seed enough; it also keeps q exactly shift-equivariant,
        # which cross-level map reads would break
        s, _ = _fine_scale(gray, q0, tpls[tid], factor**k)
        q = _relocalize(gray, q0, tpls[tid], s)
        fit = _local_score(gray, q, tpls[tid], s)
        if fit < RESELECT_SKIP:
            rescores = [_local_score(gray, q, t, s) for t in tpls]
            tid = int(np.argmax(rescores))
            s, _ = _fine_scale(gray, q, tpls[tid], s)
            q = _relocalize(gray, q, tpls[tid], s)
        s, fit = _fine_scale(gray, q, tpls[tid], s)
        if winner is None or fit > winner[0]:
            winner = (fit, q, s, k, tid)
        if fit >= EARLY_ACCEPT:
            break

    fit, q, s, k_best, tid = winner
    # similar reference views can tie at the current scale while their
    # optima differ, so rank the top few templates by their own swept
    # optimum rather than by the incumbent-scale score
    rescores = [_local_score(gray, q, t, s) for t in tpls]
    order = np.argsort(rescores)[::-1][:TEMPLATE_RECHECK]
    fit, s, tid = max(
        (*_fine_scale(gray, q, tpls[t], s)[::-1], int(t)) for t in order
    )
    q = _relocalize(gray, q, tpls[tid], s)
    s, fit = _fine_scale(gray, q, tpls[tid], s)
    heat = ScoreMap(levels[k_best]["fused"], scale_id=k_best)
    return make_detection(
        q, s, coarse_best, K, ref_size=tsize, heatmap=heat,
        level=k_best, template_id=tid,
    )


def detection_to_translation(det: Detection, K: Intrinsics) -> np.ndarray:
    """Initial object-center translation: depth along the ray through q."""
    return det.depth * unit(K.ray(det.q))


@dataclass(frozen=True)
class QueryCrop:
    """A square, resampled view of the query around the detected object."""

    image: np.ndarray
    mask: np.ndarray
    center: np.ndarray
    side_px: float
    out_size: int

    def intrinsics(self, K: Intrinsics) -> Intrinsics:
        """Camera of the crop: K left-multiplied by the crop affinity."""
        g = self.side_px / self.out_size
        half = self.out_size / 2.0
        return Intrinsics(
            K.fx / g,
            K.fy / g,
            (K.cx - self.center[0]) / g + half,
            (K.cy - self.center[1]) / g + half,
        )


def crop_query(query_image, det: Detection, out_size: int = 128, margin: float = 1.0) -> QueryCrop:
    """Crop a box of side box_px*margin around q, resampled to out_size.

    Out-of-frame samples take the border mean and are cleared in the mask.
    """
    gray = to_gray(query_image)
    side = det.box_px * margin
    image, inside = _sample_patch(gray, det.q, side, out_size)
    return QueryCrop(image, inside, det.q.copy(), float(side), int(out_size))


def crop_for_pose(
    query_image, K: Intrinsics, pose: RigidPose, out_size: int = 128, margin: float = 1.0
) -> QueryCrop:
    """Crop around the projected center of a normalized-frame pose.

    The box size is what an object of diameter 2 at ||pose.t|| spans, so
    successive refinement iterations can re-crop around their own estimate.
    """
    gray = to_gray(query_image)
    q = project(K, pose, np.zeros(3))
    dist = float(np.linalg.norm(pose.t))
    box = 2.0 * virtual_focal(K, q) / dist
    side = box * margin
    image, inside = _sample_patch(gray, q, side, out_size)
    return QueryCrop(image, inside, q, float(side), int(out_size))
