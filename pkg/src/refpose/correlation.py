"""Image resampling and normalized cross-correlation scoring.

All images are float64 grayscale in [0, 1], shape (H, W). Sampling uses the
package pixel convention: pixel (i, j) has continuous coordinate
(x, y) = (j + 0.5, i + 0.5). NCC is the scoring backend for detection,
viewpoint selection, and the feature volume; any per-pixel feature grid can
be substituted via the `features` arguments downstream.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, signal

from .errors import ImageTooSmall
from .geometry import Homography

MIN_LEVEL_SIZE = 8
# windows with per-pixel variance below this score 0 (flat matches nothing)
VARIANCE_FLOOR = 1e-12


def to_gray(image) -> np.ndarray:
    """Convert an array image to float64 grayscale in [0, 1].

    Accepts (H, W), (H, W, 1), (H, W, 3) or (H, W, 4); uint8 input is scaled
    by 255. Color uses luma weights 0.299/0.587/0.114.
    """
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    else:
        img = img.astype(np.float64)
    if img.ndim == 3:
        if img.shape[2] == 1:
            img = img[:, :, 0]
        else:
            img = (
                0.299 * img[:, :, 0] + 0.587 * img[:, :, 1] + 0.114 * img[:, :, 2]
            )
    return img


def intensity_features(image: np.ndarray) -> np.ndarray:
    """Default feature backend: the grayscale image itself."""
    return image


def bilinear_sample(image: np.ndarray, x, y, fill: float | None = None):
    """Sample at continuous coordinates; returns (values, inside_mask).

    Out-of-bounds samples take `fill` (border mean when None).
    """
    image = np.asarray(image, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    h, w = image.shape
    inside = (x >= 0.0) & (x <= w) & (y >= 0.0) & (y <= h)
    vals = ndimage.map_coordinates(
        image, [y.ravel() - 0.5, x.ravel() - 0.5], order=1, mode="nearest"
    ).reshape(x.shape)
    if fill is None:
        fill = border_mean(image)
    vals = np.where(inside, vals, fill)
    return vals, inside


def border_mean(image: np.ndarray) -> float:
    h, w = image.shape
    if h <= 2 or w <= 2:
        return float(image.mean())
    edge = np.concatenate(
        [image[0, :], image[-1, :], image[1:-1, 0], image[1:-1, -1]]
    )
    return float(edge.mean())


def resize(image: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with center-aligned grids; smoothing prefilter when shrinking.

    The prefilter is a centered 3-tap binomial per shrinking axis, so
    constants are preserved and nothing shifts by half a pixel.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    oh, ow = int(out_shape[0]), int(out_shape[1])
    if oh < 1 or ow < 1:
        raise ImageTooSmall(f"resize target {out_shape} is empty")
    if (oh, ow) == (h, w):
        return image.copy()
    kernel = np.array([0.25, 0.5, 0.25])
    if oh < h:
        image = ndimage.correlate1d(image, kernel, axis=0, mode="nearest")
    if ow < w:
        image = ndimage.correlate1d(image, kernel, axis=1, mode="nearest")
    yy = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    xx = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    gy, gx = np.meshgrid(yy, xx, indexing="ij")
    return ndimage.map_coordinates(image, [gy, gx], order=1, mode="nearest")


def warp_homography(
    image: np.ndarray, H: Homography, out_shape: tuple[int, int], fill: float | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Warp so that out(p) = image(H^-1 p) in continuous coordinates.

    Returns (warped, valid) where valid marks pixels whose source landed
    inside the image.
    """
    oh, ow = int(out_shape[0]), int(out_shape[1])
    gy, gx = np.meshgrid(np.arange(oh) + 0.5, np.arange(ow) + 0.5, indexing="ij")
    dst = np.stack([gx, gy], axis=-1)
    src = H.inverse().apply(dst.reshape(-1, 2)).reshape(oh, ow, 2)
    vals, inside = bilinear_sample(image, src[..., 0], src[..., 1], fill=fill)
    return vals, inside


def rotate_image(
    image: np.ndarray, angle: float, fill: float | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Rotate image content clockwise on screen by `angle` about the center.

    Equivalent to re-rendering with the camera rolled by rot_z(angle).
    Returns (rotated, valid); invalid pixels take the border mean (or fill).
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    cx, cy = w / 2.0, h / 2.0
    c, s = np.cos(angle), np.sin(angle)
    gy, gx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    dx, dy = gx - cx, gy - cy
    # inverse map: sample at R(-angle) (p - c) + c
    sx = c * dx + s * dy + cx
    sy = -s * dx + c * dy + cy
    vals, inside = bilinear_sample(image, sx, sy, fill=fill)
    return vals, inside


def rotation_bank(image: np.ndarray, angles) -> list[np.ndarray]:
    """Rotated copies of `image`, border-mean filled."""
    return [rotate_image(image, float(a))[0] for a in angles]


def default_angles(n: int = 5, lo: float = -np.pi / 2.0, hi: float = np.pi / 2.0) -> np.ndarray:
    """Evenly spaced in-plane angle bank over [lo, hi], endpoints included."""
    return np.linspace(lo, hi, n)


@dataclass
class Pyramid:
    """Downsampled copies of an image; levels[0] is the original."""

    levels: list
    factor: float

    def __len__(self):
        return len(self.levels)


def build_pyramid(image: np.ndarray, n_levels: int = 5, factor: float = np.sqrt(2.0)) -> Pyramid:
    """Multi-scale stack; level k has dimensions ceil(original / factor**k).

    Raises ImageTooSmall if any level would drop under 8 px on a side.
    """
    image = np.asarray(image, dtype=np.float64)
    if factor <= 1.0:
        raise ValueError("pyramid factor must exceed 1")
    h, w = image.shape
    levels = [image.copy()]
    for k in range(1, n_levels):
        lh = int(np.ceil(h / factor**k))
        lw = int(np.ceil(w / factor**k))
        if lh < MIN_LEVEL_SIZE or lw < MIN_LEVEL_SIZE:
            raise ImageTooSmall(
                f"pyramid level {k} would be {lh}x{lw}, below {MIN_LEVEL_SIZE} px"
            )
        # resample from the previous level so anti-aliasing accumulates
        levels.append(resize(levels[-1], (lh, lw)))
    return Pyramid(levels=levels, factor=factor)


def _masked_stats(a: np.ndarray, mask: np.ndarray):
    n = mask.sum()
    if n == 0:
        return 0, 0.0, 0.0
    vals = a[mask]
    mean = vals.mean()
    var = vals.var()
    return n, mean, var


def ncc(
    template: np.ndarray,
    window: np.ndarray,
    template_mask: np.ndarray | None = None,
    window_mask: np.ndarray | None = None,
) -> float:
    """Normalized cross-correlation of two equal-shape patches, in [-1, 1].

    Masks restrict the statistics to valid pixels (intersection). A flat
    template or window scores 0.0: a constant patch matches nothing.
    """
    template = np.asarray(template, dtype=np.float64)
    window = np.asarray(window, dtype=np.float64)
    if template.shape != window.shape:
        raise ValueError(f"shape mismatch {template.shape} vs {window.shape}")
    mask = np.ones(template.shape, dtype=bool)
    if template_mask is not None:
        mask &= template_mask
    if window_mask is not None:
        mask &= window_mask
    n, t_mean, t_var = _masked_stats(template, mask)
    if n < 2:
        return 0.0
    _, w_mean, w_var = _masked_stats(window, mask)
    if t_var < VARIANCE_FLOOR or w_var < VARIANCE_FLOOR:
        return 0.0
    cov = ((template - t_mean) * (window - w_mean))[mask].mean()
    score = cov / np.sqrt(t_var * w_var)
    return float(np.clip(score, -1.0, 1.0))


@dataclass
class ScoreMap:
    """Dense correlation scores plus the scale/angle slot they belong to.

    scale_id is a pyramid scale exponent and may be half-integer.
    """

    values: np.ndarray
    scale_id: float = 0
    angle_id: int = 0

    def argmax(self) -> tuple[int, int]:
        idx = int(np.argmax(self.values))
        return np.unravel_index(idx, self.values.shape)


def _window_sums(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-mode cross-correlation sum(kernel * window) at every placement."""
    return signal.fftconvolve(image, kernel[::-1, ::-1], mode="valid")


def correlate_all(
    template: np.ndarray,
    image: np.ndarray,
    template_mask: np.ndarray | None = None,
    scale_id: int = 0,
    angle_id: int = 0,
) -> ScoreMap:
    """NCC of `template` against every valid placement in `image`.

    Output shape is (H - h + 1, W - w + 1). Matches the per-window ncc()
    definition within 1e-6; windows with no variance score 0.
    """
    template = np.asarray(template, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    th, tw = template.shape
    ih, iw = image.shape
    if ih < th or iw < tw:
        raise ImageTooSmall(
            f"image {image.shape} smaller than template {template.shape}"
        )
    if template_mask is None:
        mask = np.ones(template.shape, dtype=np.float64)
        n = float(th * tw)
    else:
        mask = template_mask.astype(np.float64)
        n = float(mask.sum())
    if n < 2:
        return ScoreMap(np.zeros((ih - th + 1, iw - tw + 1)), scale_id, angle_id)

    t_mean = float((template * mask).sum() / n)
    t_centered = (template - t_mean) * mask
    t_var = float((t_centered**2).sum() / n)
    out_shape = (ih - th + 1, iw - tw + 1)
    if t_var < VARIANCE_FLOOR:
        return ScoreMap(np.zeros(out_shape), scale_id, angle_id)

    sum_w = _window_sums(image, mask)
    sum_w2 = _window_sums(image**2, mask)
    cross = _window_sums(image, t_centered)
    w_mean = sum_w / n
    w_var = np.maximum(sum_w2 / n - w_mean**2, 0.0)
    # sum(mask * (t - t_mean) * w) / n - 0 (t_centered already has zero mask-mean)
    cov = cross / n
    denom = np.sqrt(t_var * w_var)
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.where(w_var < VARIANCE_FLOOR, 0.0, cov / np.where(denom > 0, denom, 1.0))
    return ScoreMap(np.clip(values, -1.0, 1.0), scale_id, angle_id)


def _sliding_sums(image: np.ndarray, th: int, tw: int) -> np.ndarray:
    """Sum over every th x tw window, via an integral image."""
    ih, iw = image.shape
    ii = np.zeros((ih + 1, iw + 1))
    np.cumsum(image, axis=0, out=ii[1:, 1:])
    np.cumsum(ii[1:, 1:], axis=1, out=ii[1:, 1:])
    return ii[th:, tw:] - ii[:-th, tw:] - ii[th:, :-tw] + ii[:-th, :-tw]


def correlate_bank(templates, image: np.ndarray) -> np.ndarray:
    """Unmasked NCC maps for several same-shape templates on one image.

    Equivalent to stacking correlate_all(t, image) values, but the window
    statistics and the image FFT are shared across the bank.
    """
    from scipy import fft as sfft

    tpls = np.stack([np.asarray(t, dtype=np.float64) for t in templates])
    image = np.asarray(image, dtype=np.float64)
    _, th, tw = tpls.shape
    ih, iw = image.shape
    if ih < th or iw < tw:
        raise ImageTooSmall(
            f"image {image.shape} smaller than template {(th, tw)}"
        )
    n = float(th * tw)
    w_mean = _sliding_sums(image, th, tw) / n
    w_var = np.maximum(_sliding_sums(image**2, th, tw) / n - w_mean**2, 0.0)
    flat = w_var < VARIANCE_FLOOR
    denom_w = np.sqrt(np.where(flat, 1.0, w_var))

    fshape = (sfft.next_fast_len(ih + th - 1), sfft.next_fast_len(iw + tw - 1))
    f_img = sfft.rfft2(image, fshape)
    out = np.empty((len(tpls), ih - th + 1, iw - tw + 1))
    for i, t in enumerate(tpls):
        t_centered = t - t.mean()
        t_var = float((t_centered**2).mean())
        if t_var < VARIANCE_FLOOR:
            out[i] = 0.0
            continue
        f_t = sfft.rfft2(t_centered[::-1, ::-1], fshape)
        full = sfft.irfft2(f_img * f_t, fshape)
        cov = full[th - 1 : ih, tw - 1 : iw] / n
        vals = np.where(flat, 0.0, cov / (np.sqrt(t_var) * denom_w))
        out[i] = np.clip(vals, -1.0, 1.0)
    return out
