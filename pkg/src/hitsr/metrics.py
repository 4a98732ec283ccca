"""Image metrics and the pinned bicubic resampler.

Everything here is pure numpy on float arrays in [0, 1]. The bicubic
kernel, grid alignment, and the Y-channel matrix are pinned because the
training pipeline (LR derivation, global residual) and the acceptance
metrics must agree bit for bit with each other.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigurationError, DimensionError

# ----------------------------------------------------------------------
# bicubic resize
# ----------------------------------------------------------------------

_CUBIC_A = -0.5  # Catmull-Rom


def _cubic_kernel(t: np.ndarray) -> np.ndarray:
    a = _CUBIC_A
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def _resize_axis(x: np.ndarray, out_len: int, scale: float) -> np.ndarray:
    """Resample axis 0 of x. Center-aligned: out i samples in (i+0.5)/s-0.5."""
    in_len = x.shape[0]
    pos = (np.arange(out_len, dtype=np.float64) + 0.5) / scale - 0.5
    base = np.floor(pos).astype(np.int64)
    offsets = np.arange(-1, 3)[:, None]
    idx = np.clip(base[None, :] + offsets, 0, in_len - 1)  # edge clamp
    wts = _cubic_kernel(pos[None, :] - (base[None, :] + offsets))
    gathered = x[idx]  # (4, out_len, ...)
    w = wts.reshape(wts.shape + (1,) * (x.ndim - 1))
    return (gathered * w).sum(axis=0)


def bicubic_resize(img: np.ndarray, scale: float, out_hw: tuple | None = None) -> np.ndarray:
    """Separable bicubic resize of an (H, W) or (H, W, C) array.

    Catmull-Rom kernel (a = -0.5), clamped edges, no antialiasing on
    downscale. Output extents default to round(H*scale), round(W*scale).
    Computation runs in float64; the result is cast back to the input
    dtype so repeated calls are reproducible byte for byte.
    """
    if img.ndim not in (2, 3):
        raise DimensionError(f"bicubic_resize expects (H, W[, C]), got {img.shape}")
    H, W = img.shape[:2]
    if out_hw is None:
        out_hw = (int(round(H * scale)), int(round(W * scale)))
    oh, ow = out_hw
    if oh < 1 or ow < 1:
        raise ConfigurationError(f"target size {out_hw} must be positive")
    x = img.astype(np.float64, copy=False)
    x = _resize_axis(x, oh, oh / H)
    x = np.moveaxis(_resize_axis(np.moveaxis(x, 1, 0), ow, ow / W), 0, 1)
    return x.astype(img.dtype, copy=False)


def resize_chw(arr: np.ndarray, scale: float) -> np.ndarray:
    """bicubic_resize for a batched (B, C, H, W) array."""
    if arr.ndim != 4:
        raise DimensionError(f"resize_chw expects (B, C, H, W), got {arr.shape}")
    hwc = np.moveaxis(arr, 1, -1)
    out = np.stack([bicubic_resize(im, scale) for im in hwc])
    return np.moveaxis(out, -1, 1)


# ----------------------------------------------------------------------
# color and metrics
# ----------------------------------------------------------------------

def luma(img: np.ndarray) -> np.ndarray:
    """Luma of an (H, W, 3) RGB image, BT.601 studio swing on clamped
    [0, 1] input: Y = (65.481 R + 128.553 G + 24.966 B + 16) / 255."""
    if img.ndim != 3 or img.shape[-1] != 3:
        raise DimensionError(f"expected (H, W, 3), got {img.shape}")
    # C order so downstream windowed sums reduce in the same order for
    # images equal in value but laid out differently in memory
    x = np.clip(img.astype(np.float64, order="C"), 0.0, 1.0)
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    return (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0


def rgb_to_ycbcr_y(img):
    """Y channel of a batched image: Tensor (B, 3, H, W) -> (B, 1, H, W).

    Values are clamped to [0, 1] first, so bicubic overshoot cannot push
    the luma outside the studio-swing range [16/255, 235/255]. Evaluation
    only; the result carries no gradient.
    """
    from .tensor import Tensor

    data = img.data if isinstance(img, Tensor) else np.asarray(img)
    if data.ndim != 4 or data.shape[1] != 3:
        raise DimensionError(f"expected (B, 3, H, W), got {data.shape}")
    x = np.clip(data.astype(np.float64), 0.0, 1.0)
    y = (65.481 * x[:, 0] + 128.553 * x[:, 1] + 24.966 * x[:, 2] + 16.0) / 255.0
    return Tensor(y[:, None].astype(data.dtype))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE); +inf when the arrays match exactly."""
    if a.shape != b.shape:
        raise DimensionError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation with a 1d window on both axes."""
    k = win.size
    v = np.lib.stride_tricks.sliding_window_view(x, k, axis=0)
    x = v @ win
    v = np.lib.stride_tricks.sliding_window_view(x, k, axis=1)
    return v @ win


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Single-channel SSIM, Gaussian window 11x11 sigma 1.5, K1=0.01,
    K2=0.03, valid mode (no padded borders).

    On images smaller than the window, the window shrinks to the largest
    odd size that fits, so tiny oracle fixtures stay well defined.
    """
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionError(f"ssim wants matching 2d arrays, got {a.shape} vs {b.shape}")
    size = min(11, a.shape[0], a.shape[1])
    if size % 2 == 0:
        size -= 1
    if size < 1:
        raise DimensionError(f"image {a.shape} too small for ssim")
    win = _gaussian_window(size, 1.5)
    af = a.astype(np.float64)
    bf = b.astype(np.float64)
    mu1 = _filter_valid(af, win)
    mu2 = _filter_valid(bf, win)
    s11 = _filter_valid(af * af, win) - mu1 * mu1
    s22 = _filter_valid(bf * bf, win) - mu2 * mu2
    s12 = _filter_valid(af * bf, win) - mu1 * mu2
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float((num / den).mean())


def y_psnr(sr_rgb: np.ndarray, hr_rgb: np.ndarray) -> float:
    return psnr(luma(sr_rgb), luma(hr_rgb))


def y_ssim(sr_rgb: np.ndarray, hr_rgb: np.ndarray) -> float:
    return ssim(luma(sr_rgb), luma(hr_rgb))


# ----------------------------------------------------------------------
# robustness warps
# ----------------------------------------------------------------------

def warp_scale(img: np.ndarray, factor: float) -> np.ndarray:
    """Rescale content on a fixed canvas. Shrunk content (factor < 1) sits
    centered with edge-clamped borders; grown content (factor > 1) is
    center-cropped back to the original extent. factor 1.0 is an exact
    identity."""
    if factor == 1.0:
        return img.copy()
    H, W = img.shape[:2]
    small = bicubic_resize(img, factor)
    h, w = small.shape[:2]
    if factor < 1.0:
        top, left = (H - h) // 2, (W - w) // 2
        pads = [(top, H - h - top), (left, W - w - left)] + [(0, 0)] * (img.ndim - 2)
        return np.pad(small, pads, mode="edge")
    top, left = (h - H) // 2, (w - W) // 2
    return np.ascontiguousarray(small[top:top + H, left:left + W])


def warp_rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image center with bicubic sampling; pixels whose
    source falls outside the image are black. degrees 0.0 is an exact
    identity (the cubic kernel interpolates at integer offsets)."""
    if degrees == 0.0:
        return img.copy()
    H, W = img.shape[:2]
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    if degrees % 90 == 0:
        # exact quarter turns: float cos/sin of 90deg is only ~1e-17,
        # which would smear integer sample coordinates
        cos, sin = {0: (1.0, 0.0), 90: (0.0, 1.0),
                    180: (-1.0, 0.0), 270: (0.0, -1.0)}[degrees % 360]
    else:
        th = math.radians(degrees)
        cos, sin = math.cos(th), math.sin(th)
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64),
                         np.arange(W, dtype=np.float64), indexing="ij")
    # inverse map: source coords for each output pixel
    ys = cos * (yy - cy) + sin * (xx - cx) + cy
    xs = -sin * (yy - cy) + cos * (xx - cx) + cx
    valid = (ys >= 0) & (ys <= H - 1) & (xs >= 0) & (xs <= W - 1)
    yb = np.floor(ys).astype(np.int64)
    xb = np.floor(xs).astype(np.int64)
    fy = ys - yb
    fx = xs - xb
    src = img.astype(np.float64)
    chan = (...,) if img.ndim == 2 else (..., None)
    out = np.zeros(img.shape, dtype=np.float64)
    for dy in range(-1, 3):
        wy = _cubic_kernel(fy - dy)[chan]
        rows = np.clip(yb + dy, 0, H - 1)
        for dx in range(-1, 3):
            wx = _cubic_kernel(fx - dx)[chan]
            cols = np.clip(xb + dx, 0, W - 1)
            out += src[rows, cols] * wy * wx
    out = np.where(valid[chan], out, 0.0)
    return out.astype(img.dtype, copy=False)
