"""Deterministic grayscale rendering of the cartpole plus camera-style preprocessing.

The renderer is a tiny orthographic rasterizer: the cart is a filled
axis-aligned rectangle and the pole a thick anti-aliased segment from the
cart pivot. Anti-aliasing matters: it makes pixel intensities vary smoothly
with sub-pixel motion, which is what lets velocity information reach a
linear observer. The preprocessing chain (Gaussian blur then Otsu
binarization) mirrors what a low-cost camera pipeline would apply.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cartpole import CartpoleState


class DegenerateImageError(ValueError):
    """Raised when a frame has a single gray level and cannot be thresholded."""


@dataclass(frozen=True)
class CameraConfig:
    width_px: int = 64
    height_px: int = 32
    meters_per_px: float = 0.03
    origin_px: tuple[int, int] = (32, 16)  # (col, row) of the world origin
    cart_size: tuple[float, float] = (0.16, 0.08)  # (width, height) in meters
    pole_width: float = 0.04
    background_level: float = 0.0
    foreground_level: float = 0.9

    def __post_init__(self):
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValueError("image dimensions must be positive")
        if self.meters_per_px <= 0.0:
            raise ValueError("meters_per_px must be positive")
        for level in (self.background_level, self.foreground_level):
            if not 0.0 <= level <= 1.0:
                raise ValueError("gray levels must lie in [0, 1]")

    @property
    def n_pixels(self) -> int:
        return self.width_px * self.height_px


@dataclass(frozen=True)
class PixelObservation:
    """Flattened row-major grayscale frame with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float).reshape(-1)
        if px.size == 0:
            raise ValueError("empty observation")
        if px.min() < -1e-12 or px.max() > 1.0 + 1e-12:
            raise ValueError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    def image(self, cfg: CameraConfig) -> np.ndarray:
        return self.pixels.reshape(cfg.height_px, cfg.width_px)


def _pixel_grid(cfg: CameraConfig) -> tuple[np.ndarray, np.ndarray]:
    """World coordinates of pixel centers: xs over columns, ys over rows."""
    oc, orow = cfg.origin_px
    xs = (np.arange(cfg.width_px) - oc) * cfg.meters_per_px
    ys = (orow - np.arange(cfg.height_px)) * cfg.meters_per_px
    return xs, ys


def _interval_coverage(centers: np.ndarray, lo: float, hi: float, px: float) -> np.ndarray:
    """Fraction of each pixel-wide interval around `centers` inside [lo, hi]."""
    left = np.maximum(centers - 0.5 * px, lo)
    right = np.minimum(centers + 0.5 * px, hi)
    return np.clip((right - left) / px, 0.0, 1.0)


def cart_coverage(state: CartpoleState, cfg: CameraConfig) -> np.ndarray:
    """Per-pixel coverage of the cart rectangle (exact, separable)."""
    xs, ys = _pixel_grid(cfg)
    half_w = 0.5 * cfg.cart_size[0]
    half_h = 0.5 * cfg.cart_size[1]
    cov_x = _interval_coverage(xs, state.p - half_w, state.p + half_w, cfg.meters_per_px)
    cov_y = _interval_coverage(ys, -half_h, half_h, cfg.meters_per_px)
    return np.outer(cov_y, cov_x)


def pole_coverage(state: CartpoleState, cfg: CameraConfig, pole_length: float) -> np.ndarray:
    """Per-pixel coverage of the pole segment with a one-pixel soft edge."""
    xs, ys = _pixel_grid(cfg)
    ax, ay = state.p, 0.0
    bx = state.p + pole_length * math.sin(state.theta)
    by = pole_length * math.cos(state.theta)
    gx, gy = np.meshgrid(xs, ys)
    dx, dy = bx - ax, by - ay
    seg_sq = dx * dx + dy * dy
    if seg_sq == 0.0:
        dist = np.hypot(gx - ax, gy - ay)
    else:
        tt = np.clip(((gx - ax) * dx + (gy - ay) * dy) / seg_sq, 0.0, 1.0)
        dist = np.hypot(gx - (ax + tt * dx), gy - (ay + tt * dy))
    half_w = 0.5 * cfg.pole_width
    return np.clip(0.5 + (half_w - dist) / cfg.meters_per_px, 0.0, 1.0)


def render(state: CartpoleState, cfg: CameraConfig, pole_length: float = 0.352) -> PixelObservation:
    """Rasterize the scene; geometry outside the frame is clipped silently."""
    cov = np.maximum(cart_coverage(state, cfg), pole_coverage(state, cfg, pole_length))
    img = cfg.background_level + (cfg.foreground_level - cfg.background_level) * cov
    return PixelObservation(img.reshape(-1))


def gaussian_blur(obs: PixelObservation, sigma: float, cfg: CameraConfig) -> PixelObservation:
    """Separable Gaussian blur with replicate edges; sigma = 0 is the identity."""
    if sigma < 0.0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0.0:
        return PixelObservation(obs.pixels.copy())
    radius = math.ceil(3.0 * sigma)
    offs = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (offs / sigma) ** 2)
    kernel /= kernel.sum()
    img = obs.image(cfg)
    img = _convolve_axis(img, kernel, axis=1)
    img = _convolve_axis(img, kernel, axis=0)
    return PixelObservation(np.clip(img, 0.0, 1.0).reshape(-1))


def _convolve_axis(img: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = (kernel.size - 1) // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (radius, radius)
    padded = np.pad(img, pad, mode="edge")
    out = np.zeros_like(img)
    for i, w in enumerate(kernel):
        sl = [slice(None), slice(None)]
        sl[axis] = slice(i, i + img.shape[axis])
        out += w * padded[tuple(sl)]
    return out


def otsu_threshold(obs: PixelObservation) -> PixelObservation:
    """Binarize with the 256-bin threshold maximizing between-class variance.

    Ties are broken toward the lowest threshold. A frame whose histogram
    collapses to a single bin is unusable and raises DegenerateImageError.
    """
    bins = np.minimum((obs.pixels * 256.0).astype(np.int64), 255)
    hist = np.bincount(bins, minlength=256).astype(float)
    if np.count_nonzero(hist) < 2:
        raise DegenerateImageError("image has a single gray level")
    total = hist.sum()
    levels = np.arange(256, dtype=float)
    w0 = np.cumsum(hist)
    mu0_sum = np.cumsum(hist * levels)
    mu_total = mu0_sum[-1]
    w1 = total - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = mu0_sum / w0
        mu1 = (mu_total - mu0_sum) / w1
        var_between = w0 * w1 * (mu0 - mu1) ** 2
    var_between[~np.isfinite(var_between)] = 0.0
    t = int(np.argmax(var_between))  # argmax returns the first (lowest) maximizer
    return PixelObservation((bins > t).astype(float))


def observe(
    state: CartpoleState,
    cfg: CameraConfig,
    pipeline: str = "raw",
    sigma: float = 0.5,
    pole_length: float = 0.352,
) -> PixelObservation:
    """Render and optionally push the frame through the blur+Otsu chain."""
    obs = render(state, cfg, pole_length)
    if pipeline == "raw":
        return obs
    if pipeline == "blur_otsu":
        return otsu_threshold(gaussian_blur(obs, sigma, cfg))
    raise ValueError(f"unknown pipeline {pipeline!r}")


def write_pgm(path, image: np.ndarray) -> None:
    """Write a 2-D array with values in [0, 1] as binary PGM (P5, maxval 255)."""
    img = np.asarray(image, dtype=float)
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM written by write_pgm; returns values in [0, 1]."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise ValueError("not a binary PGM file")
        w, h = (int(v) for v in fh.readline().split())
        maxval = int(fh.readline())
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8)
    return data.reshape(h, w).astype(float) / maxval
