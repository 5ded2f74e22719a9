"""Seeded augmentation: flips, quarter-turn rotation, resized crop (Catmull-Rom
bicubic), Gaussian blur, greyscale for 3-channel views, and pixel erasing.

No colour jitter: random band selection already perturbs the spectral content.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
from scipy import ndimage

from .viewsampler import keyed_rng

MIN_CROP = 8


@dataclass(frozen=True)
class AugmentConfig:
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    crop_scale_min: float = 0.5
    crop_scale_max: float = 1.0
    crop_ratio_min: float = 3 / 4
    crop_ratio_max: float = 4 / 3
    blur_p: float = 0.5
    blur_sigma_min: float = 0.1
    blur_sigma_max: float = 2.0
    erase_p: float = 0.5
    erase_area_min: float = 0.02
    erase_area_max: float = 0.20
    erase_ratio_min: float = 0.3
    erase_ratio_max: float = 3.3
    greyscale_p: float = 0.2

    @classmethod
    def from_mapping(cls, values: dict) -> "AugmentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise KeyError(f"unknown augment keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in values.items()})


@dataclass(frozen=True)
class AugmentPlan:
    hflip: bool
    vflip: bool
    rot_quarter_turns: int
    crop: tuple[int, int, int, int]  # top, left, crop_h, crop_w
    out_size: int
    blur: float | None
    erase: tuple[int, int, int, int] | None  # top, left, h, w (fill 0)
    greyscale: bool
    seed: int

    @classmethod
    def identity(cls, size: int) -> "AugmentPlan":
        return cls(False, False, 0, (0, 0, size, size), size, None, None, False, 0)


def draw_plan(
    seed: int,
    in_h: int,
    in_w: int,
    channels: int,
    out_size: int,
    cfg: AugmentConfig = AugmentConfig(),
) -> AugmentPlan:
    if not (min(in_h, in_w) >= out_size >= MIN_CROP):
        raise ValueError(f"need min(in_h, in_w) >= out_size >= {MIN_CROP}, got {in_h}x{in_w} -> {out_size}")
    rng = keyed_rng(seed)
    hflip = bool(rng.random() < cfg.hflip_p)
    vflip = bool(rng.random() < cfg.vflip_p)
    rot = int(rng.integers(4))
    if rot % 2:
        in_h, in_w = in_w, in_h  # crop is drawn on the rotated frame

    crop = (0, 0, in_h, in_w)
    area = in_h * in_w
    log_r = (math.log(cfg.crop_ratio_min), math.log(cfg.crop_ratio_max))
    for _ in range(10):
        target = area * rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max)
        ratio = math.exp(rng.uniform(*log_r))
        ch = int(round(math.sqrt(target / ratio)))
        cw = int(round(math.sqrt(target * ratio)))
        if MIN_CROP <= ch <= in_h and MIN_CROP <= cw <= in_w:
            top = int(rng.integers(0, in_h - ch + 1))
            left = int(rng.integers(0, in_w - cw + 1))
            crop = (top, left, ch, cw)
            break

    blur = None
    if rng.random() < cfg.blur_p:
        blur = float(rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max))

    erase = None
    if rng.random() < cfg.erase_p:
        out_area = out_size * out_size
        log_e = (math.log(cfg.erase_ratio_min), math.log(cfg.erase_ratio_max))
        for _ in range(10):
            target = out_area * rng.uniform(cfg.erase_area_min, cfg.erase_area_max)
            ratio = math.exp(rng.uniform(*log_e))
            eh = int(round(math.sqrt(target * ratio)))
            ew = int(round(math.sqrt(target / ratio)))
            frac = eh * ew / out_area
            if 0 < eh < out_size and 0 < ew < out_size and cfg.erase_area_min <= frac <= cfg.erase_area_max:
                top = int(rng.integers(0, out_size - eh + 1))
                left = int(rng.integers(0, out_size - ew + 1))
                erase = (top, left, eh, ew)
                break

    greyscale = channels == 3 and bool(rng.random() < cfg.greyscale_p)
    return AugmentPlan(hflip, vflip, rot, crop, out_size, blur, erase, greyscale, int(seed))


def cubic_weights(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution weights for taps at offsets -1, 0, 1, 2 from floor(x)."""
    t = t[..., None]
    d = np.abs(np.array([-1.0, 0.0, 1.0, 2.0]) - t)
    w = np.where(
        d <= 1,
        (a + 2) * d**3 - (a + 3) * d**2 + 1,
        np.where(d < 2, a * d**3 - 5 * a * d**2 + 8 * a * d - 4 * a, 0.0),
    )
    return w


def resize_matrix(n_in: int, n_out: int, start: int = 0, length: int | None = None) -> np.ndarray:
    """(n_out, n_in) bicubic resampling matrix for the window ``[start, start+length)``.

    Pixel centres are aligned; taps falling outside the window are clamped to its edge.
    """
    length = n_in if length is None else length
    x = start + (np.arange(n_out) + 0.5) * (length / n_out) - 0.5
    base = np.floor(x).astype(int)
    w = cubic_weights(x - base)
    m = np.zeros((n_out, n_in))
    for k, off in enumerate((-1, 0, 1, 2)):
        idx = np.clip(base + off, start, start + length - 1)
        np.add.at(m, (np.arange(n_out), idx), w[:, k])
    return m


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3 * sigma)))
    k = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur over the last two axes with edge-replicating borders."""
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(img, k, axis=-1, mode="nearest")
    return ndimage.correlate1d(out, k, axis=-2, mode="nearest")


def apply(view: np.ndarray, plan: AugmentPlan) -> np.ndarray:
    """Apply ``plan`` to a ``(C, H, W)`` view; returns ``(C, out, out)`` float32."""
    if view.ndim != 3:
        raise ValueError(f"expected a (C, H, W) view, got shape {view.shape}")
    x = view.astype(np.float64)
    if plan.hflip:
        x = x[:, :, ::-1]
    if plan.vflip:
        x = x[:, ::-1, :]
    if plan.rot_quarter_turns:
        x = np.rot90(x, plan.rot_quarter_turns, axes=(1, 2))
    top, left, ch, cw = plan.crop
    _, h, w = x.shape
    if top < 0 or left < 0 or top + ch > h or left + cw > w:
        raise ValueError(f"crop {plan.crop} does not fit a {h}x{w} view")
    ry = resize_matrix(h, plan.out_size, top, ch)
    rx = resize_matrix(w, plan.out_size, left, cw)
    x = np.einsum("oh,chw,pw->cop", ry, x, rx)
    if plan.blur is not None:
        x = gaussian_blur(x, plan.blur)
    if plan.greyscale:
        if x.shape[0] != 3:
            raise ValueError("greyscale applies to 3-channel views only")
        x = np.repeat(x.mean(axis=0, keepdims=True), 3, axis=0)
    if plan.erase is not None:
        et, el, eh, ew = plan.erase
        x[:, et : et + eh, el : el + ew] = 0.0
    return x.astype(np.float32)
