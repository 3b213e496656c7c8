"""Image augmentations and seeded, probability-gated pipelines.

Images are :class:`ImageBuffer` objects wrapping an ``(H, W, C)`` float64
array in [0, 1]. Every op is a pure function of its inputs plus an explicit
``numpy.random.Generator``; pipelines derive one generator per
``(seed, image_index, epoch, view)`` so results never depend on the order in
which images are processed.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from gslab.errors import DimensionError, PipelineError, StateError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class ImageBuffer:
    pixels: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3) or min(px.shape[:2]) < 1:
            raise DimensionError(f"image must be HxWx1 or HxWx3, got {px.shape}")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def _new(self, pixels) -> "ImageBuffer":
        return ImageBuffer(pixels, self.normalized)


@dataclass(frozen=True)
class Geometry:
    """Image sizes the pipelines work at.

    ``crop_for_token`` maps a crop token's numeric suffix (a full-scale side
    relative to a 256 px resize) onto this geometry.
    """

    resize_side: int = 40
    crop_side: int = 32
    final_side: int = 32
    morph_kernel: int = 3
    blur_limit: tuple = (3, 7)
    reference_resize: int = 256

    def crop_for_token(self, suffix: int) -> int:
        return max(1, round(suffix * self.resize_side / self.reference_resize))


FULL_GEOMETRY = Geometry(256, 224, 96, morph_kernel=7)
DESK_GEOMETRY = Geometry()


# -- sampling helpers -------------------------------------------------------

def _bilinear(px: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``px`` at float coordinates with replicate-border clamping."""
    h, w = px.shape[:2]
    ys = np.clip(ys, 0.0, h - 1)
    xs = np.clip(xs, 0.0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    top = px[y0, x0] * (1 - fx) + px[y0, x1] * fx
    bottom = px[y1, x0] * (1 - fx) + px[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def _axis_coords(n_in: int, n_out: int) -> np.ndarray:
    if n_out == 1:
        return np.zeros(1)
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


# -- spatial ops ------------------------------------------------------------

def resize(img: ImageBuffer, height: int, width: Optional[int] = None) -> ImageBuffer:
    """Corner-aligned bilinear resize (output corners hit input corners)."""
    width = height if width is None else width
    if height < 1 or width < 1:
        raise ValueError("resize target must be >= 1")
    if (height, width) == (img.height, img.width):
        return img._new(img.pixels.copy())
    ys = _axis_coords(img.height, height)
    xs = _axis_coords(img.width, width)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = _bilinear(img.pixels, yy, xx)
    return img._new(out if img.normalized else np.clip(out, 0.0, 1.0))


def crop(img: ImageBuffer, top: int, left: int, height: int, width: int) -> ImageBuffer:
    if top < 0 or left < 0 or top + height > img.height or left + width > img.width:
        raise ValueError(f"crop window ({top},{left},{height},{width}) outside {img.height}x{img.width}")
    return img._new(img.pixels[top:top + height, left:left + width].copy())


def random_crop(img: ImageBuffer, side: int, rng: np.random.Generator) -> ImageBuffer:
    if side > min(img.height, img.width) or side < 1:
        raise ValueError(f"crop side {side} does not fit {img.height}x{img.width}")
    top = int(rng.integers(0, img.height - side + 1))
    left = int(rng.integers(0, img.width - side + 1))
    return crop(img, top, left, side, side)


def center_crop(img: ImageBuffer, side: int) -> ImageBuffer:
    if side > min(img.height, img.width) or side < 1:
        raise ValueError(f"crop side {side} does not fit {img.height}x{img.width}")
    return crop(img, (img.height - side) // 2, (img.width - side) // 2, side, side)


def simclr_crop_side(resize_side: int, min_area_fraction: float) -> int:
    """Side of the square crop covering ``min_area_fraction`` of the image."""
    if not 0 < min_area_fraction <= 1:
        raise ValueError("area fraction must be in (0, 1]")
    return round(resize_side * math.sqrt(min_area_fraction))


def hflip(img: ImageBuffer) -> ImageBuffer:
    return img._new(img.pixels[:, ::-1].copy())


def morphology(img: ImageBuffer, kind: str, kernel=(7, 7)) -> ImageBuffer:
    """Grey-level erosion (window minimum) or dilation (window maximum).

    Rectangular ``(w, h)`` structuring element, replicate border.
    """
    kw, kh = kernel
    if kw < 1 or kh < 1 or kw % 2 == 0 or kh % 2 == 0:
        raise ValueError(f"morphology kernel must be odd and >= 1, got {kernel}")
    reduce = {"erosion": np.minimum, "dilation": np.maximum}.get(kind)
    if reduce is None:
        raise ValueError(f"unknown morphology kind {kind!r}")
    ry, rx = kh // 2, kw // 2
    px = np.pad(img.pixels, ((ry, ry), (rx, rx), (0, 0)), mode="edge")
    h, w = img.height, img.width
    # separable: a rectangular min/max filter is a row pass then a column pass
    rows = px[:, 0:w]
    for j in range(1, kw):
        rows = reduce(rows, px[:, j:j + w])
    out = rows[0:h]
    for i in range(1, kh):
        out = reduce(out, rows[i:i + h])
    return img._new(out.copy())


def erosion(img: ImageBuffer, kernel=(7, 7)) -> ImageBuffer:
    return morphology(img, "erosion", kernel)


def dilation(img: ImageBuffer, kernel=(7, 7)) -> ImageBuffer:
    return morphology(img, "dilation", kernel)


def affine_transform(img: ImageBuffer, shift_x: float, shift_y: float, scale: float, angle_deg: float) -> ImageBuffer:
    """Rotate by ``angle_deg`` and scale about the image centre, then shift.

    Output pixel ``q`` samples the input at ``A^-1 (q - c - t) + c``.
    """
    h, w = img.height, img.width
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(angle_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    dx = xx - cx - shift_x
    dy = yy - cy - shift_y
    # inverse of (rotation . scale)
    src_x = (cos * dx + sin * dy) / scale + cx
    src_y = (-sin * dx + cos * dy) / scale + cy
    out = _bilinear(img.pixels, src_y, src_x)
    return img._new(out if img.normalized else np.clip(out, 0.0, 1.0))


def affine(img: ImageBuffer, shift_limit: float, scale_limit: float, rotate_limit: float,
           rng: np.random.Generator) -> ImageBuffer:
    if min(shift_limit, scale_limit, rotate_limit) < 0:
        raise ValueError("affine limits must be non-negative")
    sx = rng.uniform(-shift_limit, shift_limit) * img.width
    sy = rng.uniform(-shift_limit, shift_limit) * img.height
    scale = rng.uniform(1.0 - scale_limit, 1.0 + scale_limit)
    angle = rng.uniform(-rotate_limit, rotate_limit)
    if sx == 0 and sy == 0 and scale == 1 and angle == 0:
        return img._new(img.pixels.copy())
    return affine_transform(img, sx, sy, scale, angle)


# -- pixel ops --------------------------------------------------------------

def invert(img: ImageBuffer) -> ImageBuffer:
    return img._new(1.0 - img.pixels)


def luma(pixels: np.ndarray) -> np.ndarray:
    """Per-pixel BT.601 luma, shape (H, W, 1)."""
    if pixels.shape[2] == 1:
        return pixels.copy()
    return (pixels @ LUMA)[:, :, None]


def gray(img: ImageBuffer) -> ImageBuffer:
    return img._new(np.repeat(luma(img.pixels), img.channels, axis=2))


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    v = maxc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(int) % 6
    choices = [
        np.stack(c, axis=-1)
        for c in ((v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q))
    ]
    out = np.zeros_like(hsv)
    for k, c in enumerate(choices):
        out = np.where((i == k)[..., None], c, out)
    return out


def adjust_brightness(px, f):
    return np.clip(px * f, 0.0, 1.0)


def adjust_contrast(px, f):
    return np.clip(f * px + (1.0 - f) * luma(px).mean(), 0.0, 1.0)


def adjust_saturation(px, f):
    if px.shape[2] == 1:
        return px
    return np.clip(f * px + (1.0 - f) * luma(px), 0.0, 1.0)


def adjust_hue(px, h):
    if px.shape[2] == 1 or h == 0:
        return px
    hsv = rgb_to_hsv(px)
    hsv[..., 0] = (hsv[..., 0] + h) % 1.0
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


_JITTER_STEPS = (adjust_brightness, adjust_contrast, adjust_saturation, adjust_hue)


def apply_color_factors(img: ImageBuffer, brightness=1.0, contrast=1.0, saturation=1.0, hue=0.0,
                        order=(0, 1, 2, 3)) -> ImageBuffer:
    factors = (brightness, contrast, saturation, hue)
    px = img.pixels
    for k in order:
        px = _JITTER_STEPS[k](px, factors[k])
    return img._new(px.copy() if px is img.pixels else px)


def colorjitter(img: ImageBuffer, brightness=(0.8, 1.0), contrast=(0.8, 1.0), saturation=(0.8, 1.0),
                hue=(-0.5, 0.5), rng: np.random.Generator = None) -> ImageBuffer:
    """Brightness, contrast, saturation and hue jitter in a random order.

    Hue is a rotation in turns. Outputs are clamped to [0, 1] after each step.
    """
    b = rng.uniform(*brightness)
    c = rng.uniform(*contrast)
    s = rng.uniform(*saturation)
    h = rng.uniform(*hue)
    order = tuple(int(k) for k in rng.permutation(4))
    return apply_color_factors(img, b, c, s, h, order)


def default_sigma(kernel_size: int) -> float:
    return 0.3 * ((kernel_size - 1) * 0.5 - 1) + 0.8


def gaussian_kernel1d(kernel_size: int, sigma: float = 0.0) -> np.ndarray:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {kernel_size}")
    if kernel_size == 1:
        return np.ones(1)
    sigma = sigma if sigma > 0 else default_sigma(kernel_size)
    x = np.arange(kernel_size) - kernel_size // 2
    k = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def gaussian_blur_fixed(img: ImageBuffer, kernel_size: int, sigma: float = 0.0) -> ImageBuffer:
    """Separable Gaussian blur with replicate border."""
    k = gaussian_kernel1d(kernel_size, sigma)
    if kernel_size == 1:
        return img._new(img.pixels.copy())
    r = kernel_size // 2
    h, w = img.height, img.width
    px = np.pad(img.pixels, ((r, r), (r, r), (0, 0)), mode="edge")
    rows = sum(k[j] * px[:, j:j + w] for j in range(kernel_size))
    out = sum(k[i] * rows[i:i + h] for i in range(kernel_size))
    return img._new(out if img.normalized else np.clip(out, 0.0, 1.0))


def sample_blur_size(blur_limit, rng: np.random.Generator) -> int:
    lo, hi = blur_limit
    k = int(rng.integers(lo, hi + 1))
    return k + 1 if k % 2 == 0 else k


def gaussian_blur(img: ImageBuffer, blur_limit=(3, 7), sigma: float = 0.0, rng: np.random.Generator = None) -> ImageBuffer:
    return gaussian_blur_fixed(img, sample_blur_size(blur_limit, rng), sigma)


def normalize(img: ImageBuffer, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> ImageBuffer:
    if img.normalized:
        raise StateError("image is already normalized")
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    if mean.size not in (1, img.channels) or std.size not in (1, img.channels):
        raise DimensionError(f"normalize constants do not match {img.channels} channels")
    return ImageBuffer((img.pixels - mean) / std, normalized=True)


# -- pipeline ---------------------------------------------------------------

@dataclass(frozen=True)
class AugOp:
    """Base class; concrete ops define ``name``, ``kind`` and ``__call__``."""

    def __call__(self, img: ImageBuffer, rng: np.random.Generator) -> ImageBuffer:  # pragma: no cover
        raise NotImplementedError

    def output_side(self, side: Optional[int]) -> Optional[int]:
        return side


@dataclass(frozen=True)
class Resize(AugOp):
    side: int
    name = "resize"
    kind = "fixed"

    def __call__(self, img, rng):
        return resize(img, self.side)

    def output_side(self, side):
        return self.side


@dataclass(frozen=True)
class RandomCrop(AugOp):
    side: int
    name = "randomcrop"
    kind = "spatial"

    def __call__(self, img, rng):
        return random_crop(img, self.side, rng)

    def output_side(self, side):
        if side is not None and self.side > side:
            raise PipelineError(f"random crop {self.side} larger than the {side}px image it receives")
        return self.side


@dataclass(frozen=True)
class CenterCrop(AugOp):
    side: int
    name = "centercrop"
    kind = "fixed"

    def __call__(self, img, rng):
        return center_crop(img, self.side)

    def output_side(self, side):
        if side is not None and self.side > side:
            raise PipelineError(f"center crop {self.side} larger than the {side}px image it receives")
        return self.side


@dataclass(frozen=True)
class HFlip(AugOp):
    name = "hflip"
    kind = "spatial"

    def __call__(self, img, rng):
        return hflip(img)


@dataclass(frozen=True)
class Erosion(AugOp):
    kernel: tuple = (7, 7)
    name = "morpho_erosion"
    kind = "spatial"

    def __call__(self, img, rng):
        return erosion(img, self.kernel)


@dataclass(frozen=True)
class Dilation(AugOp):
    kernel: tuple = (7, 7)
    name = "morpho_dilation"
    kind = "spatial"

    def __call__(self, img, rng):
        return dilation(img, self.kernel)


@dataclass(frozen=True)
class Affine(AugOp):
    shift_limit: float = 0.05
    scale_limit: float = 0.1
    rotate_limit: float = 30.0
    name = "affine"
    kind = "spatial"

    def __call__(self, img, rng):
        return affine(img, self.shift_limit, self.scale_limit, self.rotate_limit, rng)


@dataclass(frozen=True)
class ColorJitter(AugOp):
    brightness: tuple = (0.8, 1.0)
    contrast: tuple = (0.8, 1.0)
    saturation: tuple = (0.8, 1.0)
    hue: tuple = (-0.5, 0.5)
    name = "colorjitter"
    kind = "pixel"

    def __post_init__(self):
        for rng_ in (self.brightness, self.contrast, self.saturation, self.hue):
            if rng_[0] > rng_[1]:
                raise ValueError(f"colorjitter range {rng_} is not ordered")

    def __call__(self, img, rng):
        return colorjitter(img, self.brightness, self.contrast, self.saturation, self.hue, rng)


@dataclass(frozen=True)
class GaussianBlur(AugOp):
    blur_limit: tuple = (3, 7)
    sigma: float = 0.0
    name = "gaussianblur"
    kind = "pixel"

    def __post_init__(self):
        if self.blur_limit[0] > self.blur_limit[1] or self.blur_limit[0] < 1:
            raise ValueError(f"bad blur_limit {self.blur_limit}")

    def __call__(self, img, rng):
        return gaussian_blur(img, self.blur_limit, self.sigma, rng)


@dataclass(frozen=True)
class Invert(AugOp):
    name = "invert"
    kind = "pixel"

    def __call__(self, img, rng):
        return invert(img)


@dataclass(frozen=True)
class Gray(AugOp):
    name = "gray"
    kind = "pixel"

    def __call__(self, img, rng):
        return gray(img)


@dataclass(frozen=True)
class Normalize(AugOp):
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD
    name = "normalize"
    kind = "fixed"

    def __call__(self, img, rng):
        return normalize(img, self.mean, self.std)


def default_probability(op: AugOp) -> float:
    """Crops and fixed preprocessing always run; other ops fire half the time."""
    if isinstance(op, (RandomCrop, CenterCrop, Resize, Normalize)):
        return 1.0
    return 0.5


def threads_from_env() -> int:
    try:
        return max(1, int(os.environ.get("GSLAB_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class AugPipeline:
    """Ordered ``(op, probability)`` steps with per-image derived randomness."""

    steps: list
    seed: int = 0
    input_side: Optional[int] = None
    output_side: Optional[int] = field(init=False, default=None)

    def __post_init__(self):
        steps = []
        for step in self.steps:
            op, p = step if isinstance(step, tuple) else (step, default_probability(step))
            if not 0.0 <= p <= 1.0:
                raise PipelineError(f"probability {p} for {op.name} outside [0, 1]")
            steps.append((op, float(p)))
        self.steps = steps
        side = self.input_side
        for op, _ in steps:
            side = op.output_side(side)
        self.output_side = side

    def rng_for(self, image_index: int, epoch: int, view: int = 0) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed, image_index, epoch, view]))

    def apply(self, img: ImageBuffer, image_index: int, epoch: int = 0, view: int = 0) -> ImageBuffer:
        rng = self.rng_for(image_index, epoch, view)
        for op, p in self.steps:
            if rng.random() < p:
                img = op(img, rng)
        return img

    def apply_batch(self, images: np.ndarray, indices, epoch: int = 0, views=None,
                    threads: Optional[int] = None, id_map=None) -> np.ndarray:
        """Augment ``images[indices]`` (NHWC) and return an NCHW float64 batch.

        The random stream for item k is keyed by ``id_map[indices[k]]`` (or
        the index itself), so output is independent of ``threads``.
        """
        indices = [int(i) for i in indices]
        keys = indices if id_map is None else [int(id_map[i]) for i in indices]
        views = [0] * len(indices) if views is None else [int(v) for v in views]
        threads = threads_from_env() if threads is None else threads

        def one(k):
            return self.apply(ImageBuffer(images[indices[k]]), keys[k], epoch, views[k]).pixels

        if threads > 1 and len(indices) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                outs = list(pool.map(one, range(len(indices))))
        else:
            outs = [one(k) for k in range(len(indices))]
        return np.ascontiguousarray(np.stack(outs).transpose(0, 3, 1, 2))

    @property
    def is_random(self) -> bool:
        return any(op.kind in ("spatial", "pixel") and p > 0 for op, p in self.steps)


def apply_pipeline(p: AugPipeline, img: ImageBuffer, image_index: int, epoch: int = 0, view: int = 0) -> ImageBuffer:
    return p.apply(img, image_index, epoch, view)


def eval_pipeline(geometry: Geometry = DESK_GEOMETRY, final_side: Optional[int] = None) -> AugPipeline:
    """Resize -> center crop -> normalize, with no randomness."""
    steps = [Resize(geometry.resize_side), CenterCrop(geometry.crop_side)]
    if final_side is not None and final_side != geometry.crop_side:
        steps.append(Resize(final_side))
    steps.append(Normalize())
    return AugPipeline(steps, seed=0)
