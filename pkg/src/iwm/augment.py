"""Source/target view construction.

Images are float64 arrays of shape (3, H, W) with values in [0, 1]. Every
transform here is a pure function of its inputs; randomness only enters via
explicitly passed ``numpy.random.Generator`` objects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

LUMA = np.array([0.299, 0.587, 0.114])
ACTION_DIM = 8
MAX_BLUR_SIGMA = 2.0
SOLARIZE_THRESHOLD = 0.5


# -- parameter records ------------------------------------------------------

@dataclass(frozen=True)
class JitterParams:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0
    applied: bool = False


IDENTITY_JITTER = JitterParams()


@dataclass(frozen=True)
class DestructiveParams:
    grayscale: bool = False
    blur_sigma: float | None = None
    solarize: bool = False


@dataclass(frozen=True)
class CropFlipParams:
    top: int
    left: int
    height: int
    width: int
    flip: bool = False


@dataclass(frozen=True)
class SourceParams:
    jitter: JitterParams = IDENTITY_JITTER
    destructive: DestructiveParams = DestructiveParams()


@dataclass(frozen=True)
class MaskSpec:
    grid: tuple[int, int]
    rects: tuple[tuple[int, int, int, int], ...]
    masked: np.ndarray = field(compare=False)

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def context(self) -> np.ndarray:
        """Patch indices kept in the source (complement of ``masked``)."""
        keep = np.ones(self.num_patches, dtype=bool)
        keep[self.masked] = False
        return np.flatnonzero(keep)

    @classmethod
    def empty(cls, grid: tuple[int, int]) -> "MaskSpec":
        return cls(tuple(grid), (), np.zeros(0, dtype=np.int64))


@dataclass
class ViewPair:
    source: np.ndarray
    target: np.ndarray
    mask: MaskSpec
    action: np.ndarray
    crop: CropFlipParams
    source_params: SourceParams
    target_params: JitterParams
    key: tuple


# -- presets ------------------------------------------------------------------

@dataclass(frozen=True)
class AugPreset:
    name: str = "default"
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    p_jitter: float = 0.8
    p_blur: float = 0.2
    p_grayscale: float = 0.2
    p_solarize: float = 0.2
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    crop_scale: tuple[float, float] = (0.3, 1.0)
    p_flip: float = 0.5
    mask_rects: int = 4
    mask_scale: tuple[float, float] = (0.15, 0.2)
    mask_aspect: tuple[float, float] = (0.75, 1.5)
    source_from_target: bool = False

    @property
    def strengths(self) -> tuple[float, float, float, float]:
        return (self.brightness, self.contrast, self.saturation, self.hue)


_BASE = AugPreset()
PRESETS: dict[str, AugPreset] = {
    "default": _BASE,
    "jitter-only": replace(_BASE, name="jitter-only", p_blur=0.0, p_grayscale=0.0, p_solarize=0.0),
    "strong-jitter": replace(_BASE, name="strong-jitter", brightness=0.5, contrast=0.5,
                             saturation=0.4, hue=0.2),
    "strong-jitter-only": replace(_BASE, name="strong-jitter-only", brightness=0.5, contrast=0.5,
                                  saturation=0.4, hue=0.2, p_blur=0.0, p_grayscale=0.0,
                                  p_solarize=0.0),
    "strong-destructive": replace(_BASE, name="strong-destructive", p_blur=0.4, p_grayscale=0.4,
                                  p_solarize=0.2),
    "destructive-only": replace(_BASE, name="destructive-only", p_jitter=0.0),
    "none": replace(_BASE, name="none", p_jitter=0.0, p_blur=0.0, p_grayscale=0.0, p_solarize=0.0),
}

_PRESET_KEYS = {
    "strength.brightness": "brightness", "strength.contrast": "contrast",
    "strength.saturation": "saturation", "strength.hue": "hue",
    "prob.jitter": "p_jitter", "prob.blur": "p_blur", "prob.grayscale": "p_grayscale",
    "prob.solarize": "p_solarize", "prob.flip": "p_flip",
    "blur.sigma_min": None, "blur.sigma_max": None,
    "crop.scale_min": None, "crop.scale_max": None,
    "mask.rects": "mask_rects", "mask.scale_min": None, "mask.scale_max": None,
    "mask.aspect_min": None, "mask.aspect_max": None,
    "source_from_target": "source_from_target", "name": "name", "base": None,
}


def get_preset(name: str) -> AugPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown augmentation preset {name!r}; known: {sorted(PRESETS)}") from None


def preset_from_mapping(values: dict) -> AugPreset:
    """Build a preset from flat key/value pairs (see ``preset_to_mapping``)."""
    unknown = set(values) - set(_PRESET_KEYS)
    if unknown:
        raise KeyError(f"unknown preset keys: {sorted(unknown)}")
    base = get_preset(str(values.get("base", "default")))
    kw = {}
    for key, attr in _PRESET_KEYS.items():
        if attr is None or key not in values:
            continue
        ref = getattr(base, attr)
        val = values[key]
        if isinstance(ref, bool):
            kw[attr] = val if isinstance(val, bool) else str(val).lower() in ("1", "true", "yes")
        else:
            kw[attr] = type(ref)(val)

    def pair(prefix, lo, hi, ref):
        return (float(values.get(f"{prefix}_{lo}", ref[0])), float(values.get(f"{prefix}_{hi}", ref[1])))

    kw["blur_sigma"] = pair("blur.sigma", "min", "max", base.blur_sigma)
    kw["crop_scale"] = pair("crop.scale", "min", "max", base.crop_scale)
    kw["mask_scale"] = pair("mask.scale", "min", "max", base.mask_scale)
    kw["mask_aspect"] = pair("mask.aspect", "min", "max", base.mask_aspect)
    return replace(base, **kw)


def preset_to_mapping(p: AugPreset) -> dict:
    return {
        "name": p.name,
        "strength.brightness": p.brightness, "strength.contrast": p.contrast,
        "strength.saturation": p.saturation, "strength.hue": p.hue,
        "prob.jitter": p.p_jitter, "prob.blur": p.p_blur, "prob.grayscale": p.p_grayscale,
        "prob.solarize": p.p_solarize, "prob.flip": p.p_flip,
        "blur.sigma_min": p.blur_sigma[0], "blur.sigma_max": p.blur_sigma[1],
        "crop.scale_min": p.crop_scale[0], "crop.scale_max": p.crop_scale[1],
        "mask.rects": p.mask_rects,
        "mask.scale_min": p.mask_scale[0], "mask.scale_max": p.mask_scale[1],
        "mask.aspect_min": p.mask_aspect[0], "mask.aspect_max": p.mask_aspect[1],
        "source_from_target": p.source_from_target,
    }


# -- geometric ------------------------------------------------------------------

def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping."""
    _, h, w = img.shape

    def coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, wy = coords(out_h, h)
    x0, x1, wx = coords(out_w, w)
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy)[:, None] + bot * wy[:, None]


def random_resized_crop_flip(img: np.ndarray, p: CropFlipParams, size: tuple[int, int] | None = None) -> np.ndarray:
    _, h, w = img.shape
    if not (0 <= p.top and 0 <= p.left and p.height > 0 and p.width > 0
            and p.top + p.height <= h and p.left + p.width <= w):
        raise ValueError(f"crop {p} outside image of size {(h, w)}")
    out_h, out_w = size or (h, w)
    crop = img[:, p.top:p.top + p.height, p.left:p.left + p.width]
    out = resize_bilinear(crop, out_h, out_w)
    if p.flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0))


def sample_crop_flip(rng: np.random.Generator, shape: tuple[int, int],
                     scale=(0.3, 1.0), ratio=(3 / 4, 4 / 3), p_flip: float = 0.5) -> CropFlipParams:
    h, w = shape
    area = h * w
    log_lo, log_hi = math.log(ratio[0]), math.log(ratio[1])
    chosen = None
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h and ch * cw >= scale[0] * area:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            chosen = (top, left, ch, cw)
            break
    if chosen is None:
        chosen = (0, 0, h, w)
    flip = bool(rng.random() < p_flip)
    return CropFlipParams(*chosen, flip=flip)


# -- photometric ------------------------------------------------------------------

def to_grayscale(img: np.ndarray) -> np.ndarray:
    gray = np.tensordot(LUMA, img, axes=(0, 0))
    return np.repeat(gray[None], 3, axis=0)


def adjust_color(img: np.ndarray, kind: str, factor: float) -> np.ndarray:
    if factor < 0:
        raise ValueError("factor must be non-negative")
    if kind == "brightness":
        out = factor * img
    elif kind == "contrast":
        mu = float(np.tensordot(LUMA, img, axes=(0, 0)).mean())
        out = mu + factor * (img - mu)
    elif kind == "saturation":
        gray = np.tensordot(LUMA, img, axes=(0, 0))[None]
        out = gray + factor * (img - gray)
    else:
        raise ValueError(f"unknown colour adjustment {kind!r}")
    return np.clip(out, 0.0, 1.0)


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img
    maxc = img.max(axis=0)
    minc = img.min(axis=0)
    v = maxc
    delta = maxc - minc
    nonzero = delta > 0
    safe_delta = np.where(nonzero, delta, 1.0)
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    rc = (maxc - r) / safe_delta
    gc = (maxc - g) / safe_delta
    bc = (maxc - b) / safe_delta
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(nonzero, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, np.where(nonzero, s, 0.0), v])


# per hue sector, which of (v, q, p, t) feeds r, g and b
_HSV_SECTORS = np.array([[0, 1, 2, 2, 3, 0], [3, 0, 0, 1, 2, 2], [2, 2, 3, 0, 0, 1]])


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    table = np.stack([v, q, p, t])
    return np.take_along_axis(table, _HSV_SECTORS[:, i], axis=0)


def adjust_hue(img: np.ndarray, shift: float) -> np.ndarray:
    if not -0.5 <= shift <= 0.5:
        raise ValueError("hue shift must lie in [-0.5, 0.5]")
    if shift == 0:
        return img.copy()
    hsv = rgb_to_hsv(img)
    hsv[0] = (hsv[0] + shift) % 1.0
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, half-width ceil(3 sigma), reflected borders."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    _, h, w = img.shape
    padded = np.pad(img, ((0, 0), (0, 0), (r, r)), mode="reflect")
    tmp = sum(k[j] * padded[:, :, j:j + w] for j in range(len(k)))
    padded = np.pad(tmp, ((0, 0), (r, r), (0, 0)), mode="reflect")
    out = sum(k[j] * padded[:, j:j + h, :] for j in range(len(k)))
    return np.clip(out, 0.0, 1.0)


def solarize(img: np.ndarray, threshold: float = SOLARIZE_THRESHOLD) -> np.ndarray:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    return np.where(img >= threshold, 1.0 - img, img)


def apply_jitter(img: np.ndarray, p: JitterParams) -> np.ndarray:
    """Brightness, contrast, saturation, hue, always in that order."""
    if not p.applied:
        return img
    out = adjust_color(img, "brightness", p.brightness)
    out = adjust_color(out, "contrast", p.contrast)
    out = adjust_color(out, "saturation", p.saturation)
    return adjust_hue(out, p.hue)


def apply_destructive(img: np.ndarray, p: DestructiveParams) -> np.ndarray:
    out = img
    if p.grayscale:
        out = to_grayscale(out)
    if p.blur_sigma is not None:
        out = gaussian_blur(out, p.blur_sigma)
    if p.solarize:
        out = solarize(out)
    return out


def sample_jitter(rng: np.random.Generator, strengths, p_apply: float) -> JitterParams:
    b, c, s, h = strengths
    # draws happen unconditionally so the stream layout is independent of p_apply
    apply = rng.random() < p_apply
    fb = rng.uniform(1 - b, 1 + b)
    fc = rng.uniform(1 - c, 1 + c)
    fs = rng.uniform(1 - s, 1 + s)
    dh = rng.uniform(-h, h)
    if not apply:
        return IDENTITY_JITTER
    return JitterParams(fb, fc, fs, dh, True)


def sample_destructive(rng: np.random.Generator, preset: AugPreset) -> DestructiveParams:
    gray = rng.random() < preset.p_grayscale
    blur = rng.random() < preset.p_blur
    sigma = rng.uniform(*preset.blur_sigma)
    sol = rng.random() < preset.p_solarize
    return DestructiveParams(bool(gray), float(sigma) if blur else None, bool(sol))


# -- masks ----------------------------------------------------------------------

def _sample_rect(rng, gh, gw, scale, aspect, max_tries):
    for _ in range(max_tries):
        area = rng.uniform(*scale) * gh * gw
        ar = rng.uniform(*aspect)
        h = int(round(math.sqrt(area * ar)))
        w = int(round(math.sqrt(area / ar)))
        if 1 <= h <= gh and 1 <= w <= gw:
            break
    else:
        h = min(max(h, 1), gh)
        w = min(max(w, 1), gw)
    top = int(rng.integers(0, gh - h + 1))
    left = int(rng.integers(0, gw - w + 1))
    return top, left, h, w


def sample_mask(rng: np.random.Generator, grid: tuple[int, int], n_rects: int = 4,
                scale=(0.15, 0.2), aspect=(0.75, 1.5), max_tries: int = 100) -> MaskSpec:
    """Union of ``n_rects`` axis-aligned rectangles on the patch grid.

    A union that would swallow the whole grid is redrawn, so at least one
    context patch always survives.
    """
    gh, gw = grid
    if gh * gw < 2:
        raise ValueError("mask grid needs at least two patches")
    for _ in range(max_tries):
        rects = tuple(_sample_rect(rng, gh, gw, scale, aspect, max_tries) for _ in range(n_rects))
        masked = np.zeros((gh, gw), dtype=bool)
        for top, left, h, w in rects:
            masked[top:top + h, left:left + w] = True
        if not masked.all():
            break
    else:
        # keep only rectangles that leave some context; if even one alone fills
        # the grid, mask everything except one random patch
        kept, masked = [], np.zeros((gh, gw), dtype=bool)
        for top, left, h, w in rects:
            trial = masked.copy()
            trial[top:top + h, left:left + w] = True
            if not trial.all():
                kept.append((top, left, h, w))
                masked = trial
        if not kept:
            masked[:] = True
            masked.flat[int(rng.integers(0, gh * gw))] = False
            kept = [(0, 0, gh, gw)]
        rects = tuple(kept)
    return MaskSpec((gh, gw), rects, np.flatnonzero(masked.reshape(-1)))


# -- actions and view pairs ------------------------------------------------------

def encode_action(source: SourceParams, target: JitterParams, source_from_target: bool = False) -> np.ndarray:
    """Action vector describing how to go from the source view to the target.

    Layout: [dlog brightness, dlog contrast, dlog saturation, d hue,
    grayscale flag, blur flag, blur sigma / 2, solarize flag].
    """
    sj, tj = source.jitter, target
    if source_from_target:
        # the source already carries the target jitter; only its own jitter separates them
        tj = IDENTITY_JITTER
    for f in (sj.brightness, sj.contrast, sj.saturation, tj.brightness, tj.contrast, tj.saturation):
        if f <= 0:
            raise ValueError("jitter factors must be positive")
    d = source.destructive
    return np.array([
        math.log(tj.brightness / sj.brightness),
        math.log(tj.contrast / sj.contrast),
        math.log(tj.saturation / sj.saturation),
        tj.hue - sj.hue,
        float(d.grayscale),
        float(d.blur_sigma is not None),
        (d.blur_sigma / MAX_BLUR_SIGMA) if d.blur_sigma is not None else 0.0,
        float(d.solarize),
    ])


def sample_key(seed: int, epoch: int, index: int) -> tuple[int, int, int]:
    return (int(seed), int(epoch), int(index))


def key_rng(key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def sample_view_pair(image: np.ndarray, key, preset: AugPreset = _BASE, patch_size: int = 8,
                     size: tuple[int, int] | None = None) -> ViewPair:
    """Draw one (source, target, mask, action) training sample.

    Deterministic in (image, key, preset). Destructive transforms only ever
    touch the source.
    """
    rng = key_rng(key)
    _, h, w = image.shape
    out_h, out_w = size or (h, w)
    crop = sample_crop_flip(rng, (h, w), preset.crop_scale, p_flip=preset.p_flip)
    base = random_resized_crop_flip(image, crop, (out_h, out_w))

    tj = sample_jitter(rng, preset.strengths, preset.p_jitter)
    sj = sample_jitter(rng, preset.strengths, preset.p_jitter)
    destructive = sample_destructive(rng, preset)
    target = apply_jitter(base, tj)
    start = target if preset.source_from_target else base
    source = apply_destructive(apply_jitter(start, sj), destructive)

    if out_h % patch_size or out_w % patch_size:
        raise ValueError(f"image size {(out_h, out_w)} not divisible by patch size {patch_size}")
    grid = (out_h // patch_size, out_w // patch_size)
    mask = sample_mask(rng, grid, preset.mask_rects, preset.mask_scale, preset.mask_aspect)
    sp = SourceParams(sj, destructive)
    action = encode_action(sp, tj, preset.source_from_target)
    return ViewPair(source, target, mask, action, crop, sp, tj, tuple(key))
