"""Seedable image augmentation on (C, H, W) float arrays in [0, 1].

Two presets are provided. ``default`` is random crop with zero padding,
colour jitter and horizontal flip. ``hard`` is colour jitter (p=0.8),
grayscale (p=0.2), horizontal flip, 3x3 Gaussian blur (p=0.1) and random
resized crop. ``none`` returns the input unchanged.

Colour jitter formulas (applied in this order, clamping to [0, 1] after
each step):

* brightness ``x * f``
* contrast ``(x - m) * f + m`` with ``m`` the mean luma of the image
* saturation ``(x - g) * f + g`` with ``g`` the per-pixel luma
* hue: rotate HSV hue by ``d`` turns, ``d ~ U[-hue, hue]``

with each ``f ~ U[1 - s, 1 + s]``. Luma weights are 0.299, 0.587, 0.114.

Rotation labels 0..3 are quarter turns. Label 1 sends pixel (r, c) to
(c, H - 1 - r): counter-clockwise when row 0 is drawn at the bottom.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Iterable

import numpy as np

from .rng import stream

LUMA = np.array([0.299, 0.587, 0.114])

__all__ = [
    "AugmentSpec",
    "apply_pipeline",
    "apply_params",
    "draw_params",
    "augment_batch",
    "rotate90",
    "rotate_batch",
    "sample_rotation",
    "sample_rotations",
    "hflip",
    "to_grayscale",
    "gaussian_blur",
    "resize_bilinear",
    "rgb_to_hsv",
    "hsv_to_rgb",
    "write_trace",
]


@dataclass(frozen=True)
class AugmentSpec:
    kind: str = "none"
    crop_size: int | None = None
    crop_padding: int = 0
    # (brightness, contrast, saturation, hue, probability)
    jitter: tuple[float, float, float, float, float] = (0.0, 0.0, 0.0, 0.0, 0.0)
    grayscale_p: float = 0.0
    hflip_p: float = 0.0
    # (kernel size, sigma, probability)
    blur: tuple[int, float, float] = (3, 1.5, 0.0)
    # (scale_min, scale_max, probability)
    resized_crop: tuple[float, float, float] = (1.0, 1.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("default", "hard", "none"):
            raise ValueError(f"augment kind must be default, hard or none, got {self.kind!r}")
        probs = [self.jitter[4], self.grayscale_p, self.hflip_p, self.blur[2], self.resized_crop[2]]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError(f"augment probabilities must lie in [0, 1], got {probs}")
        if any(s < 0 for s in self.jitter[:3]) or not 0 <= self.jitter[3] <= 0.5:
            raise ValueError(f"invalid jitter strengths {self.jitter}")
        if not 0 < self.resized_crop[0] <= self.resized_crop[1] <= 1:
            raise ValueError(f"resized crop scale must satisfy 0 < min <= max <= 1, got {self.resized_crop[:2]}")
        if self.blur[0] != 3:
            raise ValueError("only 3x3 blur kernels are supported")
        if self.kind != "none":
            if self.crop_size is None or self.crop_size < 1:
                raise ValueError(f"{self.kind} pipeline needs a positive crop_size")
        if self.crop_padding < 0:
            raise ValueError("crop_padding must be non-negative")

    @classmethod
    def default(cls, crop_size: int, padding: int = 4) -> "AugmentSpec":
        return cls(kind="default", crop_size=crop_size, crop_padding=padding,
                   jitter=(0.4, 0.4, 0.4, 0.0, 1.0), hflip_p=0.5)

    @classmethod
    def hard(cls, crop_size: int) -> "AugmentSpec":
        return cls(kind="hard", crop_size=crop_size,
                   jitter=(0.4, 0.4, 0.4, 0.1, 0.8), grayscale_p=0.2, hflip_p=0.5,
                   blur=(3, 1.5, 0.1), resized_crop=(0.35, 1.0, 1.0))

    @classmethod
    def none(cls) -> "AugmentSpec":
        return cls(kind="none")

    @classmethod
    def preset(cls, kind: str, crop_size: int, padding: int = 4) -> "AugmentSpec":
        if kind == "default":
            return cls.default(crop_size, padding)
        if kind == "hard":
            return cls.hard(crop_size)
        if kind == "none":
            return cls.none()
        raise ValueError(f"unknown augmentation preset {kind!r}")


# ---------------------------------------------------------------------------
# individual transforms
# ---------------------------------------------------------------------------


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, :, ::-1].copy()


def luma(image: np.ndarray) -> np.ndarray:
    if image.shape[0] != 3:
        return image[0]
    return LUMA[0] * image[0] + LUMA[1] * image[1] + LUMA[2] * image[2]


def to_grayscale(image: np.ndarray) -> np.ndarray:
    if image.shape[0] != 3:
        return image.copy()
    g = luma(image)
    return np.stack([g, g, g]).astype(image.dtype)


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Channel axis is -3, so (3, H, W) and (N, 3, H, W) both work."""
    r, g, b = np.moveaxis(rgb, -3, 0)
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    delta = maxc - minc
    safe = np.where(delta > 0, delta, 1)
    hr = (g - b) / safe
    h = np.where(maxc == r, np.where(hr < 0, hr + 6, hr),
                 np.where(maxc == g, (b - r) / safe + 2, (r - g) / safe + 4))
    h = np.where(delta > 0, h / 6.0, 0.0)
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1), 0.0)
    return np.stack([h, s, maxc], axis=-3)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = np.moveaxis(hsv, -3, 0)
    h6 = (h - np.floor(h)) * 6.0
    vs = v * s
    # channel c is v - v*s*clip(min(k, 4 - k), 0, 1) with k = (n_c + 6h) mod 6
    out = []
    for n in (5.0, 3.0, 1.0):
        k = n + h6
        k = np.where(k >= 6.0, k - 6.0, k)
        out.append(v - vs * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0))
    return np.stack(out, axis=-3)


def _gauss_taps(sigma: float) -> np.ndarray:
    k = np.exp(-np.array([1.0, 0.0, 1.0]) / (2 * sigma**2))
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float = 1.5) -> np.ndarray:
    """Separable 3x3 Gaussian blur with reflect padding over the last two axes."""
    k = _gauss_taps(sigma).astype(image.dtype)
    pad = [(0, 0)] * (image.ndim - 2) + [(1, 1), (1, 1)]
    x = np.pad(image, pad, mode="reflect")
    x = k[0] * x[..., :-2, :] + k[1] * x[..., 1:-1, :] + k[2] * x[..., 2:, :]
    x = k[0] * x[..., :-2] + k[1] * x[..., 1:-1] + k[2] * x[..., 2:]
    return x.astype(image.dtype)


@lru_cache(maxsize=256)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres, edge clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    w = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - w
    m[np.arange(n_out), hi] += w
    return m


def resize_bilinear(image: np.ndarray, height: int, width: int | None = None) -> np.ndarray:
    width = height if width is None else width
    _, h, w = image.shape
    if (h, w) == (height, width):
        return image.copy()
    out = _interp_matrix(h, height) @ image @ _interp_matrix(w, width).T
    return out.astype(image.dtype)


def _resized_crops(x: np.ndarray, boxes, size: int) -> np.ndarray:
    # every crop box resized to size x size as batched row/column interpolation
    n, _, h, w = x.shape
    rows = np.zeros((n, 1, size, h), dtype=x.dtype)
    cols = np.zeros((n, 1, w, size), dtype=x.dtype)
    for i, (t, l, ch, cw) in enumerate(boxes):
        rows[i, 0, :, t : t + ch] = _interp_matrix(ch, size)
        cols[i, 0, l : l + cw, :] = _interp_matrix(cw, size).T
    return rows @ x @ cols


def rotate90(image: np.ndarray, label: int) -> np.ndarray:
    """Lossless quarter-turn rotation of a (C, H, W) image by ``label`` turns."""
    if label not in (0, 1, 2, 3):
        raise ValueError(f"rotation label must be in 0..3, got {label}")
    return np.ascontiguousarray(np.rot90(image, k=label, axes=(2, 1)))


def rotate_batch(images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    out = np.empty_like(images)
    for k in range(4):
        sel = labels == k
        if sel.any():
            out[sel] = np.rot90(images[sel], k=k, axes=(3, 2))
    return out


def sample_rotation(rng: np.random.Generator) -> int:
    return int(rng.integers(4))


def sample_rotations(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, 4, size=n)


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


def _draw_jitter(spec: AugmentSpec, rng: np.random.Generator) -> dict:
    b, c, s, h, _ = spec.jitter
    return {
        "brightness": rng.uniform(1 - b, 1 + b),
        "contrast": rng.uniform(1 - c, 1 + c),
        "saturation": rng.uniform(1 - s, 1 + s),
        "hue": rng.uniform(-h, h) if h > 0 else 0.0,
    }


def _resized_crop_box(h: int, w: int, smin: float, smax: float, rng: np.random.Generator) -> tuple[int, int, int, int]:
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(smin, smax)
        ratio = rng.uniform(3 / 4, 4 / 3)
        cw = int(round(np.sqrt(target * ratio)))
        ch = int(round(np.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    return 0, 0, h, w


def draw_params(spec: AugmentSpec, shape: tuple[int, int, int], rng: np.random.Generator) -> dict:
    """All random decisions for one image of ``shape`` (C, H, W), in draw order."""
    _, h, w = shape
    p: dict = {"kind": spec.kind}

    def coin(prob: float, name: str) -> bool:
        p[name] = bool(rng.random() < prob)
        return p[name]

    if spec.kind == "default":
        size, pad = spec.crop_size, spec.crop_padding
        if h + 2 * pad < size or w + 2 * pad < size:
            raise ValueError(f"image {h}x{w} with padding {pad} is smaller than crop size {size}")
        p["crop"] = [int(rng.integers(0, h + 2 * pad - size + 1)), int(rng.integers(0, w + 2 * pad - size + 1))]
        if coin(spec.jitter[4], "jitter_applied"):
            p["jitter"] = _draw_jitter(spec, rng)
        coin(spec.hflip_p, "hflip")
    elif spec.kind == "hard":
        if coin(spec.jitter[4], "jitter_applied"):
            p["jitter"] = _draw_jitter(spec, rng)
        coin(spec.grayscale_p, "grayscale")
        coin(spec.hflip_p, "hflip")
        coin(spec.blur[2], "blur")
        if coin(spec.resized_crop[2], "resized_crop_applied"):
            p["resized_crop"] = list(_resized_crop_box(h, w, spec.resized_crop[0], spec.resized_crop[1], rng))
        else:
            p["resized_crop"] = [0, 0, h, w]
    if spec.kind != "none":
        p["hue_changed"] = bool(p["jitter_applied"] and p["jitter"]["hue"] != 0.0)
    return p


def _luma_batch(x: np.ndarray) -> np.ndarray:
    if x.shape[1] != 3:
        return x[:, 0]
    return LUMA[0] * x[:, 0] + LUMA[1] * x[:, 1] + LUMA[2] * x[:, 2]


def _jitter_batch(x: np.ndarray, params: list[dict]) -> np.ndarray:
    col = lambda key: np.array([p["jitter"][key] for p in params])[:, None, None, None]  # noqa: E731
    x = np.clip(x * col("brightness"), 0, 1)
    m = _luma_batch(x).mean(axis=(1, 2))[:, None, None, None]
    x = np.clip((x - m) * col("contrast") + m, 0, 1)
    if x.shape[1] == 3:
        g = _luma_batch(x)[:, None]
        x = np.clip((x - g) * col("saturation") + g, 0, 1)
        hue = col("hue")[:, 0, 0, 0]
        turn = np.flatnonzero(hue != 0.0)
        if turn.size:
            hsv = rgb_to_hsv(x[turn])
            hsv[:, 0] = (hsv[:, 0] + hue[turn, None, None]) % 1.0
            x[turn] = np.clip(hsv_to_rgb(hsv), 0, 1)
    return x


def apply_params(images: np.ndarray, params: list[dict], spec: AugmentSpec) -> np.ndarray:
    """Apply drawn ``params`` (one dict per image) to a (N, C, H, W) batch."""
    if spec.kind == "none":
        return images.copy()
    x = images.astype(np.result_type(images.dtype, np.float32))

    def where(key: str) -> np.ndarray:
        return np.flatnonzero([p.get(key, False) for p in params])

    if spec.kind == "default":
        size, pad = spec.crop_size, spec.crop_padding
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        x = np.stack([xp[i, :, t : t + size, l : l + size] for i, (t, l) in enumerate(p["crop"] for p in params)])
        sel = where("jitter_applied")
        if sel.size:
            x[sel] = _jitter_batch(x[sel], [params[i] for i in sel])
        sel = where("hflip")
        x[sel] = x[sel, :, :, ::-1]
    else:
        sel = where("jitter_applied")
        if sel.size:
            x[sel] = _jitter_batch(x[sel], [params[i] for i in sel])
        sel = where("grayscale")
        if sel.size and x.shape[1] == 3:
            x[sel] = _luma_batch(x[sel])[:, None]
        sel = where("hflip")
        x[sel] = x[sel, :, :, ::-1]
        sel = where("blur")
        if sel.size:
            x[sel] = gaussian_blur(x[sel], spec.blur[1])
        x = _resized_crops(x, [p["resized_crop"] for p in params], spec.crop_size)
    return np.clip(x, 0, 1).astype(images.dtype)


def apply_pipeline(spec: AugmentSpec, image: np.ndarray, rng: np.random.Generator, trace: dict | None = None) -> np.ndarray:
    """Augment one (C, H, W) image. Pass a dict as ``trace`` to record draws."""
    if spec.kind != "none" and image.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {image.shape}")
    params = draw_params(spec, image.shape, rng)
    if trace is not None:
        trace.update(params)
    return apply_params(image[None], [params], spec)[0]


def augment_batch(
    spec: AugmentSpec,
    images: np.ndarray,
    seed: int,
    keys: tuple,
    indices: Iterable[int],
    traces: list | None = None,
) -> np.ndarray:
    """Augment a (N, C, H, W) batch; item ``i`` draws from ``stream(seed, *keys, indices[i])``."""
    indices = [int(i) for i in indices]
    if spec.kind == "none":
        if traces is not None:
            traces.extend({"index": i, "kind": "none"} for i in indices)
        return images.copy()
    params = [draw_params(spec, images.shape[1:], stream(seed, *keys, i)) for i in indices]
    if traces is not None:
        traces.extend({"index": i, **p} for i, p in zip(indices, params))
    return apply_params(images, params, spec)


def write_trace(path, records: list[dict]) -> None:
    """One JSON object per line, one line per augmented image."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def spec_to_dict(spec: AugmentSpec) -> dict:
    return asdict(spec)
