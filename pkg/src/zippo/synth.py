"""Procedural image + matte dataset.

Every sample is a soft-edged shape whose class fixes both its geometry and
its colour family, composited over a background. Classes map to prompt ids
``1..5``; id 0 is the empty prompt.

Sample ``i`` draws from its own stream ``default_rng([seed, i])`` so any
subset of indices can be regenerated independently.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imageio import ManifestRecord, write_image, write_manifest, write_matte
from .labels import composite

CLASS_NAMES = ("disc", "ring", "box", "stripes", "fuzz")
CLASS_HUES = {"disc": 0.0, "ring": 120.0, "box": 240.0, "stripes": 60.0, "fuzz": 300.0}
BACKGROUNDS = ("black", "solid-random", "noise", "mixed")
# "mixed" cycles through the plain modes by sample index
_MIXED_CYCLE = BACKGROUNDS[:3]


def prompt_id(class_name: str) -> int:
    try:
        return CLASS_NAMES.index(class_name) + 1
    except ValueError:
        raise ValueError(f"unknown class {class_name!r}; expected one of {CLASS_NAMES}") from None


def class_name(pid: int) -> str:
    if not 1 <= pid <= len(CLASS_NAMES):
        raise ValueError(f"prompt id {pid} does not name a class")
    return CLASS_NAMES[pid - 1]


@dataclass(frozen=True)
class SynthConfig:
    resolution: int = 32
    count: int = 100
    classes: tuple[str, ...] = CLASS_NAMES
    background: str = "black"
    sigma: float = 1.0
    seed: int = 0

    def validate(self, factor: int = 4) -> None:
        if self.resolution < 8 or self.resolution % factor:
            raise ValueError(f"resolution {self.resolution} must be >= 8 and divisible by the codec factor {factor}")
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        if not self.classes:
            raise ValueError("class set is empty")
        for c in self.classes:
            prompt_id(c)
        if self.background not in BACKGROUNDS:
            raise ValueError(f"unknown background {self.background!r}; expected one of {BACKGROUNDS}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


@dataclass
class SynthSample:
    image: np.ndarray
    matte: np.ndarray
    foreground: np.ndarray
    background: np.ndarray
    class_name: str
    prompt_id: int


def _q8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.float32) / np.float32(255.0)


def _shape_mask(cls: str, res: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64) + 0.5
    cx, cy = rng.uniform(0.35, 0.65, size=2) * res
    if cls == "disc":
        r = rng.uniform(0.18, 0.3) * res
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if cls == "ring":
        r_out = rng.uniform(0.24, 0.34) * res
        r_in = r_out * rng.uniform(0.45, 0.62)
        d2 = (xx - cx) ** 2 + (yy - cy) ** 2
        return (d2 <= r_out * r_out) & (d2 >= r_in * r_in)
    if cls == "box":
        hw, hh = rng.uniform(0.14, 0.28, size=2) * res
        ang = rng.uniform(0.0, np.pi / 2)
        u = (xx - cx) * np.cos(ang) + (yy - cy) * np.sin(ang)
        v = -(xx - cx) * np.sin(ang) + (yy - cy) * np.cos(ang)
        return (np.abs(u) <= hw) & (np.abs(v) <= hh)
    if cls == "stripes":
        half = rng.uniform(0.22, 0.32) * res
        period = 2.0 * half / rng.choice([3, 4])
        along = xx if rng.random() < 0.5 else yy
        inside = (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
        return inside & (np.mod(along - (cx - half), period) < period * 0.55)
    if cls == "fuzz":
        r = rng.uniform(0.16, 0.26) * res
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        # short radial strokes crossing the rim, like loose fur
        for ang in rng.uniform(0.0, 2 * np.pi, size=rng.integers(10, 18)):
            length = rng.uniform(0.08, 0.16) * res
            for s in np.linspace(r - 1.0, r + length, int(2 * length) + 4):
                px = int(np.floor(cx + s * np.cos(ang)))
                py = int(np.floor(cy + s * np.sin(ang)))
                if 0 <= px < res and 0 <= py < res:
                    mask[py, px] = True
        return mask
    raise ValueError(f"unknown class {cls!r}")


def _foreground(cls: str, res: int, rng: np.random.Generator) -> np.ndarray:
    hue = (CLASS_HUES[cls] + rng.uniform(-12.0, 12.0)) % 360.0
    sat = rng.uniform(0.75, 1.0)
    val = rng.uniform(0.75, 1.0)
    base = np.array(colorsys.hsv_to_rgb(hue / 360.0, sat, val))
    # gentle vertical shading
    shade = np.linspace(1.0, rng.uniform(0.8, 1.0), res)[:, None, None]
    return _q8(np.broadcast_to(base, (res, res, 3)) * shade)


def _background(mode: str, res: int, rng: np.random.Generator) -> np.ndarray:
    if mode == "black":
        return np.zeros((res, res, 3), dtype=np.float32)
    if mode == "solid-random":
        return _q8(np.broadcast_to(rng.uniform(0.0, 1.0, size=3), (res, res, 3)))
    # smooth hue / saturation / value fields: the texture covers saturated colours as well as greys, black and white
    fields = ndimage.gaussian_filter(rng.uniform(0.0, 1.0, size=(res, res, 3)), sigma=(2.0, 2.0, 0.0), mode="wrap")
    lo, hi = fields.min(axis=(0, 1)), fields.max(axis=(0, 1))
    hsv = (fields - lo) / np.maximum(hi - lo, 1e-8)
    hsv[..., 0] = np.mod(hsv[..., 0] + rng.uniform(0.0, 1.0), 1.0)
    hsv[..., 1] *= rng.uniform(0.0, 1.0)
    return _q8(hsv_to_rgb(hsv))


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    """Vectorised HSV -> RGB, all components in [0, 1]."""
    h, s, v = hsv[..., 0] * 6.0, hsv[..., 1], hsv[..., 2]
    i = np.floor(h).astype(np.int64) % 6
    f = h - np.floor(h)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    table = np.stack([
        np.stack([v, t, p], -1), np.stack([q, v, p], -1), np.stack([p, v, t], -1),
        np.stack([p, q, v], -1), np.stack([t, p, v], -1), np.stack([v, p, q], -1),
    ])
    return np.take_along_axis(table, i[None, ..., None].repeat(3, -1), axis=0)[0]


def render_sample(config: SynthConfig, index: int) -> SynthSample:
    rng = np.random.default_rng([config.seed, index])
    cls = config.classes[int(rng.integers(0, len(config.classes)))]
    res = config.resolution
    mask = _shape_mask(cls, res, rng).astype(np.float64)
    alpha = ndimage.gaussian_filter(mask, sigma=config.sigma, mode="constant") if config.sigma > 0 else mask
    matte = _q8(alpha)
    fg = _foreground(cls, res, rng)
    mode = _MIXED_CYCLE[index % len(_MIXED_CYCLE)] if config.background == "mixed" else config.background
    bg = _background(mode, res, rng)
    image = _q8(composite(fg, matte, bg))
    return SynthSample(image, matte, fg, bg, cls, prompt_id(cls))


def generate(config: SynthConfig, start: int = 0):
    """In-memory dataset: (images N×H×W×3, mattes N×H×W, prompt ids, class names)."""
    config.validate(factor=1)
    samples = [render_sample(config, start + i) for i in range(config.count)]
    return (
        np.stack([s.image for s in samples]),
        np.stack([s.matte for s in samples]),
        np.array([s.prompt_id for s in samples], dtype=np.int64),
        [s.class_name for s in samples],
    )


def synth_dataset(config: SynthConfig, out_dir, factor: int = 4) -> list[ManifestRecord]:
    """Write images/, mattes/ and manifest.tsv under ``out_dir``."""
    config.validate(factor)
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "mattes").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    width = max(4, len(str(config.count - 1)))
    records = []
    for i in range(config.count):
        s = render_sample(config, i)
        img_rel = f"images/{i:0{width}d}.png"
        matte_rel = f"mattes/{i:0{width}d}.png"
        write_image(out / img_rel, s.image)
        write_matte(out / matte_rel, s.matte)
        records.append(ManifestRecord(img_rel, matte_rel, s.prompt_id, s.class_name))
    write_manifest(out / "manifest.tsv", records)
    return records
