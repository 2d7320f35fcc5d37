"""Pseudo-label curation and alpha compositing.

The curation chain is: binarize a coarse matte, compare it to a
segmentation mask by IoU, keep it only above the IoU threshold, derive a
trimap, and hand matte + trimap to a refiner. Refiners are looked up by name
so an external matting model can be plugged in with :func:`register_refiner`.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy import ndimage

from .metrics import iou, quantize

BINARIZE_THRESHOLD = 25
IOU_THRESHOLD = 0.9
TRIMAP_RADIUS = 3

TRIMAP_BG = 0
TRIMAP_UNKNOWN = 128
TRIMAP_FG = 255


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shapes {a.shape} and {b.shape} differ")


def binarize(matte, h: int = BINARIZE_THRESHOLD) -> np.ndarray:
    """True where the 8-bit matte value is at least ``h``."""
    if not 0 <= h <= 255:
        raise ValueError(f"binarize threshold must be in [0, 255], got {h}")
    return quantize(matte) >= h


def filter_by_iou(matte, segmask, h: int = BINARIZE_THRESHOLD, iou_threshold: float = IOU_THRESHOLD) -> tuple[bool, float]:
    """Keep a matte iff IoU(binarized matte, segmask) is strictly above the threshold."""
    matte = np.asarray(matte)
    segmask = np.asarray(segmask, dtype=bool)
    _same_shape(matte, segmask, "filter_by_iou")
    score = iou(binarize(matte, h), segmask)
    return score > iou_threshold, score


def estimate_trimap(matte, radius: int = TRIMAP_RADIUS) -> np.ndarray:
    """Trimap with values ``TRIMAP_BG``/``TRIMAP_UNKNOWN``/``TRIMAP_FG``.

    The unknown band is the transition set (0 < alpha < 255 at 8 bits)
    dilated by a (2r+1)×(2r+1) square.
    """
    if radius < 1:
        raise ValueError(f"trimap radius must be >= 1, got {radius}")
    q = quantize(matte)
    transition = (q > 0) & (q < 255)
    unknown = ndimage.binary_dilation(transition, structure=np.ones((2 * radius + 1,) * 2, dtype=bool))
    trimap = np.full(q.shape, TRIMAP_UNKNOWN, dtype=np.uint8)
    trimap[(q == 255) & ~unknown] = TRIMAP_FG
    trimap[(q == 0) & ~unknown] = TRIMAP_BG
    return trimap


Refiner = Callable[..., np.ndarray]


def _identity_refiner(matte, trimap, **_):
    return np.asarray(matte, dtype=np.float32).copy()


def _oracle_refiner(matte, trimap, ground_truth=None, **_):
    if ground_truth is None:
        raise ValueError("the oracle refiner needs ground_truth=...")
    gt = np.asarray(ground_truth, dtype=np.float32)
    _same_shape(np.asarray(matte), gt, "oracle refiner")
    return gt.copy()


_REFINERS: dict[str, Refiner] = {"identity": _identity_refiner, "oracle": _oracle_refiner}


def register_refiner(name: str, fn: Refiner) -> None:
    """Register ``fn(matte, trimap, **context) -> matte`` under ``name``."""
    _REFINERS[name] = fn


def available_refiners() -> list[str]:
    return sorted(_REFINERS)


def refine_matte(matte, trimap, refiner: str = "identity", **context) -> np.ndarray:
    try:
        fn = _REFINERS[refiner]
    except KeyError:
        raise KeyError(f"unknown refiner {refiner!r}; registered: {available_refiners()}") from None
    trimap = np.asarray(trimap)
    _same_shape(np.asarray(matte), trimap, "refine_matte")
    out = np.clip(np.asarray(fn(matte, trimap, **context), dtype=np.float32), 0.0, 1.0)
    out[trimap == TRIMAP_FG] = 1.0
    out[trimap == TRIMAP_BG] = 0.0
    return out


def composite(fg, alpha, bg) -> np.ndarray:
    """``alpha * fg + (1 - alpha) * bg`` per pixel, clamped to [0, 1]."""
    fg = np.asarray(fg, dtype=np.float32)
    bg = np.asarray(bg, dtype=np.float32)
    alpha = np.asarray(alpha, dtype=np.float32)
    if fg.shape != bg.shape or fg.shape[:2] != alpha.shape[:2] or alpha.ndim != 2:
        raise ValueError(f"composite: fg {fg.shape}, alpha {alpha.shape} and bg {bg.shape} do not match")
    a = alpha[..., None] if fg.ndim == 3 else alpha
    return np.clip(a * fg + (1.0 - a) * bg, 0.0, 1.0)


def curate(matte, segmask, h: int = BINARIZE_THRESHOLD, iou_threshold: float = IOU_THRESHOLD,
           radius: int = TRIMAP_RADIUS, refiner: str = "identity", **context):
    """Run the whole chain. Returns ``(kept, iou, refined matte or None)``."""
    keep, score = filter_by_iou(matte, segmask, h, iou_threshold)
    if not keep:
        return False, score, None
    trimap = estimate_trimap(matte, radius)
    return True, score, refine_matte(matte, trimap, refiner, **context)
