"""8-bit image files and the dataset manifest."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(x) -> np.ndarray:
    return np.round(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, image) -> None:
    """H×W×3 float image in [0,1] -> 8-bit RGB PNG."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def write_matte(path, matte) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(matte)).save(path, format="PNG")


def write_rgba(path, color, alpha) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    rgba = np.concatenate([to_uint8(color), to_uint8(alpha)[..., None]], axis=-1)
    Image.fromarray(rgba).save(path, format="PNG")


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def read_matte(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode in ("RGBA", "LA"):
            return np.asarray(im.getchannel("A"), dtype=np.float32) / 255.0
        return np.asarray(im.convert("L"), dtype=np.float32) / 255.0


def read_rgba(path) -> tuple[np.ndarray, np.ndarray]:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGBA"), dtype=np.float32) / 255.0
    return arr[..., :3], arr[..., 3]


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    matte_path: str
    prompt_id: int
    class_name: str


def write_manifest(path, records) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(f"{r.image_path}\t{r.matte_path}\t{r.prompt_id}\t{r.class_name}\n")


def read_manifest(path, vocab: int | None = None) -> list[ManifestRecord]:
    """Read a tab-separated manifest; relative paths resolve against its directory."""
    base = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            img, matte, pid, cls = parts
            try:
                pid = int(pid)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: prompt id {pid!r} is not an integer") from None
            if vocab is not None and not 0 <= pid < vocab:
                raise ValueError(f"{path}:{lineno}: prompt id {pid} outside vocabulary of {vocab}")
            img, matte = (p if os.path.isabs(p) else os.path.join(base, p) for p in (img, matte))
            records.append(ManifestRecord(img, matte, pid, cls))
    return records


def load_manifest_arrays(path, vocab: int | None = None):
    """Load every record: (images N×H×W×3, mattes N×H×W, prompt ids, records)."""
    records = read_manifest(path, vocab)
    if not records:
        raise ValueError(f"{path}: manifest is empty")
    images = np.stack([read_image(r.image_path) for r in records])
    mattes = np.stack([read_matte(r.matte_path) for r in records])
    prompts = np.array([r.prompt_id for r in records], dtype=np.int64)
    return images, mattes, prompts, records
