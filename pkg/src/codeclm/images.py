"""Image I/O: PNG (or anything Pillow reads), raw RGB with a JSON dimension sidecar."""
from __future__ import annotations

import io
import json
import math
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DimensionError

RAW_SUFFIXES = {".rgb", ".raw"}
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".tif", ".tiff"} | RAW_SUFFIXES


def load_image(path) -> np.ndarray:
    """(H, W, 3) uint8 pixels.

    Raw buffers need ``<file>.json`` next to them holding ``{"width": W, "height": H}``.
    """
    path = Path(path)
    if path.suffix.lower() in RAW_SUFFIXES:
        meta_path = path.with_name(path.name + ".json")
        if not meta_path.exists():
            raise DimensionError(f"{path}: raw RGB buffer needs a dimension sidecar {meta_path.name}")
        meta = json.loads(meta_path.read_text())
        w, h = int(meta["width"]), int(meta["height"])
        buf = np.frombuffer(path.read_bytes(), dtype=np.uint8)
        if buf.size != w * h * 3:
            raise DimensionError(f"{path}: {buf.size} bytes does not match {w}x{h}x3")
        return buf.reshape(h, w, 3).copy()
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB")).copy()


def save_raw(path, pixels: np.ndarray) -> None:
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())
    h, w = pixels.shape[:2]
    path.with_name(path.name + ".json").write_text(json.dumps({"width": w, "height": h}))


def save_png(path, pixels: np.ndarray) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), "RGB").save(path, format="PNG")


def list_images(directory) -> list[Path]:
    """Image files in deterministic filename order."""
    return sorted(p for p in Path(directory).iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def decode_jpeg(data: bytes) -> np.ndarray:
    """Decode with libjpeg via Pillow; raises OSError on undecodable input."""
    with Image.open(io.BytesIO(data)) as im:
        im.load()
        return np.asarray(im.convert("RGB")).copy()


def tile(images: list[np.ndarray], cols: int | None = None, gap: int = 2) -> np.ndarray:
    """Grid of equally sized images on a white background."""
    if not images:
        raise ValueError("nothing to tile")
    h, w = images[0].shape[:2]
    cols = cols or math.ceil(math.sqrt(len(images)))
    rows = math.ceil(len(images) / cols)
    out = np.full((rows * (h + gap) - gap, cols * (w + gap) - gap, 3), 255, np.uint8)
    for i, im in enumerate(images):
        if im.shape[:2] != (h, w):
            raise DimensionError("gallery images must share one size")
        r, c = divmod(i, cols)
        out[r * (h + gap):r * (h + gap) + h, c * (w + gap):c * (w + gap) + w] = im
    return out


_NATURAL_SOURCES = (
    "astronaut", "chelsea", "coffee", "hubble_deep_field", "immunohistochemistry",
    "retina", "rocket", "brick", "camera", "grass", "gravel", "moon", "clock", "coins",
)


def _sources() -> list[np.ndarray]:
    import skimage.data

    out = []
    for name in _NATURAL_SOURCES:
        a = getattr(skimage.data, name)()
        if a.ndim == 2:
            a = np.stack([a] * 3, axis=-1)
        out.append(np.ascontiguousarray(a[..., :3]))
    return out


def natural_images(n: int, size: int = 64, seed: int = 0, sources: slice | None = None) -> list[np.ndarray]:
    """Random square crops of scikit-image's bundled photographs, resized to ``size``.

    Crop side is uniform between a third of and the full short edge; half the
    crops are mirrored.
    """
    srcs = _sources()
    if sources is not None:
        srcs = srcs[sources]
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        src = srcs[rng.integers(len(srcs))]
        h, w = src.shape[:2]
        side = int(rng.integers(min(h, w) // 3, min(h, w) + 1))
        y = int(rng.integers(0, h - side + 1))
        x = int(rng.integers(0, w - side + 1))
        crop = Image.fromarray(src[y:y + side, x:x + side]).resize((size, size), Image.BICUBIC)
        a = np.asarray(crop)
        if rng.random() < 0.5:
            a = a[:, ::-1]
        out.append(np.ascontiguousarray(a))
    return out
