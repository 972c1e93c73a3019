from __future__ import annotations

import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass

import numpy as np
from PIL import Image

from ..errors import ConfigError, DimensionError

log = logging.getLogger(__name__)

# Annex K example tables, zigzag order.
STD_LUMA_QUANT = [
    16, 11, 12, 14, 12, 10, 16, 14, 13, 14, 18, 17, 16, 19, 24, 40,
    26, 24, 22, 22, 24, 49, 35, 37, 29, 40, 58, 51, 61, 60, 57, 51,
    56, 55, 64, 72, 92, 78, 64, 68, 87, 69, 55, 56, 80, 109, 81, 87,
    95, 98, 103, 104, 103, 62, 77, 113, 121, 112, 100, 120, 92, 101, 103, 99,
]
STD_CHROMA_QUANT = [
    17, 18, 18, 24, 21, 24, 47, 26, 26, 47, 99, 66, 56, 66, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
]


def quality_scale(quality: int) -> int:
    """Percentage scaling factor applied to the base tables for a 1-100 quality."""
    quality = min(max(int(quality), 1), 100)
    return 5000 // quality if quality < 50 else 200 - 2 * quality


def scaled_table(base: list[int], quality: int, force_baseline: bool = True) -> list[int]:
    scale = quality_scale(quality)
    hi = 255 if force_baseline else 32767
    return [min(max((b * scale + 50) // 100, 1), hi) for b in base]


def match_quality(luma: list[int], chroma: list[int] | None = None) -> int | None:
    """Quality whose standard scaling reproduces the given tables, if any."""
    for q in range(100, 0, -1):
        if scaled_table(STD_LUMA_QUANT, q) != list(luma):
            continue
        if chroma is not None and scaled_table(STD_CHROMA_QUANT, q) != list(chroma):
            continue
        return q
    return None


@dataclass(frozen=True)
class CodecProfile:
    quality: int = 25
    chroma_subsampling: str = "4:2:0"
    restart_interval_mcus: int = 1
    progressive: bool = False

    def __post_init__(self):
        if not 1 <= self.quality <= 100:
            raise ConfigError(f"quality must be in 1..100, got {self.quality}")
        if self.chroma_subsampling != "4:2:0":
            raise ConfigError("only 4:2:0 chroma subsampling is supported")
        if self.restart_interval_mcus < 1:
            raise ConfigError("restart_interval_mcus must be positive")
        if self.progressive:
            raise ConfigError("progressive JPEG is not supported")

    @property
    def blessed(self) -> bool:
        return self == CodecProfile()

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> bytes:
        """8-byte identity of the profile, embedded in sidecars and manifests."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()[:8]

    @property
    def hash(self) -> str:
        return self.digest().hex()


MCU_SIZE = 16


def pad_to_mcu(pixels: np.ndarray) -> np.ndarray:
    """Center-pad to multiples of 16 by replicating edge pixels."""
    h, w = pixels.shape[:2]
    th, tw = -(-h // MCU_SIZE) * MCU_SIZE, -(-w // MCU_SIZE) * MCU_SIZE
    top, left = (th - h) // 2, (tw - w) // 2
    return np.pad(pixels, ((top, th - h - top), (left, tw - w - left), (0, 0)), mode="edge")


def encode_image(pixels: np.ndarray, profile: CodecProfile = CodecProfile(), pad: bool = False) -> bytes:
    """Full baseline JPEG file for an (H, W, 3) uint8 buffer.

    Output is a pure function of (pixels, profile): standard scaled tables,
    standard Huffman tables, and a restart marker every
    ``profile.restart_interval_mcus`` MCUs.
    """
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise DimensionError(f"expected an HxWx3 buffer, got shape {pixels.shape}")
    if pixels.dtype != np.uint8:
        raise DimensionError(f"expected uint8 pixels, got {pixels.dtype}")
    h, w = pixels.shape[:2]
    if h == 0 or w == 0:
        raise DimensionError("empty image")
    if h % MCU_SIZE or w % MCU_SIZE:
        if not pad:
            raise DimensionError(f"{w}x{h} is not a multiple of {MCU_SIZE} in both dimensions")
        pixels = pad_to_mcu(pixels)
    if not profile.blessed:
        log.warning("encoding with non-default profile %s (untested path)", profile)
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(pixels), "RGB").save(
        buf,
        format="JPEG",
        quality=profile.quality,
        subsampling=profile.chroma_subsampling,
        restart_marker_blocks=profile.restart_interval_mcus,
        optimize=False,
        progressive=False,
    )
    return buf.getvalue()
