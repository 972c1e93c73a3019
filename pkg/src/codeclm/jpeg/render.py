"""Reference pixel reconstruction from decoded coefficients.

Chroma is upsampled by pixel replication, so every MCU's pixels depend on
that MCU's coefficients alone. libjpeg's default triangle-filter upsampling
blends neighbouring chroma rows; use this renderer when comparing MCUs
individually.
"""
from __future__ import annotations

import numpy as np
from scipy.fft import idctn

from .huffman import ZIGZAG
from .segments import FrameHeader

_UNZIG = np.argsort(np.array(ZIGZAG))  # zigzag index for each natural position


def render(frame: FrameHeader, quant: dict[int, list[int]], mcus: list[list[list[int]]]) -> np.ndarray:
    """Pixels (H, W, 3) uint8 for a frame given all of its MCUs in raster order."""
    hmax, vmax = frame.hmax, frame.vmax
    planes = []
    for comp in frame.components:
        q = np.asarray(quant[comp.tq], dtype=np.float64)
        planes.append(
            (np.zeros((frame.mcus_y * comp.v * 8, frame.mcus_x * comp.h * 8)), q, comp)
        )
    for m, blocks in enumerate(mcus):
        my, mx = divmod(m, frame.mcus_x)
        b = 0
        for plane, q, comp in planes:
            for by in range(comp.v):
                for bx in range(comp.h):
                    zz = np.asarray(blocks[b], dtype=np.float64) * q
                    b += 1
                    block = np.clip(np.rint(idctn(zz[_UNZIG].reshape(8, 8), norm="ortho") + 128.0), 0, 255)
                    y0 = (my * comp.v + by) * 8
                    x0 = (mx * comp.h + bx) * 8
                    plane[y0:y0 + 8, x0:x0 + 8] = block
    full = []
    for plane, _, comp in planes:
        up = np.repeat(np.repeat(plane, vmax // comp.v, axis=0), hmax // comp.h, axis=1)
        full.append(up[:frame.height, :frame.width])
    if len(full) == 1:
        out = full[0][..., None].repeat(3, axis=2)
    else:
        y, cb, cr = full[0], full[1] - 128.0, full[2] - 128.0
        out = np.stack(
            [y + 1.402 * cr, y - 0.344136 * cb - 0.714136 * cr, y + 1.772 * cb], axis=-1
        )
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)
