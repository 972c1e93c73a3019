"""Canonical (table-stripped) streams, table reinsertion, and salvage of generated bytes."""
from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ..errors import MalformedStream, UnrecoverableStream, UnsupportedStream
from . import segments as sg
from .huffman import BlockPlan, EntropyError, HuffmanTable, decode_interval, encode_flat_interval, parse_dht
from .profile import CodecProfile, encode_image, match_quality

log = logging.getLogger(__name__)

SIDECAR_MAGIC = b"CLMTBL01"
# Segments that precede the frame header in libjpeg output; the rest go after it.
_PRE_FRAME = {"APPn", "COM", "DQT"}
_TABLE_KINDS = {"APPn", "COM", "DQT", "DHT", "DRI"}


@dataclass(frozen=True)
class TableSet:
    """The segments stripped by :func:`canonicalize`, in their original order."""

    segments: tuple[bytes, ...]

    @functools.cached_property
    def parsed(self) -> list[sg.Segment]:
        return sg.parse_segments(b"\xff\xd8" + b"".join(self.segments) + b"\xff\xd9")[1:-1]

    @property
    def pre_frame(self) -> bytes:
        return b"".join(s.raw for s in self.parsed if s.kind in _PRE_FRAME)

    @property
    def post_frame(self) -> bytes:
        return b"".join(s.raw for s in self.parsed if s.kind not in _PRE_FRAME)

    @functools.cached_property
    def quant(self) -> dict[int, list[int]]:
        out = {}
        for s in self.parsed:
            if s.kind == "DQT":
                out.update(sg.parse_dqt(s.payload))
        return out

    @functools.cached_property
    def huffman(self) -> dict[tuple[int, int], HuffmanTable]:
        out = {}
        for s in self.parsed:
            if s.kind == "DHT":
                out.update(parse_dht(s.payload))
        return out

    @property
    def restart_interval(self) -> int:
        for s in self.parsed:
            if s.kind == "DRI":
                return sg.parse_dri(s.payload)
        return 0

    def to_bytes(self, profile: CodecProfile) -> bytes:
        return SIDECAR_MAGIC + profile.digest() + b"".join(self.segments)

    @classmethod
    def from_bytes(cls, blob: bytes, profile: CodecProfile | None = None) -> TableSet:
        if len(blob) < 16 or blob[:8] != SIDECAR_MAGIC:
            raise MalformedStream("not a table sidecar (bad magic)")
        if profile is not None and blob[8:16] != profile.digest():
            raise UnsupportedStream(
                f"table sidecar was written for profile {blob[8:16].hex()}, expected {profile.hash}"
            )
        body = blob[16:]
        segs = sg.parse_segments(b"\xff\xd8" + body + b"\xff\xd9")[1:-1]
        return cls(tuple(s.raw for s in segs))

    def save(self, path, profile: CodecProfile) -> None:
        Path(path).write_bytes(self.to_bytes(profile))

    @classmethod
    def load(cls, path, profile: CodecProfile | None = None) -> TableSet:
        return cls.from_bytes(Path(path).read_bytes(), profile)


@dataclass(frozen=True)
class CanonicalStream:
    """SOI, frame header, scan header, entropy data with restart markers, EOI."""

    data: bytes
    mcu_offsets: tuple[int, ...]
    width: int
    height: int
    profile: CodecProfile = field(default_factory=CodecProfile)

    @property
    def n_mcus(self) -> int:
        return math.ceil(self.width / 16) * math.ceil(self.height / 16)

    def __len__(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class ScanLayout:
    frame: sg.FrameHeader
    frame_raw: bytes
    scan_raw: bytes
    plans: tuple[BlockPlan, ...]
    restart_interval: int
    entropy_start: int  # offset of first entropy byte in the source bytes

    @property
    def n_intervals(self) -> int:
        return math.ceil(self.frame.n_mcus / self.restart_interval)

    def interval_mcus(self, idx: int) -> int:
        return min(self.restart_interval, self.frame.n_mcus - idx * self.restart_interval)


def _check_frame(frame: sg.FrameHeader) -> None:
    if frame.precision != 8:
        raise UnsupportedStream(f"{frame.precision}-bit samples are not supported")
    if frame.width == 0 or frame.height == 0:
        raise UnsupportedStream("frame header declares an empty image (DNL not supported)")
    if len(frame.components) != 3:
        raise UnsupportedStream(f"expected 3 components, found {len(frame.components)}")
    hv = [(c.h, c.v) for c in frame.components]
    if hv != [(2, 2), (1, 1), (1, 1)]:
        raise UnsupportedStream(f"sampling factors {hv} are not 4:2:0")


def _layout(frame_seg: sg.Segment, scan_seg: sg.Segment, tables: TableSet, restart_interval: int) -> ScanLayout:
    frame = sg.parse_frame(frame_seg.payload)
    _check_frame(frame)
    scan = sg.parse_scan(scan_seg.payload)
    if (scan.ss, scan.se, scan.ah, scan.al) != (0, 63, 0, 0):
        raise UnsupportedStream("scan is not baseline sequential")
    ids = [c.cid for c in frame.components]
    if [c[0] for c in scan.components] != ids:
        raise UnsupportedStream("expected a single interleaved scan over all components")
    plans = []
    for i, (comp, (_, td, ta)) in enumerate(zip(frame.components, scan.components)):
        dc, ac = tables.huffman.get((0, td)), tables.huffman.get((1, ta))
        if dc is None or ac is None:
            raise MalformedStream(f"scan references undefined Huffman table for component {comp.cid}")
        if comp.tq not in tables.quant:
            raise MalformedStream(f"frame references undefined quantization table {comp.tq}")
        plans.append(BlockPlan(i, comp.h * comp.v, dc, ac))
    if restart_interval < 1:
        raise UnsupportedStream("stream has no restart interval (DRI) set")
    return ScanLayout(frame, frame_seg.raw, scan_seg.raw, tuple(plans), restart_interval, scan_seg.offset + len(scan_seg.raw))


def canonicalize(data: bytes) -> tuple[CanonicalStream, TableSet]:
    segs = sg.parse_segments(data)
    removed, kept = [], []
    frame_seg = scan_seg = None
    for s in segs:
        if s.kind.startswith("SOF") and s.kind != "SOF0":
            mode = "progressive" if s.kind in ("SOF2", "SOF6", "SOF10", "SOF14") else "non-baseline"
            if s.kind in ("SOF9", "SOF10", "SOF11", "SOF13", "SOF14", "SOF15"):
                mode = "arithmetic-coded"
            raise UnsupportedStream(f"{s.kind} ({mode}) streams are not supported")
        if s.kind == "DAC":
            raise UnsupportedStream("arithmetic-coded streams are not supported")
        if s.kind in _TABLE_KINDS:
            removed.append(s.raw)
            continue
        if s.kind == "SOF0":
            frame_seg = s
        elif s.kind == "SOS":
            if scan_seg is not None:
                raise UnsupportedStream("multi-scan streams are not supported")
            scan_seg = s
        kept.append(s)
    if frame_seg is None or scan_seg is None:
        raise MalformedStream("stream has no SOF0 frame header or no SOS scan header")
    if frame_seg.offset > scan_seg.offset:
        raise MalformedStream("scan header precedes frame header")
    tables = TableSet(tuple(removed))
    layout = _layout(frame_seg, scan_seg, tables, tables.restart_interval)
    frame = layout.frame

    out = bytearray()
    offsets = []
    expect = 0
    for s in kept:
        if s.kind == "RSTn":
            if s.marker != sg.RST0 + expect % 8:
                raise MalformedStream(f"restart marker {s.name} out of sequence (expected RST{expect % 8})")
            expect += 1
            offsets.append(len(out))
            out += s.raw[-2:]
        else:
            out += s.raw
    if len(offsets) != layout.n_intervals - 1:
        raise MalformedStream(
            f"found {len(offsets)} restart markers, expected {layout.n_intervals - 1} "
            f"for {frame.n_mcus} MCUs at interval {layout.restart_interval}"
        )
    luma = tables.quant.get(frame.components[0].tq)
    chroma = tables.quant.get(frame.components[1].tq)
    quality = match_quality(luma, chroma)
    if quality is None:
        raise UnsupportedStream("quantization tables are not a standard quality scaling")
    profile = CodecProfile(quality=quality, restart_interval_mcus=layout.restart_interval)
    stream = CanonicalStream(bytes(out), tuple(offsets), frame.width, frame.height, profile)
    return stream, tables


@dataclass(frozen=True)
class RestoreResult:
    data: bytes
    status: str  # "clean" or "salvaged"
    valid_mcus: int
    total_mcus: int
    reason: str = ""

    @property
    def clean(self) -> bool:
        return self.status == "clean"


def _read_header(data: bytes, tables: TableSet) -> tuple[ScanLayout, list[str]]:
    """Parse SOI / SOF0 / SOS from a canonical or generated byte string."""
    notes = []
    if len(data) < 2 or data[:2] != b"\xff\xd8":
        raise UnrecoverableStream("stream does not begin with SOI")
    pos = 2
    frame_seg = scan_seg = None
    while scan_seg is None:
        if pos + 4 > len(data) or data[pos] != 0xFF:
            raise UnrecoverableStream(f"no valid scan header (stopped at offset {pos})")
        code = data[pos + 1]
        if code in sg.STANDALONE or code == 0x00 or code == 0xFF:
            raise UnrecoverableStream(f"unexpected marker 0x{code:02X} in header at offset {pos}")
        length = int.from_bytes(data[pos + 2:pos + 4], "big")
        end = pos + 2 + length
        if length < 2 or end > len(data):
            raise UnrecoverableStream(f"header segment at offset {pos} truncated")
        seg = sg.Segment(sg.classify(code), pos, data[pos:end], code)
        if code == sg.SOF0 and frame_seg is None:
            frame_seg = seg
        elif code == sg.SOS and frame_seg is not None:
            scan_seg = seg
        else:
            notes.append(f"dropped {seg.name} segment at offset {pos}")
        pos = end
    try:
        layout = _layout(frame_seg, scan_seg, tables, tables.restart_interval)
    except (MalformedStream, UnsupportedStream) as e:
        raise UnrecoverableStream(f"unusable header: {e}") from e
    if layout.frame.n_mcus > 1 << 16:
        raise UnrecoverableStream(f"header declares an implausible {layout.frame.width}x{layout.frame.height} image")
    return layout, notes


def walk_intervals(data: bytes, layout: ScanLayout) -> tuple[list[tuple[int, int]], str, int]:
    """Validate entropy intervals from ``layout.entropy_start``.

    Returns (valid interval byte spans, stop reason, end offset of the last valid
    interval's terminating marker). The reason is "" when the scan is complete
    and terminated by EOI with nothing following.
    """
    spans = []
    pos = layout.entropy_start
    for idx in range(layout.n_intervals):
        end = sg.scan_entropy(data, pos)
        try:
            decode_interval(data[pos:end], list(layout.plans), layout.interval_mcus(idx))
        except EntropyError as e:
            return spans, f"interval {idx}: {e}", pos
        spans.append((pos, end))
        marker = data[end + 1] if end + 1 < len(data) else None
        if idx == layout.n_intervals - 1:
            if marker != sg.EOI:
                return spans, "missing EOI after final interval", end
            if end + 2 != len(data):
                return spans, f"{len(data) - end - 2} bytes after EOI", end + 2
            return spans, "", end + 2
        if marker != sg.RST0 + idx % 8:
            found = "end of data" if marker is None else f"marker 0x{marker:02X}"
            return spans, f"after interval {idx}: expected RST{idx % 8}, found {found}", end
        pos = end + 2
    return spans, "", pos


def count_mcus(data: bytes, tables: TableSet) -> int:
    """Count MCUs by Huffman-decoding the scan (independent of marker counting)."""
    layout, _ = _read_header(data, tables)
    spans, reason, _ = walk_intervals(data, layout)
    if reason:
        raise MalformedStream(reason)
    return sum(layout.interval_mcus(i) for i in range(len(spans)))


def decode_coefficients(data: bytes, tables: TableSet) -> tuple[sg.FrameHeader, list]:
    """All MCUs of a clean canonical or full stream as zigzag coefficient blocks."""
    if _has_tables(data):
        stream, tables = canonicalize(data)
        data = stream.data
    layout, _ = _read_header(data, tables)
    spans, reason, _ = walk_intervals(data, layout)
    if reason:
        raise MalformedStream(reason)
    mcus = []
    for i, (a, b) in enumerate(spans):
        mcus.extend(decode_interval(data[a:b], list(layout.plans), layout.interval_mcus(i)))
    return layout.frame, mcus


def _has_tables(data: bytes) -> bool:
    try:
        return any(s.kind in _TABLE_KINDS for s in sg.parse_segments(data)[:16])
    except MalformedStream:
        return False


def restore_report(stream: CanonicalStream | bytes, tables: TableSet) -> RestoreResult:
    """Reinsert tables; salvage the longest valid MCU prefix of malformed input."""
    data = stream.data if isinstance(stream, CanonicalStream) else bytes(stream)
    if not data:
        raise UnrecoverableStream("empty stream")
    layout, notes = _read_header(data, tables)
    spans, reason, _ = walk_intervals(data, layout)
    head = b"\xff\xd8" + tables.pre_frame + layout.frame_raw + tables.post_frame + layout.scan_raw
    total = layout.frame.n_mcus
    if not reason and not notes:
        body = data[layout.entropy_start:]
        return RestoreResult(head + body, "clean", total, total)
    if not spans:
        raise UnrecoverableStream(f"no decodable MCU: {reason or '; '.join(notes)}")
    out = bytearray(head)
    for i, (a, b) in enumerate(spans):
        out += data[a:b]
        if i < layout.n_intervals - 1:
            out += bytes([0xFF, sg.RST0 + i % 8])
    plans = list(layout.plans)
    for i in range(len(spans), layout.n_intervals):
        out += encode_flat_interval(plans, layout.interval_mcus(i))
        if i < layout.n_intervals - 1:
            out += bytes([0xFF, sg.RST0 + i % 8])
    out += b"\xff\xd9"
    valid = sum(layout.interval_mcus(i) for i in range(len(spans)))
    why = "; ".join(notes + ([reason] if reason else []))
    return RestoreResult(bytes(out), "salvaged", valid, total, why)


def restore(stream: CanonicalStream | bytes, tables: TableSet) -> bytes:
    return restore_report(stream, tables).data


def prefix_at_ratio(stream: CanonicalStream, r_prompt: float) -> int:
    """Byte offset just past the restart marker that closes MCU floor(r * N).

    The result always lands on a restart-interval boundary; 0 means no MCU is
    complete (unconditional), ``len(stream.data)`` means the whole stream.
    """
    r = min(max(float(r_prompt), 0.0), 1.0)
    n = stream.n_mcus
    k = math.floor(r * n + 1e-9)
    if k >= n:
        return len(stream.data)
    closed = k // stream.profile.restart_interval_mcus
    if closed == 0:
        return 0
    return stream.mcu_offsets[closed - 1] + 2


@functools.lru_cache(maxsize=8)
def derive_tables(profile: CodecProfile = CodecProfile()) -> TableSet:
    """Tables the encoder emits under ``profile`` (identical for every image)."""
    _, tables = canonicalize(encode_image(np.zeros((16, 16, 3), np.uint8), profile))
    return tables


def _sidecar_name(profile: CodecProfile) -> str:
    return f"tables-q{profile.quality}-420-r{profile.restart_interval_mcus}.bin"


def default_tables(profile: CodecProfile = CodecProfile()) -> TableSet:
    """The versioned sidecar shipped for the blessed profile, else derived tables."""
    ref = resources.files("codeclm.data").joinpath(_sidecar_name(profile))
    if ref.is_file():
        return TableSet.from_bytes(ref.read_bytes(), profile)
    log.warning("no shipped table sidecar for %s; deriving from encoder (untested path)", profile)
    return derive_tables(profile)
