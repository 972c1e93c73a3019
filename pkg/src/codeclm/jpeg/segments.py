"""Lossless marker-level partition of a JPEG file."""
from __future__ import annotations

import struct
from dataclasses import dataclass

from ..errors import MalformedStream

SOI = 0xD8
EOI = 0xD9
SOS = 0xDA
DQT = 0xDB
DHT = 0xC4
DRI = 0xDD
SOF0 = 0xC0
COM = 0xFE
RST0 = 0xD0

MARKER_NAMES = {
    0xC0: "SOF0", 0xC1: "SOF1", 0xC2: "SOF2", 0xC3: "SOF3",
    0xC5: "SOF5", 0xC6: "SOF6", 0xC7: "SOF7", 0xC8: "JPG",
    0xC9: "SOF9", 0xCA: "SOF10", 0xCB: "SOF11", 0xCD: "SOF13",
    0xCE: "SOF14", 0xCF: "SOF15", 0xC4: "DHT", 0xCC: "DAC",
    0xD8: "SOI", 0xD9: "EOI", 0xDA: "SOS", 0xDB: "DQT",
    0xDC: "DNL", 0xDD: "DRI", 0xDE: "DHP", 0xDF: "EXP",
    0xFE: "COM", 0x01: "TEM",
}
MARKER_NAMES.update({0xD0 + i: f"RST{i}" for i in range(8)})
MARKER_NAMES.update({0xE0 + i: f"APP{i}" for i in range(16)})

# Markers that carry no length field.
STANDALONE = {SOI, EOI, 0x01} | {RST0 + i for i in range(8)}


def is_rst(code: int) -> bool:
    return RST0 <= code <= RST0 + 7


def classify(code: int) -> str:
    """Map a marker code to its segment kind (APPn/RSTn collapse to one kind)."""
    if 0xE0 <= code <= 0xEF:
        return "APPn"
    if is_rst(code):
        return "RSTn"
    return MARKER_NAMES.get(code, f"0x{code:02X}")


@dataclass(frozen=True)
class Segment:
    """One span of the file.

    ``raw`` holds the exact bytes (marker, length field and payload for marker
    segments; the stuffed bytes themselves for ``entropy_data``), so joining
    ``raw`` over all segments gives back the original file.
    """

    kind: str
    offset: int
    raw: bytes
    marker: int | None = None

    @property
    def name(self) -> str:
        if self.marker is None:
            return "entropy_data"
        return MARKER_NAMES.get(self.marker, f"0x{self.marker:02X}")

    @property
    def payload(self) -> bytes:
        if self.marker is None:
            return self.raw
        if self.marker in STANDALONE:
            return b""
        return self.raw.lstrip(b"\xff")[3:]

    def __len__(self) -> int:
        return len(self.raw)


def scan_entropy(data: bytes, pos: int) -> int:
    """Return the index of the first marker (0xFF not followed by 0x00) at or after pos."""
    n = len(data)
    while True:
        i = data.find(b"\xff", pos)
        if i < 0 or i + 1 >= n:
            return n
        nxt = data[i + 1]
        if nxt == 0x00:
            pos = i + 2
        elif nxt == 0xFF:
            # fill byte, belongs to the marker that follows
            return i
        else:
            return i


def parse_segments(data: bytes) -> list[Segment]:
    data = bytes(data)
    if len(data) < 2 or data[0] != 0xFF or data[1] != SOI:
        raise MalformedStream("stream does not begin with SOI")
    segments = [Segment("SOI", 0, data[:2], SOI)]
    pos = 2
    n = len(data)
    in_scan = False
    while True:
        if in_scan:
            end = scan_entropy(data, pos)
            if end > pos:
                segments.append(Segment("entropy_data", pos, data[pos:end]))
                pos = end
            if pos >= n:
                raise MalformedStream("entropy-coded data runs to end of stream without EOI")
        if pos + 2 > n:
            raise MalformedStream(f"stream truncated at offset {pos}: missing EOI")
        if data[pos] != 0xFF:
            raise MalformedStream(f"expected marker at offset {pos}, found 0x{data[pos]:02X}")
        start = pos
        while pos + 1 < n and data[pos + 1] == 0xFF:
            pos += 1  # fill bytes preceding a marker
        if pos + 1 >= n:
            raise MalformedStream(f"stream truncated at offset {start}: missing EOI")
        code = data[pos + 1]
        if code == 0x00:
            raise MalformedStream(f"stuffed byte outside entropy-coded data at offset {pos}")
        if code in STANDALONE:
            if code == SOI:
                raise MalformedStream(f"unexpected SOI at offset {pos}")
            if is_rst(code) and not in_scan:
                raise MalformedStream(f"restart marker outside a scan at offset {pos}")
            segments.append(Segment(classify(code), start, data[start:pos + 2], code))
            pos += 2
            if code == EOI:
                if pos != n:
                    raise MalformedStream(f"{n - pos} trailing bytes after EOI")
                return segments
            continue
        if pos + 4 > n:
            raise MalformedStream(f"truncated length field for marker 0x{code:02X} at offset {pos}")
        (length,) = struct.unpack(">H", data[pos + 2:pos + 4])
        if length < 2:
            raise MalformedStream(f"invalid segment length {length} at offset {pos}")
        end = pos + 2 + length
        if end > n:
            raise MalformedStream(
                f"{MARKER_NAMES.get(code, hex(code))} payload truncated: "
                f"declares {length - 2} bytes, {n - pos - 4} available"
            )
        segments.append(Segment(classify(code), start, data[start:end], code))
        pos = end
        in_scan = code == SOS


@dataclass(frozen=True)
class FrameComponent:
    cid: int
    h: int
    v: int
    tq: int


@dataclass(frozen=True)
class FrameHeader:
    precision: int
    height: int
    width: int
    components: tuple[FrameComponent, ...]

    @property
    def hmax(self) -> int:
        return max(c.h for c in self.components)

    @property
    def vmax(self) -> int:
        return max(c.v for c in self.components)

    @property
    def mcu_width(self) -> int:
        return 8 * self.hmax

    @property
    def mcu_height(self) -> int:
        return 8 * self.vmax

    @property
    def mcus_x(self) -> int:
        return -(-self.width // self.mcu_width)

    @property
    def mcus_y(self) -> int:
        return -(-self.height // self.mcu_height)

    @property
    def n_mcus(self) -> int:
        return self.mcus_x * self.mcus_y


def parse_frame(payload: bytes) -> FrameHeader:
    if len(payload) < 6:
        raise MalformedStream("SOF payload too short")
    p, h, w, nf = struct.unpack(">BHHB", payload[:6])
    if len(payload) != 6 + 3 * nf:
        raise MalformedStream(f"SOF declares {nf} components but payload has {len(payload)} bytes")
    comps = []
    for i in range(nf):
        cid, hv, tq = payload[6 + 3 * i:9 + 3 * i]
        comps.append(FrameComponent(cid, hv >> 4, hv & 15, tq))
    return FrameHeader(p, h, w, tuple(comps))


@dataclass(frozen=True)
class ScanHeader:
    components: tuple[tuple[int, int, int], ...]  # (component id, dc table, ac table)
    ss: int
    se: int
    ah: int
    al: int


def parse_scan(payload: bytes) -> ScanHeader:
    if len(payload) < 1:
        raise MalformedStream("SOS payload empty")
    ns = payload[0]
    if len(payload) != 1 + 2 * ns + 3:
        raise MalformedStream(f"SOS declares {ns} components but payload has {len(payload)} bytes")
    comps = tuple(
        (payload[1 + 2 * i], payload[2 + 2 * i] >> 4, payload[2 + 2 * i] & 15) for i in range(ns)
    )
    ss, se, a = payload[1 + 2 * ns:4 + 2 * ns]
    return ScanHeader(comps, ss, se, a >> 4, a & 15)


def parse_dqt(payload: bytes) -> dict[int, list[int]]:
    """Quantization tables keyed by id, entries in zigzag order."""
    tables = {}
    i = 0
    while i < len(payload):
        pq, tq = payload[i] >> 4, payload[i] & 15
        size = 128 if pq else 64
        body = payload[i + 1:i + 1 + size]
        if len(body) != size:
            raise MalformedStream("DQT table truncated")
        if pq:
            tables[tq] = list(struct.unpack(">64H", body))
        else:
            tables[tq] = list(body)
        i += 1 + size
    return tables


def parse_dri(payload: bytes) -> int:
    if len(payload) != 2:
        raise MalformedStream("DRI payload must be 2 bytes")
    return struct.unpack(">H", payload)[0]


def marker_segment(code: int, payload: bytes) -> bytes:
    return bytes([0xFF, code]) + struct.pack(">H", len(payload) + 2) + payload
