"""Baseline Huffman entropy coding: table parsing, MCU-level decoding, fill encoding.

The decoder here is deliberately strict. An interval of entropy-coded data is
accepted only if it decodes to exactly the expected number of MCUs, every
coefficient index stays inside the 8x8 block, and the bits left over in the
final byte are the all-ones padding that encoders emit before a marker.
"""
from __future__ import annotations

from dataclasses import dataclass

from ..errors import MalformedStream

ZIGZAG = [
    0, 1, 8, 16, 9, 2, 3, 10,
    17, 24, 32, 25, 18, 11, 4, 5,
    12, 19, 26, 33, 40, 48, 41, 34,
    27, 20, 13, 6, 7, 14, 21, 28,
    35, 42, 49, 56, 57, 50, 43, 36,
    29, 22, 15, 23, 30, 37, 44, 51,
    58, 59, 52, 45, 38, 31, 39, 46,
    53, 60, 61, 54, 47, 55, 62, 63,
]


class EntropyError(ValueError):
    """Entropy-coded data that does not form a valid interval."""


class HuffmanTable:
    """Canonical Huffman code built from DHT ``BITS``/``HUFFVAL`` lists."""

    def __init__(self, counts: list[int], symbols: list[int]):
        if len(counts) != 16 or sum(counts) != len(symbols):
            raise MalformedStream("DHT counts do not match symbol list")
        self.counts = list(counts)
        self.symbols = list(symbols)
        self.encode: dict[int, tuple[int, int]] = {}  # symbol -> (code, length)
        # 16-bit lookahead table: (symbol, length), length 0 for invalid codes
        self._lut_sym = [0] * 65536
        self._lut_len = [0] * 65536
        code = 0
        k = 0
        for length in range(1, 17):
            for _ in range(counts[length - 1]):
                sym = symbols[k]
                k += 1
                if code >= (1 << length):
                    raise MalformedStream("DHT overfull code space")
                self.encode.setdefault(sym, (code, length))
                lo = code << (16 - length)
                hi = lo + (1 << (16 - length))
                for i in range(lo, hi):
                    self._lut_sym[i] = sym
                    self._lut_len[i] = length
                code += 1
            code <<= 1

    def lookup(self, bits16: int) -> tuple[int, int]:
        return self._lut_sym[bits16], self._lut_len[bits16]


def parse_dht(payload: bytes) -> dict[tuple[int, int], HuffmanTable]:
    """Tables keyed by (class, id): class 0 = DC, 1 = AC."""
    out = {}
    i = 0
    while i < len(payload):
        if i + 17 > len(payload):
            raise MalformedStream("DHT header truncated")
        tc, th = payload[i] >> 4, payload[i] & 15
        counts = list(payload[i + 1:i + 17])
        n = sum(counts)
        symbols = list(payload[i + 17:i + 17 + n])
        if len(symbols) != n:
            raise MalformedStream("DHT symbols truncated")
        out[(tc, th)] = HuffmanTable(counts, symbols)
        i += 17 + n
    return out


def unstuff(data: bytes) -> bytes:
    """Remove 0x00 stuffing after 0xFF; any other byte after 0xFF is an error."""
    i = data.find(b"\xff")
    while i >= 0:
        if i + 1 >= len(data) or data[i + 1] != 0x00:
            raise EntropyError(f"unstuffed 0xFF at offset {i}")
        i = data.find(b"\xff", i + 2)
    return data.replace(b"\xff\x00", b"\xff")


def stuff(data: bytes) -> bytes:
    return data.replace(b"\xff", b"\xff\x00")


@dataclass(frozen=True)
class BlockPlan:
    """Entropy-coding layout of one component inside an MCU."""

    component: int  # index into the frame's component list
    n_blocks: int  # h * v
    dc: HuffmanTable
    ac: HuffmanTable


def _extend(v: int, s: int) -> int:
    return v - (1 << s) + 1 if v < (1 << (s - 1)) else v


class _Bits:
    __slots__ = ("value", "nbits", "pos")

    def __init__(self, data: bytes):
        self.value = int.from_bytes(data, "big") if data else 0
        self.nbits = 8 * len(data)
        self.pos = 0

    def peek16(self) -> int:
        shift = self.nbits - self.pos - 16
        if shift >= 0:
            return (self.value >> shift) & 0xFFFF
        # past the end: pad with ones so truncated codes fail on the length check
        return ((self.value << -shift) | ((1 << -shift) - 1)) & 0xFFFF

    def read(self, n: int) -> int:
        if n == 0:
            return 0
        if self.pos + n > self.nbits:
            raise EntropyError("entropy data ends inside a coefficient")
        self.pos += n
        return (self.value >> (self.nbits - self.pos)) & ((1 << n) - 1)

    def symbol(self, table: HuffmanTable) -> int:
        sym, length = table.lookup(self.peek16())
        if length == 0:
            raise EntropyError("invalid Huffman code")
        if self.pos + length > self.nbits:
            raise EntropyError("entropy data ends inside a Huffman code")
        self.pos += length
        return sym


def decode_interval(data: bytes, plans: list[BlockPlan], n_mcus: int) -> list[list[list[int]]]:
    """Decode one restart interval of stuffed entropy bytes.

    Returns ``n_mcus`` MCUs, each a list of blocks in scan order, each block a
    list of 64 quantized coefficients in zigzag order (DC already undifferenced).
    Raises EntropyError if the bytes are not exactly ``n_mcus`` valid MCUs.
    """
    bits = _Bits(unstuff(data))
    preds = [0] * len(plans)
    mcus = []
    for _ in range(n_mcus):
        blocks = []
        for pi, plan in enumerate(plans):
            for _ in range(plan.n_blocks):
                coef = [0] * 64
                s = bits.symbol(plan.dc)
                if s > 11:
                    raise EntropyError(f"DC magnitude category {s} out of range")
                diff = _extend(bits.read(s), s) if s else 0
                preds[pi] += diff
                coef[0] = preds[pi]
                k = 1
                while k < 64:
                    rs = bits.symbol(plan.ac)
                    r, s = rs >> 4, rs & 15
                    if s == 0:
                        if r == 15:
                            k += 16
                            if k > 64:
                                raise EntropyError("zero run past end of block")
                            continue
                        if r != 0:
                            raise EntropyError(f"invalid AC symbol 0x{rs:02X}")
                        break  # EOB
                    if s > 10:
                        raise EntropyError(f"AC magnitude category {s} out of range")
                    k += r
                    if k > 63:
                        raise EntropyError("coefficient index past end of block")
                    coef[k] = _extend(bits.read(s), s)
                    k += 1
                blocks.append(coef)
        mcus.append(blocks)
    rest = bits.nbits - bits.pos
    if rest >= 8:
        raise EntropyError(f"{rest // 8} extraneous bytes after last MCU of interval")
    if rest and (bits.value & ((1 << rest) - 1)) != (1 << rest) - 1:
        raise EntropyError("padding bits before marker are not all ones")
    return mcus


class _BitWriter:
    def __init__(self):
        self.acc = 0
        self.n = 0

    def write(self, code: int, length: int) -> None:
        self.acc = (self.acc << length) | code
        self.n += length

    def getvalue(self) -> bytes:
        pad = (-self.n) % 8
        acc = (self.acc << pad) | ((1 << pad) - 1)
        return stuff(acc.to_bytes((self.n + pad) // 8, "big")) if self.n else b""


def encode_flat_interval(plans: list[BlockPlan], n_mcus: int) -> bytes:
    """Entropy bytes for ``n_mcus`` MCUs whose every coefficient is zero (mid-gray)."""
    w = _BitWriter()
    for _ in range(n_mcus):
        for plan in plans:
            dc = plan.dc.encode.get(0)
            eob = plan.ac.encode.get(0x00)
            if dc is None or eob is None:
                raise MalformedStream("Huffman tables cannot express an all-zero block")
            for _ in range(plan.n_blocks):
                w.write(*dc)
                w.write(*eob)
    return w.getvalue()
