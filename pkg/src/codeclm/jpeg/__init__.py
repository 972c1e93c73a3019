"""Baseline-sequential JPEG streams: encoding, parsing, canonical form, restoration."""
from .profile import CodecProfile, encode_image, quality_scale, scaled_table
from .segments import Segment, parse_segments
from .stream import (
    CanonicalStream,
    RestoreResult,
    TableSet,
    canonicalize,
    count_mcus,
    decode_coefficients,
    default_tables,
    derive_tables,
    prefix_at_ratio,
    restore,
    restore_report,
)

__all__ = [
    "CanonicalStream",
    "CodecProfile",
    "RestoreResult",
    "Segment",
    "TableSet",
    "canonicalize",
    "count_mcus",
    "decode_coefficients",
    "default_tables",
    "derive_tables",
    "encode_image",
    "parse_segments",
    "prefix_at_ratio",
    "quality_scale",
    "restore",
    "restore_report",
    "scaled_table",
]
