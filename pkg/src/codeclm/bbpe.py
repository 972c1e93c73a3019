"""Byte-level BPE over canonical JPEG streams.

Ids 0-255 are raw bytes, 256/257 are BOS/EOS, and merge ``i`` creates id
``258 + i``. Encoding replays the merges in training order over the whole
byte string, which is exactly what training did to the corpus, so a corpus
document tokenizes the same way at train and inference time.
"""
from __future__ import annotations

import functools
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CorpusTooSmall, InvalidTokenId

log = logging.getLogger(__name__)

N_BYTES = 256
BOS = 256
EOS = 257
FIRST_MERGE = 258
DEFAULT_VOCAB = 322  # 320 byte-level entries incl. the 256 bytes, plus BOS/EOS
VOCAB_FORMAT = "codeclm-bpe"
VOCAB_VERSION = 1


@dataclass(frozen=True)
class BpeVocab:
    merges: tuple[tuple[int, int], ...] = ()
    profile_hash: str = ""

    bos = BOS
    eos = EOS

    @property
    def size(self) -> int:
        return N_BYTES + 2 + len(self.merges)

    @functools.cached_property
    def expansions(self) -> list[bytes]:
        table = [bytes([i]) for i in range(N_BYTES)] + [b"", b""]
        for left, right in self.merges:
            table.append(table[left] + table[right])
        return table

    @functools.cached_property
    def byte_lengths(self) -> np.ndarray:
        """Bytes each token expands to (0 for specials)."""
        return np.array([len(e) for e in self.expansions], dtype=np.int64)

    @functools.cached_property
    def hash(self) -> str:
        blob = json.dumps({"merges": [list(m) for m in self.merges], "bos": BOS, "eos": EOS})
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def __post_init__(self):
        for i, (left, right) in enumerate(self.merges):
            new = FIRST_MERGE + i
            for t in (left, right):
                if not (0 <= t < new) or t in (BOS, EOS):
                    raise InvalidTokenId(f"merge {i} references invalid id {t}")

    def to_dict(self) -> dict:
        return {
            "format": VOCAB_FORMAT,
            "version": VOCAB_VERSION,
            "size": self.size,
            "specials": {"bos": BOS, "eos": EOS},
            "profile_hash": self.profile_hash,
            "vocab_hash": self.hash,
            "merges": [
                {"id": FIRST_MERGE + i, "pair": [l, r], "bytes": self.expansions[FIRST_MERGE + i].hex()}
                for i, (l, r) in enumerate(self.merges)
            ],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> BpeVocab:
        d = json.loads(Path(path).read_text())
        if d.get("format") != VOCAB_FORMAT:
            raise ValueError(f"{path}: not a {VOCAB_FORMAT} vocabulary file")
        if d.get("version") != VOCAB_VERSION:
            raise ValueError(f"{path}: unsupported vocabulary version {d.get('version')}")
        if d["specials"] != {"bos": BOS, "eos": EOS}:
            raise ValueError(f"{path}: unexpected special token ids {d['specials']}")
        merges = []
        for i, m in enumerate(d["merges"]):
            if m["id"] != FIRST_MERGE + i:
                raise ValueError(f"{path}: merge ids are not consecutive at entry {i}")
            merges.append(tuple(m["pair"]))
        vocab = cls(tuple(merges), d.get("profile_hash", ""))
        if d.get("vocab_hash") and d["vocab_hash"] != vocab.hash:
            raise ValueError(f"{path}: vocab hash mismatch (file edited?)")
        return vocab


def _merge_positions(a: np.ndarray, left: int, right: int) -> np.ndarray:
    """Start positions of non-overlapping (left, right) occurrences, greedy left to right."""
    pos = np.flatnonzero((a[:-1] == left) & (a[1:] == right))
    if left != right or len(pos) < 2:
        return pos
    # runs like "aaaa": keep every other match starting from each run's head
    new_run = np.empty(len(pos), dtype=bool)
    new_run[0] = True
    new_run[1:] = np.diff(pos) != 1
    run_start = np.maximum.accumulate(np.where(new_run, np.arange(len(pos)), 0))
    return pos[(np.arange(len(pos)) - run_start) % 2 == 0]


def _apply_merge(a: np.ndarray, left: int, right: int, new: int) -> np.ndarray:
    pos = _merge_positions(a, left, right)
    if len(pos) == 0:
        return a
    a[pos] = new
    return np.delete(a, pos + 1)


def pair_counts(a: np.ndarray, width: int) -> np.ndarray:
    """Adjacent pair frequencies (overlapping), indexed by left * width + right.

    Negative entries are document separators and never pair.
    """
    left, right = a[:-1], a[1:]
    ok = (left >= 0) & (right >= 0)
    return np.bincount(left[ok] * width + right[ok], minlength=width * width)


def train_bpe(
    corpus: Iterable[bytes],
    target_vocab: int = DEFAULT_VOCAB,
    min_count: int = 2,
    profile_hash: str = "",
) -> BpeVocab:
    """Greedy BPE: repeatedly merge the most frequent adjacent pair.

    Ties go to the lexicographically smallest (left, right). Stops at
    ``target_vocab`` or when the best pair occurs fewer than ``min_count`` times.
    """
    if target_vocab < FIRST_MERGE:
        raise ValueError(f"target_vocab must be >= {FIRST_MERGE}, got {target_vocab}")
    parts = []
    for doc in corpus:
        parts.append(np.frombuffer(bytes(doc), dtype=np.uint8).astype(np.int64))
        parts.append(np.array([-1], dtype=np.int64))
    if not parts:
        raise CorpusTooSmall("BPE corpus is empty")
    a = np.concatenate(parts)
    merges: list[tuple[int, int]] = []
    n_merges = target_vocab - FIRST_MERGE
    for i in range(n_merges):
        counts = pair_counts(a, target_vocab)
        best = int(np.argmax(counts))  # first max = smallest (left, right)
        if counts[best] < min_count:
            if not merges:
                raise CorpusTooSmall(
                    f"no byte pair occurs {min_count} or more times; cannot learn any merge"
                )
            log.info("stopping after %d merges: best pair count %d < %d", i, counts[best], min_count)
            break
        left, right = divmod(best, target_vocab)
        merges.append((left, right))
        a = _apply_merge(a, left, right, FIRST_MERGE + i)
    return BpeVocab(tuple(merges), profile_hash)


def encode(data: bytes, vocab: BpeVocab, add_bos: bool = False, add_eos: bool = False) -> list[int]:
    a = np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)
    for i, (left, right) in enumerate(vocab.merges):
        if len(a) < 2:
            break
        a = _apply_merge(a, left, right, FIRST_MERGE + i)
    ids = a.tolist()
    if add_bos:
        ids.insert(0, BOS)
    if add_eos:
        ids.append(EOS)
    return ids


def decode(ids: Sequence[int], vocab: BpeVocab) -> bytes:
    """Concatenated byte expansions; BOS/EOS contribute nothing."""
    table = vocab.expansions
    out = []
    for t in ids:
        t = int(t)
        if not 0 <= t < len(table):
            raise InvalidTokenId(f"token id {t} outside vocabulary of size {len(table)}")
        out.append(table[t])
    return b"".join(out)


def check_sequence(ids: Sequence[int], vocab: BpeVocab) -> None:
    """Raise InvalidTokenId unless ids form a well-formed token sequence."""
    for i, t in enumerate(ids):
        if not 0 <= t < vocab.size:
            raise InvalidTokenId(f"token id {t} at position {i} outside vocabulary")
        if t == BOS and i != 0:
            raise InvalidTokenId(f"BOS at position {i}")
        if t == EOS and i != len(ids) - 1:
            raise InvalidTokenId(f"EOS at position {i} is not last")


def token_boundary(ids: Sequence[int], vocab: BpeVocab, offset: int) -> int:
    """Number of leading tokens whose bytes end at or before ``offset``."""
    ends = np.cumsum(vocab.byte_lengths[np.asarray(ids, dtype=np.int64)]) if len(ids) else np.array([])
    return int(np.searchsorted(ends, offset, side="right"))


def encode_prompt(data: bytes, offset: int, vocab: BpeVocab) -> list[int]:
    """BOS plus a tokenization of exactly ``data[:offset]``.

    The prefix is encoded on its own, so the final token cannot straddle the
    cut even when the full stream's tokenization would merge across it.
    """
    return encode(bytes(data[:offset]), vocab, add_bos=True)
