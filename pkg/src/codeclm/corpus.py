"""Token corpus: BOS/EOS-wrapped documents concatenated and cut into fixed-length chunks."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import bbpe
from .errors import CodecLMError, ConfigError, EmptyCorpus, VocabMismatch
from .images import list_images, load_image
from .jpeg import CodecProfile, canonicalize, encode_image

log = logging.getLogger(__name__)

IGNORE = -1  # target value excluded from the loss
STORE_FORMAT = "codeclm-store"
DEFAULT_CONTEXT = 1024


@dataclass
class TokenStore:
    tokens: np.ndarray
    doc_offsets: np.ndarray  # len n_docs + 1; doc i is tokens[doc_offsets[i]:doc_offsets[i+1]]
    vocab_hash: str
    profile_hash: str
    context_len: int = DEFAULT_CONTEXT
    names: list[str] = field(default_factory=list)
    vocab_size: int = bbpe.DEFAULT_VOCAB

    @property
    def n_docs(self) -> int:
        return len(self.doc_offsets) - 1

    @property
    def doc_lengths(self) -> np.ndarray:
        return np.diff(self.doc_offsets)

    def document(self, i: int) -> np.ndarray:
        return self.tokens[self.doc_offsets[i]:self.doc_offsets[i + 1]]

    @property
    def n_chunks(self) -> int:
        return len(self.tokens) // self.context_len

    def chunk(self, i: int) -> np.ndarray:
        L = self.context_len
        if not 0 <= i < self.n_chunks:
            raise IndexError(f"chunk {i} out of range ({self.n_chunks} chunks)")
        return self.tokens[i * L:(i + 1) * L]

    def rechunk(self, context_len: int) -> TokenStore:
        return TokenStore(self.tokens, self.doc_offsets, self.vocab_hash, self.profile_hash,
                          context_len, list(self.names), self.vocab_size)

    def manifest(self) -> dict:
        lengths = self.doc_lengths
        counts, edges = np.histogram(lengths, bins=10) if len(lengths) else (np.array([]), np.array([]))
        return {
            "format": STORE_FORMAT,
            "version": 1,
            "image_count": int(self.n_docs),
            "token_count": int(len(self.tokens)),
            "mean_doc_length": float(lengths.mean()) if len(lengths) else 0.0,
            "median_doc_length": float(np.median(lengths)) if len(lengths) else 0.0,
            "doc_length_histogram": {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts]},
            "vocab_hash": self.vocab_hash,
            "profile_hash": self.profile_hash,
            "vocab_size": int(self.vocab_size),
            "context_len": int(self.context_len),
            "n_chunks": int(self.n_chunks),
            "token_dtype": _dtype_for(self.vocab_size).str,
            "doc_offsets": [int(x) for x in self.doc_offsets],
            "names": list(self.names),
        }

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.tokens.astype(_dtype_for(self.vocab_size)).tofile(d / "tokens.bin")
        (d / "manifest.json").write_text(json.dumps(self.manifest(), indent=1) + "\n")

    @classmethod
    def load(cls, directory, context_len: int | None = None) -> TokenStore:
        d = Path(directory)
        m = json.loads((d / "manifest.json").read_text())
        if m.get("format") != STORE_FORMAT:
            raise CodecLMError(f"{d}: not a token store")
        tokens = np.fromfile(d / "tokens.bin", dtype=np.dtype(m["token_dtype"])).astype(np.int64)
        if len(tokens) != m["token_count"]:
            raise CodecLMError(f"{d}: tokens.bin holds {len(tokens)} ids, manifest says {m['token_count']}")
        return cls(tokens, np.asarray(m["doc_offsets"], dtype=np.int64), m["vocab_hash"], m["profile_hash"],
                   context_len or m["context_len"], m["names"], m["vocab_size"])


def _dtype_for(vocab_size: int) -> np.dtype:
    return np.dtype("u1") if vocab_size <= 256 else np.dtype("<u2")


def image_to_stream(path, profile: CodecProfile) -> bytes:
    """Canonical bytes for an image file (JPEGs are canonicalized as-is)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] != b"\xff\xd8":
        raw = encode_image(load_image(path), profile)
    stream, _ = canonicalize(raw)
    return stream.data


def store_from_streams(
    streams: Sequence[bytes],
    vocab: bbpe.BpeVocab,
    profile: CodecProfile,
    context_len: int = DEFAULT_CONTEXT,
    names: Sequence[str] | None = None,
) -> TokenStore:
    if not streams:
        raise EmptyCorpus("corpus has no documents")
    docs = [np.asarray(bbpe.encode(s, vocab, add_bos=True, add_eos=True), dtype=np.int64) for s in streams]
    offsets = np.zeros(len(docs) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(d) for d in docs])
    store = TokenStore(np.concatenate(docs), offsets, vocab.hash, profile.hash, context_len,
                       list(names or [str(i) for i in range(len(docs))]), vocab.size)
    return store


def build_corpus(
    image_dir,
    profile: CodecProfile,
    vocab: bbpe.BpeVocab,
    context_len: int = DEFAULT_CONTEXT,
    threads: int = 1,
) -> TokenStore:
    paths = list_images(image_dir)
    if not paths:
        raise EmptyCorpus(f"no images found in {image_dir}")

    def one(path):
        try:
            return image_to_stream(path, profile)
        except CodecLMError as e:
            raise type(e)(f"{path.name}: {e}") from e

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            streams = list(pool.map(one, paths))  # map keeps filename order
    else:
        streams = [one(p) for p in paths]
    store = store_from_streams(streams, vocab, profile, context_len, [p.name for p in paths])
    m = store.manifest()
    log.info("built corpus: %d images, %d tokens, mean doc length %.1f", m["image_count"],
             m["token_count"], m["mean_doc_length"])
    log.info("doc length histogram: %s", m["doc_length_histogram"])
    return store


def check_vocab(store: TokenStore, vocab: bbpe.BpeVocab) -> None:
    if store.vocab_hash != vocab.hash:
        raise VocabMismatch(f"store was built with vocab {store.vocab_hash}, got {vocab.hash}")


@dataclass
class Batch:
    inputs: np.ndarray  # (B, L)
    targets: np.ndarray  # (B, L); targets[:, t] = inputs[:, t + 1], last column IGNORE


def make_batch(chunks: Sequence[np.ndarray]) -> Batch:
    inputs = np.stack(chunks).astype(np.int64)
    targets = np.full_like(inputs, IGNORE)
    targets[:, :-1] = inputs[:, 1:]
    return Batch(inputs, targets)


def epoch_order(n_chunks: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n_chunks)


def batches_per_epoch(store: TokenStore, batch_size: int) -> int:
    return -(-store.n_chunks // batch_size)


def batches(store: TokenStore, batch_size: int, seed: int, epoch: int = 0) -> Iterator[Batch]:
    """One epoch: a seeded permutation of all chunks, the last batch possibly short."""
    if store.context_len < 2:
        raise ConfigError("context_len must be at least 2")
    if batch_size < 1:
        raise ConfigError("batch_size must be positive")
    if store.n_chunks == 0:
        raise EmptyCorpus(f"{len(store.tokens)} tokens is less than one chunk of {store.context_len}")
    order = epoch_order(store.n_chunks, seed, epoch)
    for i in range(0, len(order), batch_size):
        yield make_batch([store.chunk(j) for j in order[i:i + batch_size]])


def batch_at(store: TokenStore, batch_size: int, seed: int, step: int) -> Batch:
    """The batch a training run consumes at ``step``; pure in its arguments, so resumable."""
    if store.n_chunks == 0:
        raise EmptyCorpus(f"{len(store.tokens)} tokens is less than one chunk of {store.context_len}")
    per = batches_per_epoch(store, batch_size)
    epoch, idx = divmod(step, per)
    order = epoch_order(store.n_chunks, seed, epoch)
    return make_batch([store.chunk(j) for j in order[idx * batch_size:(idx + 1) * batch_size]])
