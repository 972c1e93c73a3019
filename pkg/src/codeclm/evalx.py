"""Held-out bits per byte, decode success of samples, and Fréchet distance between feature sets."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.fft import dctn

from . import bbpe
from .corpus import TokenStore, check_vocab
from .errors import DimensionMismatch, TooFewSamples, VocabMismatch
from .jpeg import TableSet
from .model import ACCUM, Transformer
from .sample import SampleConfig, finish, generate

# -- bits per byte ----------------------------------------------------------

def bits_per_byte(model: Transformer, store: TokenStore, vocab: bbpe.BpeVocab, batch_size: int = 8) -> float:
    """Cross-entropy in bits per canonical byte over every chunk of ``store``.

    Each predicted token is charged its byte expansion length; BOS/EOS weigh 0
    bytes but their prediction loss still counts.
    """
    check_vocab(store, vocab)
    if model.config.vocab_size != vocab.size:
        raise VocabMismatch(f"model vocab size {model.config.vocab_size} != {vocab.size}")
    L = min(store.context_len, model.config.max_context)
    windows = [store.tokens[i:i + L] for i in range(0, len(store.tokens), L)]
    windows = [w for w in windows if len(w) >= 2]
    lengths = torch.as_tensor(vocab.byte_lengths)
    nats = 0.0
    nbytes = 0
    model.eval()
    with torch.no_grad():
        for i in range(0, len(windows), batch_size):
            group = windows[i:i + batch_size]
            for w in _same_length(group):
                x = torch.as_tensor(np.stack(w), dtype=torch.long)
                logits = model(x[:, :-1]).to(ACCUM)
                tgt = x[:, 1:]
                nats += F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tgt.reshape(-1), reduction="sum").item()
                nbytes += int(lengths[tgt].sum())
    if nbytes == 0:
        raise ValueError("held-out store holds no predictable bytes")
    return nats / math.log(2) / nbytes


def _same_length(group):
    by_len = {}
    for w in group:
        by_len.setdefault(len(w), []).append(w)
    return list(by_len.values())


# -- decode success ---------------------------------------------------------

@dataclass
class DecodeReport:
    n_samples: int
    counts: dict[str, int]
    reasons: list[str] = field(default_factory=list)

    @property
    def rate(self) -> float:
        return self.counts.get("clean", 0) / self.n_samples

    def to_dict(self) -> dict:
        return {"n_samples": self.n_samples, "rate": self.rate, "counts": dict(self.counts),
                "reasons": self.reasons}


def decode_success_rate(model: Transformer, cfg: SampleConfig, n_samples: int, vocab: bbpe.BpeVocab,
                        tables: TableSet, keep_files: list | None = None) -> DecodeReport:
    """Unconditional samples from BOS; clean = restored without any salvage.

    Sample ``i`` uses seed ``cfg.seed + i``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    counts = Counter({"clean": 0, "salvaged": 0, "unrecoverable": 0})
    reasons = []
    budget = min(cfg.max_new_tokens, model.config.max_context - 1)
    for i in range(n_samples):
        tokens = generate(model, [bbpe.BOS], replace(cfg, seed=cfg.seed + i, max_new_tokens=budget))
        c = finish(tokens, vocab, tables)
        counts[c.status] += 1
        reasons.append(c.reason)
        if keep_files is not None:
            keep_files.append(c)
    return DecodeReport(n_samples, dict(counts), reasons)


# -- features and Fréchet distance -----------------------------------------

DEFAULT_EXTRACTOR = "codeclm-handcrafted-v1"


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    extractor: str
    n: int

    @property
    def dim(self) -> int:
        return len(self.mean)


def luminance(pixels: np.ndarray) -> np.ndarray:
    p = np.asarray(pixels, dtype=np.float64)
    return 0.299 * p[..., 0] + 0.587 * p[..., 1] + 0.114 * p[..., 2]


def image_features(pixels: np.ndarray) -> np.ndarray:
    """320-dim deterministic descriptor.

    64 values of 8x8 box-downsampled luminance, 3 x 64-bin normalized colour
    histograms, and the mean |DCT| of each of the 64 frequencies over the
    luminance's 8x8 blocks.
    """
    pixels = np.asarray(pixels, dtype=np.uint8)
    y = luminance(pixels)
    small = np.asarray(Image.fromarray(y.astype(np.float32), "F").resize((8, 8), Image.BOX)).ravel() / 255.0
    hists = [np.bincount(pixels[..., c].ravel() // 4, minlength=64) / pixels[..., c].size for c in range(3)]
    h8, w8 = (y.shape[0] // 8) * 8, (y.shape[1] // 8) * 8
    blocks = (y[:h8, :w8] - 128.0).reshape(h8 // 8, 8, w8 // 8, 8).transpose(0, 2, 1, 3).reshape(-1, 8, 8)
    bands = np.abs(dctn(blocks, axes=(1, 2), norm="ortho")).mean(axis=0).ravel() / 255.0
    return np.concatenate([small, *hists, bands])


def feature_stats(vectors: np.ndarray, extractor: str = DEFAULT_EXTRACTOR) -> FeatureStats:
    """Mean and unbiased covariance of (n, dim) feature rows; needs n >= dim + 1."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionMismatch("feature matrix must be 2-D")
    n, d = x.shape
    if n < d + 1:
        raise TooFewSamples(f"{n} samples cannot estimate a {d}-dim covariance (need at least {d + 1})")
    cov = np.cov(x, rowvar=False, ddof=1)
    cov = (cov + cov.T) / 2
    return FeatureStats(x.mean(axis=0), cov, extractor, n)


def image_stats(images, extractor=image_features, extractor_id: str = DEFAULT_EXTRACTOR) -> FeatureStats:
    return feature_stats(np.stack([extractor(im) for im in images]), extractor_id)


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    """Principal square root of a symmetric positive semi-definite matrix."""
    a = (np.asarray(a, dtype=np.float64) + np.asarray(a, dtype=np.float64).T) / 2
    w, v = np.linalg.eigh(a)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    Tr((S_a S_b)^(1/2)) is taken as the sum of square roots of the eigenvalues
    of S_a^(1/2) S_b S_a^(1/2), which is similar to S_a S_b and symmetric.
    """
    if a.extractor != b.extractor:
        raise DimensionMismatch(f"feature extractors differ: {a.extractor} vs {b.extractor}")
    if a.dim != b.dim:
        raise DimensionMismatch(f"feature dimensions differ: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    ra = sqrtm_psd(a.cov)
    m = ra @ b.cov @ ra
    tr_cross = np.sqrt(np.clip(np.linalg.eigvalsh((m + m.T) / 2), 0.0, None)).sum()
    d = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_cross
    return float(max(d, 0.0))


# -- external embeddings ----------------------------------------------------

def save_embeddings(path, vectors: np.ndarray, extractor: str) -> None:
    """One JSON header line ``{"n", "dim", "extractor", "dtype"}`` then float64 LE rows."""
    x = np.ascontiguousarray(vectors, dtype="<f8")
    header = {"n": int(x.shape[0]), "dim": int(x.shape[1]), "extractor": extractor, "dtype": "<f8"}
    Path(path).write_bytes(json.dumps(header).encode() + b"\n" + x.tobytes())


def load_embeddings(path) -> tuple[np.ndarray, str]:
    blob = Path(path).read_bytes()
    nl = blob.index(b"\n")
    header = json.loads(blob[:nl])
    x = np.frombuffer(blob[nl + 1:], dtype=np.dtype(header.get("dtype", "<f8")))
    if x.size != header["n"] * header["dim"]:
        raise DimensionMismatch(f"{path}: {x.size} values, header says {header['n']}x{header['dim']}")
    return x.reshape(header["n"], header["dim"]).astype(np.float64), header["extractor"]
