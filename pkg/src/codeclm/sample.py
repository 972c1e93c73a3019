from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import bbpe
from .errors import ConfigError, ContextOverflow, InvalidTokenId, UnrecoverableStream
from .jpeg import CodecProfile, TableSet, canonicalize, default_tables, encode_image, prefix_at_ratio, restore_report
from .model import KVCache, Transformer

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SampleConfig:
    temperature: float = 1.0  # 0 selects argmax decoding
    top_k: int | None = 40  # None or 0 disables
    top_p: float = 0.9
    max_new_tokens: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigError("temperature must be non-negative")
        if self.top_k is not None and self.top_k < 0:
            raise ConfigError("top_k must be >= 1, or 0/None to disable")
        if not 0 < self.top_p <= 1:
            raise ConfigError("top_p must be in (0, 1]")
        if self.max_new_tokens < 0:
            raise ConfigError("max_new_tokens must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


ARGMAX = SampleConfig(temperature=0.0, top_k=None, top_p=1.0)


def truncated_distribution(logits: np.ndarray, cfg: SampleConfig) -> tuple[np.ndarray, np.ndarray]:
    """Candidate ids and their renormalized probabilities after top-k, then top-p.

    Candidates are sorted by probability (ties by id). The nucleus keeps the
    shortest prefix whose mass reaches ``top_p``, boundary token included.
    """
    z = np.asarray(logits, dtype=np.float64) / cfg.temperature
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    order = np.lexsort((np.arange(len(p)), -p))
    p = p[order]
    if cfg.top_k:
        order, p = order[:cfg.top_k], p[:cfg.top_k]
        p = p / p.sum()
    if cfg.top_p < 1.0:
        keep = min(len(p), int(np.searchsorted(np.cumsum(p), cfg.top_p, side="left")) + 1)
        order, p = order[:keep], p[:keep]
        p = p / p.sum()
    return order, p


def sample_next(logits: np.ndarray, cfg: SampleConfig, rng: np.random.Generator) -> int:
    if cfg.temperature == 0:
        return int(np.argmax(logits))
    ids, p = truncated_distribution(logits, cfg)
    if len(ids) == 1:
        rng.random()  # keep the draw count independent of the support size
        return int(ids[0])
    cdf = np.cumsum(p)
    i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return int(ids[min(i, len(ids) - 1)])


def generate(model: Transformer, prompt, cfg: SampleConfig, use_cache: bool = True) -> list[int]:
    """Extend ``prompt`` until EOS or ``max_new_tokens``; returns prompt + new tokens."""
    prompt = [int(t) for t in prompt]
    if not prompt or prompt[0] != bbpe.BOS:
        raise InvalidTokenId("prompt must begin with BOS")
    if len(prompt) + cfg.max_new_tokens > model.config.max_context:
        raise ContextOverflow(
            f"prompt of {len(prompt)} plus {cfg.max_new_tokens} new tokens exceeds "
            f"max_context {model.config.max_context}"
        )
    out = list(prompt)
    if out[-1] == bbpe.EOS or cfg.max_new_tokens == 0:
        return out
    rng = np.random.default_rng(cfg.seed)
    model.eval()
    with torch.no_grad():
        cache = KVCache(model.config) if use_cache else None
        logits = model(torch.tensor([out]), cache)[0, -1]
        for _ in range(cfg.max_new_tokens):
            tok = sample_next(logits.to(torch.float64).numpy(), cfg, rng)
            out.append(tok)
            if tok == bbpe.EOS or len(out) - len(prompt) == cfg.max_new_tokens:
                break
            if use_cache:
                logits = model(torch.tensor([[tok]]), cache)[0, -1]
            else:
                logits = model(torch.tensor([out]))[0, -1]
    return out


@dataclass
class Completion:
    jpeg: bytes | None  # restored file, None when unrecoverable
    status: str  # clean | salvaged | unrecoverable
    tokens: list[int]
    prompt_tokens: int
    prompt_mcus: int
    valid_mcus: int
    total_mcus: int
    reason: str = ""


def finish(tokens: list[int], vocab: bbpe.BpeVocab, tables: TableSet, prompt_tokens: int = 1,
           prompt_mcus: int = 0) -> Completion:
    """Decode generated tokens and restore them into a JPEG file, salvaging if needed."""
    body = tokens[:-1] if tokens and tokens[-1] == bbpe.EOS else tokens
    data = bbpe.decode(body, vocab)
    try:
        r = restore_report(data, tables)
    except UnrecoverableStream as e:
        return Completion(None, "unrecoverable", tokens, prompt_tokens, prompt_mcus, 0, 0, str(e))
    status = r.status
    reason = r.reason
    if status == "clean" and tokens[-1] != bbpe.EOS:
        status, reason = "salvaged", "generation stopped before EOS"
    return Completion(r.data, status, tokens, prompt_tokens, prompt_mcus, r.valid_mcus, r.total_mcus, reason)


def _as_jpeg(image, profile: CodecProfile) -> bytes:
    if isinstance(image, (bytes, bytearray)):
        return bytes(image)
    if isinstance(image, np.ndarray):
        return encode_image(image, profile)
    path = Path(image)
    raw = path.read_bytes()
    if raw[:2] == b"\xff\xd8":
        return raw
    from .images import load_image

    return encode_image(load_image(path), profile)


def complete_image(
    model: Transformer,
    image,
    r_prompt: float,
    cfg: SampleConfig,
    vocab: bbpe.BpeVocab,
    tables: TableSet | None = None,
    profile: CodecProfile = CodecProfile(),
) -> Completion:
    """Keep the first floor(r * N) MCUs of ``image`` and let the model write the rest.

    ``image`` may be JPEG bytes, a pixel array, or a path to an image file.
    """
    stream, _ = canonicalize(_as_jpeg(image, profile))
    tables = tables or default_tables(stream.profile)
    offset = prefix_at_ratio(stream, r_prompt)
    k = stream.n_mcus if offset == len(stream.data) else (
        0 if offset == 0 else (stream.mcu_offsets.index(offset - 2) + 1) * stream.profile.restart_interval_mcus
    )
    if offset == len(stream.data):
        tokens = bbpe.encode(stream.data, vocab, add_bos=True, add_eos=True)
        return finish(tokens, vocab, tables, len(tokens), k)
    prompt = bbpe.encode_prompt(stream.data, offset, vocab)
    room = model.config.max_context - len(prompt)
    if room <= 0:
        raise ContextOverflow(f"prompt of {len(prompt)} tokens fills the model context")
    tokens = generate(model, prompt, replace(cfg, max_new_tokens=min(cfg.max_new_tokens, room)))
    return finish(tokens, vocab, tables, len(prompt), k)
