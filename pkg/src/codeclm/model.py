"""Decoder-only transformer in the Llama-2 style.

Pre-norm blocks with RMSNorm, rotary position encoding on queries and keys,
SwiGLU feed-forward, causal self-attention, no biases, untied output head.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import IGNORE, Batch
from .errors import ConfigError, ContextOverflow, NonFiniteLoss

DTYPES = {"float32": torch.float32, "float64": torch.float64}
ACCUM = torch.float64  # softmax and loss reductions


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 322
    dim: int = 256
    n_layers: int = 6
    n_heads: int = 8
    ffn_multiplier: int = 4
    max_context: int = 1024
    rope_base: float = 10000.0
    norm_epsilon: float = 1e-5
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.dim % self.n_heads:
            raise ConfigError(f"dim {self.dim} is not divisible by n_heads {self.n_heads}")
        if (self.dim // self.n_heads) % 2:
            raise ConfigError("head dimension must be even for rotary encoding")
        if min(self.vocab_size, self.dim, self.n_layers, self.n_heads, self.ffn_multiplier, self.max_context) < 1:
            raise ConfigError("model sizes must be positive")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads

    @property
    def hidden_dim(self) -> int:
        return self.ffn_multiplier * self.dim

    def to_dict(self) -> dict:
        return asdict(self)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


def rope_tables(cfg: ModelConfig) -> tuple[torch.Tensor, torch.Tensor]:
    hd = cfg.head_dim
    inv = 1.0 / (cfg.rope_base ** (torch.arange(0, hd, 2, dtype=torch.float64) / hd))
    ang = torch.outer(torch.arange(cfg.max_context, dtype=torch.float64), inv)
    dt = DTYPES[cfg.dtype]
    return ang.cos().to(dt), ang.sin().to(dt)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: (B, H, T, hd); rotate interleaved pairs (x0, x1), (x2, x3), ...
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = torch.stack((x0 * cos - x1 * sin, x0 * sin + x1 * cos), dim=-1)
    return out.flatten(-2)


class KVCache:
    """Per-sequence key/value store for incremental decoding."""

    def __init__(self, cfg: ModelConfig, batch: int = 1):
        shape = (batch, cfg.n_heads, cfg.max_context, cfg.head_dim)
        dt = DTYPES[cfg.dtype]
        self.k = [torch.zeros(shape, dtype=dt) for _ in range(cfg.n_layers)]
        self.v = [torch.zeros(shape, dtype=dt) for _ in range(cfg.n_layers)]
        self.length = 0


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads, self.head_dim = cfg.n_heads, cfg.head_dim
        self.wq = nn.Linear(cfg.dim, cfg.dim, bias=False)
        self.wk = nn.Linear(cfg.dim, cfg.dim, bias=False)
        self.wv = nn.Linear(cfg.dim, cfg.dim, bias=False)
        self.wo = nn.Linear(cfg.dim, cfg.dim, bias=False)

    def forward(self, x, cos, sin, start: int, cache: KVCache | None, layer: int):
        B, T, D = x.shape
        split = lambda t: t.view(B, T, self.n_heads, self.head_dim).transpose(1, 2)
        q = apply_rope(split(self.wq(x)), cos, sin)
        k = apply_rope(split(self.wk(x)), cos, sin)
        v = split(self.wv(x))
        if cache is not None:
            cache.k[layer][:, :, start:start + T] = k
            cache.v[layer][:, :, start:start + T] = v
            k = cache.k[layer][:, :, :start + T]
            v = cache.v[layer][:, :, :start + T]
        S = k.shape[2]
        scores = (q @ k.transpose(-2, -1)).to(ACCUM) / math.sqrt(self.head_dim)
        # query at absolute position start + i sees keys 0 .. start + i
        mask = torch.ones(T, S, dtype=torch.bool).tril(diagonal=start)
        scores = scores.masked_fill(~mask, float("-inf"))
        probs = torch.softmax(scores, dim=-1).to(x.dtype)
        out = (probs @ v).transpose(1, 2).reshape(B, T, D)
        return self.wo(out)


class FeedForward(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.w1 = nn.Linear(cfg.dim, cfg.hidden_dim, bias=False)
        self.w3 = nn.Linear(cfg.dim, cfg.hidden_dim, bias=False)
        self.w2 = nn.Linear(cfg.hidden_dim, cfg.dim, bias=False)

    def forward(self, x):
        return self.w2(F.silu(self.w1(x)) * self.w3(x))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn_norm = RMSNorm(cfg.dim, cfg.norm_epsilon)
        self.attn = Attention(cfg)
        self.ffn_norm = RMSNorm(cfg.dim, cfg.norm_epsilon)
        self.ffn = FeedForward(cfg)

    def forward(self, x, cos, sin, start, cache, layer):
        x = x + self.attn(self.attn_norm(x), cos, sin, start, cache, layer)
        return x + self.ffn(self.ffn_norm(x))


class Transformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.layers = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.norm = RMSNorm(cfg.dim, cfg.norm_epsilon)
        self.output = nn.Linear(cfg.dim, cfg.vocab_size, bias=False)
        cos, sin = rope_tables(cfg)
        self.register_buffer("rope_cos", cos, persistent=False)
        self.register_buffer("rope_sin", sin, persistent=False)

    def forward(self, tokens: torch.Tensor, cache: KVCache | None = None) -> torch.Tensor:
        B, T = tokens.shape
        start = cache.length if cache is not None else 0
        if start + T > self.config.max_context:
            raise ContextOverflow(f"{start + T} positions exceed max_context {self.config.max_context}")
        cos = self.rope_cos[start:start + T]
        sin = self.rope_sin[start:start + T]
        x = self.tok_emb(tokens)
        for i, layer in enumerate(self.layers):
            x = layer(x, cos, sin, start, cache, i)
        if cache is not None:
            cache.length = start + T
        return self.output(self.norm(x))


def init_params(cfg: ModelConfig) -> Transformer:
    """Normal(0, 0.02) weights; residual projections scaled by 1/sqrt(2 * n_layers)."""
    model = Transformer(cfg).to(DTYPES[cfg.dtype])
    gen = torch.Generator().manual_seed(cfg.seed)
    resid_std = 0.02 / math.sqrt(2 * cfg.n_layers)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("norm.weight"):
                p.fill_(1.0)
            elif name.endswith(("attn.wo.weight", "ffn.w2.weight")):
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * resid_std)
            else:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.02)
    return model


def n_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def forward(model: Transformer, tokens) -> torch.Tensor:
    """Logits (B, T, vocab) for a (B, T) id array."""
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    with torch.no_grad():
        return model(tokens)


def batch_loss(model: Transformer, batch: Batch) -> torch.Tensor:
    """Mean next-token cross-entropy (nats) over every non-ignored target."""
    inputs = torch.as_tensor(batch.inputs, dtype=torch.long)
    targets = torch.as_tensor(batch.targets, dtype=torch.long)
    logits = model(inputs)
    return F.cross_entropy(
        logits.to(ACCUM).reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=IGNORE
    )


def loss_and_grads(model: Transformer, batch: Batch) -> tuple[float, dict[str, torch.Tensor]]:
    model.zero_grad(set_to_none=True)
    loss = batch_loss(model, batch)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss.item()}")
    loss.backward()
    grads = {n: p.grad.detach().clone() for n, p in model.named_parameters()}
    return loss.item(), grads
