"""AdamW training with linear warmup and cosine decay, plus a versioned checkpoint format.

Checkpoint byte layout (all integers little-endian)::

    offset 0   8 bytes   magic b"CLMCKPT\\0"
    offset 8   u32       format version (1)
    offset 12  u32       header length N
    offset 16  N bytes   UTF-8 JSON header, keys sorted:
                           model_config, train_config, train_config_hash,
                           vocab_hash, profile_hash, step, rng_state (hex),
                           tensors: [{name, dtype, shape}, ...]
    offset 16+N          raw tensor data, C-contiguous, in the order listed

Tensor names are ``param/<name>`` for weights, then ``exp_avg/<name>``,
``exp_avg_sq/<name>`` and ``adam_step/<name>`` for the optimizer state.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .corpus import Batch, TokenStore, batch_at
from .errors import CheckpointError, ConfigError, NonFiniteLoss, VocabMismatch
from .model import ModelConfig, Transformer, batch_loss, init_params

log = logging.getLogger(__name__)

CKPT_MAGIC = b"CLMCKPT\x00"
CKPT_VERSION = 1
_NP_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 3e-4
    warmup_steps: int | None = None  # None: 2% of total_steps
    total_steps: int = 1000
    weight_decay: float = 0.1
    betas: tuple[float, float] = (0.9, 0.95)
    grad_clip_norm: float = 1.0
    batch_size: int = 8
    checkpoint_every: int = 0  # 0: final checkpoint only
    seed: int = 0
    eps: float = 1e-8
    min_lr_ratio: float = 0.1

    def resolved(self) -> TrainConfig:
        cfg = self
        if cfg.warmup_steps is None:
            warm = max(1, round(0.02 * cfg.total_steps)) if cfg.total_steps > 1 else 0
            cfg = replace(cfg, warmup_steps=warm)
        cfg = replace(cfg, betas=tuple(cfg.betas))
        if cfg.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")
        if cfg.total_steps < 0:
            raise ConfigError("total_steps must be non-negative")
        if cfg.total_steps > 0 and not 0 <= cfg.warmup_steps < cfg.total_steps:
            raise ConfigError(f"warmup_steps {cfg.warmup_steps} must be below total_steps {cfg.total_steps}")
        if cfg.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @property
    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.resolved().to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0, then cosine decay to ``min_lr_ratio * peak_lr``."""
    cfg = cfg.resolved()
    peak, warm = cfg.peak_lr, cfg.warmup_steps
    if step < warm:
        return peak * step / warm
    floor = cfg.min_lr_ratio * peak
    span = max(1, cfg.total_steps - warm)
    progress = min(1.0, (step - warm) / span)
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class StepMetrics:
    step: int
    loss: float
    lr: float
    grad_norm: float
    tokens_per_sec: float = 0.0

    def record(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    model: Transformer
    optimizer: torch.optim.AdamW
    train_config: TrainConfig
    step: int = 0
    vocab_hash: str = ""
    profile_hash: str = ""
    last_checkpoint: str | None = None
    rng_state: bytes = field(default_factory=lambda: bytes(torch.random.get_rng_state().numpy()))

    @property
    def model_config(self) -> ModelConfig:
        return self.model.config


def make_optimizer(model: Transformer, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(), lr=0.0, betas=tuple(cfg.betas), eps=cfg.eps,
        weight_decay=cfg.weight_decay, foreach=False,
    )


def new_state(train_config: TrainConfig, model_config: ModelConfig, vocab_hash: str = "",
              profile_hash: str = "") -> TrainState:
    train_config = train_config.resolved()
    model = init_params(model_config)
    return TrainState(model, make_optimizer(model, train_config), train_config, 0, vocab_hash, profile_hash)


def train_step(state: TrainState, batch: Batch) -> StepMetrics:
    """One AdamW update at the scheduled learning rate; advances ``state.step``."""
    t0 = time.perf_counter()
    cfg = state.train_config
    lr = lr_at(state.step, cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    loss = batch_loss(state.model, batch)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(
            f"non-finite loss {loss.item()} at step {state.step}; last good checkpoint: {state.last_checkpoint}",
            state.step, state.last_checkpoint,
        )
    loss.backward()
    params = list(state.model.parameters())
    grad_norm = torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip_norm)
    if not torch.isfinite(grad_norm):
        raise NonFiniteLoss(
            f"non-finite gradient at step {state.step}; last good checkpoint: {state.last_checkpoint}",
            state.step, state.last_checkpoint,
        )
    state.optimizer.step()
    state.step += 1
    dt = time.perf_counter() - t0
    n_tok = int((batch.targets >= 0).sum())
    return StepMetrics(state.step, loss.item(), lr, grad_norm.item(), n_tok / dt if dt > 0 else 0.0)


# -- checkpoints ------------------------------------------------------------

def _tensors(state: TrainState) -> list[tuple[str, torch.Tensor]]:
    out = []
    named = list(state.model.named_parameters())
    for name, p in named:
        out.append((f"param/{name}", p.detach()))
    opt_state = state.optimizer.state
    for name, p in named:
        st = opt_state.get(p, {})
        out.append((f"exp_avg/{name}", st.get("exp_avg", torch.zeros_like(p)).detach()))
        out.append((f"exp_avg_sq/{name}", st.get("exp_avg_sq", torch.zeros_like(p)).detach()))
        step = st.get("step", torch.tensor(0.0))
        out.append((f"adam_step/{name}", torch.as_tensor(step, dtype=torch.float32).reshape(())))
    return out


def checkpoint_bytes(state: TrainState) -> bytes:
    tensors = _tensors(state)
    header = {
        "model_config": state.model_config.to_dict(),
        "train_config": state.train_config.to_dict(),
        "train_config_hash": state.train_config.hash,
        "vocab_hash": state.vocab_hash,
        "profile_hash": state.profile_hash,
        "step": state.step,
        "rng_state": state.rng_state.hex(),
        "tensors": [
            {"name": n, "dtype": _NP_DTYPES[t.dtype], "shape": list(t.shape)} for n, t in tensors
        ],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(head)), head]
    for _, t in tensors:
        parts.append(t.contiguous().numpy().astype(_NP_DTYPES[t.dtype], copy=False).tobytes())
    return b"".join(parts)


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state))
    tmp.replace(path)
    state.last_checkpoint = str(path)
    return path


def read_checkpoint_header(blob: bytes) -> tuple[dict, int]:
    if blob[:8] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, n = struct.unpack("<II", blob[8:16])
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    return json.loads(blob[16:16 + n]), 16 + n


def load_checkpoint(path) -> TrainState:
    blob = Path(path).read_bytes()
    header, pos = read_checkpoint_header(blob)
    tc = dict(header["train_config"])
    tc["betas"] = tuple(tc["betas"])
    train_config = TrainConfig(**tc)
    model_config = ModelConfig(**header["model_config"])
    model = Transformer(model_config).to(_torch_dtype(model_config.dtype))
    tensors = {}
    for entry in header["tensors"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = pos + count * dt.itemsize
        if end > len(blob):
            raise CheckpointError(f"checkpoint truncated in tensor {entry['name']}")
        arr = np.frombuffer(blob[pos:end], dtype=dt).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
        pos = end
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} unexpected trailing bytes in checkpoint")
    named = list(model.named_parameters())
    with torch.no_grad():
        for name, p in named:
            p.copy_(tensors[f"param/{name}"])
    optimizer = make_optimizer(model, train_config)
    sd = optimizer.state_dict()
    sd["state"] = {
        i: {
            "step": tensors[f"adam_step/{name}"].clone(),
            "exp_avg": tensors[f"exp_avg/{name}"].clone(),
            "exp_avg_sq": tensors[f"exp_avg_sq/{name}"].clone(),
        }
        for i, (name, _) in enumerate(named)
    }
    optimizer.load_state_dict(sd)
    return TrainState(model, optimizer, train_config, header["step"], header["vocab_hash"],
                      header["profile_hash"], str(path), bytes.fromhex(header["rng_state"]))


def _torch_dtype(name: str) -> torch.dtype:
    return {"float32": torch.float32, "float64": torch.float64}[name]


# -- driver -----------------------------------------------------------------

def fit(
    train_config: TrainConfig,
    model_config: ModelConfig,
    store: TokenStore,
    out_dir=None,
    resume_from=None,
    vocab_hash: str | None = None,
) -> tuple[TrainState, list[dict]]:
    """Train to ``total_steps``; returns the final state and per-step metric records.

    Checkpoints go to ``out_dir/ckpt_<step>.ckpt`` every ``checkpoint_every``
    steps plus ``out_dir/final.ckpt``; metrics stream to ``out_dir/metrics.jsonl``.
    """
    if vocab_hash is not None and store.vocab_hash != vocab_hash:
        raise VocabMismatch(f"store vocab {store.vocab_hash} does not match {vocab_hash}")
    if store.vocab_size != model_config.vocab_size:
        raise VocabMismatch(f"store vocab size {store.vocab_size} != model vocab size {model_config.vocab_size}")
    if store.context_len > model_config.max_context:
        raise ConfigError(f"context_len {store.context_len} exceeds max_context {model_config.max_context}")
    if resume_from is not None:
        state = load_checkpoint(resume_from)
        if state.vocab_hash != store.vocab_hash:
            raise VocabMismatch("checkpoint and store were built with different vocabularies")
        if state.model_config != model_config:
            raise ConfigError("checkpoint model config differs from the requested one")
    else:
        torch.manual_seed(train_config.seed)
        state = new_state(train_config, model_config, store.vocab_hash, store.profile_hash)
    cfg = state.train_config
    out = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out / "metrics.jsonl", "a" if resume_from is not None else "w")
    records = []
    try:
        while state.step < cfg.total_steps:
            batch = batch_at(store, cfg.batch_size, cfg.seed, state.step)
            m = train_step(state, batch)
            rec = m.record()
            records.append(rec)
            if metrics_file is not None:
                metrics_file.write(json.dumps(rec) + "\n")
                metrics_file.flush()
            if state.step % 50 == 0 or state.step == cfg.total_steps:
                log.info("step %d loss %.4f lr %.2e grad_norm %.3f", m.step, m.loss, m.lr, m.grad_norm)
            if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(state, out / f"ckpt_{state.step:07d}.ckpt")
    finally:
        if metrics_file is not None:
            metrics_file.close()
    if out is not None:
        save_checkpoint(state, out / "final.ckpt")
    return state, records
