import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from codeclm import bbpe
from codeclm.corpus import TokenStore, batch_at, make_batch, store_from_streams
from codeclm.errors import CheckpointError, ConfigError, NonFiniteLoss
from codeclm.images import natural_images
from codeclm.jpeg import CodecProfile, canonicalize, encode_image
from codeclm.model import ModelConfig
from codeclm.train import (
    TrainConfig,
    checkpoint_bytes,
    fit,
    load_checkpoint,
    lr_at,
    new_state,
    read_checkpoint_header,
    save_checkpoint,
    train_step,
)


def tiny_model(vocab_size=40, **kw):
    base = dict(vocab_size=vocab_size, dim=16, n_layers=1, n_heads=2, max_context=32)
    base.update(kw)
    return ModelConfig(**base)


def toy_store(n=600, vocab_size=40, L=16, seed=0):
    rng = np.random.default_rng(seed)
    tokens = (np.arange(n) * 7 + rng.integers(0, 3, n)) % (vocab_size - 2)
    return TokenStore(tokens, np.array([0, n]), "toy", "toy", L, ["toy"], vocab_size)


# -- schedule -------------------------------------------------------------------

def test_schedule_endpoints():
    cfg = TrainConfig(peak_lr=3e-4, warmup_steps=10, total_steps=100)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(10, cfg) == pytest.approx(3e-4)
    assert lr_at(100, cfg) == pytest.approx(3e-5)
    assert lr_at(5, cfg) == pytest.approx(1.5e-4)


def test_default_warmup_is_two_percent():
    assert TrainConfig(total_steps=1000).resolved().warmup_steps == 20
    with pytest.raises(ConfigError):
        TrainConfig(warmup_steps=10, total_steps=10).resolved()
    with pytest.raises(ConfigError):
        TrainConfig(peak_lr=0).resolved()


@settings(max_examples=50, deadline=None)
@given(total=st.integers(2, 2000), frac=st.floats(0, 0.5))
def test_schedule_is_monotone(total, frac):
    cfg = TrainConfig(total_steps=total, warmup_steps=min(total - 1, int(frac * total)))
    lrs = [lr_at(s, cfg) for s in range(total + 1)]
    w = cfg.warmup_steps
    assert all(a <= b for a, b in zip(lrs[:w + 1], lrs[1:w + 1]))
    assert all(a >= b for a, b in zip(lrs[w:], lrs[w + 1:]))
    assert min(lrs[w:]) >= 0.1 * cfg.peak_lr - 1e-15


# -- train_step -------------------------------------------------------------------

def test_zero_gradient_only_decays():
    cfg = TrainConfig(peak_lr=0.01, warmup_steps=0, total_steps=10, weight_decay=0.1)
    state = new_state(cfg, tiny_model(vocab_size=1))
    before = {n: p.detach().clone() for n, p in state.model.named_parameters()}
    m = train_step(state, make_batch([np.zeros(8, np.int64)]))
    assert m.loss == 0.0 and m.grad_norm == 0.0
    for n, p in state.model.named_parameters():
        assert torch.allclose(p, before[n] * (1 - 0.01 * 0.1), rtol=0, atol=1e-9)


def test_clipping_bounds_gradient_norm():
    cfg = TrainConfig(peak_lr=1e-3, total_steps=10, grad_clip_norm=0.05)
    state = new_state(cfg, tiny_model())
    store = toy_store()
    for step in range(3):
        m = train_step(state, batch_at(store, 4, 0, step))
        post = torch.sqrt(sum(p.grad.pow(2).sum() for p in state.model.parameters())).item()
        assert m.grad_norm > 0.05
        assert post <= 0.05 + 1e-6


def test_non_finite_loss_names_last_checkpoint(tmp_path):
    state = new_state(TrainConfig(total_steps=10), tiny_model())
    save_checkpoint(state, tmp_path / "good.ckpt")
    with torch.no_grad():
        state.model.tok_emb.weight.fill_(float("inf"))
    with pytest.raises(NonFiniteLoss) as e:
        train_step(state, make_batch([np.arange(8)]))
    assert e.value.last_checkpoint == str(tmp_path / "good.ckpt")
    assert e.value.step == 0


# -- checkpoints ------------------------------------------------------------------

def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    state = new_state(TrainConfig(total_steps=10, warmup_steps=1), tiny_model(), "vh", "ph")
    fresh = checkpoint_bytes(state)
    save_checkpoint(state, tmp_path / "a.ckpt")
    assert checkpoint_bytes(load_checkpoint(tmp_path / "a.ckpt")) == fresh
    store = toy_store()
    for s in range(3):
        train_step(state, batch_at(store, 2, 0, s))
    save_checkpoint(state, tmp_path / "b.ckpt")
    again = load_checkpoint(tmp_path / "b.ckpt")
    save_checkpoint(again, tmp_path / "c.ckpt")
    assert (tmp_path / "b.ckpt").read_bytes() == (tmp_path / "c.ckpt").read_bytes()
    header, _ = read_checkpoint_header((tmp_path / "b.ckpt").read_bytes())
    assert header["step"] == 3 and header["vocab_hash"] == "vh" and header["profile_hash"] == "ph"
    assert header["train_config_hash"] == state.train_config.hash


def test_corrupt_checkpoints(tmp_path):
    state = new_state(TrainConfig(total_steps=10), tiny_model())
    blob = checkpoint_bytes(state)
    with pytest.raises(CheckpointError):
        read_checkpoint_header(b"NOTACKPT" + blob[8:])
    (tmp_path / "t.ckpt").write_bytes(blob[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.ckpt")


# -- fit ----------------------------------------------------------------------

def _strip(records):
    return [{k: v for k, v in r.items() if k != "tokens_per_sec"} for r in records]


def test_total_steps_zero_returns_init(tmp_path):
    tc, mc = TrainConfig(total_steps=0), tiny_model()
    store = toy_store()
    state, records = fit(tc, mc, store, tmp_path)
    assert records == [] and state.step == 0
    torch.manual_seed(tc.seed)
    init = new_state(tc, mc, store.vocab_hash, store.profile_hash)
    init.rng_state = state.rng_state
    assert (tmp_path / "final.ckpt").read_bytes() == checkpoint_bytes(init)


def test_two_runs_are_identical(tmp_path):
    tc = TrainConfig(total_steps=15, batch_size=3, peak_lr=3e-3)
    _, a = fit(tc, tiny_model(), toy_store(), tmp_path / "a")
    _, b = fit(tc, tiny_model(), toy_store(), tmp_path / "b")
    assert _strip(a) == _strip(b)
    log_a = [json.loads(l) for l in (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()]
    assert _strip(log_a) == _strip(a)
    assert set(log_a[0]) == {"step", "loss", "lr", "grad_norm", "tokens_per_sec"}
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()


def test_resume_matches_straight_through(tmp_path):
    tc = TrainConfig(total_steps=30, batch_size=2, peak_lr=3e-3, checkpoint_every=10)
    _, straight = fit(tc, tiny_model(), toy_store(), tmp_path / "s")
    resumed_state, resumed = fit(tc, tiny_model(), toy_store(), tmp_path / "r",
                                 resume_from=tmp_path / "s" / "ckpt_0000010.ckpt")
    assert [r["step"] for r in resumed] == list(range(11, 31))
    for a, b in zip(straight[10:], resumed):
        assert abs(a["loss"] - b["loss"]) <= 1e-3 * abs(a["loss"])
    assert (tmp_path / "s" / "final.ckpt").read_bytes() == (tmp_path / "r" / "final.ckpt").read_bytes()
    assert sorted(p.name for p in (tmp_path / "s").glob("ckpt_*")) == [
        "ckpt_0000010.ckpt", "ckpt_0000020.ckpt", "ckpt_0000030.ckpt"]


def test_resume_refuses_other_model(tmp_path):
    tc = TrainConfig(total_steps=4, checkpoint_every=2)
    fit(tc, tiny_model(), toy_store(), tmp_path)
    with pytest.raises(ConfigError):
        fit(tc, tiny_model(dim=32), toy_store(), tmp_path / "x", resume_from=tmp_path / "ckpt_0000002.ckpt")


@pytest.mark.slow
def test_smoke_training_halves_loss():
    streams = [canonicalize(encode_image(x))[0].data for x in natural_images(10, 64, seed=0)]
    vocab = bbpe.train_bpe(streams, 322)
    store = store_from_streams(streams, vocab, CodecProfile(), 256)
    mc = ModelConfig(vocab_size=vocab.size, dim=64, n_layers=2, n_heads=4, max_context=256)
    tc = TrainConfig(total_steps=500, batch_size=4, peak_lr=3e-3)
    _, records = fit(tc, mc, store)
    final = float(np.mean([r["loss"] for r in records[-10:]]))
    assert final <= 0.5 * math.log(vocab.size)
