import math

import numpy as np
import pytest
import torch

from codeclm.corpus import make_batch
from codeclm.errors import ConfigError, ContextOverflow, NonFiniteLoss
from codeclm.model import (
    KVCache,
    ModelConfig,
    apply_rope,
    batch_loss,
    forward,
    init_params,
    loss_and_grads,
    n_params,
    rope_tables,
)


def tiny(**kw):
    base = dict(vocab_size=40, dim=16, n_layers=1, n_heads=2, max_context=32, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def closed_form_count(V, d, L, mult):
    attn = 4 * d * d
    ffn = 3 * d * (mult * d)
    norms = 2 * d
    return V * d + L * (attn + ffn + norms) + d + d * V


def test_init_is_deterministic():
    a, b = init_params(tiny(seed=3)), init_params(tiny(seed=3))
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and torch.equal(pa, pb)
    c = init_params(tiny(seed=4))
    assert not torch.equal(a.tok_emb.weight, c.tok_emb.weight)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(dim=8, n_heads=3)
    with pytest.raises(ConfigError):
        ModelConfig(dim=12, n_heads=4)  # odd head dim cannot rotate in pairs


def test_parameter_count_closed_form():
    cfg = ModelConfig(vocab_size=322, dim=64, n_layers=2, n_heads=4, ffn_multiplier=4)
    assert n_params(init_params(cfg)) == closed_form_count(322, 64, 2, 4) == 172608
    desk = ModelConfig()
    assert n_params(init_params(desk)) == closed_form_count(322, 256, 6, 4)


def test_init_scales():
    cfg = ModelConfig(vocab_size=322, dim=128, n_layers=8, n_heads=4)
    m = init_params(cfg)
    assert abs(m.tok_emb.weight.std().item() - 0.02) < 1e-3
    assert abs(m.layers[0].attn.wo.weight.std().item() - 0.02 / 4) < 3e-4
    assert torch.equal(m.norm.weight, torch.ones(128))


def test_shapes_and_overflow():
    m = init_params(tiny())
    assert forward(m, [[1], [2]]).shape == (2, 1, 40)
    assert forward(m, np.zeros((3, 7), np.int64)).shape == (3, 7, 40)
    with pytest.raises(ContextOverflow):
        forward(m, np.zeros((1, 33), np.int64))


def test_softmax_rows_sum_to_one():
    m = init_params(tiny(dtype="float32"))
    logits = forward(m, np.random.default_rng(0).integers(0, 40, (2, 16)))
    sums = torch.softmax(logits.double(), dim=-1).sum(-1)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)


def test_causality_probe():
    m = init_params(tiny(dtype="float32", n_layers=2))
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.integers(0, 40, (2, 20))
        t = int(rng.integers(0, 19))
        y = x.copy()
        y[:, t + 1:] = rng.integers(0, 40, (2, 19 - t))
        assert torch.equal(forward(m, x)[:, :t + 1], forward(m, y)[:, :t + 1])


def test_position_matters():
    m = init_params(tiny())
    a = forward(m, [[3, 7, 11]])[0, -1]
    b = forward(m, [[7, 3, 11]])[0, -1]
    assert not torch.allclose(a, b)


def test_rope_rotation():
    cos, sin = rope_tables(tiny())
    x = torch.randn(1, 1, 4, 8, dtype=torch.float64)
    y = apply_rope(x, cos[:4], sin[:4])
    assert torch.allclose(y[..., 0, :], x[..., 0, :])  # position 0 is the identity
    assert torch.allclose(y.norm(dim=-1), x.norm(dim=-1))  # rotations keep length
    # dot products depend only on relative offset
    q, k = torch.randn(8, dtype=torch.float64), torch.randn(8, dtype=torch.float64)
    rot = lambda v, p: apply_rope(v.view(1, 1, 1, 8), cos[p:p + 1], sin[p:p + 1]).flatten()
    assert math.isclose(rot(q, 5) @ rot(k, 2), rot(q, 13) @ rot(k, 10), rel_tol=1e-9)


def test_cache_matches_full_forward():
    m = init_params(tiny(dtype="float64", n_layers=2))
    x = torch.as_tensor(np.random.default_rng(2).integers(0, 40, (1, 12)))
    full = m(x)
    cache = KVCache(m.config)
    parts = [m(x[:, :5], cache)] + [m(x[:, i:i + 1], cache) for i in range(5, 12)]
    assert torch.allclose(torch.cat(parts, dim=1), full, atol=1e-12)


def test_zero_output_head_gives_ln_vocab():
    m = init_params(tiny())
    with torch.no_grad():
        m.output.weight.zero_()
    b = make_batch([np.arange(10) % 40, np.arange(10, 20)])
    assert math.isclose(batch_loss(m, b).item(), math.log(40), rel_tol=1e-12)
    untrained = init_params(ModelConfig(vocab_size=322, dim=64, n_layers=2, n_heads=4))
    loss = batch_loss(untrained, make_batch([np.arange(64) * 5 % 322])).item()
    assert abs(loss - math.log(322)) < 0.05 * math.log(322)


def test_overfit_single_repeated_token():
    torch.manual_seed(0)
    m = init_params(tiny(dtype="float32"))
    b = make_batch([np.full(16, 7)] * 2)
    opt = torch.optim.Adam(m.parameters(), lr=1e-2)
    for _ in range(60):
        opt.zero_grad()
        loss = batch_loss(m, b)
        loss.backward()
        opt.step()
    assert batch_loss(m, b).item() < 1e-2


def test_non_finite_loss():
    m = init_params(tiny())
    with torch.no_grad():
        m.tok_emb.weight[3] = float("nan")
    with pytest.raises(NonFiniteLoss):
        loss_and_grads(m, make_batch([np.array([3, 4, 5])]))


def finite_difference_check(n_coords: int, seed: int = 0, h: float = 1e-3) -> tuple[float, set[str]]:
    """Largest relative error between autograd and a fourth-order central difference.

    A wide step keeps float64 round-off (~1e-16 / h) far below the smallest
    gradients; the five-point stencil keeps truncation error at O(h^4).
    """
    cfg = tiny(vocab_size=30, dim=16, n_layers=1, n_heads=2, seed=seed)
    m = init_params(cfg)
    rng = np.random.default_rng(seed)
    with torch.no_grad():  # move norms off 1.0 so their gradients are generic
        for name, p in m.named_parameters():
            if "norm" in name:
                p.add_(torch.as_tensor(rng.normal(0, 0.1, p.shape)))
    b = make_batch([rng.integers(0, 30, 8), rng.integers(0, 30, 8)])
    _, grads = loss_and_grads(m, b)
    params = dict(m.named_parameters())
    names = list(params)
    picks = [(n, i) for n in names for i in rng.choice(params[n].numel(), 4, replace=False)]
    while len(picks) < n_coords:
        n = names[rng.integers(len(names))]
        picks.append((n, int(rng.integers(params[n].numel()))))
    worst = 0.0
    covered = set()
    with torch.no_grad():
        for n, i in picks:
            flat = params[n].view(-1)
            orig = flat[i].item()
            f = {}
            for k in (-2, -1, 1, 2):
                flat[i] = orig + k * h
                f[k] = batch_loss(m, b).item()
            flat[i] = orig
            fd = (8 * (f[1] - f[-1]) - (f[2] - f[-2])) / (12 * h)
            g = grads[n].view(-1)[i].item()
            worst = max(worst, abs(fd - g) / max(abs(fd), abs(g), 1e-8))
            covered.add(n)
    return worst, covered


def test_gradients_match_finite_differences():
    worst, covered = finite_difference_check(120, seed=1)
    assert covered == {n for n, _ in init_params(tiny(vocab_size=30)).named_parameters()}
    assert worst < 1e-4


def test_forward_is_bit_stable():
    m = init_params(tiny(dtype="float32"))
    x = np.random.default_rng(5).integers(0, 40, (2, 10))
    assert torch.equal(forward(m, x), forward(m, x))
