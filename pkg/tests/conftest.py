import numpy as np
import pytest
import torch

from codeclm import bbpe
from codeclm.corpus import store_from_streams
from codeclm.model import ModelConfig
from codeclm.train import TrainConfig, fit
from codeclm.jpeg import CodecProfile, canonicalize, default_tables, encode_image


def random_image(rng: np.random.Generator, h: int = 64, w: int = 64) -> np.ndarray:
    """Noise blended with a random gradient so both flat and busy blocks occur."""
    noise = rng.integers(0, 256, (h, w, 3))
    yy, xx = np.mgrid[0:h, 0:w]
    grad = (yy[..., None] * rng.uniform(0, 4, 3) + xx[..., None] * rng.uniform(0, 4, 3)) % 256
    mix = rng.uniform(0, 1)
    return (mix * noise + (1 - mix) * grad).astype(np.uint8)


torch.set_num_threads(1)  # determinism tests assume a single thread


@pytest.fixture(scope="session")
def profile():
    return CodecProfile()


@pytest.fixture(scope="session")
def tables():
    return default_tables()


@pytest.fixture(scope="session")
def small_streams():
    rng = np.random.default_rng(7)
    return [canonicalize(encode_image(random_image(rng, 32, 48)))[0].data for _ in range(12)]


@pytest.fixture(scope="session")
def small_vocab(small_streams):
    return bbpe.train_bpe(small_streams, 290, profile_hash=CodecProfile().hash)


@pytest.fixture(scope="session")
def overfit():
    """A model trained to memorize a single 32x32 image's token sequence."""
    data = encode_image(random_image(np.random.default_rng(42), 32, 32))
    stream, tables = canonicalize(data)
    vocab = bbpe.train_bpe([stream.data], 300)
    doc = bbpe.encode(stream.data, vocab, True, True)
    store = store_from_streams([stream.data] * 4, vocab, CodecProfile(), len(doc))
    mc = ModelConfig(vocab_size=vocab.size, dim=32, n_layers=1, n_heads=2, max_context=len(doc) + 8)
    state, _ = fit(TrainConfig(total_steps=300, batch_size=4, peak_lr=1e-2), mc, store)
    return state.model, vocab, tables, data, doc


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
