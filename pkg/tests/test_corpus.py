import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codeclm import bbpe
from codeclm.corpus import (
    IGNORE,
    TokenStore,
    batch_at,
    batches,
    batches_per_epoch,
    build_corpus,
    check_vocab,
    store_from_streams,
)
from codeclm.errors import DimensionError, EmptyCorpus, VocabMismatch
from codeclm.images import save_png, save_raw
from codeclm.jpeg import CodecProfile

from conftest import random_image


def _store(streams, vocab, L=32):
    return store_from_streams(streams, vocab, CodecProfile(), L)


def test_empty_corpus(tmp_path, profile, small_vocab):
    with pytest.raises(EmptyCorpus):
        build_corpus(tmp_path, profile, small_vocab)
    with pytest.raises(EmptyCorpus):
        store_from_streams([], small_vocab, profile)


def test_identical_black_images(tmp_path, profile, small_vocab):
    for i in range(10):
        save_png(tmp_path / f"{i:02d}.png", np.zeros((16, 16, 3), np.uint8))
    store = build_corpus(tmp_path, profile, small_vocab, context_len=16)
    docs = [store.document(i) for i in range(10)]
    assert all(np.array_equal(d, docs[0]) for d in docs)
    assert len(store.tokens) == 10 * len(docs[0])
    assert docs[0][0] == bbpe.BOS and docs[0][-1] == bbpe.EOS


def test_files_in_name_order_and_errors_name_the_file(tmp_path, profile, small_vocab):
    rng = np.random.default_rng(0)
    imgs = {name: random_image(rng, 32, 32) for name in ("b.png", "a.png", "c.png")}
    for name, x in imgs.items():
        save_png(tmp_path / name, x)
    save_raw(tmp_path / "d.rgb", random_image(rng, 16, 48))
    store = build_corpus(tmp_path, profile, small_vocab, threads=2)
    assert store.names == ["a.png", "b.png", "c.png", "d.rgb"]
    serial = build_corpus(tmp_path, profile, small_vocab, threads=1)
    assert np.array_equal(store.tokens, serial.tokens)
    save_png(tmp_path / "e.png", random_image(rng, 20, 20))
    with pytest.raises(DimensionError, match="e.png"):
        build_corpus(tmp_path, profile, small_vocab)


def test_conservation_and_framing(small_streams, small_vocab):
    store = _store(small_streams, small_vocab)
    assert store.doc_lengths.sum() == len(store.tokens)
    for i in range(store.n_docs):
        d = store.document(i)
        assert d[0] == bbpe.BOS and d[-1] == bbpe.EOS
        assert bbpe.decode(d, small_vocab) == small_streams[i]


def test_chunks_drop_the_partial_tail(small_streams, small_vocab):
    store = _store(small_streams, small_vocab, L=50)
    assert store.n_chunks == len(store.tokens) // 50
    for i in range(store.n_chunks):
        assert np.array_equal(store.chunk(i), store.tokens[i * 50:(i + 1) * 50])
    with pytest.raises(IndexError):
        store.chunk(store.n_chunks)


def test_chunks_decode_to_corpus_substrings(small_streams, small_vocab):
    store = _store(small_streams, small_vocab, L=40)
    corpus = b"".join(small_streams)
    for i in range(store.n_chunks):
        assert bbpe.decode(store.chunk(i), small_vocab) in corpus


def test_three_chunks_batch_size_one(small_vocab, profile):
    store = TokenStore(np.arange(30) % 200, np.array([0, 30]), small_vocab.hash, profile.hash, 10)
    assert store.n_chunks == 3
    assert batches_per_epoch(store, 1) == 3
    assert len(list(batches(store, 1, seed=0))) == 3


def test_epoch_is_a_permutation(small_streams, small_vocab):
    store = _store(small_streams, small_vocab, L=16)
    seen = [tuple(row) for b in batches(store, 3, seed=5) for row in b.inputs]
    expected = [tuple(store.chunk(i)) for i in range(store.n_chunks)]
    assert sorted(seen) == sorted(expected) and len(seen) == store.n_chunks


def test_same_seed_same_order(small_streams, small_vocab):
    store = _store(small_streams, small_vocab, L=16)
    a = [b.inputs for b in batches(store, 4, seed=3)]
    b = [b.inputs for b in batches(store, 4, seed=3)]
    c = [b.inputs for b in batches(store, 4, seed=4)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_batch_at_replays_epochs(small_streams, small_vocab):
    store = _store(small_streams, small_vocab, L=16)
    per = batches_per_epoch(store, 4)
    for epoch in (0, 1):
        for i, b in enumerate(batches(store, 4, seed=2, epoch=epoch)):
            assert np.array_equal(batch_at(store, 4, 2, epoch * per + i).inputs, b.inputs)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), bs=st.integers(1, 6), step=st.integers(0, 200))
def test_targets_are_shifted_inputs(seed, bs, step):
    store = _shift_store()
    b = batch_at(store, bs, seed, step)
    assert np.array_equal(b.targets[:, :-1], b.inputs[:, 1:])
    assert (b.targets[:, -1] == IGNORE).all()


_cache = {}


def _shift_store():
    if "s" not in _cache:
        rng = np.random.default_rng(1)
        _cache["s"] = TokenStore(rng.integers(0, 258, 500), np.array([0, 500]), "x", CodecProfile().hash, 12)
    return _cache["s"]


def test_save_load_round_trip(tmp_path, small_streams, small_vocab):
    store = _store(small_streams, small_vocab)
    store.save(tmp_path)
    assert (tmp_path / "tokens.bin").stat().st_size == 2 * len(store.tokens)
    back = TokenStore.load(tmp_path)
    assert np.array_equal(back.tokens, store.tokens)
    assert np.array_equal(back.doc_offsets, store.doc_offsets)
    assert back.manifest() == store.manifest()
    m = store.manifest()
    for key in ("image_count", "token_count", "mean_doc_length", "median_doc_length", "vocab_hash", "profile_hash"):
        assert key in m


def test_vocab_check(small_streams, small_vocab):
    store = _store(small_streams, small_vocab)
    check_vocab(store, small_vocab)
    with pytest.raises(VocabMismatch):
        check_vocab(store, bbpe.BpeVocab())
