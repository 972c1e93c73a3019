import json
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codeclm import bbpe
from codeclm.bbpe import BOS, EOS, FIRST_MERGE, BpeVocab
from codeclm.errors import CorpusTooSmall, InvalidTokenId

GOLDEN = Path(__file__).parent / "golden"


def naive_train(corpus, target_vocab, min_count=2):
    """Brute-force reference trainer: recount every pair each round."""
    docs = [list(d) for d in corpus]
    merges = []
    for new in range(FIRST_MERGE, target_vocab):
        counts = Counter()
        for d in docs:
            counts.update(zip(d, d[1:]))
        if not counts:
            break
        best_n = max(counts.values())
        if best_n < min_count:
            break
        pair = min(p for p, n in counts.items() if n == best_n)
        merges.append(pair)
        docs = [naive_merge(d, pair, new) for d in docs]
    return merges


def naive_merge(seq, pair, new):
    out, i = [], 0
    while i < len(seq):
        if i + 1 < len(seq) and (seq[i], seq[i + 1]) == pair:
            out.append(new)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def naive_encode(data, vocab):
    seq = list(data)
    for i, pair in enumerate(vocab.merges):
        seq = naive_merge(seq, pair, FIRST_MERGE + i)
    return seq


def golden_corpus():
    return [bytes((i * 7 + j * j) % 13 + 60 for j in range(200)) for i in range(5)]


# -- training -----------------------------------------------------------------

def test_first_merge_on_aaab():
    corpus = [b"aaab", b"aaab"]
    vocab = bbpe.train_bpe(corpus, 259)
    assert vocab.merges == ((97, 97),)
    assert naive_train(corpus, 259) == [(97, 97)]


def test_target_258_means_no_merges():
    vocab = bbpe.train_bpe([b"abcabc"], 258)
    assert vocab.merges == () and vocab.size == 258
    assert bbpe.encode(b"abc", vocab) == [97, 98, 99]


def test_corpus_too_small():
    with pytest.raises(CorpusTooSmall):
        bbpe.train_bpe([b"abcdef"], 300)
    with pytest.raises(CorpusTooSmall):
        bbpe.train_bpe([], 300)


def test_stops_when_pairs_run_out():
    vocab = bbpe.train_bpe([b"abab", b"abab"], 400)
    assert vocab.size < 400
    assert vocab.merges[0] == (97, 98)


@settings(max_examples=60, deadline=None)
@given(corpus=st.lists(st.binary(min_size=0, max_size=40).map(lambda b: bytes(x % 4 for x in b)),
                       min_size=1, max_size=6),
       target=st.integers(258, 275))
def test_training_matches_brute_force(corpus, target):
    expected = naive_train(corpus, target)
    if not expected and target > FIRST_MERGE:
        with pytest.raises(CorpusTooSmall):
            bbpe.train_bpe(corpus, target)
        return
    assert list(bbpe.train_bpe(corpus, target).merges) == expected


def test_training_is_deterministic(small_streams):
    assert bbpe.train_bpe(small_streams, 280) == bbpe.train_bpe(list(small_streams), 280)


def test_size_identity(small_vocab):
    assert small_vocab.size == 256 + len(small_vocab.merges) + 2


# -- encode / decode ------------------------------------------------------------

def test_specials():
    v = BpeVocab()
    assert bbpe.encode(b"", v, add_bos=True, add_eos=True) == [BOS, EOS]
    assert bbpe.decode([BOS, EOS], v) == b""
    assert bbpe.decode([0x41], v) == b"A"


def test_unlearned_bytes_are_one_token_each(small_vocab):
    data = bytes([1, 3, 5, 7])
    learned = set(small_vocab.merges)
    assert not any(p in learned for p in zip(data, data[1:]))
    assert bbpe.encode(data, small_vocab) == list(data)


def test_invalid_token_id(small_vocab):
    with pytest.raises(InvalidTokenId):
        bbpe.decode([small_vocab.size], small_vocab)
    with pytest.raises(InvalidTokenId):
        bbpe.decode([-1], small_vocab)
    with pytest.raises(InvalidTokenId):
        BpeVocab(((BOS, 1),))
    with pytest.raises(InvalidTokenId):
        bbpe.check_sequence([1, BOS], small_vocab)
    with pytest.raises(InvalidTokenId):
        bbpe.check_sequence([BOS, EOS, 3], small_vocab)


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=300))
def test_encode_matches_reference_and_round_trips(data):
    vocab = _vocab()
    ids = bbpe.encode(data, vocab)
    assert ids == naive_encode(data, vocab)
    assert bbpe.decode(ids, vocab) == data
    assert len(bbpe.encode(data, vocab, True, True)) <= len(data) + 2
    assert BOS not in ids and EOS not in ids


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 289), max_size=100))
def test_decode_fuzz(ids):
    assert isinstance(bbpe.decode(ids, _vocab()), bytes)


@settings(max_examples=100, deadline=None)
@given(data=st.binary(max_size=200), frac=st.floats(0, 1))
def test_prefix_stability(data, frac):
    vocab = _vocab()
    ids = bbpe.encode(data, vocab)
    k = int(frac * len(ids))
    assert data.startswith(bbpe.decode(ids[:k], vocab))
    offset = int(frac * len(data))
    prompt = bbpe.encode_prompt(data, offset, vocab)
    assert prompt[0] == BOS and bbpe.decode(prompt, vocab) == data[:offset]
    cut = bbpe.token_boundary(ids, vocab, offset)
    assert len(bbpe.decode(ids[:cut], vocab)) <= offset


def test_corpus_streams_round_trip(small_streams, small_vocab):
    for s in small_streams:
        assert bbpe.decode(bbpe.encode(s, small_vocab, True, True), small_vocab) == s


_cache = {}


def _vocab():
    if "v" not in _cache:
        rng = np.random.default_rng(0)
        corpus = [bytes(rng.integers(0, 6, 300).astype(np.uint8)) + bytes(range(256)) for _ in range(4)]
        _cache["v"] = bbpe.train_bpe(corpus, 290)
    return _cache["v"]


# -- vocab file ---------------------------------------------------------------

def test_vocab_golden_file(tmp_path):
    vocab = bbpe.train_bpe(golden_corpus(), 300, profile_hash="66a6fda94c49f480")
    vocab.save(tmp_path / "vocab.json")
    assert (tmp_path / "vocab.json").read_text() == (GOLDEN / "vocab_small.json").read_text()
    assert BpeVocab.load(GOLDEN / "vocab_small.json") == vocab


def test_vocab_hash_guards_edits(tmp_path, small_vocab):
    small_vocab.save(tmp_path / "v.json")
    d = json.loads((tmp_path / "v.json").read_text())
    d["merges"][0]["pair"] = [1, 2]
    (tmp_path / "v.json").write_text(json.dumps(d))
    with pytest.raises(ValueError):
        BpeVocab.load(tmp_path / "v.json")
