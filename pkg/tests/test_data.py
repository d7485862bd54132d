import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tinymoe.data import (
    ByteTokenizer,
    TokenWindowDataset,
    batch_iterator,
    build_windows,
    read_dataset,
    split_train_val,
    stream_batches,
    synthetic_stories,
    token_stream,
    write_dataset,
)
from tinymoe.objective import loss_targets


def windows(n, L=512, vocab=100, seed=0):
    return TokenWindowDataset(np.random.default_rng(seed).integers(0, vocab, (n, L)).astype(np.int32), L, vocab)


def test_window_counts():
    assert len(build_windows(np.arange(1024) % 7, 512)) == 2
    ds = build_windows(np.arange(1023) % 7, 512)
    assert len(ds) == 1
    np.testing.assert_array_equal(ds.windows[0], np.arange(512) % 7)
    with pytest.raises(ValueError):
        build_windows(np.arange(511), 512)


def test_windows_do_not_overlap():
    stream = np.arange(2000) % 1000
    ds = build_windows(stream, 100, 1000)
    np.testing.assert_array_equal(ds.windows.reshape(-1), stream[:2000])


def test_full_corpus_loss_token_count():
    assert 834_322 * loss_targets(512) == 426_338_542
    ds = TokenWindowDataset(np.zeros((3, 512), np.int32), 512, 10)
    assert ds.loss_tokens == 3 * 511


@settings(max_examples=30, deadline=None)
@given(st.text(max_size=200))
def test_byte_tokenizer_roundtrip(text):
    tok = ByteTokenizer()
    ids = tok.encode(text)
    assert all(0 <= i < tok.vocab_size for i in ids)
    assert tok.decode(ids) == text


def test_token_stream_appends_separator():
    tok = ByteTokenizer()
    s = token_stream(["ab", "c"], tok)
    assert s.tolist() == [97, 98, 256, 99, 256]
    assert tok.decode(s) == "abc"


def test_split_proportions_and_stability():
    ds = windows(10_000, L=4)
    tr, va = split_train_val(ds, 0.95, 1337)
    assert len(tr) + len(va) == 10_000
    assert 450 <= len(va) <= 550
    tr2, va2 = split_train_val(ds, 0.95, 1337)
    np.testing.assert_array_equal(va.windows, va2.windows)
    _, va3 = split_train_val(ds, 0.95, 7)
    assert not np.array_equal(va.windows[:50], va3.windows[:50])
    assert (tr.split, va.split) == ("train", "val")


def test_split_membership_depends_only_on_index():
    # appending windows never moves the existing ones across the split
    small, big = windows(200, L=3), windows(200, L=3)
    big = TokenWindowDataset(np.concatenate([small.windows, windows(50, L=3, seed=9).windows]), 3, 100)
    _, v_small = split_train_val(small, 0.9, 1)
    _, v_big = split_train_val(big, 0.9, 1)
    np.testing.assert_array_equal(v_big.windows[: len(v_small)], v_small.windows)


def test_split_errors():
    with pytest.raises(ValueError):
        split_train_val(windows(10), 1.0)
    with pytest.raises(ValueError):
        split_train_val(TokenWindowDataset(np.zeros((0, 4), np.int32), 4, 10))


def test_batches_keep_partial_and_cover_epoch():
    ds = windows(33, L=8)
    batches = list(batch_iterator(ds, 16, seed=1, epoch=0))
    assert [len(b) for b in batches] == [16, 16, 1]
    rows = {tuple(r) for b in batches for r in b}
    assert rows == {tuple(r) for r in ds.windows}
    again = list(batch_iterator(ds, 16, seed=1, epoch=0))
    assert all(np.array_equal(a, b) for a, b in zip(batches, again))
    other = list(batch_iterator(ds, 16, seed=1, epoch=1))
    assert not np.array_equal(batches[0], other[0])


def test_step_token_bookkeeping():
    # one optimizer step = 2 micro-batches of 16 windows, 511 targets each
    assert 2 * 16 * loss_targets(512) == 16_352
    assert 16 * loss_targets(512) == 8_176
    assert 250 * 2 * 16 * 511 == 4_088_000


def test_stream_batches_marks_epoch_ends():
    ds = windows(5, L=4)
    it = stream_batches(ds, 2, seed=0)
    got = [next(it)[:2] for _ in range(6)]
    assert got == [(0, False), (0, False), (0, True), (1, False), (1, False), (1, True)]


def test_dataset_file_roundtrip(tmp_path):
    ds = windows(7, L=16, vocab=300)
    path = tmp_path / "train.bin"
    write_dataset(path, ds)
    back = read_dataset(path)
    np.testing.assert_array_equal(back.windows, ds.windows)
    assert (back.vocab_size, back.window_len) == (300, 16)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(ValueError, match="magic"):
        read_dataset(path)


def test_synthetic_stories_deterministic():
    a, b = synthetic_stories(20, seed=3), synthetic_stories(20, seed=3)
    assert a == b and a != synthetic_stories(20, seed=4)
    assert all(s.startswith("Once upon a time") for s in a)
