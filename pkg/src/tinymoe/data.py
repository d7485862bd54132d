"""Tokenizers, fixed-window datasets, deterministic split and batching."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Protocol

import numpy as np

MAGIC = b"TMWD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")  # magic, version, vocab_size, window_len, count


class Tokenizer(Protocol):
    vocab_size: int

    def encode(self, text: str) -> list[int]: ...

    def decode(self, ids: Iterable[int]) -> str: ...


class ByteTokenizer:
    """UTF-8 bytes as ids 0..255 plus a document separator at 256."""

    SEP = 256
    vocab_size = 257

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids: Iterable[int]) -> str:
        return bytes(i for i in ids if i < 256).decode("utf-8", errors="replace")

    @property
    def separator_id(self) -> int:
        return self.SEP


class SentencePieceTokenizer:
    """Wraps a pre-trained SentencePiece model file (training one is not supported)."""

    def __init__(self, model_path: str | Path):
        import sentencepiece as spm

        self._sp = spm.SentencePieceProcessor(model_file=str(model_path))
        self.vocab_size = int(self._sp.get_piece_size())

    def encode(self, text: str) -> list[int]:
        return list(self._sp.encode(text))

    def decode(self, ids: Iterable[int]) -> str:
        return self._sp.decode(list(ids))

    @property
    def separator_id(self) -> int:
        eos = self._sp.eos_id()
        return eos if eos >= 0 else 0


@dataclass
class TokenWindowDataset:
    windows: np.ndarray  # (n, window_len) int32
    window_len: int
    vocab_size: int
    split: str = "all"
    shard_seed: int = 1337

    def __len__(self) -> int:
        return int(self.windows.shape[0])

    @property
    def loss_tokens(self) -> int:
        return len(self) * (self.window_len - 1)


def token_stream(docs: Iterable[str], tokenizer, separator: bool = True) -> np.ndarray:
    """Concatenate encoded documents, each followed by the separator id."""
    parts: list[int] = []
    sep = getattr(tokenizer, "separator_id", None)
    for doc in docs:
        parts.extend(tokenizer.encode(doc))
        if separator and sep is not None:
            parts.append(sep)
    return np.asarray(parts, dtype=np.int32)


def build_windows(stream: np.ndarray, window_len: int = 512, vocab_size: int | None = None) -> TokenWindowDataset:
    """Cut non-overlapping windows; the trailing remainder is dropped."""
    stream = np.asarray(stream, dtype=np.int32)
    n = len(stream) // window_len
    if n == 0:
        raise ValueError(f"token stream of length {len(stream)} is shorter than one window ({window_len})")
    vocab = int(stream.max()) + 1 if vocab_size is None else vocab_size
    return TokenWindowDataset(stream[: n * window_len].reshape(n, window_len).copy(), window_len, vocab)


def split_train_val(ds: TokenWindowDataset, ratio: float = 0.95, shard_seed: int = 1337) -> tuple[TokenWindowDataset, TokenWindowDataset]:
    """Assign each window to train with probability ``ratio``.

    The draw for window i is the i-th value of a generator seeded with
    ``shard_seed``, so membership depends only on (seed, index).
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    if len(ds) == 0:
        raise ValueError("cannot split an empty dataset")
    u = np.random.default_rng(shard_seed).random(len(ds))
    is_train = u < ratio
    mk = lambda rows, name: TokenWindowDataset(ds.windows[rows], ds.window_len, ds.vocab_size, name, shard_seed)
    return mk(is_train, "train"), mk(~is_train, "val")


def batch_iterator(ds: TokenWindowDataset, batch_size: int = 16, seed: int = 0, epoch: int = 0) -> Iterator[np.ndarray]:
    """One shuffled epoch; the last partial batch is kept."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    order = np.random.default_rng([seed, epoch]).permutation(len(ds))
    for i in range(0, len(order), batch_size):
        yield ds.windows[order[i:i + batch_size]]


def stream_batches(ds: TokenWindowDataset, batch_size: int, seed: int) -> Iterator[tuple[int, bool, np.ndarray]]:
    """Endless (epoch, is_last_in_epoch, batch) stream over successive epochs."""
    epoch = 0
    while True:
        batches = list(batch_iterator(ds, batch_size, seed, epoch))
        for j, b in enumerate(batches):
            yield epoch, j == len(batches) - 1, b
        epoch += 1


def write_dataset(path: str | Path, ds: TokenWindowDataset) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, ds.vocab_size, ds.window_len, len(ds)))
        f.write(np.ascontiguousarray(ds.windows, dtype="<i4").tobytes())


def read_dataset(path: str | Path, split: str | None = None) -> TokenWindowDataset:
    path = Path(path)
    raw = path.read_bytes()
    magic, version, vocab, window_len, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a token-window dataset (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    body = np.frombuffer(raw, dtype="<i4", offset=_HEADER.size)
    if body.size != count * window_len:
        raise ValueError(f"{path}: expected {count * window_len} tokens, found {body.size}")
    windows = body.reshape(count, window_len).astype(np.int32)
    return TokenWindowDataset(windows, window_len, vocab, split or path.stem)


_NAMES = ["Lily", "Tom", "Mia", "Ben", "Sam", "Anna", "Max", "Zoe", "Leo", "Ella", "Jack", "Rosa",
          "Finn", "Ivy", "Noah", "Lucy", "Omar", "Nina", "Theo", "Ruby"]
_ANIMALS = ["cat", "dog", "bird", "frog", "bunny", "duck", "fox", "bear", "owl", "mouse", "turtle", "puppy"]
_PLACES = ["park", "garden", "forest", "beach", "house", "farm", "school", "river", "hill", "shop", "lake", "zoo"]
_THINGS = ["ball", "kite", "box", "hat", "cake", "boat", "book", "drum", "cup", "shell", "stick", "toy car",
           "blanket", "flower", "apple", "robot"]
_ADJS = ["red", "big", "small", "shiny", "old", "soft", "blue", "funny", "green", "tiny", "loud", "yellow"]
_FEELINGS = ["happy", "sad", "scared", "proud", "tired", "excited", "angry", "calm", "curious", "silly"]
_VERBS = ["found", "lost", "shared", "painted", "hid", "carried", "dropped", "fixed", "threw", "wanted"]
_MOVES = ["ran", "walked", "jumped", "hopped", "danced", "raced", "climbed", "swam"]
_WEATHER = ["sunny", "rainy", "windy", "cold", "warm", "snowy"]


def synthetic_stories(n_docs: int, seed: int = 0) -> list[str]:
    """Grammar-generated children's stories for desk-scale runs without a download."""
    rng = np.random.default_rng(seed)
    pick = lambda xs: xs[int(rng.integers(len(xs)))]
    docs = []
    for _ in range(n_docs):
        a, b = pick(_NAMES), pick(_NAMES)
        animal, place = pick(_ANIMALS), pick(_PLACES)
        thing = f"{pick(_ADJS)} {pick(_THINGS)}"
        templates = [
            lambda: f"{a} {pick(_MOVES)} to the {pick(_PLACES)}.",
            lambda: f"{a} {pick(_VERBS)} a {pick(_ADJS)} {pick(_THINGS)}.",
            lambda: f"The {animal} felt {pick(_FEELINGS)}.",
            lambda: f"\"Look at my {thing}!\" said {pick([a, b])}.",
            lambda: f"{b} {pick(_VERBS)} the {thing} near the {pick(_PLACES)}.",
            lambda: f"It was a {pick(_WEATHER)} day, so {a} and {b} {pick(_MOVES)} home.",
            lambda: f"The {animal} {pick(_MOVES)} after the {pick(_THINGS)}.",
            lambda: f"{pick([a, b])} was {pick(_FEELINGS)} because the {pick(_THINGS)} was {pick(_ADJS)}.",
            lambda: f"\"Can we play with the {animal}?\" asked {b}.",
            lambda: f"Then {a} gave {b} a {pick(_ADJS)} {pick(_THINGS)}.",
        ]
        sents = [f"Once upon a time, {a} lived near a {pick(_ADJS)} {place} with a {animal}."]
        for _ in range(int(rng.integers(3, 8))):
            sents.append(templates[int(rng.integers(len(templates)))]())
        sents.append(f"In the end, {a} and {b} were {pick(_FEELINGS)}.")
        docs.append(" ".join(sents))
    return docs
