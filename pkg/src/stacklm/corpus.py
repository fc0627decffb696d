"""Whitespace-tokenized corpora: vocabularies and contiguous batched token streams.

A corpus is a UTF-8 text file with one sentence per line. Tokens are split on
whitespace, an end-of-sentence token is appended to every line, and unknown
tokens map to a dedicated unk id at encoding time.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "Vocabulary",
    "BatchedStream",
    "build_vocab",
    "batchify",
    "bptt_windows",
    "read_lines",
]


@dataclass(frozen=True)
class Vocabulary:
    """Dense token<->id bijection with end-of-sentence and unknown specials."""

    token_to_id: dict[str, int]
    id_to_token: tuple[str, ...]
    eos_id: int
    unk_id: int

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def encode_line(self, line: str) -> list[int]:
        """Ids for one line; OOV tokens map to unk, eos is appended."""
        unk = self.unk_id
        ids = [self.token_to_id.get(tok, unk) for tok in line.split()]
        ids.append(self.eos_id)
        return ids

    def encode(self, lines: Iterable[str]) -> np.ndarray:
        out: list[int] = []
        for line in lines:
            out.extend(self.encode_line(line))
        return np.asarray(out, dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[int(i)] for i in ids]

    def save(self, path: str | Path) -> None:
        """Write a two-column "id<TAB>token" file, one row per id."""
        with open(path, "w", encoding="utf-8") as fh:
            for i, tok in enumerate(self.id_to_token):
                fh.write(f"{i}\t{tok}\n")

    @classmethod
    def load(cls, path: str | Path, *, eos: str = "<eos>", unk: str = "<unk>") -> "Vocabulary":
        id_to_token: list[str] = []
        for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            idx_str, _, tok = raw.partition("\t")
            if int(idx_str) != lineno - 1:
                raise ValueError(f"{path}:{lineno}: ids must be dense and in order")
            id_to_token.append(tok)
        token_to_id = {tok: i for i, tok in enumerate(id_to_token)}
        if eos not in token_to_id or unk not in token_to_id:
            raise ValueError(f"{path}: missing special token {eos!r} or {unk!r}")
        return cls(token_to_id, tuple(id_to_token), token_to_id[eos], token_to_id[unk])


def build_vocab(lines: Iterable[str], *, eos: str = "<eos>", unk: str = "<unk>") -> Vocabulary:
    """Assign ids in first-occurrence order over the eos-terminated token stream.

    The unk token receives the final id when it never occurs in the corpus.
    Raises ValueError("empty corpus") when there are no lines at all.
    """
    token_to_id: dict[str, int] = {}
    order: list[str] = []

    def intern(tok: str) -> None:
        if tok not in token_to_id:
            token_to_id[tok] = len(order)
            order.append(tok)

    n_lines = 0
    for line in lines:
        n_lines += 1
        for tok in line.split():
            intern(tok)
        intern(eos)
    if n_lines == 0:
        raise ValueError("empty corpus")
    intern(unk)
    return Vocabulary(token_to_id, tuple(order), token_to_id[eos], token_to_id[unk])


def read_lines(path: str | Path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


@dataclass(frozen=True)
class BatchedStream:
    """B parallel token streams, each a contiguous slice of the encoded corpus."""

    tokens: np.ndarray  # (batch, steps), int64

    def __post_init__(self) -> None:
        if self.tokens.ndim != 2:
            raise ValueError("stream tokens must be a 2-D matrix")

    @property
    def batch_size(self) -> int:
        return self.tokens.shape[0]

    @property
    def total_steps(self) -> int:
        return self.tokens.shape[1]


def batchify(ids: Sequence[int] | np.ndarray, batch_size: int) -> BatchedStream:
    """Fold a flat id sequence into batch_size contiguous rows of equal length.

    Row b holds ids[b*steps : (b+1)*steps] with steps = len(ids) // batch_size;
    trailing tokens that do not fill a full column are dropped.
    """
    if batch_size <= 0:
        raise ValueError("batch size must be positive")
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim != 1:
        raise ValueError("token ids must be a flat sequence")
    if arr.size < batch_size:
        raise ValueError("insufficient tokens")
    steps = arr.size // batch_size
    return BatchedStream(arr[: batch_size * steps].reshape(batch_size, steps).copy())


def bptt_windows(stream: BatchedStream, window: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (inputs, targets) windows of up to `window` timesteps.

    Targets are inputs shifted by one step within the underlying stream;
    consecutive windows are contiguous so hidden state can be carried by the
    caller. A final partial window is yielded if at least one supervised
    position remains.
    """
    if window < 1:
        raise ValueError("window length must be >= 1")
    toks = stream.tokens
    last = toks.shape[1] - 1
    start = 0
    while start < last:
        stop = min(start + window, last)
        yield toks[:, start:stop], toks[:, start + 1 : stop + 1]
        start = stop
