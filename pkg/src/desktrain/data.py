"""Streaming sample-packing dataloader with deterministic, resumable state.

Documents from a JSONL corpus are tokenized, joined with an end-of-sequence
token after every document, and packed greedily into fixed-length training
sequences. A leftover tail from one document carries into the next sequence
rather than being padded away, so no tokens are dropped.

Sharding and ordering are pure functions of (seed, dp_degree, rank, epoch):

* Epoch 0 applies one global seeded permutation to the corpus and splits it
  into `dp_degree` contiguous, near-equal shards (first `n % dp_degree`
  shards get the extra document). Each rank owns its shard for the whole run.
* Later epochs re-permute the rank's own shard with a seed derived from
  (seed, epoch), so document order varies per epoch while membership of the
  shard never changes.

All iteration state lives in an immutable `LoaderState` value, and stepping
is a pure function of (state, corpus), so any emitted sequence can be
reproduced from the state that preceded it. States serialize to a small
versioned JSON record for checkpointing.
"""

from __future__ import annotations

import json
import queue
import threading
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Protocol, Sequence

import numpy as np

STATE_FORMAT_VERSION = 1


class EndOfData(Exception):
    """Raised when iteration would pass the configured epoch limit."""


class LoaderStateError(ValueError):
    """Raised for malformed or incompatible serialized loader state."""


class Tokenizer(Protocol):
    eos_id: int
    vocab_size: int

    def encode(self, text: str) -> list[int]: ...


@dataclass(frozen=True)
class ByteTokenizer:
    """UTF-8 byte tokenizer: byte value b maps to token b + 1, id 0 is EOS."""

    eos_id: int = 0
    vocab_size: int = 257

    def encode(self, text: str) -> list[int]:
        return [b + 1 for b in text.encode("utf-8")]


class Corpus:
    """An in-memory ordered collection of non-empty text documents."""

    def __init__(self, documents: Sequence[str]):
        self.documents = tuple(documents)
        if any(not d for d in self.documents):
            raise ValueError("corpus documents must be non-empty")

    def __len__(self) -> int:
        return len(self.documents)

    @classmethod
    def from_jsonl(cls, paths: Sequence[str]) -> "Corpus":
        """Load documents from JSONL files of rows {"text": ...}.

        File order and row order are preserved; rows with empty text are
        skipped.
        """
        docs = []
        for path in paths:
            with open(path, encoding="utf-8") as fh:
                for line_no, line in enumerate(fh, start=1):
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        row = json.loads(line)
                    except json.JSONDecodeError as exc:
                        raise ValueError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
                    if not isinstance(row, dict) or "text" not in row:
                        raise ValueError(f'{path}:{line_no}: expected an object with a "text" field')
                    text = row["text"]
                    if not isinstance(text, str):
                        raise ValueError(f'{path}:{line_no}: "text" must be a string')
                    if text:
                        docs.append(text)
        if not docs:
            raise ValueError(f"no non-empty documents found in {list(paths)}")
        return cls(docs)


def shuffle_and_split(n_docs: int, seed: int, dp_degree: int) -> list[list[int]]:
    """Seeded global shuffle of document indices, split into per-rank shards.

    Returns `dp_degree` lists of document indices; together they partition
    range(n_docs). Shard sizes differ by at most one, with the earlier ranks
    taking the larger shards.
    """
    if dp_degree < 1:
        raise ValueError("dp_degree must be >= 1")
    if n_docs < dp_degree:
        raise ValueError(f"need at least dp_degree={dp_degree} documents, got {n_docs}")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(n_docs)
    base, extra = divmod(n_docs, dp_degree)
    shards = []
    start = 0
    for rank in range(dp_degree):
        size = base + (1 if rank < extra else 0)
        shards.append([int(i) for i in order[start : start + size]])
        start += size
    return shards


@lru_cache(maxsize=256)
def _epoch_order(n_docs: int, seed: int, dp_degree: int, rank: int, epoch: int) -> tuple[int, ...]:
    """Document visit order for one rank in one epoch (cached, pure)."""
    shard = shuffle_and_split(n_docs, seed, dp_degree)[rank]
    if epoch == 0:
        return tuple(shard)
    rng = np.random.Generator(np.random.PCG64(seed ^ epoch))
    return tuple(shard[int(i)] for i in rng.permutation(len(shard)))


@dataclass(frozen=True)
class LoaderState:
    """Complete, immutable iteration state for one data-parallel rank.

    `cursor` indexes the next unread document within the epoch's visit
    order; `carry` holds tokens left over from the previous packed sequence.
    """

    seed: int
    dp_degree: int
    rank: int
    cursor: int
    carry: tuple[int, ...]
    epoch: int
    sequences_emitted: int

    @classmethod
    def initial(cls, seed: int, dp_degree: int, rank: int) -> "LoaderState":
        if not 0 <= rank < dp_degree:
            raise ValueError(f"rank {rank} out of range for dp_degree {dp_degree}")
        return cls(
            seed=seed,
            dp_degree=dp_degree,
            rank=rank,
            cursor=0,
            carry=(),
            epoch=0,
            sequences_emitted=0,
        )


def next_sequence(
    state: LoaderState,
    corpus: Corpus,
    tokenizer: Tokenizer,
    max_seq_len: int,
    max_epochs: int | None = None,
) -> tuple[np.ndarray, LoaderState]:
    """Produce the next packed sequence and the successor state.

    The sequence is exactly `max_seq_len` tokens: carry first, then whole
    documents each followed by one EOS token, with any overflow of the
    final document (plus its EOS) becoming the next state's carry.
    Raises EndOfData if filling the sequence would require entering epoch
    `max_epochs`.
    """
    if max_seq_len < 1:
        raise ValueError("max_seq_len must be >= 1")
    buf = list(state.carry)
    cursor, epoch = state.cursor, state.epoch
    order = _epoch_order(len(corpus), state.seed, state.dp_degree, state.rank, epoch)
    while len(buf) < max_seq_len:
        if cursor >= len(order):
            epoch += 1
            cursor = 0
            if max_epochs is not None and epoch >= max_epochs:
                raise EndOfData(f"epoch limit {max_epochs} reached")
            order = _epoch_order(len(corpus), state.seed, state.dp_degree, state.rank, epoch)
        buf.extend(tokenizer.encode(corpus.documents[order[cursor]]))
        buf.append(tokenizer.eos_id)
        cursor += 1
    seq = np.asarray(buf[:max_seq_len], dtype=np.int64)
    new_state = replace(
        state,
        cursor=cursor,
        epoch=epoch,
        carry=tuple(buf[max_seq_len:]),
        sequences_emitted=state.sequences_emitted + 1,
    )
    return seq, new_state


def next_batch(
    state: LoaderState,
    corpus: Corpus,
    tokenizer: Tokenizer,
    max_seq_len: int,
    batch_size: int,
    max_epochs: int | None = None,
) -> tuple[np.ndarray, LoaderState]:
    """Stack `batch_size` consecutive sequences into a [batch, max_seq_len]
    int64 array and return the state after the last of them."""
    rows = []
    for _ in range(batch_size):
        seq, state = next_sequence(state, corpus, tokenizer, max_seq_len, max_epochs)
        rows.append(seq)
    return np.stack(rows), state


def save_state(state: LoaderState) -> dict:
    """Serialize a LoaderState to a versioned JSON-compatible record."""
    return {
        "format_version": STATE_FORMAT_VERSION,
        "seed": state.seed,
        "dp_degree": state.dp_degree,
        "rank": state.rank,
        "cursor": state.cursor,
        "carry": list(state.carry),
        "epoch": state.epoch,
        "sequences_emitted": state.sequences_emitted,
    }


def restore_state(record: dict) -> LoaderState:
    """Rebuild a LoaderState from `save_state` output, validating shape and
    version. Raises LoaderStateError on anything malformed."""
    if not isinstance(record, dict):
        raise LoaderStateError(f"loader state record must be an object, got {type(record).__name__}")
    version = record.get("format_version")
    if version != STATE_FORMAT_VERSION:
        raise LoaderStateError(f"unsupported loader state format_version: {version!r}")
    required = ("seed", "dp_degree", "rank", "cursor", "carry", "epoch", "sequences_emitted")
    for key in required:
        if key not in record:
            raise LoaderStateError(f"loader state record missing field {key!r}")
    carry = record["carry"]
    if not isinstance(carry, list) or not all(isinstance(t, int) for t in carry):
        raise LoaderStateError("carry must be a list of token ids")
    ints = {}
    for key in required:
        if key == "carry":
            continue
        value = record[key]
        if not isinstance(value, int) or isinstance(value, bool):
            raise LoaderStateError(f"loader state field {key!r} must be an integer")
        ints[key] = value
    if not 0 <= ints["rank"] < ints["dp_degree"]:
        raise LoaderStateError(f"rank {ints['rank']} out of range for dp_degree {ints['dp_degree']}")
    if ints["cursor"] < 0 or ints["epoch"] < 0 or ints["sequences_emitted"] < 0:
        raise LoaderStateError("cursor, epoch and sequences_emitted must be non-negative")
    return LoaderState(
        seed=ints["seed"],
        dp_degree=ints["dp_degree"],
        rank=ints["rank"],
        cursor=ints["cursor"],
        carry=tuple(carry),
        epoch=ints["epoch"],
        sequences_emitted=ints["sequences_emitted"],
    )


class SequencePrefetcher:
    """Background producer of (sequence, successor state) pairs.

    With depth == 0 this is a plain synchronous wrapper around
    `next_sequence`. With depth > 0 a worker thread keeps up to `depth`
    ready sequences in a bounded queue. Because every queue item carries
    the exact LoaderState reached after producing it, prefetching is
    invisible to consumers: `state` always reflects the last item handed
    out, never work done ahead by the worker.
    """

    _DONE = object()

    def __init__(
        self,
        corpus: Corpus,
        tokenizer: Tokenizer,
        state: LoaderState,
        max_seq_len: int,
        depth: int = 0,
        max_epochs: int | None = None,
    ):
        if depth < 0:
            raise ValueError("depth must be >= 0")
        self._corpus = corpus
        self._tokenizer = tokenizer
        self._max_seq_len = max_seq_len
        self._max_epochs = max_epochs
        self._depth = depth
        self._state = state
        self._closed = False
        if depth > 0:
            self._queue: queue.Queue = queue.Queue(maxsize=depth)
            self._stop = threading.Event()
            self._producer_state = state
            self._thread = threading.Thread(target=self._produce, daemon=True)
            self._thread.start()

    @property
    def state(self) -> LoaderState:
        """State after the most recently consumed sequence."""
        return self._state

    def next(self) -> tuple[np.ndarray, LoaderState]:
        if self._closed:
            raise RuntimeError("prefetcher is closed")
        if self._depth == 0:
            seq, self._state = next_sequence(
                self._state, self._corpus, self._tokenizer, self._max_seq_len, self._max_epochs
            )
            return seq, self._state
        item = self._queue.get()
        if item is self._DONE:
            raise EndOfData("epoch limit reached")
        if isinstance(item, BaseException):
            raise item
        seq, self._state = item
        return seq, self._state

    def _produce(self) -> None:
        state = self._producer_state
        while not self._stop.is_set():
            try:
                seq, state = next_sequence(
                    state, self._corpus, self._tokenizer, self._max_seq_len, self._max_epochs
                )
            except EndOfData:
                self._put(self._DONE)
                return
            except BaseException as exc:  # surfaced to the consumer on next()
                self._put(exc)
                return
            self._put((seq, state))

    def _put(self, item) -> None:
        # Bounded put that gives up promptly once close() is requested.
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.05)
                return
            except queue.Full:
                continue

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        if self._depth > 0:
            self._stop.set()
            while True:
                try:
                    self._queue.get_nowait()
                except queue.Empty:
                    break
            self._thread.join(timeout=5.0)
