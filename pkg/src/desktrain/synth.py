"""Synthetic corpora: low-entropy motif text for quick-learning smoke runs,
and random byte soup for exercising the dataloader.

The structured corpus concatenates words from a small fixed bank. Within a
word the next character is deterministic after the first letter (all first
letters are distinct), so even a very small model can push per-token loss
far below the uniform baseline by learning character bigrams and word
boundaries. Documents stay comfortably shorter than the preset sequence
length so packed sequences usually span several documents.
"""

from __future__ import annotations

import json

import numpy as np

MOTIFS = (
    "amber", "blurt", "cedar", "dwarf", "fjord", "gusty",
    "hoist", "jumbo", "knelt", "lunar", "month", "plumb",
)


def make_structured_corpus(
    n_docs: int,
    seed: int = 0,
    min_motifs: int = 8,
    max_motifs: int = 18,
) -> list[str]:
    """Documents of space-separated motif words, lengths in a narrow band."""
    if n_docs < 1 or min_motifs < 1 or max_motifs < min_motifs:
        raise ValueError("need n_docs >= 1 and 1 <= min_motifs <= max_motifs")
    rng = np.random.Generator(np.random.PCG64(seed))
    docs = []
    for _ in range(n_docs):
        k = int(rng.integers(min_motifs, max_motifs + 1))
        words = [MOTIFS[int(i)] for i in rng.integers(0, len(MOTIFS), size=k)]
        docs.append(" ".join(words))
    return docs


def make_random_corpus(
    n_docs: int,
    seed: int = 0,
    min_len: int = 1,
    max_len: int = 40,
    alphabet: str = "abcdefghijklmnopqrstuvwxyz ",
) -> list[str]:
    """Unstructured random-character documents of varying length."""
    if n_docs < 1 or min_len < 1 or max_len < min_len:
        raise ValueError("need n_docs >= 1 and 1 <= min_len <= max_len")
    rng = np.random.Generator(np.random.PCG64(seed))
    letters = np.array(list(alphabet))
    docs = []
    for _ in range(n_docs):
        k = int(rng.integers(min_len, max_len + 1))
        docs.append("".join(letters[rng.integers(0, len(letters), size=k)]))
    return docs


def write_jsonl(documents: list[str], path: str) -> None:
    """Write documents as JSONL rows of {"text": ...}."""
    with open(path, "w", encoding="utf-8") as fh:
        for doc in documents:
            fh.write(json.dumps({"text": doc}) + "\n")
