"""Whitespace tokenizer with a frequency-built vocabulary.

PAD (0) and UNK (1) are reserved; remaining ids are assigned by descending
corpus frequency with lexicographic tie-breaking, so building from any
permutation of the same corpus yields the same vocabulary.
"""

from __future__ import annotations

from collections import Counter
from collections.abc import Iterable

import numpy as np

from fedehr.linearize import LinearizedEvent

PAD_ID = 0
UNK_ID = 1


class Vocabulary:
    def __init__(self, token_to_id: dict[str, int]):
        self.token_to_id = token_to_id

    def __len__(self) -> int:
        return len(self.token_to_id) + 2

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)


def build_vocab(corpus: Iterable[LinearizedEvent | str], max_size: int) -> Vocabulary:
    if max_size < 2:
        raise ValueError("max_size must leave room for PAD and UNK")
    counts: Counter[str] = Counter()
    empty = True
    for item in corpus:
        empty = False
        text = item.text if isinstance(item, LinearizedEvent) else item
        counts.update(text.split())
    if empty:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = ranked[: max_size - 2]
    return Vocabulary({token: i + 2 for i, (token, _) in enumerate(kept)})


def tokenize(event: LinearizedEvent | str, vocab: Vocabulary, max_len: int) -> np.ndarray:
    """Token ids padded/truncated to max_len, UNK for unseen tokens."""
    text = event.text if isinstance(event, LinearizedEvent) else event
    ids = np.full(max_len, PAD_ID, dtype=np.int32)
    for pos, token in enumerate(text.split()[:max_len]):
        ids[pos] = vocab.id_of(token)
    return ids
