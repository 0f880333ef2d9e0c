"""Synthetic desk-scale corpora: a copy task for fusion models and a
bracket-matching language with long-range constraints for LM contrasts."""

from __future__ import annotations

import numpy as np

COPY_LABEL = "copy"


def copy_pairs(rng: np.random.Generator, count: int, vocab_size: int = 8,
               min_len: int = 5, max_len: int = 10) -> list:
    """Sequence-transduction pairs where the target repeats the source."""
    lines = []
    for _ in range(count):
        n = int(rng.integers(min_len, max_len + 1))
        seq = " ".join(f"s{int(rng.integers(0, vocab_size))}" for _ in range(n))
        lines.append(f"{COPY_LABEL}\t{seq}\t{seq}")
    return lines


def bracket_sentence(rng: np.random.Generator, n_types: int = 16,
                     n_fillers: int = 12, min_dist: int = 5,
                     max_dist: int = 15, episodes: int = 3) -> list:
    """Filler tokens with matched bracket episodes.

    Each episode opens with ``open{k}``, places a ``mark`` cue one token
    before the close, and closes with ``close{k}`` at distance 5..15.
    Predicting the close type requires recalling which bracket opened the
    episode; the cue makes the position (but not the type) predictable.
    """
    length = int(rng.integers(24, 33))
    tokens = [f"f{int(rng.integers(0, n_fillers))}" for _ in range(length)]
    cursor = 0
    for _ in range(episodes):
        d = int(rng.integers(min_dist, max_dist + 1))
        p = cursor + int(rng.integers(0, 3))
        if p + d >= length:
            break
        k = int(rng.integers(0, n_types))
        tokens[p] = f"open{k}"
        tokens[p + d - 1] = "mark"
        tokens[p + d] = f"close{k}"
        cursor = p + d + 1
    return tokens


def bracket_corpus(rng: np.random.Generator, token_budget: int, **kwargs) -> list:
    """Sentences totalling approximately ``token_budget`` tokens."""
    lines = []
    total = 0
    while total < token_budget:
        sent = bracket_sentence(rng, **kwargs)
        lines.append(" ".join(sent))
        total += len(sent)
    return lines


def write_lines(path, lines) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
