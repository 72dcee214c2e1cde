"""Vocabulary and greedy longest-match-first subword tokenizer."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .masking import CLS_ID, MASK_ID, PAD_ID, UNK_ID, TokenizedReport

SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[MASK]", "[UNK]")
CONTINUATION = "##"


class Vocabulary:
    """Dense token <-> id map with the four reserved ids first."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            tokens = list(SPECIAL_TOKENS) + [t for t in tokens if t not in SPECIAL_TOKENS]
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @classmethod
    def build(cls, words: Iterable[str], pieces: Iterable[str] = ()) -> "Vocabulary":
        return cls(list(SPECIAL_TOKENS) + sorted(set(words)) + sorted(set(pieces)))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")


def wordpiece(word: str, vocab: Vocabulary, max_chars: int = 100) -> list[str]:
    """Split one word by repeatedly taking the longest vocabulary prefix.

    Non-initial pieces carry the ``##`` prefix. If some position has no
    matching piece the whole word maps to ``[UNK]``.
    """
    if len(word) > max_chars:
        return ["[UNK]"]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while end > start:
            piece = word[start:end]
            if start > 0:
                piece = CONTINUATION + piece
            if piece in vocab:
                found = piece
                break
            end -= 1
        if found is None:
            return ["[UNK]"]
        pieces.append(found)
        start = end
    return pieces


def tokenize(text: str, vocab: Vocabulary, length: int) -> TokenizedReport:
    """Lower-case, split on whitespace, word-piece, prepend ``[CLS]``, pad/truncate to ``length``."""
    if length < 2:
        raise ValueError("report length must be at least 2")
    pieces = ["[CLS]"]
    for word in text.lower().split():
        pieces.extend(wordpiece(word, vocab))
    pieces = pieces[:length]
    ids = np.full(length, PAD_ID, dtype=np.int64)
    ids[: len(pieces)] = [vocab.index[p] for p in pieces]
    valid = np.zeros(length, dtype=bool)
    valid[: len(pieces)] = True
    return TokenizedReport(ids=ids, valid=valid, pad_token_id=PAD_ID, cls_token_id=CLS_ID,
                           mask_token_id=MASK_ID, tokens=pieces)


def detokenize(ids: Sequence[int], vocab: Vocabulary, keep_special: bool = False) -> str:
    words: list[str] = []
    for i in ids:
        tok = vocab.tokens[int(i)]
        if not keep_special and int(i) in (PAD_ID, CLS_ID):
            continue
        if tok.startswith(CONTINUATION) and words:
            words[-1] += tok[len(CONTINUATION):]
        else:
            words.append(tok)
    return " ".join(words)


__all__ = ["Vocabulary", "tokenize", "detokenize", "wordpiece", "SPECIAL_TOKENS", "UNK_ID"]
