"""Vocabulary, tokenization and whole-word masking."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

PAD, CLS, SEP, MSK, UNK = "[PAD]", "[CLS]", "[SEP]", "[MSK]", "[UNK]"
RESERVED = (PAD, CLS, SEP, MSK, UNK)
PAD_ID, CLS_ID, SEP_ID, MSK_ID, UNK_ID = range(len(RESERVED))

# 448 text slots including [CLS] and [SEP]
MAX_TEXT_PIECES = 446

_WORD_RE = re.compile(r"\w+|[^\w\s]")


def split_words(text: str) -> list[str]:
    """Lowercase and split on whitespace; punctuation marks become words."""
    return _WORD_RE.findall(text.lower())


class Vocabulary:
    """Word-level vocabulary with the reserved tokens at ids 0-4."""

    def __init__(self, pieces: Iterable[str]):
        pieces = list(pieces)
        if tuple(pieces[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"vocabulary must start with reserved tokens {RESERVED}")
        if len(set(pieces)) != len(pieces):
            raise ValueError("duplicate pieces in vocabulary")
        self._pieces = pieces
        self._ids = {p: i for i, p in enumerate(pieces)}

    def __len__(self) -> int:
        return len(self._pieces)

    def __contains__(self, piece: str) -> bool:
        return piece in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._pieces == other._pieces

    @property
    def pieces(self) -> list[str]:
        return list(self._pieces)

    def id(self, piece: str) -> int:
        return self._ids.get(piece, UNK_ID)

    def piece(self, idx: int) -> str:
        return self._pieces[idx]

    def save(self, path) -> None:
        lines = "".join(f"{p}\t{i}\n" for i, p in enumerate(self._pieces))
        Path(path).write_text(lines, encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        entries = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            try:
                piece, idx = line.rsplit("\t", 1)
                entries.append((int(idx), piece))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: expected 'piece<TAB>id'") from exc
        entries.sort()
        if [i for i, _ in entries] != list(range(len(entries))):
            raise ValueError(f"{path}: ids are not dense from 0")
        return cls(p for _, p in entries)


def build_vocab(corpus: Iterable[str], max_size: int | None = None) -> Vocabulary:
    """Frequency-ranked word vocabulary; ties broken alphabetically.

    ``max_size`` bounds the number of corpus words kept, not counting the
    reserved tokens.
    """
    counts: Counter[str] = Counter()
    seen_text = False
    for text in corpus:
        seen_text = True
        counts.update(w for w in split_words(text) if w not in RESERVED)
    if not seen_text or not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if max_size is not None:
        ranked = ranked[:max_size]
    return Vocabulary(list(RESERVED) + [w for w, _ in ranked])


@dataclass
class TokenSequence:
    """Token ids plus one ``(start, end)`` index range per source word."""

    ids: list[int]
    groups: list[tuple[int, int]]

    def __post_init__(self):
        pos = 0
        for start, end in self.groups:
            if start != pos or end <= start:
                raise ValueError("word groups must partition the token range in order")
            pos = end
        if pos != len(self.ids):
            raise ValueError("word groups must cover every token")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class MaskedSequence:
    ids: list[int]
    groups: list[tuple[int, int]]
    masked_positions: list[int] = field(default_factory=list)
    original_ids: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    def unmasked(self) -> list[int]:
        ids = list(self.ids)
        for pos, orig in zip(self.masked_positions, self.original_ids):
            ids[pos] = orig
        return ids


def tokenize(text: str, vocab: Vocabulary, max_len: int = MAX_TEXT_PIECES) -> TokenSequence:
    """Tokenize ``text`` into one piece per word, truncating at word boundaries."""
    ids: list[int] = []
    groups: list[tuple[int, int]] = []
    for word in split_words(text):
        pieces = [vocab.id(word)]
        if len(ids) + len(pieces) > max_len:
            break
        groups.append((len(ids), len(ids) + len(pieces)))
        ids.extend(pieces)
    return TokenSequence(ids, groups)


def detokenize(seq, vocab: Vocabulary) -> str:
    ids = seq.ids if hasattr(seq, "ids") else seq
    return " ".join(vocab.piece(i) for i in ids)


def apply_wwm_mask(seq: TokenSequence, prob: float, rng: np.random.Generator) -> MaskedSequence:
    """Whole-word masking: each word group is masked with probability ``prob``.

    All pieces of a selected group become [MSK]. When no group is drawn,
    one group chosen uniformly is masked so the MLM loss stays defined.
    """
    if not 0.0 <= prob < 1.0:
        raise ValueError(f"mask probability must be in [0, 1), got {prob}")
    if not seq.groups:
        raise ValueError("cannot mask an empty sequence")
    chosen = np.flatnonzero(rng.random(len(seq.groups)) < prob)
    if chosen.size == 0:
        chosen = np.array([rng.integers(len(seq.groups))])
    ids = list(seq.ids)
    positions, originals = [], []
    for g in chosen:
        start, end = seq.groups[g]
        for pos in range(start, end):
            positions.append(pos)
            originals.append(ids[pos])
            ids[pos] = MSK_ID
    return MaskedSequence(ids, list(seq.groups), positions, originals)
