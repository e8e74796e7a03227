from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Iterable, Sequence

from .._io import atomic_write_text

PAD = "<pad>"
BOS = "<bos>"
SPECIALS = (PAD, BOS)


class UnknownTokenError(KeyError):
    def __init__(self, word: str):
        super().__init__(word)
        self.word = word

    def __str__(self) -> str:
        return f"word not in vocabulary: {self.word!r}"


class Tokenizer:
    """Whitespace word-level tokenizer over a fixed vocabulary.

    Token ids are line numbers in the vocab file; ids 0 and 1 are reserved for
    padding and beginning-of-sequence.
    """

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        for tok in tokens:
            if not tok or any(ch.isspace() for ch in tok):
                raise ValueError(f"invalid token {tok!r}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.vocab = {tok: i for i, tok in enumerate(tokens)}

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> Tokenizer:
        words = sorted({w for text in texts for w in text.split()} - set(SPECIALS))
        return cls([*SPECIALS, *words])

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        ids = []
        for word in text.split():
            try:
                ids.append(self.vocab[word])
            except KeyError:
                raise UnknownTokenError(word) from None
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[int(i)] for i in ids)

    def to_text(self) -> str:
        return "\n".join(self.tokens) + "\n"

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        atomic_write_text(path, self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> Tokenizer:
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.splitlines())
