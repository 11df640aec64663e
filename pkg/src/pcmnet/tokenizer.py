"""Word-level caption vocabulary."""

from __future__ import annotations

from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

from pcmnet.errors import TokenizerError
from pcmnet.text import tokenize

UNK, BOS, EOS, PAD = "<unk>", "<bos>", "<eos>", "<pad>"
SPECIALS = (UNK, BOS, EOS, PAD)
UNK_ID, BOS_ID, EOS_ID, PAD_ID = range(4)


class Vocabulary:
    def __init__(self, words: Sequence[str]):
        words = [w for w in words if w not in SPECIALS]
        self.tokens: list[str] = list(SPECIALS) + list(words)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise TokenizerError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, corpus: Iterable[str], min_count: int = 2) -> "Vocabulary":
        counts = Counter(t for text in corpus for t in tokenize(text))
        words = sorted((w for w, n in counts.items() if n >= min_count),
                       key=lambda w: (-counts[w], w))
        return cls(words)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, text: str) -> list[int]:
        return [BOS_ID] + [self.index.get(t, UNK_ID) for t in tokenize(text)] + [EOS_ID]

    def decode(self, ids: Iterable[int]) -> str:
        """Words up to the first EOS; BOS and PAD are dropped, UNK is kept as ``<unk>``."""
        words = []
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if not 0 <= i < len(self.tokens):
                raise TokenizerError(f"token id {i} outside vocabulary of {len(self.tokens)}")
            if i in (BOS_ID, PAD_ID):
                continue
            words.append(self.tokens[i])
        return " ".join(words)

    def check_ids(self, ids: Iterable[int]) -> None:
        for i in ids:
            if not 0 <= int(i) < len(self.tokens):
                raise TokenizerError(f"token id {int(i)} outside vocabulary of {len(self.tokens)}")

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens[len(SPECIALS):]) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls([w for w in Path(path).read_text().splitlines() if w])
