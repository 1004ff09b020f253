"""Closed word-level vocabulary and the prompt layouts used throughout."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
SPECIALS = (PAD, BOS, EOS)

# fixed template words; relation names and entities are appended per fact base
TEMPLATE_WORDS = ("Q:", "A:", "context:", "?", ".", "'s", "of", "is", "the", "has", "a", "an")


@dataclass
class Vocab:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.index = {}
        for i, t in enumerate(self.tokens):
            if t in self.index:
                raise ValueError(f"duplicate token {t!r}")
            self.index[t] = i

    @classmethod
    def build(cls, words: Iterable[str]) -> "Vocab":
        seen: list[str] = list(SPECIALS) + list(TEMPLATE_WORDS)
        have = set(seen)
        for w in words:
            if w not in have:
                have.add(w)
                seen.append(w)
        return cls(seen)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    def encode(self, text: str | Sequence[str]) -> list[int]:
        words = text.split() if isinstance(text, str) else list(text)
        try:
            return [self.index[w] for w in words]
        except KeyError as exc:
            raise KeyError(f"token {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)


def closed_book_prompt(vocab: Vocab, question: str) -> list[int]:
    return [vocab.bos_id] + vocab.encode(f"Q: {question} A:")


def context_prompt(vocab: Vocab, question: str, context: str) -> list[int]:
    return [vocab.bos_id] + vocab.encode(f"context: {context} Q: {question} A:")


def answer_ids(vocab: Vocab, answer: str) -> list[int]:
    """Answer tokens followed by end-of-sequence."""
    return vocab.encode(answer) + [vocab.eos_id]
