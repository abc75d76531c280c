"""Closed prompt vocabulary and token sequences.

Text conditioning uses a small fixed vocabulary of size, color and shape
words. Index 0 is the reserved null token that stands in for a dropped
prompt during classifier-free training.
"""
from __future__ import annotations

from dataclasses import dataclass

NULL_TOKEN = "<null>"
SIZE_WORDS = ("small", "large")
COLOR_WORDS = ("red", "green", "blue", "yellow", "purple", "orange")
SHAPE_WORDS = ("sphere", "box", "cylinder", "torus")
EXTRA_WORDS = ("and", "blurry", "low-quality")

VOCAB: tuple[str, ...] = (NULL_TOKEN,) + SIZE_WORDS + COLOR_WORDS + SHAPE_WORDS + EXTRA_WORDS
TOKEN_TO_ID = {w: i for i, w in enumerate(VOCAB)}
NULL_ID = TOKEN_TO_ID[NULL_TOKEN]

NEGATIVE_PROMPT = "blurry low-quality"


@dataclass(frozen=True)
class PromptTokens:
    """Token ids over the fixed vocabulary; the empty prompt is (null,)."""

    ids: tuple[int, ...]
    is_empty: bool = False

    def __post_init__(self):
        if any(not 0 <= i < len(VOCAB) for i in self.ids):
            raise ValueError(f"token id out of vocabulary range: {self.ids}")
        if self.is_empty and self.ids != (NULL_ID,):
            raise ValueError("an empty prompt must hold exactly the null token")
        if not self.is_empty and NULL_ID in self.ids:
            raise ValueError("the null token is reserved for the empty prompt")

    @staticmethod
    def empty() -> "PromptTokens":
        return PromptTokens(ids=(NULL_ID,), is_empty=True)

    @staticmethod
    def from_text(text: str) -> "PromptTokens":
        words = text.split()
        if not words:
            return PromptTokens.empty()
        unknown = [w for w in words if w not in TOKEN_TO_ID]
        if unknown:
            raise ValueError(f"out-of-vocabulary words: {unknown} (vocabulary: {list(VOCAB)})")
        return PromptTokens(ids=tuple(TOKEN_TO_ID[w] for w in words))

    def to_text(self) -> str:
        return " ".join(VOCAB[i] for i in self.ids)


def negative_prompt() -> PromptTokens:
    return PromptTokens.from_text(NEGATIVE_PROMPT)
