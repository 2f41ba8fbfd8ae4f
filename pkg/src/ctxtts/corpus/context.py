"""Lateral text windows around a target utterance."""
from __future__ import annotations

from typing import List, Sequence

from ..errors import InvalidInputError
from .types import ContextWindow, Utterance


def _texts(book: Sequence) -> List[str]:
    return [u.text if isinstance(u, Utterance) else str(u) for u in book]


def _check(book, target_index, size, name):
    if not 0 <= target_index < len(book):
        raise InvalidInputError(f"target_index {target_index} out of range for book of {len(book)} utterances")
    if size < 0:
        raise InvalidInputError(f"{name} must be >= 0, got {size}")


def extract_context_window(book: Sequence, target_index: int, k: int) -> ContextWindow:
    """Last ``k`` characters before and first ``k`` after the target.

    ``book`` is a sequence of Utterance records or plain strings in book
    order. Texts are concatenated without separators and windows stop at
    the book boundary.
    """
    _check(book, target_index, k, "k")
    texts = _texts(book)
    before = "".join(texts[:target_index])
    after = "".join(texts[target_index + 1:])
    preceding = before[max(0, len(before) - k):] if k > 0 else ""
    return ContextWindow(preceding=preceding, succeeding=after[:k], k=k)


def extract_sentence_context(book: Sequence, target_index: int, n_sentences: int) -> ContextWindow:
    """Whole neighbouring utterances (one utterance = one sentence).

    The returned window's ``k`` is the longer lateral's character count.
    """
    _check(book, target_index, n_sentences, "n_sentences")
    texts = _texts(book)
    if n_sentences == 0:
        return ContextWindow("", "", 0)
    preceding = "".join(texts[max(0, target_index - n_sentences):target_index])
    succeeding = "".join(texts[target_index + 1:target_index + 1 + n_sentences])
    return ContextWindow(preceding, succeeding, max(len(preceding), len(succeeding)))


def tokenize(text: str) -> List[str]:
    """Whitespace split when the text contains spaces, else one token per character."""
    if not text:
        return []
    if any(ch.isspace() for ch in text):
        return text.split()
    return list(text)
