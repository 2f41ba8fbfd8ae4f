"""Ordered audiobook corpora: records, context windows, pitch statistics, synthetic data."""
from __future__ import annotations

import logging
from typing import Sequence, Tuple

from ..errors import InvalidInputError
from .context import extract_context_window, extract_sentence_context, tokenize
from .io import read_manifest, write_manifest
from .pitch import (
    compute_all_speaker_stats,
    compute_speaker_stats,
    denormalize_contour,
    denormalize_pitch,
    normalize_contour,
    normalize_pitch,
    pool_to_phonemes,
)
from .synthetic import GeneratorSpec, generate_synthetic_corpus
from .types import ContextWindow, CorpusManifest, SpeakerPitchStats, Utterance

logger = logging.getLogger(__name__)


def split_corpus(manifest: CorpusManifest, held_out_books: Sequence[str]) -> Tuple[CorpusManifest, CorpusManifest]:
    """Split into (train, test) with exactly the named books in test."""
    books = manifest.books()
    held = set(held_out_books)
    unknown = held - set(books)
    if unknown:
        raise InvalidInputError(f"unknown book ids: {sorted(unknown)}")
    train = [u for u in manifest.utterances if u.book_id not in held]
    test = [u for u in manifest.utterances if u.book_id in held]
    missing = sorted({u.speaker_id for u in test} - {u.speaker_id for u in train})
    if missing:
        logger.warning("speakers with no training data after split: %s", ", ".join(missing))

    def sub(utts):
        return CorpusManifest(utterances=utts, speakers=manifest.speakers, mel_bins=manifest.mel_bins,
                              frame_rate=manifest.frame_rate)

    return sub(train), sub(test)


def default_held_out(manifest: CorpusManifest) -> list:
    """The last book of every speaker."""
    last = {}
    for book_id, speaker in manifest.book_speakers().items():
        last[speaker] = book_id
    return sorted(last.values())


__all__ = [
    "ContextWindow", "CorpusManifest", "GeneratorSpec", "SpeakerPitchStats", "Utterance",
    "compute_all_speaker_stats", "compute_speaker_stats", "default_held_out", "denormalize_contour",
    "denormalize_pitch", "extract_context_window", "extract_sentence_context", "generate_synthetic_corpus",
    "normalize_contour", "normalize_pitch", "pool_to_phonemes", "read_manifest", "split_corpus", "tokenize",
    "write_manifest",
]
