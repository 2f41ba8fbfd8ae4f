"""Record types for ordered audiobook corpora."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from ..errors import InvalidInputError


@dataclass(eq=False)
class Utterance:
    """One utterance of a book, with frame-level acoustic features.

    ``pitch`` is in Hz with 0 marking unvoiced frames. ``mel`` has shape
    ``[frames, mel_bins]``. ``meta`` holds optional generator annotations
    and is carried through the manifest unchanged.
    """

    book_id: str
    speaker_id: str
    index: int
    text: str
    phonemes: List[str]
    durations: np.ndarray
    pitch: np.ndarray
    energy: np.ndarray
    mel: np.ndarray
    meta: Dict[str, object] = field(default_factory=dict)

    @property
    def uid(self) -> str:
        return f"{self.book_id}:{self.index}"

    @property
    def n_frames(self) -> int:
        return int(self.mel.shape[0])

    def validate(self) -> None:
        durations = np.asarray(self.durations)
        if len(durations) != len(self.phonemes):
            raise InvalidInputError(f"{self.uid}: {len(self.phonemes)} phonemes but {len(durations)} durations")
        if np.any(durations < 1):
            raise InvalidInputError(f"{self.uid}: durations must be >= 1")
        n = int(durations.sum())
        if not (n == self.mel.shape[0] == len(self.pitch) == len(self.energy)):
            raise InvalidInputError(
                f"{self.uid}: sum(durations)={n}, mel={self.mel.shape[0]}, "
                f"pitch={len(self.pitch)}, energy={len(self.energy)}"
            )
        if np.any(self.pitch < 0) or not np.all(np.isfinite(self.pitch)):
            raise InvalidInputError(f"{self.uid}: pitch must be finite and >= 0")


@dataclass(frozen=True)
class SpeakerPitchStats:
    speaker_id: str
    mu: float
    sigma: float
    degenerate: bool = False


@dataclass(frozen=True)
class ContextWindow:
    preceding: str
    succeeding: str
    k: int


@dataclass(eq=False)
class CorpusManifest:
    """Utterances grouped by book and ordered by index, plus a speaker table."""

    utterances: List[Utterance]
    speakers: Dict[str, dict]
    mel_bins: int
    frame_rate: float

    def __post_init__(self):
        for utt in self.utterances:
            if utt.speaker_id not in self.speakers:
                raise InvalidInputError(f"{utt.uid}: speaker {utt.speaker_id!r} not in speaker table")
            if utt.mel.ndim != 2 or utt.mel.shape[1] != self.mel_bins:
                raise InvalidInputError(f"{utt.uid}: mel shape {utt.mel.shape} does not match mel_bins={self.mel_bins}")
        for book_id, book in self.books().items():
            if [u.index for u in book] != list(range(len(book))):
                raise InvalidInputError(f"book {book_id!r}: indices are not contiguous from 0")

    def books(self) -> "OrderedDict[str, List[Utterance]]":
        out: "OrderedDict[str, List[Utterance]]" = OrderedDict()
        for utt in self.utterances:
            out.setdefault(utt.book_id, []).append(utt)
        for book in out.values():
            book.sort(key=lambda u: u.index)
        return out

    def book_speakers(self) -> Dict[str, str]:
        return {book_id: book[0].speaker_id for book_id, book in self.books().items()}

    def by_speaker(self) -> Dict[str, List[Utterance]]:
        out: Dict[str, List[Utterance]] = {}
        for utt in self.utterances:
            out.setdefault(utt.speaker_id, []).append(utt)
        return out

    def lookup(self, uid: str) -> Utterance:
        for utt in self.utterances:
            if utt.uid == uid:
                return utt
        raise InvalidInputError(f"unknown utterance id {uid!r}")

    def __len__(self) -> int:
        return len(self.utterances)


def find_previous(book: List[Utterance], index: int) -> Optional[Utterance]:
    return book[index - 1] if index > 0 else None
