"""Speaker-dependent pitch normalization and phoneme-level pooling."""
from __future__ import annotations

import logging
import math
from typing import Dict, Iterable, Sequence, Tuple

import numpy as np

from ..errors import EmptyStatsError, InvalidInputError
from .types import SpeakerPitchStats, Utterance

logger = logging.getLogger(__name__)


def _check_stats(stats: SpeakerPitchStats) -> None:
    if not math.isfinite(stats.sigma) or stats.sigma <= 0 or not math.isfinite(stats.mu):
        raise InvalidInputError(f"invalid pitch stats for {stats.speaker_id!r}: mu={stats.mu}, sigma={stats.sigma}")


def normalize_pitch(p: float, stats: SpeakerPitchStats) -> float:
    """Map a voiced pitch value in Hz to speaker-normalized units."""
    _check_stats(stats)
    if not math.isfinite(p) or p < 0:
        raise InvalidInputError(f"pitch must be finite and >= 0, got {p}")
    return (p - stats.mu) / stats.sigma


def denormalize_pitch(pbar: float, stats: SpeakerPitchStats) -> float:
    _check_stats(stats)
    if not math.isfinite(pbar):
        raise InvalidInputError(f"normalized pitch must be finite, got {pbar}")
    return pbar * stats.sigma + stats.mu


def normalize_contour(pitch: np.ndarray, stats: SpeakerPitchStats) -> np.ndarray:
    """Vectorized normalization; unvoiced frames stay at 0."""
    _check_stats(stats)
    pitch = np.asarray(pitch, dtype=np.float64)
    if not np.all(np.isfinite(pitch)) or np.any(pitch < 0):
        raise InvalidInputError("pitch contour must be finite and >= 0")
    return np.where(pitch > 0, (pitch - stats.mu) / stats.sigma, 0.0)


def denormalize_contour(pbar: np.ndarray, voiced: np.ndarray, stats: SpeakerPitchStats) -> np.ndarray:
    _check_stats(stats)
    pbar = np.asarray(pbar, dtype=np.float64)
    if not np.all(np.isfinite(pbar)):
        raise InvalidInputError("normalized pitch contour must be finite")
    hz = pbar * stats.sigma + stats.mu
    # a strongly negative prediction must not turn into a negative frequency
    return np.where(np.asarray(voiced, dtype=bool), np.maximum(hz, 1.0), 0.0)


def compute_speaker_stats(utterances: Iterable[Utterance]) -> SpeakerPitchStats:
    """Population mean/std of voiced pitch over one speaker's utterances.

    A zero-variance speaker gets ``sigma = 1`` and ``degenerate=True``.
    """
    utterances = list(utterances)
    if not utterances:
        raise EmptyStatsError("no utterances given")
    speakers = {u.speaker_id for u in utterances}
    if len(speakers) != 1:
        raise InvalidInputError(f"utterances span several speakers: {sorted(speakers)}")
    speaker_id = speakers.pop()
    voiced = np.concatenate([np.asarray(u.pitch, dtype=np.float64)[np.asarray(u.pitch) > 0] for u in utterances])
    if voiced.size == 0:
        raise EmptyStatsError(f"speaker {speaker_id!r} has no voiced frames")
    mu = float(voiced.mean())
    sigma = float(voiced.std())
    if sigma == 0.0:
        logger.warning("speaker %s has zero pitch variance; falling back to sigma=1", speaker_id)
        return SpeakerPitchStats(speaker_id, mu, 1.0, degenerate=True)
    return SpeakerPitchStats(speaker_id, mu, sigma)


def compute_all_speaker_stats(utterances: Iterable[Utterance]) -> Dict[str, SpeakerPitchStats]:
    groups: Dict[str, list] = {}
    for utt in utterances:
        groups.setdefault(utt.speaker_id, []).append(utt)
    return {spk: compute_speaker_stats(group) for spk, group in sorted(groups.items())}


def pool_to_phonemes(values: np.ndarray, durations: Sequence[int], mask: np.ndarray = None) -> Tuple[np.ndarray, np.ndarray]:
    """Average frame values over each phoneme's frames.

    With ``mask`` only masked-in frames contribute; phonemes with none get
    value 0 and a False entry in the returned validity mask.
    """
    values = np.asarray(values, dtype=np.float64)
    durations = np.asarray(durations, dtype=np.int64)
    if mask is None:
        mask = np.ones_like(values, dtype=bool)
    ends = np.cumsum(durations)
    starts = ends - durations
    pooled = np.zeros(len(durations))
    valid = np.zeros(len(durations), dtype=bool)
    for i, (s, e) in enumerate(zip(starts, ends)):
        m = mask[s:e]
        if m.any():
            pooled[i] = values[s:e][m].mean()
            valid[i] = True
    return pooled, valid
