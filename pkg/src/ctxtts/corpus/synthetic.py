"""Synthetic audiobook corpus with planted context -> prosody structure.

Every utterance's speaker-normalized pitch on a voiced phoneme is

    z = book_style + cue_shift + utterance_noise + accent[phoneme]

and the frame pitch is ``base_mu + base_sigma * z`` for the speaker's
generator-level base statistics. ``cue_shift`` is ``+cue_delta`` when the
first cue word (default ``UP``) appears as a token in the chosen lateral
window of ``cue_window`` characters, ``-cue_delta`` for the second cue word,
and 0 when neither or both appear. ``book_style`` is constant over a book and
is also rendered into the mel features as a spectral tilt, so the previous
utterance's mel carries it.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import InvalidInputError
from .context import extract_context_window, tokenize
from .types import CorpusManifest, Utterance

CONSONANTS = "kstnhmr"
VOWELS = "aiueo"
UNVOICED = frozenset("kstph")
F0_FLOOR, F0_CEIL = 60.0, 400.0


@dataclass(frozen=True)
class GeneratorSpec:
    n_speakers: int = 4
    books_per_speaker: int = 4
    utterances_per_book: int = 32
    words_per_utterance: Tuple[int, int] = (3, 5)
    syllables_per_word: Tuple[int, int] = (1, 2)
    vocabulary_size: int = 48
    vocabulary: Optional[Tuple[str, ...]] = None
    cue_words: Tuple[str, str] = ("UP", "DOWN")
    cue_rate: float = 0.35
    cue_lateral: str = "pre"
    cue_window: int = 64
    cue_delta: float = 1.0
    style_std: float = 0.5
    noise_std: float = 0.1
    mel_bins: int = 20
    frame_rate: float = 40.0
    pitch_range: Tuple[float, float] = (100.0, 240.0)
    relative_sigma: float = 0.1

    def validate(self) -> None:
        if self.n_speakers < 1:
            raise InvalidInputError("n_speakers must be >= 1")
        if self.books_per_speaker < 1 or self.utterances_per_book < 1:
            raise InvalidInputError("books_per_speaker and utterances_per_book must be >= 1")
        if self.vocabulary is not None and len(self.vocabulary) == 0:
            raise InvalidInputError("vocabulary is empty")
        if self.vocabulary is None and self.vocabulary_size < 1:
            raise InvalidInputError("vocabulary_size must be >= 1")
        if self.cue_lateral not in ("pre", "suc", "bi", "none"):
            raise InvalidInputError(f"cue_lateral must be pre/suc/bi/none, got {self.cue_lateral!r}")
        lo, hi = self.words_per_utterance
        if lo < 3 or hi < lo:
            raise InvalidInputError("words_per_utterance must satisfy 3 <= lo <= hi")
        if len(self.cue_words) != 2 or any(not w or w.lower() == w for w in self.cue_words):
            raise InvalidInputError("cue_words must be two upper-case words")
        if self.mel_bins < 4:
            raise InvalidInputError("mel_bins must be >= 4")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


def _hash_unit(key: str, n: int) -> np.ndarray:
    """``n`` deterministic values in [0, 1) derived from ``key``."""
    raw = hashlib.shake_256(key.encode("utf-8")).digest(4 * n)
    return np.frombuffer(raw, dtype="<u4").astype(np.float64) / 2.0**32


def phoneme_accent(ph: str) -> float:
    return float(_hash_unit(f"accent/{ph}", 1)[0] - 0.5)


def phoneme_energy(ph: str) -> float:
    if ph in VOWELS:
        return 1.0 + 0.2 * float(_hash_unit(f"energy/{ph}", 1)[0])
    return 0.3 if ph in UNVOICED else 0.6


def phoneme_envelope(ph: str, mel_bins: int) -> np.ndarray:
    u = _hash_unit(f"envelope/{ph}", 4)
    bins = np.arange(mel_bins, dtype=np.float64)
    c1, c2 = u[0] * 0.5 * mel_bins, (0.5 + 0.5 * u[1]) * mel_bins
    return np.exp(-0.5 * ((bins - c1) / 2.0) ** 2) + (0.5 + 0.5 * u[2]) * np.exp(-0.5 * ((bins - c2) / 2.5) ** 2)


def speaker_timbre(speaker_index: int, mel_bins: int) -> np.ndarray:
    u = _hash_unit(f"timbre/{speaker_index}", 2)
    bins = np.arange(mel_bins, dtype=np.float64)
    return 0.3 * np.sin(2 * np.pi * (0.5 + u[0]) * bins / mel_bins + 2 * np.pi * u[1])


def style_tilt(mel_bins: int) -> np.ndarray:
    return 0.5 * (2.0 * np.arange(mel_bins) / (mel_bins - 1) - 1.0)


def pitch_bin(f0: np.ndarray, mel_bins: int) -> np.ndarray:
    """Fractional mel bin where a voiced frame's harmonic bump is centred."""
    return (mel_bins - 1) * (np.log(f0) - np.log(F0_FLOOR)) / (np.log(F0_CEIL) - np.log(F0_FLOOR))


def render_mel(phonemes: Sequence[str], durations: Sequence[int], pitch: np.ndarray, energy: np.ndarray,
               speaker_index: int, style: float, mel_bins: int) -> np.ndarray:
    """Deterministic mel rendering of (phonemes, durations, pitch, energy).

    Each frame is the phoneme envelope scaled by energy, plus a speaker
    timbre, plus a Gaussian bump at the pitch's bin on voiced frames, plus
    the book style's spectral tilt.
    """
    frame_ph = np.repeat(np.arange(len(phonemes)), np.asarray(durations))
    env = np.stack([phoneme_envelope(ph, mel_bins) for ph in phonemes])[frame_ph]
    mel = np.asarray(energy)[:, None] * env + speaker_timbre(speaker_index, mel_bins)[None, :]
    voiced = pitch > 0
    if voiced.any():
        bins = np.arange(mel_bins, dtype=np.float64)
        centre = pitch_bin(pitch[voiced], mel_bins)
        mel[voiced] += np.exp(-0.5 * ((bins[None, :] - centre[:, None]) / 1.5) ** 2)
    mel += style * style_tilt(mel_bins)[None, :]
    return mel


def cue_shift(book_texts: Sequence[str], index: int, spec: GeneratorSpec) -> float:
    if spec.cue_lateral == "none":
        return 0.0
    window = extract_context_window(book_texts, index, spec.cue_window)
    sides = {"pre": [window.preceding], "suc": [window.succeeding],
             "bi": [window.preceding, window.succeeding]}[spec.cue_lateral]
    tokens = set()
    for side in sides:
        tokens.update(tokenize(side))
    up, down = (w in tokens for w in spec.cue_words)
    return spec.cue_delta * (float(up) - float(down))


def make_vocabulary(rng: np.random.Generator, spec: GeneratorSpec) -> List[str]:
    if spec.vocabulary is not None:
        return list(spec.vocabulary)
    words: List[str] = []
    seen = set()
    lo, hi = spec.syllables_per_word
    while len(words) < spec.vocabulary_size:
        n = int(rng.integers(lo, hi + 1))
        w = "".join(CONSONANTS[rng.integers(len(CONSONANTS))] + VOWELS[rng.integers(len(VOWELS))] for _ in range(n))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def word_phonemes(word: str) -> List[str]:
    return list(word.lower())


def speaker_table(spec: GeneratorSpec) -> Dict[str, dict]:
    lo, hi = spec.pitch_range
    table = {}
    for i in range(spec.n_speakers):
        mu = lo if spec.n_speakers == 1 else lo + (hi - lo) * i / (spec.n_speakers - 1)
        table[f"s{i}"] = {"index": i, "base_mu": mu, "base_sigma": spec.relative_sigma * mu}
    return table


def _book_texts(rng: np.random.Generator, vocab: List[str], spec: GeneratorSpec) -> List[Tuple[str, bool]]:
    out = []
    lo, hi = spec.words_per_utterance
    for _ in range(spec.utterances_per_book):
        words = [vocab[rng.integers(len(vocab))] for _ in range(int(rng.integers(lo, hi + 1)))]
        has_cue = bool(rng.random() < spec.cue_rate)
        cue = spec.cue_words[int(rng.integers(2))]
        slot = int(rng.integers(1, len(words)))
        if has_cue:
            # never first or last, so concatenation never glues a cue to a neighbour
            words.insert(slot, cue)
        out.append((" ".join(words) + ".", has_cue))
    return out


def _generate_book(book_id: str, speaker_id: str, speaker: dict, vocab: List[str],
                   seed_seq: np.random.SeedSequence, spec: GeneratorSpec) -> List[Utterance]:
    rng = np.random.default_rng(seed_seq)
    style = float(rng.normal(0.0, spec.style_std)) if spec.style_std > 0 else 0.0
    texts = _book_texts(rng, vocab, spec)
    book_texts = [t for t, _ in texts]
    utterances = []
    for index, (text, _) in enumerate(texts):
        phonemes = [ph for w in text.rstrip(".").split() for ph in word_phonemes(w)]
        base = np.array([2 if ph in VOWELS else 1 for ph in phonemes])
        durations = np.maximum(1, base + rng.integers(0, 2, size=len(phonemes)))
        noise = float(rng.normal(0.0, spec.noise_std)) if spec.noise_std > 0 else 0.0
        shift = cue_shift(book_texts, index, spec)
        z = np.array([style + shift + noise + phoneme_accent(ph) for ph in phonemes])
        voiced_ph = np.array([ph not in UNVOICED for ph in phonemes])
        ph_pitch = np.where(voiced_ph, speaker["base_mu"] + speaker["base_sigma"] * z, 0.0)
        pitch = np.repeat(ph_pitch, durations)
        energy = np.repeat([phoneme_energy(ph) for ph in phonemes], durations).astype(np.float64)
        mel = render_mel(phonemes, durations, pitch, energy, speaker["index"], style, spec.mel_bins)
        utterances.append(Utterance(
            book_id=book_id, speaker_id=speaker_id, index=index, text=text, phonemes=phonemes,
            durations=durations.astype(np.int64),
            pitch=pitch.astype(np.float32), energy=energy.astype(np.float32), mel=mel.astype(np.float32),
            meta={"style": style, "shift": shift, "noise": noise},
        ))
    return utterances


def generate_synthetic_corpus(seed: int, spec: GeneratorSpec = GeneratorSpec()) -> CorpusManifest:
    """Build a corpus that is a pure function of ``(seed, spec)``.

    Books are generated from independent seed streams, so generation order
    (or parallel generation) cannot change the result.
    """
    spec.validate()
    root = np.random.SeedSequence(seed)
    vocab_seq, books_seq = root.spawn(2)
    vocab = make_vocabulary(np.random.default_rng(vocab_seq), spec)
    speakers = speaker_table(spec)
    n_books = spec.n_speakers * spec.books_per_speaker
    book_seqs = books_seq.spawn(n_books)
    utterances: List[Utterance] = []
    for b in range(n_books):
        speaker_id = f"s{b // spec.books_per_speaker}"
        utterances.extend(_generate_book(f"b{b:02d}", speaker_id, speakers[speaker_id], vocab, book_seqs[b], spec))
    for utt in utterances:
        utt.validate()
    return CorpusManifest(utterances=utterances, speakers=speakers, mel_bins=spec.mel_bins, frame_rate=spec.frame_rate)
