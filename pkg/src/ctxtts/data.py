"""Turning corpus records into padded model batches."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .corpus.context import extract_context_window, extract_sentence_context
from .corpus.pitch import normalize_contour, pool_to_phonemes
from .corpus.types import ContextWindow, CorpusManifest, SpeakerPitchStats, Utterance
from .errors import InvalidInputError
from .text_context import TceConfig

PAD, UNK = "<pad>", "<unk>"


def build_phoneme_vocab(manifests: Sequence[CorpusManifest]) -> List[str]:
    symbols = sorted({ph for m in manifests for u in m.utterances for ph in u.phonemes})
    return [PAD, UNK] + symbols


def phoneme_voicing(manifest: CorpusManifest, vocab: List[str]) -> np.ndarray:
    """Per-symbol voicing: True when most of the symbol's frames are voiced."""
    index = {p: i for i, p in enumerate(vocab)}
    voiced = np.zeros(len(vocab))
    total = np.zeros(len(vocab))
    for utt in manifest.utterances:
        ends = np.cumsum(utt.durations)
        for ph, s, e in zip(utt.phonemes, ends - utt.durations, ends):
            i = index.get(ph, 1)
            voiced[i] += np.count_nonzero(utt.pitch[s:e] > 0)
            total[i] += e - s
    return (total > 0) & (voiced * 2 > total)


def encode_phonemes_ids(phonemes: Sequence[str], vocab: List[str]) -> np.ndarray:
    index = {p: i for i, p in enumerate(vocab)}
    return np.array([index.get(p, 1) for p in phonemes], dtype=np.int64)


def context_for(book: Sequence[Utterance], index: int, tce: TceConfig, k: Optional[int] = None) -> ContextWindow:
    """The text window the encoder sees, honouring an evaluation-time ``k``."""
    if tce.mode == "implicit":
        return extract_sentence_context(book, index, tce.implicit_n_sentences)
    return extract_context_window(book, index, tce.k if k is None else k)


@dataclass
class Item:
    uid: str
    text: str
    speaker: int
    phonemes: np.ndarray
    durations: np.ndarray
    pitch: np.ndarray
    pitch_mask: np.ndarray
    energy: np.ndarray
    mel: Optional[np.ndarray]
    prev_mel: Optional[np.ndarray]
    window: ContextWindow


def make_item(utt: Utterance, book: Sequence[Utterance], vocab: List[str], speakers: List[str],
              stats: Dict[str, SpeakerPitchStats], tce: TceConfig, k: Optional[int] = None,
              prev_mel: Optional[np.ndarray] = None, use_prev: bool = True) -> Item:
    if utt.speaker_id not in speakers:
        raise InvalidInputError(f"unknown speaker {utt.speaker_id!r}")
    voiced = utt.pitch > 0
    norm = normalize_contour(utt.pitch, stats[utt.speaker_id])
    pitch, pitch_mask = pool_to_phonemes(norm, utt.durations, voiced)
    energy, _ = pool_to_phonemes(utt.energy, utt.durations)
    if prev_mel is None and use_prev and utt.index > 0:
        prev_mel = book[utt.index - 1].mel
    return Item(
        uid=utt.uid, text=utt.text, speaker=speakers.index(utt.speaker_id),
        phonemes=encode_phonemes_ids(utt.phonemes, vocab), durations=np.asarray(utt.durations, np.int64),
        pitch=pitch, pitch_mask=pitch_mask, energy=energy, mel=utt.mel, prev_mel=prev_mel,
        window=context_for(book, utt.index, tce, k),
    )


def make_items(manifest: CorpusManifest, vocab, speakers, stats, tce: TceConfig, k: Optional[int] = None) -> List[Item]:
    items = []
    for book in manifest.books().values():
        for utt in book:
            items.append(make_item(utt, book, vocab, speakers, stats, tce, k))
    return items


@dataclass
class Batch:
    phonemes: torch.Tensor          # [B, T_ph] long, 0 = pad
    phoneme_lengths: torch.Tensor   # [B]
    speakers: torch.Tensor          # [B]
    durations: Optional[torch.Tensor] = None   # [B, T_ph] long
    pitch: Optional[torch.Tensor] = None       # [B, T_ph] normalized
    pitch_mask: Optional[torch.Tensor] = None  # [B, T_ph] bool
    energy: Optional[torch.Tensor] = None      # [B, T_ph]
    mel: Optional[torch.Tensor] = None         # [B, T_mel, mel_bins]
    mel_lengths: Optional[torch.Tensor] = None
    prev_mel: Optional[torch.Tensor] = None    # [B, T_prev, mel_bins]
    prev_mel_lengths: Optional[torch.Tensor] = None  # [B], 0 = no previous utterance
    texts: List[str] = field(default_factory=list)
    windows: List[ContextWindow] = field(default_factory=list)
    uids: List[str] = field(default_factory=list)

    @property
    def phoneme_mask(self) -> torch.Tensor:
        return torch.arange(self.phonemes.shape[1])[None, :] < self.phoneme_lengths[:, None]

    def to(self, dtype: torch.dtype) -> "Batch":
        conv = {}
        for name in ("pitch", "energy", "mel", "prev_mel"):
            value = getattr(self, name)
            if value is not None:
                conv[name] = value.to(dtype)
        return replace(self, **conv)


def _pad_2d(arrays, dtype):
    n = max(len(a) for a in arrays)
    out = torch.zeros(len(arrays), n, dtype=dtype)
    for i, a in enumerate(arrays):
        out[i, :len(a)] = torch.as_tensor(np.asarray(a), dtype=dtype)
    return out


def _pad_frames(mats, mel_bins):
    lengths = torch.tensor([0 if m is None else len(m) for m in mats])
    out = torch.zeros(len(mats), max(1, int(lengths.max())), mel_bins)
    for i, m in enumerate(mats):
        if m is not None:
            out[i, :len(m)] = torch.as_tensor(np.asarray(m), dtype=torch.float32)
    return out, lengths


def collate(items: Sequence[Item], mel_bins: int, with_targets: bool = True) -> Batch:
    batch = Batch(
        phonemes=_pad_2d([it.phonemes for it in items], torch.long),
        phoneme_lengths=torch.tensor([len(it.phonemes) for it in items]),
        speakers=torch.tensor([it.speaker for it in items]),
        texts=[it.text for it in items], windows=[it.window for it in items], uids=[it.uid for it in items],
    )
    batch.prev_mel, batch.prev_mel_lengths = _pad_frames([it.prev_mel for it in items], mel_bins)
    if with_targets:
        batch.durations = _pad_2d([it.durations for it in items], torch.long)
        batch.pitch = _pad_2d([it.pitch for it in items], torch.float32)
        batch.pitch_mask = _pad_2d([it.pitch_mask for it in items], torch.bool)
        batch.energy = _pad_2d([it.energy for it in items], torch.float32)
        batch.mel, batch.mel_lengths = _pad_frames([it.mel for it in items], mel_bins)
    return batch
