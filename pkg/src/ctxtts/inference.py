"""Sequential book synthesis.

Utterances are synthesized in index order. Each one receives the mel the
model produced for its predecessor as acoustic context, so a book forms a
causal chain; the first utterance gets no acoustic context (or a caller
supplied primer).
"""
from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .checkpoint import Bundle
from .corpus.io import FeatureArchiveWriter, read_archive_header, read_block, read_jsonl, write_jsonl
from .corpus.pitch import denormalize_contour
from .corpus.types import ContextWindow, CorpusManifest, Utterance
from .data import Item, collate, context_for, encode_phonemes_ids
from .errors import InvalidInputError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ContextOverride:
    """Replacement context for one utterance. ``prev_mel=None`` means no
    acoustic context; ``source`` is a free-form label for the sidecar."""

    window: ContextWindow
    prev_mel: Optional[np.ndarray] = None
    source: str = ""


@dataclass
class SynthesisResult:
    uid: str
    index: int
    speaker_id: str
    mel: np.ndarray             # [frames, mel_bins]
    pitch_norm: np.ndarray      # per phoneme, speaker-normalized
    durations: np.ndarray       # per phoneme, frames
    f0: np.ndarray              # per frame, Hz, 0 = unvoiced
    energy: np.ndarray          # per frame
    window: ContextWindow
    has_prev: bool
    override: str = ""

    @property
    def n_frames(self) -> int:
        return int(self.mel.shape[0])

    def record(self) -> dict:
        return {
            "uid": self.uid, "index": self.index, "speaker_id": self.speaker_id, "n_frames": self.n_frames,
            "k": self.window.k, "preceding_chars": len(self.window.preceding),
            "succeeding_chars": len(self.window.succeeding), "has_prev": self.has_prev,
            "override": self.override,
        }


@contextlib.contextmanager
def modality(model, use_ace: Optional[bool] = None, mode: Optional[str] = None):
    """Temporarily switch the model's context modalities."""
    saved = model.cfg
    try:
        if use_ace is not None or mode is not None:
            model.set_modality(use_ace, mode)
        yield model
    finally:
        model.cfg = saved
        model.tce.config = saved.tce


def _check_compatible(bundle: Bundle, utterances: Sequence[Utterance]) -> None:
    for utt in utterances:
        if utt.speaker_id not in bundle.speakers:
            raise InvalidInputError(f"{utt.uid}: speaker {utt.speaker_id!r} unknown to the checkpoint")
        if utt.speaker_id not in bundle.stats:
            raise InvalidInputError(f"{utt.uid}: no pitch statistics for speaker {utt.speaker_id!r}")
    if utterances and utterances[0].mel is not None and utterances[0].mel.shape[1] != bundle.config.mel_bins:
        raise InvalidInputError(
            f"mel_bins mismatch: corpus {utterances[0].mel.shape[1]} vs checkpoint {bundle.config.mel_bins}")


@torch.no_grad()
def _run_one(bundle: Bundle, utt: Utterance, window: ContextWindow, prev_mel: Optional[np.ndarray],
             override: str = "") -> SynthesisResult:
    model = bundle.model
    item = Item(uid=utt.uid, text=utt.text, speaker=bundle.speakers.index(utt.speaker_id),
                phonemes=encode_phonemes_ids(utt.phonemes, bundle.vocab), durations=None, pitch=None,
                pitch_mask=None, energy=None, mel=None, prev_mel=prev_mel, window=window)
    batch = collate([item], model.cfg.mel_bins, with_targets=False)
    out = model(batch, "infer")
    n = int(out.mel_lengths[0])
    mel = out.mel[0, :n].float().numpy()
    durations = out.durations[0].numpy().astype(np.int64)
    pitch_norm = out.pitch[0].double().numpy()
    voiced_ph = model.voicing[batch.phonemes[0]].numpy()
    voiced = np.repeat(voiced_ph, durations)
    f0 = denormalize_contour(np.repeat(pitch_norm, durations), voiced, bundle.stats[utt.speaker_id])
    energy = np.repeat(out.energy[0].double().numpy(), durations)
    return SynthesisResult(uid=utt.uid, index=utt.index, speaker_id=utt.speaker_id, mel=mel,
                           pitch_norm=pitch_norm, durations=durations, f0=f0, energy=energy,
                           window=window, has_prev=prev_mel is not None, override=override)


def synthesize_book(bundle: Bundle, book: Sequence[Utterance], *, k_override: Optional[int] = None,
                    overrides: Optional[Dict[int, ContextOverride]] = None,
                    primer_mel: Optional[np.ndarray] = None,
                    use_ace: Optional[bool] = None, mode: Optional[str] = None) -> List[SynthesisResult]:
    """Synthesize every utterance of ``book`` in order.

    ``primer_mel`` stands in as the acoustic context of utterance 0 (by
    default it has none). ``overrides`` replaces the window and previous
    mel of individual utterances; the chain continues from whatever the
    overridden utterance produced.
    """
    book = list(book)
    if not book:
        return []
    if [u.index for u in book] != list(range(len(book))):
        raise InvalidInputError("book must hold utterances 0..n-1 in order")
    if k_override is not None and k_override < 0:
        raise InvalidInputError(f"k_override must be >= 0, got {k_override}")
    overrides = overrides or {}
    bad = [i for i in overrides if not 0 <= i < len(book)]
    if bad:
        raise InvalidInputError(f"override indices out of range: {bad}")
    _check_compatible(bundle, book)
    results = []
    with modality(bundle.model, use_ace, mode) as model:
        model.eval()
        prev = primer_mel
        for utt in book:
            if utt.index in overrides:
                ov = overrides[utt.index]
                res = _run_one(bundle, utt, ov.window, ov.prev_mel, ov.source or "override")
            else:
                window = context_for(book, utt.index, model.cfg.tce, k_override)
                res = _run_one(bundle, utt, window, prev)
            logger.debug("%s k=%d pre=%d suc=%d", res.uid, res.window.k, len(res.window.preceding),
                         len(res.window.succeeding))
            results.append(res)
            prev = res.mel
    return results


def synthesize_with_context(bundle: Bundle, utt: Utterance, window: ContextWindow,
                            prev_mel: Optional[np.ndarray] = None, *, use_ace: Optional[bool] = None,
                            mode: Optional[str] = None) -> SynthesisResult:
    """One-shot synthesis of ``utt`` with caller-supplied context."""
    _check_compatible(bundle, [utt])
    with modality(bundle.model, use_ace, mode) as model:
        model.eval()
        return _run_one(bundle, utt, window, prev_mel, "explicit")


def borrowed_context(book: Sequence[Utterance], source: int, tce, k: Optional[int] = None) -> ContextOverride:
    """Context that utterance ``source`` of ``book`` would see: its text window
    and the ground-truth mel of its predecessor."""
    if not 0 <= source < len(book):
        raise InvalidInputError(f"context source {source} out of range")
    prev = book[source - 1].mel if source > 0 else None
    return ContextOverride(context_for(book, source, tce, k), prev, f"{book[source].uid}")


def sample_random_contexts(manifest: CorpusManifest, target_uid: str, n: int, seed: int, tce,
                           k: Optional[int] = None) -> List[ContextOverride]:
    """``n`` contexts drawn uniformly, without replacement, from the other
    utterances of ``manifest``."""
    pool = [u.uid for u in manifest.utterances if u.uid != target_uid]
    if n > len(pool):
        raise InvalidInputError(f"cannot draw {n} contexts from {len(pool)} utterances")
    rng = np.random.default_rng(seed)
    books = manifest.books()
    out = []
    for i in rng.choice(len(pool), size=n, replace=False):
        src = manifest.lookup(pool[int(i)])
        out.append(borrowed_context(books[src.book_id], src.index, tce, k))
    return out


def write_outputs(results: Sequence[SynthesisResult], path, mel_bins: int, frame_rate: float) -> Path:
    """Feature archive at ``path`` plus a ``.jsonl`` sidecar of per-utterance records."""
    path = Path(path)
    records = []
    with FeatureArchiveWriter(path, mel_bins, frame_rate) as writer:
        for res in results:
            offset = writer.append(res.f0, res.energy, res.mel)
            rec = res.record()
            rec["offset"] = offset
            rec["durations"] = [int(d) for d in res.durations]
            records.append(rec)
    sidecar = path.with_suffix(".jsonl")
    write_jsonl(sidecar, records)
    return sidecar


@dataclass
class StoredOutput:
    uid: str
    f0: np.ndarray
    energy: np.ndarray
    mel: np.ndarray
    record: dict = field(default_factory=dict)


def read_outputs(path) -> Dict[str, StoredOutput]:
    path = Path(path)
    sidecar = path.with_suffix(".jsonl")
    if not path.exists() or not sidecar.exists():
        raise InvalidInputError(f"synthesized outputs not found: {path}")
    mel_bins, _ = read_archive_header(path)
    data = path.read_bytes()
    out = {}
    for rec in read_jsonl(sidecar):
        f0, energy, mel = read_block(data, rec["offset"], rec["n_frames"], mel_bins)
        out[rec["uid"]] = StoredOutput(rec["uid"], f0, energy, mel, rec)
    return out
