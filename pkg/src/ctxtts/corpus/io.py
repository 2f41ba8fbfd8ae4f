"""On-disk corpus format.

A manifest is a UTF-8 JSON-lines file: one header record (schema id,
feature config, speaker table, archive file name) followed by one record
per utterance. Frame-level features live in a sibling binary archive of
little-endian float32 values with a 16-byte header::

    magic  b"CTXF"
    u32    version
    u32    mel_bins
    f32    frame_rate

Each utterance block is ``pitch[n] energy[n] mel[n * mel_bins]`` (row-major)
at the byte offset stored in its manifest record.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, List, Tuple

import numpy as np

from ..errors import InvalidInputError
from .types import CorpusManifest, Utterance

SCHEMA = "ctxtts.manifest/1"
ARCHIVE_MAGIC = b"CTXF"
ARCHIVE_VERSION = 1
_HEADER = struct.Struct("<4sIIf")


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


class FeatureArchiveWriter:
    def __init__(self, path, mel_bins: int, frame_rate: float):
        self.path = Path(path)
        self.mel_bins = mel_bins
        self._fh = open(self.path, "wb")
        self._fh.write(_HEADER.pack(ARCHIVE_MAGIC, ARCHIVE_VERSION, mel_bins, frame_rate))

    def append(self, pitch: np.ndarray, energy: np.ndarray, mel: np.ndarray) -> int:
        n = len(pitch)
        if len(energy) != n or mel.shape != (n, self.mel_bins):
            raise InvalidInputError(f"inconsistent feature block: pitch={n}, energy={len(energy)}, mel={mel.shape}")
        offset = self._fh.tell()
        for arr in (pitch, energy, mel):
            self._fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return offset

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_archive_header(path) -> Tuple[int, float]:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) != _HEADER.size:
        raise InvalidInputError(f"{path}: truncated feature archive header")
    magic, version, mel_bins, frame_rate = _HEADER.unpack(raw)
    if magic != ARCHIVE_MAGIC:
        raise InvalidInputError(f"{path}: not a feature archive (magic {magic!r})")
    if version != ARCHIVE_VERSION:
        raise InvalidInputError(f"{path}: unsupported archive version {version}")
    return mel_bins, frame_rate


def read_block(data: bytes, offset: int, n_frames: int, mel_bins: int):
    count = n_frames * (2 + mel_bins)
    block = np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(np.float32)
    return block[:n_frames], block[n_frames:2 * n_frames], block[2 * n_frames:].reshape(n_frames, mel_bins)


def write_manifest(manifest: CorpusManifest, path) -> Path:
    """Write ``path`` (records) and ``path`` with suffix ``.feats`` (features)."""
    path = Path(path)
    archive = path.with_suffix(".feats")
    lines = [_dumps({"schema": SCHEMA, "mel_bins": manifest.mel_bins, "frame_rate": manifest.frame_rate,
                     "speakers": manifest.speakers, "archive": archive.name})]
    with FeatureArchiveWriter(archive, manifest.mel_bins, manifest.frame_rate) as writer:
        for book in manifest.books().values():
            for utt in book:
                offset = writer.append(utt.pitch, utt.energy, utt.mel)
                lines.append(_dumps({
                    "book_id": utt.book_id, "speaker_id": utt.speaker_id, "index": utt.index,
                    "text": utt.text, "phonemes": list(utt.phonemes),
                    "durations": [int(d) for d in utt.durations],
                    "n_frames": utt.n_frames, "offset": offset, "meta": utt.meta,
                }))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_manifest(path) -> CorpusManifest:
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"manifest not found: {path}")
    records = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not records or records[0].get("schema") != SCHEMA:
        raise InvalidInputError(f"{path}: missing or unsupported schema header")
    header = records[0]
    archive = path.parent / header["archive"]
    mel_bins, frame_rate = read_archive_header(archive)
    if mel_bins != header["mel_bins"]:
        raise InvalidInputError(f"{path}: archive mel_bins {mel_bins} != manifest {header['mel_bins']}")
    data = archive.read_bytes()
    utterances = []
    for rec in records[1:]:
        pitch, energy, mel = read_block(data, rec["offset"], rec["n_frames"], mel_bins)
        utt = Utterance(
            book_id=rec["book_id"], speaker_id=rec["speaker_id"], index=rec["index"], text=rec["text"],
            phonemes=list(rec["phonemes"]), durations=np.asarray(rec["durations"], dtype=np.int64),
            pitch=pitch, energy=energy, mel=mel, meta=rec.get("meta", {}),
        )
        utt.validate()
        utterances.append(utt)
    return CorpusManifest(utterances=utterances, speakers=header["speakers"], mel_bins=mel_bins,
                          frame_rate=header["frame_rate"])


def write_jsonl(path, records: Iterable[dict]) -> None:
    Path(path).write_text("".join(_dumps(r) + "\n" for r in records), encoding="utf-8")


def read_jsonl(path) -> List[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
