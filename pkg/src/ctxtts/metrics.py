"""Objective evaluation: DTW alignment, MCD, F0-RMSE, GPE and speaker accuracy."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from scipy.fft import dct

from .corpus.types import CorpusManifest, Utterance
from .errors import InvalidInputError, UndefinedMetricError

MCD_CONST = 10.0 * math.sqrt(2.0) / math.log(10.0)
N_CEPSTRA = 12
COLUMNS = ("MCD", "F0-RMSE", "GPE", "ACC")


@dataclass(frozen=True)
class AlignmentPath:
    pairs: Tuple[Tuple[int, int], ...]
    cost: float

    def __len__(self):
        return len(self.pairs)

    @property
    def ref_index(self) -> np.ndarray:
        return np.array([p[0] for p in self.pairs])

    @property
    def test_index(self) -> np.ndarray:
        return np.array([p[1] for p in self.pairs])


def euclidean(ref: np.ndarray, test: np.ndarray) -> np.ndarray:
    ref = ref.reshape(len(ref), -1)
    test = test.reshape(len(test), -1)
    return np.sqrt(((ref[:, None, :] - test[None, :, :]) ** 2).sum(-1))


def absolute(ref: np.ndarray, test: np.ndarray) -> np.ndarray:
    ref = ref.reshape(len(ref), -1)
    test = test.reshape(len(test), -1)
    return np.abs(ref[:, None, :] - test[None, :, :]).sum(-1)


def dtw_from_costs(costs: np.ndarray) -> AlignmentPath:
    """Minimal-cost monotone path through a ``[n, m]`` pairwise cost matrix.

    Steps are (1,0), (0,1) and (1,1). Backtrace ties prefer the diagonal,
    then a step in the reference only, then a step in the test only.
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2 or costs.shape[0] == 0 or costs.shape[1] == 0:
        raise InvalidInputError(f"DTW needs two non-empty sequences, got cost shape {costs.shape}")
    n, m = costs.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    # anti-diagonals are independent given the previous two
    for s in range(n + m - 1):
        i = np.arange(max(0, s - m + 1), min(n - 1, s) + 1)
        j = s - i
        best = np.minimum(np.minimum(acc[i, j], acc[i, j + 1]), acc[i + 1, j])
        acc[i + 1, j + 1] = costs[i, j] + best
    i, j = n, m
    pairs = [(n - 1, m - 1)]
    while (i, j) != (1, 1):
        options = ((acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j), (acc[i, j - 1], i, j - 1))
        best = min(o[0] for o in options)
        _, i, j = next(o for o in options if o[0] == best)
        pairs.append((i - 1, j - 1))
    return AlignmentPath(tuple(reversed(pairs)), float(acc[n, m]))


def dtw_align(ref, test, cost: Callable = euclidean) -> AlignmentPath:
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if len(ref) == 0 or len(test) == 0:
        raise InvalidInputError("DTW needs two non-empty sequences")
    return dtw_from_costs(cost(ref, test))


def mel_to_cepstrum(mel: np.ndarray, n_coeffs: int = N_CEPSTRA) -> np.ndarray:
    """Orthonormal DCT-II over the mel axis; keeps c0..c_n (``n_coeffs + 1`` columns)."""
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2:
        raise InvalidInputError("mel must be [frames, bins]")
    if mel.shape[1] <= n_coeffs:
        raise InvalidInputError(f"need more than {n_coeffs} mel bins, got {mel.shape[1]}")
    return dct(mel, type=2, norm="ortho", axis=1)[:, :n_coeffs + 1]


def mcd(ref_cepstra, test_cepstra) -> float:
    """Mel-cepstral distortion in dB over coefficients 1..C after DTW."""
    ref = np.asarray(ref_cepstra, dtype=np.float64)
    test = np.asarray(test_cepstra, dtype=np.float64)
    if ref.ndim != 2 or test.ndim != 2:
        raise InvalidInputError("cepstra must be [frames, coefficients]")
    if ref.shape[1] != test.shape[1]:
        raise InvalidInputError(f"coefficient count mismatch: {ref.shape[1]} vs {test.shape[1]}")
    if len(ref) == 0 or len(test) == 0:
        raise InvalidInputError("empty cepstral sequence")
    costs = euclidean(ref[:, 1:], test[:, 1:])
    path = dtw_from_costs(costs)
    return MCD_CONST * float(np.mean(costs[path.ref_index, path.test_index]))


def _check_f0(ref_f0, test_f0):
    ref = np.asarray(ref_f0, dtype=np.float64)
    test = np.asarray(test_f0, dtype=np.float64)
    if ref.ndim != 1 or test.ndim != 1 or len(ref) == 0 or len(test) == 0:
        raise InvalidInputError("F0 sequences must be non-empty 1-D arrays")
    if (ref < 0).any() or (test < 0).any() or not (np.isfinite(ref).all() and np.isfinite(test).all()):
        raise InvalidInputError("F0 must be finite and >= 0 (0 = unvoiced)")
    return ref, test


def f0_alignment(ref_f0, test_f0) -> Tuple[AlignmentPath, np.ndarray, np.ndarray]:
    """DTW over log-F0 differences. Returns the path and the jointly voiced
    aligned (ref, test) values in Hz."""
    ref, test = _check_f0(ref_f0, test_f0)
    rv, tv = ref > 0, test > 0
    both = rv[:, None] & tv[None, :]
    if not both.any():
        raise UndefinedMetricError("no jointly voiced frames")
    log_r = np.log(np.where(rv, ref, 1.0))
    log_t = np.log(np.where(tv, test, 1.0))
    voiced_cost = np.abs(log_r[:, None] - log_t[None, :])
    penalty = float(np.percentile(voiced_cost[both], 95))
    costs = np.where(both, voiced_cost, np.where(rv[:, None] | tv[None, :], penalty, 0.0))
    path = dtw_from_costs(costs)
    ri, ti = path.ref_index, path.test_index
    keep = rv[ri] & tv[ti]
    if not keep.any():
        raise UndefinedMetricError("no jointly voiced aligned pairs")
    return path, ref[ri[keep]], test[ti[keep]]


def f0_rmse(ref_f0, test_f0, unit: str = "hz") -> float:
    """RMSE over jointly voiced aligned frames, in Hz (``unit="log"`` for log-Hz)."""
    if unit not in ("hz", "log"):
        raise InvalidInputError(f"unit must be hz or log, got {unit!r}")
    _, r, t = f0_alignment(ref_f0, test_f0)
    if unit == "log":
        r, t = np.log(r), np.log(t)
    return float(np.sqrt(np.mean((t - r) ** 2)))


def gpe(ref_f0, test_f0, threshold: float = 0.2) -> float:
    """Percentage of jointly voiced aligned frames with relative error above ``threshold``."""
    if threshold < 0:
        raise InvalidInputError("threshold must be >= 0")
    _, r, t = f0_alignment(ref_f0, test_f0)
    return 100.0 * float(np.mean(np.abs(t - r) / r > threshold))


# ---------------------------------------------------------------------------
# speaker classifier


def mean_mel(mel) -> np.ndarray:
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or len(mel) == 0:
        raise InvalidInputError("mel must be non-empty [frames, bins]")
    return mel.mean(axis=0)


class SpeakerClassifier:
    """Small feed-forward classifier on time-averaged mel features."""

    def __init__(self, labels: Sequence[str], hidden: int = 64, seed: int = 0):
        self.labels = list(labels)
        self.hidden = hidden
        self.seed = seed
        self.net: Optional[nn.Module] = None
        self.mean = self.scale = None

    def fit(self, features: Sequence[Tuple[np.ndarray, str]], epochs: int = 300, lr: float = 1e-2) -> "SpeakerClassifier":
        if not features:
            raise InvalidInputError("no training features")
        x = np.stack([mean_mel(m) for m, _ in features])
        y = np.array([self._label_index(s) for _, s in features])
        self.mean = x.mean(axis=0)
        self.scale = x.std(axis=0) + 1e-6
        gen = torch.Generator().manual_seed(self.seed)
        net = nn.Sequential(nn.Linear(x.shape[1], self.hidden), nn.Tanh(), nn.Linear(self.hidden, len(self.labels)))
        with torch.no_grad():
            for p in net.parameters():
                p.copy_(torch.randn(p.shape, generator=gen) * 0.1)
        xt = torch.as_tensor((x - self.mean) / self.scale, dtype=torch.float32)
        yt = torch.as_tensor(y)
        opt = torch.optim.Adam(net.parameters(), lr=lr)
        for _ in range(epochs):
            opt.zero_grad()
            nn.functional.cross_entropy(net(xt), yt).backward()
            opt.step()
        self.net = net.eval()
        return self

    def _label_index(self, label: str) -> int:
        if label not in self.labels:
            raise InvalidInputError(f"unknown speaker label {label!r}")
        return self.labels.index(label)

    @torch.no_grad()
    def predict(self, mels: Sequence[np.ndarray]) -> List[str]:
        if self.net is None:
            raise InvalidInputError("classifier is not trained")
        x = np.stack([mean_mel(m) for m in mels])
        logits = self.net(torch.as_tensor((x - self.mean) / self.scale, dtype=torch.float32))
        return [self.labels[i] for i in logits.argmax(dim=1).tolist()]


def train_speaker_classifier(manifest: CorpusManifest, seed: int = 0, **kw) -> SpeakerClassifier:
    labels = sorted({u.speaker_id for u in manifest.utterances})
    return SpeakerClassifier(labels, seed=seed).fit([(u.mel, u.speaker_id) for u in manifest.utterances], **kw)


def speaker_accuracy(features: Sequence[Tuple[np.ndarray, str]], classifier: SpeakerClassifier) -> float:
    if not features:
        raise InvalidInputError("no features to classify")
    truth = [classifier.labels[classifier._label_index(s)] for _, s in features]
    pred = classifier.predict([m for m, _ in features])
    return 100.0 * sum(p == t for p, t in zip(pred, truth)) / len(truth)


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class ProsodyScores:
    mcd: float
    f0_rmse: float
    gpe: float
    speaker_acc: float

    def __post_init__(self):
        vals = (self.mcd, self.f0_rmse, self.gpe, self.speaker_acc)
        if any(not np.isnan(v) and v < 0 for v in vals) or self.gpe > 100 or self.speaker_acc > 100:
            raise InvalidInputError(f"scores out of range: {vals}")

    def row(self) -> Dict[str, float]:
        return dict(zip(COLUMNS, (self.mcd, self.f0_rmse, self.gpe, self.speaker_acc)))


@dataclass
class UtteranceScores:
    uid: str
    mcd: float
    f0_rmse: float
    gpe: float


def score_utterance(uid: str, ref_mel, ref_f0, test_mel, test_f0, threshold: float = 0.2) -> UtteranceScores:
    # one F0 alignment serves both F0-RMSE and GPE
    _, r, t = f0_alignment(ref_f0, test_f0)
    return UtteranceScores(uid, mcd(mel_to_cepstrum(ref_mel), mel_to_cepstrum(test_mel)),
                           float(np.sqrt(np.mean((t - r) ** 2))), 100.0 * float(np.mean(np.abs(t - r) / r > threshold)))


def evaluate_run(outputs: Mapping[str, object], truth: Union[CorpusManifest, Sequence[Utterance]],
                 classifier: Optional[SpeakerClassifier] = None) -> Tuple[ProsodyScores, List[UtteranceScores]]:
    """Unweighted means over utterances. ``outputs`` maps uid to anything
    with ``mel`` and ``f0`` attributes; ``truth`` is a manifest or any list
    of reference utterances. Speaker accuracy is NaN without a classifier."""
    utterances = list(truth.utterances if isinstance(truth, CorpusManifest) else truth)
    truth_ids = {u.uid for u in utterances}
    if set(outputs) != truth_ids:
        missing = sorted(truth_ids - set(outputs))[:5]
        extra = sorted(set(outputs) - truth_ids)[:5]
        raise InvalidInputError(f"utterance id mismatch (missing {missing}, unexpected {extra})")
    per = []
    for utt in utterances:
        out = outputs[utt.uid]
        per.append(score_utterance(utt.uid, utt.mel, utt.pitch, out.mel, out.f0))
    acc = float("nan")
    if classifier is not None:
        acc = speaker_accuracy([(outputs[u.uid].mel, u.speaker_id) for u in utterances], classifier)
    scores = ProsodyScores(float(np.mean([p.mcd for p in per])), float(np.mean([p.f0_rmse for p in per])),
                           float(np.mean([p.gpe for p in per])), acc)
    return scores, per


def write_scores_table(rows: Mapping[str, ProsodyScores], path, precision: int = 4) -> Path:
    """Tab-separated table: one row per ablation id, columns MCD, F0-RMSE, GPE, ACC."""
    lines = ["\t".join(("id",) + COLUMNS)]
    for rid, sc in rows.items():
        vals = sc.row()
        lines.append("\t".join([rid] + [f"{vals[c]:.{precision}f}" for c in COLUMNS]))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_scores_table(path) -> Dict[str, ProsodyScores]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split("\t")[1:] != list(COLUMNS):
        raise InvalidInputError(f"{path}: not a scores table")
    out = {}
    for line in lines[1:]:
        rid, *vals = line.split("\t")
        out[rid] = ProsodyScores(*map(float, vals))
    return out


def scores_as_dict(scores: ProsodyScores) -> dict:
    return asdict(scores)
