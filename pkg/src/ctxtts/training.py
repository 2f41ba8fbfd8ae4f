"""Loss assembly, learning-rate schedule, training loop and ablation grid."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .acoustic_context import ace_prediction_loss
from .checkpoint import Bundle, restore_optimizer, save_checkpoint
from .corpus.pitch import compute_all_speaker_stats
from .corpus.types import CorpusManifest
from .data import Batch, build_phoneme_vocab, collate, make_items, phoneme_voicing
from .errors import InvalidInputError, TrainingDivergedError
from .model import ContextTTS, ModelConfig, ModelOutput
from .text_context import FINE_TUNE_LR

logger = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    mel: torch.Tensor
    duration: torch.Tensor
    pitch: torch.Tensor
    energy: torch.Tensor
    ace: Optional[torch.Tensor]
    total: torch.Tensor

    def as_dict(self) -> Dict[str, float]:
        out = {k: float(getattr(self, k).detach()) for k in ("mel", "duration", "pitch", "energy", "total")}
        if self.ace is not None:
            out["ace"] = float(self.ace.detach())
        return out


def _masked_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    mask = mask.to(values.dtype)
    return (values * mask).sum() / mask.sum().clamp_min(1.0)


def total_loss(output: ModelOutput, batch: Batch, lambda_ace: float = 1.0, ace_loss_target: str = "both") -> LossBreakdown:
    """mel: L1 over real frames; duration (log domain), pitch (voiced
    phonemes only) and energy: MSE over real phonemes; ace: L1 between the
    context and target style vectors, omitted when either is absent."""
    if batch.mel is None or batch.durations is None:
        raise InvalidInputError("total_loss needs a batch with targets")
    if output.mel.shape != batch.mel.shape:
        raise InvalidInputError(f"mel shape mismatch {tuple(output.mel.shape)} vs {tuple(batch.mel.shape)}")
    dtype = output.mel.dtype
    mask = output.phoneme_mask
    frame_mask = torch.arange(batch.mel.shape[1])[None, :] < batch.mel_lengths[:, None]
    mel_err = (output.mel - batch.mel.to(dtype)).abs().mean(dim=2)
    mel = _masked_mean(mel_err, frame_mask)
    log_target = torch.log(batch.durations.clamp_min(1).to(dtype))
    duration = _masked_mean((output.log_durations - log_target) ** 2, mask)
    pitch = _masked_mean((output.pitch - batch.pitch.to(dtype)) ** 2, mask & batch.pitch_mask)
    energy = _masked_mean((output.energy - batch.energy.to(dtype)) ** 2, mask)
    ace = None
    total = mel + duration + pitch + energy
    if output.v_ace is not None and output.v_ae is not None:
        v_ace, v_ae = output.v_ace, output.v_ae
        if ace_loss_target == "ace":
            v_ae = v_ae.detach()
        elif ace_loss_target == "ae":
            v_ace = v_ace.detach()
        # book-initial items have no acoustic context to predict from
        has_prev = batch.prev_mel_lengths > 0
        if has_prev.any():
            ace = ace_prediction_loss(v_ace[has_prev], v_ae[has_prev])
        else:
            ace = v_ace.new_zeros(())
        total = total + lambda_ace * ace
    return LossBreakdown(mel, duration, pitch, energy, ace, total)


def lr_schedule(step: int, d_model: int, warmup: int) -> float:
    """Transformer warmup schedule: linear rise, then inverse square root decay."""
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def fine_tune_scale(d_model: int = 256, warmup: int = 400, target: float = FINE_TUNE_LR) -> float:
    """Learning-rate scale that puts a parameter group at ``target`` at the schedule's peak."""
    return target / lr_schedule(warmup, d_model, warmup)


@dataclass
class TrainConfig:
    batch_size: int = 32
    warmup: int = 400
    max_steps: int = 2000
    seed: int = 0
    lambda_ace: float = 1.0
    embedding_lr_scale: float = field(default_factory=fine_tune_scale)
    grad_clip: float = 1.0
    log_every: int = 1
    ablation_id: str = ""

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if self.embedding_lr_scale < 0 or self.lambda_ace < 0:
            raise InvalidInputError("scales must be >= 0")


def build_bundle(train: CorpusManifest, model_config: ModelConfig = None, seed: int = 0, **overrides) -> Bundle:
    """Fresh model sized for ``train`` (vocabulary, speakers, mel bins),
    initialised from ``seed``."""
    vocab = build_phoneme_vocab([train])
    speakers = sorted(train.speakers)
    if model_config is None:
        model_config = ModelConfig(n_phonemes=len(vocab), n_speakers=len(speakers), mel_bins=train.mel_bins, **overrides)
    else:
        model_config = replace(model_config, n_phonemes=len(vocab), n_speakers=len(speakers),
                               mel_bins=train.mel_bins, **overrides)
    torch.manual_seed(seed)
    model = ContextTTS(model_config)
    model.voicing.copy_(torch.from_numpy(phoneme_voicing(train, vocab)))
    return Bundle(model=model, vocab=vocab, speakers=speakers, stats=compute_all_speaker_stats(train.utterances))


def epoch_batches(lengths: Sequence[int], batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    """Length-bucketed batches for one epoch.

    Items are shuffled, grouped into pools of ``8 * batch_size``, sorted by
    length within each pool and cut into batches; batch order is shuffled
    again. Depends only on ``(seed, epoch)``.
    """
    n = len(lengths)
    rng = np.random.default_rng([seed, epoch])
    perm = rng.permutation(n)
    size = min(batch_size, n)
    n_batches = n // size
    perm = perm[:n_batches * size]
    pool = 8 * size
    batches = []
    for start in range(0, len(perm), pool):
        chunk = perm[start:start + pool]
        chunk = chunk[np.argsort(np.asarray(lengths)[chunk], kind="stable")]
        batches.extend(chunk[i:i + size] for i in range(0, len(chunk), size))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def _batch_indices(step: int, lengths: Sequence[int], batch_size: int, seed: int, _cache={}) -> np.ndarray:
    """Indices for 1-based ``step``."""
    per_epoch = len(lengths) // min(batch_size, len(lengths))
    epoch, pos = divmod(step - 1, per_epoch)
    key = (id(lengths), len(lengths), batch_size, seed, epoch)
    if key not in _cache:
        _cache.clear()
        _cache[key] = epoch_batches(lengths, batch_size, seed, epoch)
    return _cache[key][pos]


def make_optimizer(model: ContextTTS, cfg: TrainConfig) -> torch.optim.Optimizer:
    provider_params = [p for p in model.tce.provider.parameters() if p.requires_grad]
    provider_ids = {id(p) for p in provider_params}
    main = [p for p in model.parameters() if id(p) not in provider_ids and p.requires_grad]
    groups = [{"params": main, "scale": 1.0}]
    if provider_params:
        scale = model.tce.provider.lr_scale
        groups.append({"params": provider_params, "scale": cfg.embedding_lr_scale if scale is None else scale})
    return torch.optim.Adam(groups, lr=0.0, betas=(0.9, 0.98), eps=1e-9)


def train(bundle: Bundle, train_manifest: CorpusManifest, cfg: TrainConfig, *,
          log_path=None, checkpoint_path=None, dump_dir=None,
          callback: Optional[Callable[[dict], None]] = None) -> List[dict]:
    """Teacher-forced training from ``bundle.step`` up to ``cfg.max_steps``.

    Batches and dropout masks are seeded per step, so a resumed run matches
    an uninterrupted one. Returns the metric records (also appended to
    ``log_path`` as JSON lines).
    """
    model = bundle.model
    mcfg = model.cfg
    items = make_items(train_manifest, bundle.vocab, bundle.speakers, bundle.stats, mcfg.tce)
    if not items:
        raise InvalidInputError("training manifest is empty")
    lengths = tuple(int(it.durations.sum()) for it in items)
    optimizer = make_optimizer(model, cfg)
    restore_optimizer(bundle, optimizer)
    bundle.train_config = asdict(cfg)
    records = []
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    model.train()
    try:
        for step in range(bundle.step + 1, cfg.max_steps + 1):
            torch.manual_seed(cfg.seed * 1_000_003 + step)
            idx = _batch_indices(step, lengths, cfg.batch_size, cfg.seed)
            batch = collate([items[i] for i in idx], mcfg.mel_bins)
            out = model(batch, "train")
            losses = total_loss(out, batch, cfg.lambda_ace if mcfg.use_ace else 0.0, mcfg.ace_loss_target)
            if not torch.isfinite(losses.total):
                dump = None
                if dump_dir is not None:
                    Path(dump_dir).mkdir(parents=True, exist_ok=True)
                    dump = Path(dump_dir) / f"diverged_step{step}.ckpt"
                    save_checkpoint(bundle, dump)
                    (Path(dump_dir) / f"diverged_step{step}.json").write_text(
                        json.dumps({"step": step, "losses": losses.as_dict(), "uids": batch.uids}, indent=1))
                raise TrainingDivergedError(f"non-finite loss at step {step}: {losses.as_dict()}", dump)
            lr = lr_schedule(step, mcfg.d_model, cfg.warmup)
            for group in optimizer.param_groups:
                group["lr"] = lr * group["scale"]
            optimizer.zero_grad(set_to_none=True)
            losses.total.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            bundle.step = step
            if step % cfg.log_every == 0 or step == cfg.max_steps:
                rec = {"step": step, "lr": lr, **losses.as_dict()}
                if cfg.ablation_id:
                    rec["ablation_id"] = cfg.ablation_id
                records.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                if callback:
                    callback(rec)
    finally:
        if log_fh:
            log_fh.close()
        model.eval()
    if checkpoint_path is not None:
        save_checkpoint(bundle, checkpoint_path, optimizer)
    return records


# ---------------------------------------------------------------------------
# ablations


@dataclass(frozen=True)
class AblationRun:
    ablation_id: str
    label: str
    use_ace: bool
    mode: str
    k: int
    eval_k: Optional[int] = None
    # reuse another run's checkpoint instead of training
    train_from: Optional[str] = None


TABLE2 = [
    ("ace", "ACE", True, "none"),
    ("nakata", "Sentence context", False, "implicit"),
    ("tce-pre", "TCE-pre.", False, "pre"),
    ("tce-suc", "TCE-suc.", False, "suc"),
    ("tce-bi", "TCE-bi", False, "bi"),
    ("atce-pre", "ATCE-pre.", True, "pre"),
    ("atce-suc", "ATCE-suc.", True, "suc"),
    ("atce-bi", "ATCE-bi", True, "bi"),
]
TABLE1_K = (16, 32, 64, 128)


def ablation_matrix(base_k: int = 64, suite: str = "all") -> List[AblationRun]:
    """Run list for the modality/lateral grid (``table2``) and the k sweep
    (``table1``, ending with the model trained at 128 and evaluated at 64)."""
    runs: List[AblationRun] = []
    if suite in ("table2", "all"):
        runs += [AblationRun(aid, label, ace, mode, base_k) for aid, label, ace, mode in TABLE2]
    if suite in ("table1", "all"):
        runs += [AblationRun(f"atce-bi-k{k}", f"{k}", True, "bi", k) for k in TABLE1_K]
        runs.append(AblationRun("atce-bi-k128-eval64", "128 -> 64", True, "bi", 128, eval_k=64,
                                train_from="atce-bi-k128"))
    if not runs:
        raise InvalidInputError(f"unknown suite {suite!r}")
    return runs
