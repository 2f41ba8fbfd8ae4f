"""Multi-speaker non-autoregressive acoustic model with context conditioning.

Differences from a stock FastSpeech2 layout:

* no absolute positional encoding; every self-attention layer uses clipped
  relative position embeddings on keys and values;
* the speaker embedding and both context vectors are added to the phoneme
  encoder output;
* pitch and energy are predicted per phoneme, before the length regulator.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .acoustic_context import GstConfig, GstEncoder
from .data import Batch
from .errors import InvalidInputError, InvalidStateError, NumericError
from .text_context import EmbeddingProvider, TceConfig, TextualContextEncoder, make_provider


@dataclass(frozen=True)
class ModelConfig:
    n_phonemes: int
    n_speakers: int
    mel_bins: int
    d_model: int = 256
    encoder_layers: int = 1
    decoder_layers: int = 1
    heads: int = 2
    ffn_filter: int = 256
    ffn_kernels: Tuple[int, int] = (3, 1)
    clip_distance: int = 4
    dropout: float = 0.0
    predictor_filter: int = 64
    predictor_kernel: int = 3
    predictor_dropout: float = 0.5
    gst: GstConfig = field(default_factory=GstConfig)
    tce: TceConfig = field(default_factory=TceConfig)
    provider: dict = field(default_factory=lambda: {"kind": "hash", "dimension": 64})
    use_ace: bool = True
    # which encoder the auxiliary L1 loss updates: "both", "ace" or "ae"
    ace_loss_target: str = "both"

    def __post_init__(self):
        if self.clip_distance < 1:
            raise InvalidInputError("clip_distance must be >= 1")
        if self.d_model % self.heads:
            raise InvalidInputError("d_model must be divisible by heads")
        if self.ace_loss_target not in ("both", "ace", "ae"):
            raise InvalidInputError(f"bad ace_loss_target {self.ace_loss_target!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        g = dict(d.pop("gst", {}))
        if "conv_channels" in g:
            g["conv_channels"] = tuple(g["conv_channels"])
        d["gst"] = GstConfig(**g)
        d["tce"] = TceConfig(**d.pop("tce", {}))
        if "ffn_kernels" in d:
            d["ffn_kernels"] = tuple(d["ffn_kernels"])
        return cls(**d)

    def with_modality(self, use_ace: Optional[bool] = None, mode: Optional[str] = None,
                      k: Optional[int] = None) -> "ModelConfig":
        tce = self.tce
        if mode is not None or k is not None:
            tce = replace(tce, mode=mode if mode is not None else tce.mode, k=k if k is not None else tce.k)
        return replace(self, use_ace=self.use_ace if use_ace is None else use_ace, tce=tce)


@dataclass
class ModelOutput:
    mel: torch.Tensor                 # [B, frames, mel_bins]
    log_durations: torch.Tensor       # [B, T_ph]
    pitch: torch.Tensor               # [B, T_ph], speaker-normalized
    energy: torch.Tensor              # [B, T_ph]
    durations: torch.Tensor           # [B, T_ph] durations used for expansion
    mel_lengths: torch.Tensor         # [B]
    phoneme_mask: torch.Tensor        # [B, T_ph]
    v_ace: Optional[torch.Tensor] = None
    v_ae: Optional[torch.Tensor] = None
    v_tce: Optional[torch.Tensor] = None

    @property
    def frame_mask(self) -> torch.Tensor:
        return torch.arange(self.mel.shape[1])[None, :] < self.mel_lengths[:, None]


# ---------------------------------------------------------------------------
# relative positions


def relative_position_bucket(i, j, clip: int):
    """Embedding index of the clipped offset ``j - i``, in ``[0, 2 * clip]``."""
    if isinstance(i, torch.Tensor) or isinstance(j, torch.Tensor):
        return torch.clamp(j - i, -clip, clip) + clip
    return max(-clip, min(clip, j - i)) + clip


def relative_bucket_matrix(length: int, clip: int) -> torch.Tensor:
    pos = torch.arange(length)
    return relative_position_bucket(pos[:, None], pos[None, :], clip)


class RelativeMultiHeadAttention(nn.Module):
    """Self-attention with learned relative-position embeddings added to the
    keys and values. Embeddings are shared across heads; the only positional
    input is the offset matrix from :func:`relative_bucket_matrix`."""

    def __init__(self, d_model: int, heads: int, clip: int):
        super().__init__()
        self.heads = heads
        self.head_dim = d_model // heads
        self.clip = clip
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)
        self.rel_k = nn.Parameter(torch.randn(2 * clip + 1, self.head_dim) * self.head_dim ** -0.5)
        self.rel_v = nn.Parameter(torch.randn(2 * clip + 1, self.head_dim) * self.head_dim ** -0.5)

    def forward(self, x: torch.Tensor, mask: torch.Tensor, return_weights: bool = False):
        b, t, d = x.shape
        q, k, v = self.qkv(x).view(b, t, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        idx = relative_bucket_matrix(t, self.clip)
        idx_b = idx.expand(b, self.heads, t, t)
        scores = q @ k.transpose(-1, -2)
        scores = scores + torch.gather(q @ self.rel_k.t(), 3, idx_b)
        scores = scores / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        bucketed = torch.zeros(b, self.heads, t, 2 * self.clip + 1, dtype=x.dtype).scatter_add_(3, idx_b, weights)
        ctx = weights @ v + bucketed @ self.rel_v
        out = self.out(ctx.transpose(1, 2).reshape(b, t, d))
        return (out, weights) if return_weights else out


def relative_self_attention(x: torch.Tensor, attention: RelativeMultiHeadAttention, mask=None):
    """Unbatched helper: ``x`` is ``[T, d_model]``."""
    if not torch.isfinite(x).all():
        raise NumericError("non-finite attention input")
    if mask is None:
        mask = torch.ones(x.shape[0], dtype=torch.bool)
    return attention(x[None], mask[None])[0]


class FFTBlock(nn.Module):
    """Relative self-attention and a convolutional feed-forward, each
    followed by residual + LayerNorm. Padded positions are zeroed so that
    convolutions never read them."""

    def __init__(self, d_model, heads, clip, filter_size, kernels, dropout):
        super().__init__()
        self.attn = RelativeMultiHeadAttention(d_model, heads, clip)
        self.norm1 = nn.LayerNorm(d_model)
        self.conv1 = nn.Conv1d(d_model, filter_size, kernels[0], padding=(kernels[0] - 1) // 2)
        self.conv2 = nn.Conv1d(filter_size, d_model, kernels[1], padding=(kernels[1] - 1) // 2)
        self.norm2 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask):
        keep = mask[..., None].to(x.dtype)
        x = self.norm1(x + self.dropout(self.attn(x, mask))) * keep
        h = F.relu(self.conv1(x.transpose(1, 2)))
        h = self.conv2(self.dropout(h) * keep.transpose(1, 2)).transpose(1, 2)
        return self.norm2(x + self.dropout(h)) * keep


class VariancePredictor(nn.Module):
    def __init__(self, d_model, filter_size, kernel, dropout):
        super().__init__()
        pad = (kernel - 1) // 2
        self.conv1 = nn.Conv1d(d_model, filter_size, kernel, padding=pad)
        self.norm1 = nn.LayerNorm(filter_size)
        self.conv2 = nn.Conv1d(filter_size, filter_size, kernel, padding=pad)
        self.norm2 = nn.LayerNorm(filter_size)
        self.proj = nn.Linear(filter_size, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask):
        keep = mask[..., None].to(x.dtype)
        h = self.dropout(self.norm1(F.relu(self.conv1(x.transpose(1, 2)).transpose(1, 2)))) * keep
        h = self.dropout(self.norm2(F.relu(self.conv2(h.transpose(1, 2)).transpose(1, 2)))) * keep
        return self.proj(h).squeeze(-1) * mask.to(x.dtype)


def length_regulate(x: torch.Tensor, durations: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Repeat each phoneme row ``durations`` times. ``x`` [B, T, D], ``durations`` [B, T]."""
    lengths = durations.sum(dim=1)
    if (lengths <= 0).any():
        raise InvalidStateError(f"non-positive expanded length: {lengths.tolist()}")
    frames = int(lengths.max())
    out = x.new_zeros(x.shape[0], frames, x.shape[2])
    for i in range(x.shape[0]):
        rows = torch.repeat_interleave(x[i], durations[i], dim=0)
        out[i, :rows.shape[0]] = rows
    return out, lengths


def durations_from_log(log_durations: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    d = torch.clamp(torch.round(torch.exp(log_durations)), min=1).long()
    return d * mask.long()


class VarianceAdaptor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        args = (cfg.d_model, cfg.predictor_filter, cfg.predictor_kernel, cfg.predictor_dropout)
        self.duration = VariancePredictor(*args)
        self.pitch = VariancePredictor(*args)
        self.energy = VariancePredictor(*args)
        self.pitch_embed = nn.Conv1d(1, cfg.d_model, 3, padding=1)
        self.energy_embed = nn.Conv1d(1, cfg.d_model, 3, padding=1)

    def forward(self, x, mask, voicing=None, durations=None, pitch=None, energy=None):
        keep = mask.to(x.dtype)
        log_d = self.duration(x, mask)
        p_hat = self.pitch(x, mask)
        e_hat = self.energy(x, mask)
        p_in = p_hat if pitch is None else pitch
        if voicing is not None:
            # unvoiced phonemes carry normalized pitch 0, as in the targets
            p_in = p_in * voicing.to(x.dtype)
        e_in = e_hat if energy is None else energy
        x = x + (self.pitch_embed((p_in * keep)[:, None]).transpose(1, 2)
                 + self.energy_embed((e_in * keep)[:, None]).transpose(1, 2)) * keep[..., None]
        if durations is None:
            durations = durations_from_log(log_d, mask)
        frames, lengths = length_regulate(x, durations * mask.long())
        return frames, lengths, log_d, p_hat, e_hat, durations


def variance_adapt(encoded: torch.Tensor, adaptor: VarianceAdaptor, targets: Optional[dict] = None, voicing=None):
    """Unbatched helper over ``[T_ph, d_model]``; ``targets`` may hold
    ``durations``, ``pitch`` and ``energy`` (teacher forcing)."""
    targets = targets or {}
    mask = torch.ones(1, encoded.shape[0], dtype=torch.bool)
    t = {k: (v[None] if v is not None else None) for k, v in targets.items()}
    frames, _, log_d, p, e, d = adaptor(encoded[None], mask, voicing=voicing, **t)
    return frames[0], log_d[0], p[0], e[0]


class PhonemeEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = nn.Embedding(cfg.n_phonemes, cfg.d_model, padding_idx=0)
        self.blocks = nn.ModuleList(
            FFTBlock(cfg.d_model, cfg.heads, cfg.clip_distance, cfg.ffn_filter, cfg.ffn_kernels, cfg.dropout)
            for _ in range(cfg.encoder_layers))

    def forward(self, ids, mask):
        x = self.embed(ids)
        for block in self.blocks:
            x = block(x, mask)
        return x


class MelDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            FFTBlock(cfg.d_model, cfg.heads, cfg.clip_distance, cfg.ffn_filter, cfg.ffn_kernels, cfg.dropout)
            for _ in range(cfg.decoder_layers))
        self.proj = nn.Linear(cfg.d_model, cfg.mel_bins)

    def forward(self, x, mask):
        for block in self.blocks:
            x = block(x, mask)
        return self.proj(x) * mask[..., None].to(x.dtype)


def decode_mel(frames: torch.Tensor, decoder: MelDecoder) -> torch.Tensor:
    if frames.shape[0] < 1:
        raise InvalidInputError("decoder needs at least one frame")
    if not torch.isfinite(frames).all():
        raise NumericError("non-finite decoder input")
    return decoder(frames[None], torch.ones(1, frames.shape[0], dtype=torch.bool))[0]


class ContextTTS(nn.Module):
    """Full acoustic model. All context modules exist regardless of the
    modality flags so one parameter set serves every ablation."""

    def __init__(self, cfg: ModelConfig, provider: Optional[EmbeddingProvider] = None):
        super().__init__()
        self.cfg = cfg
        self.encoder = PhonemeEncoder(cfg)
        self.speaker_embed = nn.Embedding(cfg.n_speakers, cfg.d_model)
        self.ace = GstEncoder(cfg.mel_bins, cfg.gst, cfg.d_model)
        self.ae = GstEncoder(cfg.mel_bins, cfg.gst, cfg.d_model)
        self.tce = TextualContextEncoder(provider or make_provider(cfg.provider), cfg.tce, cfg.d_model)
        self.adaptor = VarianceAdaptor(cfg)
        self.decoder = MelDecoder(cfg)
        self.register_buffer("voicing", torch.ones(cfg.n_phonemes, dtype=torch.bool))

    def set_modality(self, use_ace: Optional[bool] = None, mode: Optional[str] = None, k: Optional[int] = None):
        self.cfg = self.cfg.with_modality(use_ace, mode, k)
        self.tce.config = self.cfg.tce

    @property
    def dtype(self):
        return self.speaker_embed.weight.dtype

    def encode_phonemes(self, ids, speakers, mask, v_ace=None, v_tce=None):
        """Encoder output plus speaker embedding plus context vectors."""
        if (speakers < 0).any() or (speakers >= self.cfg.n_speakers).any():
            raise InvalidInputError(f"speaker id out of range: {speakers.tolist()}")
        x = self.encoder(ids, mask) + self.speaker_embed(speakers)[:, None, :]
        for v in (v_ace, v_tce):
            if v is not None:
                x = x + v[:, None, :]
        return x * mask[..., None].to(x.dtype)

    def context_vectors(self, batch: Batch):
        v_ace = v_tce = None
        if self.cfg.use_ace:
            v_ace = self.ace(batch.prev_mel, batch.prev_mel_lengths)
        if self.cfg.tce.enabled:
            v_tce = self.tce(batch.texts, batch.windows)
        return v_ace, v_tce

    def forward(self, batch: Batch, mode: str = "train") -> ModelOutput:
        if mode not in ("train", "infer"):
            raise InvalidInputError(f"mode must be train or infer, got {mode!r}")
        batch = batch.to(self.dtype)
        mask = batch.phoneme_mask
        v_ace, v_tce = self.context_vectors(batch)
        x = self.encode_phonemes(batch.phonemes, batch.speakers, mask, v_ace, v_tce)
        voicing = self.voicing[batch.phonemes] & mask
        if mode == "train":
            frames, lengths, log_d, p, e, d = self.adaptor(
                x, mask, voicing, durations=batch.durations, pitch=batch.pitch, energy=batch.energy)
        else:
            frames, lengths, log_d, p, e, d = self.adaptor(x, mask, voicing)
        frame_mask = torch.arange(frames.shape[1])[None, :] < lengths[:, None]
        mel = self.decoder(frames, frame_mask)
        v_ae = None
        if mode == "train" and self.cfg.use_ace and batch.mel is not None:
            v_ae = self.ae(batch.mel, batch.mel_lengths)
        return ModelOutput(mel=mel, log_durations=log_d, pitch=p, energy=e, durations=d, mel_lengths=lengths,
                           phoneme_mask=mask, v_ace=v_ace, v_ae=v_ae, v_tce=v_tce)
