"""GST-style acoustic encoders.

``ace`` summarizes the previous utterance's mel into the acoustic context
vector; ``ae`` summarizes the current utterance's mel and only feeds the
L1 next-prediction loss that ties the two together.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch
import torch.nn as nn
from torch.nn.utils.rnn import pack_padded_sequence

from .errors import InvalidInputError, NumericError


@dataclass(frozen=True)
class GstConfig:
    n_tokens: int = 10
    n_heads: int = 8
    token_dim: int = 256
    conv_channels: Tuple[int, ...] = (32, 32)
    ref_dim: int = 128


def _conv_len(lengths: torch.Tensor) -> torch.Tensor:
    # kernel 3, stride 2, padding 1
    return torch.div(lengths - 1, 2, rounding_mode="floor") + 1


class ReferenceEncoder(nn.Module):
    """Strided 2-D convolutions over (frames x mel_bins), then a GRU whose
    final state is a fixed-length reference vector."""

    def __init__(self, mel_bins: int, channels: Sequence[int] = (32, 32), ref_dim: int = 128):
        super().__init__()
        convs = []
        c_in, freq = 1, mel_bins
        for c_out in channels:
            convs.append(nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1))
            c_in, freq = c_out, (freq - 1) // 2 + 1
        self.convs = nn.ModuleList(convs)
        self.gru = nn.GRU(c_in * freq, ref_dim, batch_first=True)
        self.ref_dim = ref_dim

    def forward(self, mel: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """``mel`` [B, T, M] zero-padded; ``lengths`` [B] >= 1."""
        x = mel.unsqueeze(1)
        lengths = lengths.clone()
        for conv in self.convs:
            x = torch.relu(conv(x))
            lengths = _conv_len(lengths)
            keep = torch.arange(x.shape[2])[None, :] < lengths[:, None]
            x = x * keep[:, None, :, None].to(x.dtype)
        b, c, t, f = x.shape
        x = x.permute(0, 2, 1, 3).reshape(b, t, c * f)
        packed = pack_padded_sequence(x, lengths, batch_first=True, enforce_sorted=False)
        _, h = self.gru(packed)
        return h[-1]


def reference_encode(mel: torch.Tensor, encoder: ReferenceEncoder) -> torch.Tensor:
    """Reference vector for a single ``[frames, mel_bins]`` matrix."""
    if mel.ndim != 2 or mel.shape[0] < 1:
        raise InvalidInputError(f"reference encoder needs [frames >= 1, mel_bins], got {tuple(mel.shape)}")
    return encoder(mel[None], torch.tensor([mel.shape[0]]))[0]


class StyleTokenLayer(nn.Module):
    """Multi-head attention from one reference query over a bank of style tokens."""

    def __init__(self, ref_dim: int, n_tokens: int = 10, token_dim: int = 256, n_heads: int = 8,
                 out_dim: int = 256):
        super().__init__()
        if token_dim % n_heads:
            raise InvalidInputError(f"token_dim {token_dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.head_dim = token_dim // n_heads
        self.tokens = nn.Parameter(torch.randn(n_tokens, token_dim) * 0.5)
        self.query = nn.Linear(ref_dim, token_dim)
        self.key = nn.Linear(token_dim, token_dim)
        self.value = nn.Linear(token_dim, token_dim)
        self.out = nn.Linear(token_dim, out_dim)

    def forward(self, reference: torch.Tensor, return_weights: bool = False):
        b = reference.shape[0]
        bank = torch.tanh(self.tokens)
        q = self.query(reference).view(b, self.n_heads, self.head_dim)
        k = self.key(bank).view(-1, self.n_heads, self.head_dim)
        v = self.value(bank).view(-1, self.n_heads, self.head_dim)
        scores = torch.einsum("bhd,nhd->bhn", q, k) / math.sqrt(self.head_dim)
        weights = torch.softmax(scores, dim=-1)
        heads = torch.einsum("bhn,nhd->bhd", weights, v).reshape(b, -1)
        out = self.out(heads)
        return (out, weights) if return_weights else out


def style_attend(reference: torch.Tensor, bank: StyleTokenLayer, return_weights: bool = False):
    if not torch.isfinite(reference).all():
        raise NumericError("non-finite reference vector")
    squeeze = reference.ndim == 1
    out = bank(reference[None] if squeeze else reference, return_weights=return_weights)
    if return_weights:
        out, w = out
        return (out[0], w[0]) if squeeze else (out, w)
    return out[0] if squeeze else out


class GstEncoder(nn.Module):
    def __init__(self, mel_bins: int, config: GstConfig, out_dim: int):
        super().__init__()
        self.reference = ReferenceEncoder(mel_bins, config.conv_channels, config.ref_dim)
        self.style = StyleTokenLayer(config.ref_dim, config.n_tokens, config.token_dim, config.n_heads, out_dim)
        self.out_dim = out_dim

    def forward(self, mel: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """Batched encoding; rows with ``lengths == 0`` get a zero vector."""
        present = lengths > 0
        ref = self.reference(mel, lengths.clamp_min(1))
        out = self.style(ref)
        return out * present[:, None].to(out.dtype)


def encode_acoustic_context(mel_prev: Optional[torch.Tensor], ace: GstEncoder) -> torch.Tensor:
    """Acoustic context vector; zero when there is no previous utterance."""
    if mel_prev is None:
        return ace.style.out.weight.new_zeros(ace.out_dim)
    if mel_prev.ndim != 2 or mel_prev.shape[0] < 1:
        raise InvalidInputError(f"previous mel must be [frames >= 1, mel_bins], got {tuple(mel_prev.shape)}")
    return ace(mel_prev[None], torch.tensor([mel_prev.shape[0]]))[0]


def encode_acoustic_target(mel_target: torch.Tensor, ae: GstEncoder) -> torch.Tensor:
    if mel_target is None or mel_target.ndim != 2 or mel_target.shape[0] < 1:
        raise InvalidInputError("target mel must be [frames >= 1, mel_bins]")
    return ae(mel_target[None], torch.tensor([mel_target.shape[0]]))[0]


def ace_prediction_loss(v_ace: torch.Tensor, v_ae: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over the vector dimensions (and batch)."""
    if v_ace.shape != v_ae.shape:
        raise InvalidInputError(f"shape mismatch {tuple(v_ace.shape)} vs {tuple(v_ae.shape)}")
    return (v_ace - v_ae).abs().mean()
