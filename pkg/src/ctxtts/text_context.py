"""Textual context encoder.

Word embeddings of the target sentence go through a GRU whose final hidden
state is the sentence embedding. That embedding queries two single-head
attention modules over the preceding and succeeding window embeddings; the
two context vectors and the sentence embedding are concatenated and mapped
by one linear layer to the model dimension.

Word embeddings come from a pluggable :class:`EmbeddingProvider`.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_sequence

from .corpus.context import tokenize
from .corpus.types import ContextWindow
from .errors import InvalidInputError, NumericError, ProviderError

LATERAL_MODES = ("pre", "suc", "bi", "none", "implicit")
FINE_TUNE_LR = 1e-7


@dataclass(frozen=True)
class TceConfig:
    mode: str = "bi"
    k: int = 64
    gru_hidden: int = 256
    attention_dim: int = 256
    implicit_n_sentences: int = 1

    def __post_init__(self):
        if self.mode not in LATERAL_MODES:
            raise InvalidInputError(f"unknown lateral mode {self.mode!r}; expected one of {LATERAL_MODES}")
        if self.k < 0 or self.implicit_n_sentences < 0:
            raise InvalidInputError("k and implicit_n_sentences must be >= 0")

    @property
    def use_pre(self) -> bool:
        return self.mode in ("pre", "bi")

    @property
    def use_suc(self) -> bool:
        return self.mode in ("suc", "bi")

    @property
    def enabled(self) -> bool:
        return self.mode != "none"


# ---------------------------------------------------------------------------
# embedding providers


class EmbeddingProvider(nn.Module):
    """Maps a token list to a ``[tokens, dimension]`` float tensor."""

    identifier = "provider"
    trainable = False

    def __init__(self, dimension: int, lr_scale: Optional[float] = None):
        super().__init__()
        if dimension < 1:
            raise InvalidInputError("embedding dimension must be positive")
        self.dimension = dimension
        self.lr_scale = lr_scale

    def tokenize(self, text: str) -> List[str]:
        return tokenize(text)

    def embed(self, tokens: Sequence[str]) -> torch.Tensor:
        raise NotImplementedError

    def describe(self) -> dict:
        raise NotImplementedError


def hash_unit_vector(token: str, dim: int) -> np.ndarray:
    """Unit vector for ``token``: SHAKE-256 of ``"tok/" + token`` read as
    ``dim`` little-endian uint32 values, mapped to [-1, 1) and L2-normalized."""
    raw = hashlib.shake_256(("tok/" + token).encode("utf-8")).digest(4 * dim)
    v = np.frombuffer(raw, dtype="<u4").astype(np.float64) / 2.0**31 - 1.0
    return v / np.linalg.norm(v)


class HashEmbeddingProvider(EmbeddingProvider):
    """Frozen, context-insensitive toy provider."""

    identifier = "hash"

    def __init__(self, dimension: int = 64):
        super().__init__(dimension)
        self._cache: Dict[str, np.ndarray] = {}

    def _vector(self, token: str) -> np.ndarray:
        v = self._cache.get(token)
        if v is None:
            v = self._cache[token] = hash_unit_vector(token, self.dimension).astype(np.float32)
        return v

    def embed(self, tokens):
        if not tokens:
            return torch.zeros(0, self.dimension)
        return torch.from_numpy(np.stack([self._vector(t) for t in tokens]))

    def describe(self):
        return {"kind": "hash", "dimension": self.dimension}


class MixingHashProvider(HashEmbeddingProvider):
    """Context-sensitive toy provider: every row is its hash vector plus
    ``mix`` times the mean hash vector of the whole input, renormalized."""

    identifier = "mixing-hash"

    def __init__(self, dimension: int = 64, mix: float = 0.5):
        super().__init__(dimension)
        self.mix = mix

    def embed(self, tokens):
        base = super().embed(tokens)
        if base.shape[0] == 0:
            return base
        out = base + self.mix * base.mean(dim=0, keepdim=True)
        return out / out.norm(dim=1, keepdim=True).clamp_min(1e-12)

    def describe(self):
        return {"kind": "mixing-hash", "dimension": self.dimension, "mix": self.mix}


EMBEDDING_MAGIC = b"CTXE"
EMBEDDING_VERSION = 1


def write_embedding_file(path, table: Dict[str, np.ndarray]) -> None:
    """Header (magic, version, d_emb, vocab size), then tokens as
    length-prefixed UTF-8, then the row-major float32 matrix."""
    tokens = list(table)
    if not tokens:
        raise InvalidInputError("empty embedding table")
    dim = len(table[tokens[0]])
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", EMBEDDING_MAGIC, EMBEDDING_VERSION, dim, len(tokens)))
        for tok in tokens:
            raw = tok.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
        fh.write(np.stack([np.asarray(table[t], dtype="<f4") for t in tokens]).tobytes())


def read_embedding_file(path):
    data = Path(path).read_bytes()
    magic, version, dim, vocab = struct.unpack_from("<4sIII", data, 0)
    if magic != EMBEDDING_MAGIC or version != EMBEDDING_VERSION:
        raise InvalidInputError(f"{path}: not a version-{EMBEDDING_VERSION} embedding file")
    pos = 16
    tokens = []
    for _ in range(vocab):
        (n,) = struct.unpack_from("<I", data, pos)
        tokens.append(data[pos + 4:pos + 4 + n].decode("utf-8"))
        pos += 4 + n
    matrix = np.frombuffer(data, dtype="<f4", count=vocab * dim, offset=pos).reshape(vocab, dim)
    return tokens, matrix.astype(np.float32)


class FileEmbeddingProvider(EmbeddingProvider):
    """Precomputed per-token vectors, fine-tuned at a scaled learning rate.

    Unknown tokens map to a fixed zero vector.
    """

    identifier = "file"
    trainable = True

    def __init__(self, path, lr_scale: Optional[float] = None, trainable: bool = True):
        try:
            tokens, matrix = read_embedding_file(path)
        except (OSError, struct.error) as exc:
            raise ProviderError("file", f"cannot load {path}: {exc}") from exc
        super().__init__(matrix.shape[1], lr_scale)
        self.path = str(path)
        self.trainable = trainable
        self.index = {t: i + 1 for i, t in enumerate(tokens)}
        weight = np.concatenate([np.zeros((1, matrix.shape[1]), np.float32), matrix])
        self.table = nn.Embedding.from_pretrained(torch.from_numpy(weight), freeze=not trainable, padding_idx=0)

    def embed(self, tokens):
        ids = torch.tensor([self.index.get(t, 0) for t in tokens], dtype=torch.long)
        return self.table(ids)

    def describe(self):
        return {"kind": "file", "path": self.path, "lr_scale": self.lr_scale, "trainable": self.trainable}


def make_provider(desc: dict) -> EmbeddingProvider:
    kind = desc.get("kind", "hash")
    if kind == "hash":
        return HashEmbeddingProvider(desc.get("dimension", 64))
    if kind == "mixing-hash":
        return MixingHashProvider(desc.get("dimension", 64), desc.get("mix", 0.5))
    if kind == "file":
        return FileEmbeddingProvider(desc["path"], desc.get("lr_scale"), desc.get("trainable", True))
    raise InvalidInputError(f"unknown embedding provider kind {kind!r}")


def embed_tokens(text: str, provider: EmbeddingProvider) -> torch.Tensor:
    try:
        out = provider.embed(provider.tokenize(text))
    except (ProviderError, InvalidInputError):
        raise
    except Exception as exc:  # noqa: BLE001 - wrap arbitrary provider failures
        raise ProviderError(provider.identifier, str(exc)) from exc
    if out.ndim != 2 or out.shape[1] != provider.dimension:
        raise ProviderError(provider.identifier, f"expected [tokens, {provider.dimension}], got {tuple(out.shape)}")
    return out


# ---------------------------------------------------------------------------
# encoder pieces


def sentence_embedding(word_embeddings: torch.Tensor, gru: nn.GRU) -> torch.Tensor:
    """Final GRU hidden state after reading the rows in order."""
    if word_embeddings.shape[0] == 0:
        raise InvalidInputError("sentence embedding needs at least one token")
    _, h = gru(word_embeddings.unsqueeze(0))
    return h[-1, 0]


class ContextAttention(nn.Module):
    """Single-head scaled dot-product attention with learned projections."""

    def __init__(self, query_dim: int, key_dim: int, attention_dim: int):
        super().__init__()
        self.attention_dim = attention_dim
        self.query = nn.Linear(query_dim, attention_dim)
        self.key = nn.Linear(key_dim, attention_dim)
        self.value = nn.Linear(key_dim, attention_dim)

    def forward(self, query, keys_values, mask=None, return_weights=False):
        """``query`` [B, Dq], ``keys_values`` [B, T, Dk], ``mask`` [B, T] True at real tokens.

        Rows without any real token produce a zero vector.
        """
        q = self.query(query)
        k = self.key(keys_values)
        v = self.value(keys_values)
        scores = torch.einsum("bd,btd->bt", q, k) / math.sqrt(self.attention_dim)
        if mask is None:
            mask = torch.ones(scores.shape, dtype=torch.bool)
        has_any = mask.any(dim=1)
        scores = scores.masked_fill(~mask, float("-inf"))
        # fully masked rows: give them finite scores, their output is zeroed below
        scores = torch.where(has_any[:, None], scores, torch.zeros_like(scores))
        weights = torch.softmax(scores, dim=1) * has_any[:, None]
        out = torch.einsum("bt,btd->bd", weights, v)
        return (out, weights) if return_weights else out


def attend_context(query: torch.Tensor, keys_values: torch.Tensor, attention: ContextAttention,
                   return_weights: bool = False):
    """Attend from one query vector over a ``[tokens, d_emb]`` matrix."""
    if not torch.isfinite(query).all() or not torch.isfinite(keys_values).all():
        raise NumericError("non-finite attention input")
    if query.shape[-1] != attention.query.in_features:
        raise InvalidInputError(f"query dim {query.shape[-1]} != {attention.query.in_features}")
    if keys_values.shape[0] == 0:
        out = query.new_zeros(attention.attention_dim)
        return (out, query.new_zeros(0)) if return_weights else out
    out, w = attention(query[None], keys_values[None], return_weights=True)
    return (out[0], w[0]) if return_weights else out[0]


def fuse_textual_context(pre_vec, suc_vec, sent_emb, fc: nn.Linear, config: TceConfig = None):
    """Concatenate [preceding, succeeding, sentence] and apply one affine map.

    Laterals disabled by ``config`` are replaced with zeros.
    """
    if config is not None:
        if not config.use_pre:
            pre_vec = torch.zeros_like(pre_vec)
        if not config.use_suc:
            suc_vec = torch.zeros_like(suc_vec)
    x = torch.cat([pre_vec, suc_vec, sent_emb], dim=-1)
    if x.shape[-1] != fc.in_features:
        raise InvalidInputError(f"fusion input width {x.shape[-1]} != {fc.in_features}")
    return fc(x)


class TextualContextEncoder(nn.Module):
    def __init__(self, provider: EmbeddingProvider, config: TceConfig, d_model: int):
        super().__init__()
        self.provider = provider
        self.config = config
        d_emb = provider.dimension
        self.gru = nn.GRU(d_emb, config.gru_hidden, batch_first=True)
        self.attn_pre = ContextAttention(config.gru_hidden, d_emb, config.attention_dim)
        self.attn_suc = ContextAttention(config.gru_hidden, d_emb, config.attention_dim)
        self.fc = nn.Linear(2 * config.attention_dim + config.gru_hidden, d_model)

    def _dtype(self):
        return self.fc.weight.dtype

    def _pad(self, mats: List[torch.Tensor]):
        lengths = torch.tensor([m.shape[0] for m in mats])
        width = max(1, int(lengths.max()))
        padded = torch.zeros(len(mats), width, self.provider.dimension, dtype=self._dtype())
        for i, m in enumerate(mats):
            padded[i, :m.shape[0]] = m.to(self._dtype())
        mask = torch.arange(width)[None, :] < lengths[:, None]
        return padded, mask, lengths

    def _target_rows(self, target_text: str, window: ContextWindow) -> torch.Tensor:
        p = self.provider
        if self.config.mode != "implicit":
            return embed_tokens(target_text, p)
        pre, tgt, suc = p.tokenize(window.preceding), p.tokenize(target_text), p.tokenize(window.succeeding)
        try:
            rows = p.embed(pre + tgt + suc)
        except Exception as exc:  # noqa: BLE001
            raise ProviderError(p.identifier, str(exc)) from exc
        return rows[len(pre):len(pre) + len(tgt)]

    def forward(self, target_texts: Sequence[str], windows: Sequence[ContextWindow]) -> torch.Tensor:
        cfg = self.config
        targets = [self._target_rows(t, w) for t, w in zip(target_texts, windows)]
        if any(t.shape[0] == 0 for t in targets):
            raise InvalidInputError("target sentence has no tokens")
        padded, _, lengths = self._pad(targets)
        packed = pack_padded_sequence(padded, lengths, batch_first=True, enforce_sorted=False)
        _, h = self.gru(packed)
        sent = h[-1]
        zeros = sent.new_zeros(sent.shape[0], cfg.attention_dim)
        pre_vec, suc_vec = zeros, zeros
        if cfg.use_pre:
            kv, mask, _ = self._pad([embed_tokens(w.preceding, self.provider) for w in windows])
            pre_vec = self.attn_pre(sent, kv, mask)
        if cfg.use_suc:
            kv, mask, _ = self._pad([embed_tokens(w.succeeding, self.provider) for w in windows])
            suc_vec = self.attn_suc(sent, kv, mask)
        return fuse_textual_context(pre_vec, suc_vec, sent, self.fc)


def encode_textual_context(target_text: str, window: ContextWindow, encoder: TextualContextEncoder) -> torch.Tensor:
    """Textual context vector [d_model] for one target sentence."""
    return encoder([target_text], [window])[0]
