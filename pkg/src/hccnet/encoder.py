"""Time-aware Transformer encoder with its pooling head, plus the full sequence model.

Visit embeddings are prefixed with a learnable [cls] token and receive
sinusoidal encodings of the square-rooted time distance to an anchor date
instead of integer positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import LN_EPS, Backbone, BackboneConfig, VARIANTS, init_weights
from .volumes import LabeledSequence

PROB_EPS = 1e-7


@dataclass(frozen=True)
class EncoderConfig:
    hidden: int
    layers: int
    heads: int
    ffn_dim: Optional[int] = None
    dropout: float = 0.2
    max_len: int = 8

    def __post_init__(self):
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.hidden)
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.hidden % 2:
            raise ValueError("hidden size must be even for sinusoidal encodings")
        if self.max_len < 1 or self.layers < 0:
            raise ValueError("max_len >= 1 and layers >= 0 required")

    @classmethod
    def for_variant(cls, variant: str, channels: Optional[int] = None, **kw) -> "EncoderConfig":
        v = VARIANTS[variant]
        hidden = 8 * (channels or v.channels)
        return cls(hidden=hidden, layers=v.layers, heads=max(hidden // 128, 1), **kw)


# ---------------------------------------------------------------------------
# time encodings


def compute_time_deltas(seq: LabeledSequence) -> np.ndarray:
    """``[0, sqrt(anchor - t_1), ..., sqrt(anchor - t_n)]`` with the cls slot first."""
    dist = np.asarray([seq.anchor - t for t in seq.timestamps], dtype=np.float64)
    if (dist < 0).any():
        raise ValueError(f"{seq.patient_id}: visit after anchor {seq.anchor}")
    return np.concatenate([[0.0], np.sqrt(dist)])


def sinusoidal_pe(delta, hidden: int) -> torch.Tensor:
    """Sin/cos encodings of already-transformed distances, shape ``delta.shape + (hidden,)``."""
    if hidden % 2:
        raise ValueError("hidden must be even")
    u = torch.as_tensor(delta, dtype=torch.float64)
    k = torch.arange(hidden // 2, dtype=torch.float64)
    arg = u[..., None] / 10000.0 ** (2 * k / hidden)
    pe = torch.stack([torch.sin(arg), torch.cos(arg)], dim=-1)
    return pe.flatten(-2)


@dataclass
class SequenceBatch:
    tokens: torch.Tensor  # (B, T, H), slot 0 is cls
    mask: torch.Tensor  # (B, T) bool, True for real tokens
    deltas: torch.Tensor  # (B, T)


def assemble_sequence(
    embeddings: Sequence[torch.Tensor], cls_token: torch.Tensor, deltas: Sequence
) -> SequenceBatch:
    """Right-pad per-sequence visit embeddings and add cls + time encodings."""
    B = len(embeddings)
    H = cls_token.shape[-1]
    lengths = [e.shape[0] + 1 for e in embeddings]
    for e, d, n in zip(embeddings, deltas, lengths):
        if len(d) != n:
            raise ValueError(f"{e.shape[0]} embeddings need {n} deltas, got {len(d)}")
    T = max(lengths)
    dtype = cls_token.dtype
    tokens = cls_token.new_zeros(B, T, H)
    mask = torch.zeros(B, T, dtype=torch.bool)
    dpad = torch.zeros(B, T, dtype=torch.float64)
    rows = []
    for b, (e, d, n) in enumerate(zip(embeddings, deltas, lengths)):
        rows.append(torch.cat([cls_token[None], e.to(dtype), e.new_zeros(T - n, H).to(dtype)]))
        mask[b, :n] = True
        dpad[b, :n] = torch.as_tensor(np.asarray(d, dtype=np.float64))
    tokens = torch.stack(rows)
    pe = sinusoidal_pe(dpad, H).to(dtype) * mask[..., None]
    return SequenceBatch(tokens + pe, mask, dpad)


# ---------------------------------------------------------------------------
# encoder


def _ordered_sum(x: torch.Tensor, dim: int) -> torch.Tensor:
    # summing in sorted order makes the reduction independent of slot order,
    # so attention stays exactly permutation-equivariant in floating point
    return torch.sort(x, dim=dim).values.sum(dim=dim)


class SelfAttention(nn.Module):
    def __init__(self, hidden: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.proj = nn.Linear(hidden, hidden)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask):
        B, T, H = x.shape
        dh = H // self.heads
        q, k, v = self.qkv(x).view(B, T, 3, self.heads, dh).permute(2, 0, 3, 1, 4)
        scores = (q[:, :, :, None, :] * k[:, :, None, :, :]).sum(-1) / math.sqrt(dh)
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        e = torch.exp(scores - scores.amax(-1, keepdim=True))
        attn = self.drop(e / _ordered_sum(e, -1)[..., None])
        ctx = _ordered_sum(attn[..., None] * v[:, :, None, :, :], 3)
        return self.proj(ctx.transpose(1, 2).reshape(B, T, H))


class EncoderLayer(nn.Module):
    """Pre-LN: x + Attn(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.hidden, eps=LN_EPS)
        self.attn = SelfAttention(cfg.hidden, cfg.heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(cfg.hidden, eps=LN_EPS)
        self.fc1 = nn.Linear(cfg.hidden, cfg.ffn_dim)
        self.fc2 = nn.Linear(cfg.ffn_dim, cfg.hidden)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, mask):
        x = x + self.drop(self.attn(self.norm1(x), mask))
        h = self.fc2(self.drop(F.gelu(self.fc1(self.norm2(x)))))
        return x + self.drop(h)


class TimeAwareEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.config = cfg
        self.cls_token = nn.Parameter(torch.zeros(cfg.hidden))
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.hidden, eps=LN_EPS) if cfg.layers else nn.Identity()

    def forward(self, batch: SequenceBatch) -> torch.Tensor:
        x = batch.tokens
        for layer in self.layers:
            x = layer(x, batch.mask)
        return self.norm(x)


class PoolerHead(nn.Module):
    """linear -> tanh -> LayerNorm -> linear, one logit per sequence."""

    def __init__(self, hidden: int):
        super().__init__()
        self.dense = nn.Linear(hidden, hidden)
        self.norm = nn.LayerNorm(hidden, eps=LN_EPS)
        self.classifier = nn.Linear(hidden, 1)

    def forward(self, e_cls):
        return self.classifier(self.norm(torch.tanh(self.dense(e_cls)))).squeeze(-1)


def pool_and_classify(e_cls: torch.Tensor, head: PoolerHead) -> torch.Tensor:
    return torch.sigmoid(head(e_cls)).clamp(PROB_EPS, 1 - PROB_EPS)


# ---------------------------------------------------------------------------
# full model


class HCCNet(nn.Module):
    """Backbone + time-aware encoder + pooling head.

    ``forward`` takes the visits of a batch of sequences flattened along the
    first axis, either as volumes ``(N, C, D, H, W)`` or as precomputed
    embeddings ``(N, H)``, together with per-sequence visit counts and
    cls-prefixed delta vectors.  Returns one logit per sequence.
    """

    def __init__(self, backbone_cfg: BackboneConfig, encoder_cfg: EncoderConfig):
        super().__init__()
        if backbone_cfg.embed_dim != encoder_cfg.hidden:
            raise ValueError("backbone embedding and encoder hidden size differ")
        self.backbone = Backbone(backbone_cfg)
        self.encoder = TimeAwareEncoder(encoder_cfg)
        self.pooler = PoolerHead(encoder_cfg.hidden)

    def embed(self, visits: torch.Tensor) -> torch.Tensor:
        return self.backbone(visits) if visits.ndim == 5 else visits

    def encode(self, embeddings: torch.Tensor, lengths: Sequence[int], deltas: Sequence) -> torch.Tensor:
        chunks = list(torch.split(embeddings, list(lengths)))
        batch = assemble_sequence(chunks, self.encoder.cls_token, deltas)
        return self.encoder(batch)[:, 0]

    def forward(self, visits, lengths, deltas):
        return self.pooler(self.encode(self.embed(visits), lengths, deltas))

    def predict_proba(self, visits, lengths, deltas):
        return pool_and_classify(self.encode(self.embed(visits), lengths, deltas), self.pooler)


def build_model(
    variant: str = "P",
    input_channels: int = 4,
    init_seed: int = 0,
    channels: Optional[int] = None,
    dropout: float = 0.2,
    max_len: int = 8,
) -> HCCNet:
    v = VARIANTS[variant]
    bcfg = BackboneConfig(channels or v.channels, v.blocks, input_channels)
    ecfg = EncoderConfig.for_variant(variant, channels, dropout=dropout, max_len=max_len)
    model = HCCNet(bcfg, ecfg)
    init_weights(model, init_seed)
    return model
