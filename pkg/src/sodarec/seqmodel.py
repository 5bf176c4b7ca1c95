"""Encoder-decoder recommender over semantic-ID tokens."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .quantizer import CodeSequence

PAD, BOS, EOS = 0, 1, 2
_NEG = -1e9


@dataclass(frozen=True)
class VocabLayout:
    """Global token ids: specials, then one block per codebook layer, then suffix tokens."""

    L: int
    K: int
    n_disambiguation: int = 32

    n_special = 3

    @property
    def size(self) -> int:
        return self.n_special + self.L * self.K + self.n_disambiguation

    @property
    def seq_len(self) -> int:
        return self.L + 1

    def code_token(self, layer: int, k: int) -> int:
        if not (0 <= layer < self.L and 0 <= k < self.K):
            raise IndexError(f"code ({layer}, {k}) outside layout L={self.L}, K={self.K}")
        return self.n_special + layer * self.K + k

    def disambiguation_token(self, t: int) -> int:
        if not 0 <= t < self.n_disambiguation:
            raise IndexError(
                f"disambiguation token {t} exceeds capacity {self.n_disambiguation}; "
                "raise n_disambiguation"
            )
        return self.n_special + self.L * self.K + t

    def item_tokens(self, seq: CodeSequence) -> list[int]:
        return [self.code_token(layer, k) for layer, k in enumerate(seq.codes)] + [
            self.disambiguation_token(seq.disambiguation)
        ]

    def layer_slice(self, step: int) -> slice:
        """Token ids legal at decoding step ``step`` (0-based)."""
        if step < self.L:
            start = self.n_special + step * self.K
            return slice(start, start + self.K)
        start = self.n_special + self.L * self.K
        return slice(start, start + self.n_disambiguation)


def tokenize_history(items: Sequence[str], id_map: Mapping[str, CodeSequence], layout: VocabLayout,
                     max_items: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Concatenate item token groups, most recent ``max_items`` kept, right-padded."""
    capacity = max_items * layout.seq_len
    tokens = torch.full((capacity,), PAD, dtype=torch.long)
    mask = torch.zeros(capacity, dtype=torch.bool)
    flat = []
    for item in list(items)[-max_items:] if max_items else []:
        try:
            flat.extend(layout.item_tokens(id_map[item]))
        except KeyError:
            raise KeyError(f"item {item!r} has no semantic id") from None
    tokens[: len(flat)] = torch.tensor(flat, dtype=torch.long)
    mask[: len(flat)] = True
    return tokens, mask


def tokenize_target(item: str, id_map: Mapping[str, CodeSequence], layout: VocabLayout) -> torch.Tensor:
    return torch.tensor(layout.item_tokens(id_map[item]), dtype=torch.long)


@dataclass
class ModelConfig:
    d_model: int = 64
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")


class Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)

    def _split(self, x):
        B, T, D = x.shape
        return x.view(B, T, self.n_heads, D // self.n_heads).transpose(1, 2)

    def forward(self, x, memory, bias):
        q, k, v = self._split(self.q(x)), self._split(self.k(memory)), self._split(self.v(memory))
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]) + bias
        attn = torch.softmax(scores, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(x.shape)
        return self.out(y)


class FeedForward(nn.Sequential):
    def __init__(self, d_model, d_ff, dropout):
        super().__init__(nn.Linear(d_model, d_ff), nn.GELU(), nn.Dropout(dropout), nn.Linear(d_ff, d_model))


class EncoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.attn = Attention(cfg.d_model, cfg.n_heads)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, bias):
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, h, bias))
        return x + self.drop(self.ff(self.norm2(x)))


class DecoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.self_attn = Attention(cfg.d_model, cfg.n_heads)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.cross_attn = Attention(cfg.d_model, cfg.n_heads)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, y, memory, self_bias, cross_bias):
        h = self.norm1(y)
        y = y + self.drop(self.self_attn(h, h, self_bias))
        y = y + self.drop(self.cross_attn(self.norm2(y), memory, cross_bias))
        return y + self.drop(self.ff(self.norm3(y)))


class Recommender(nn.Module):
    """Transformer encoder-decoder emitting one item's ``L + 1`` tokens.

    Also owns the projection head that maps a pooled history encoding into
    the tokenizer's code space.
    """

    def __init__(self, cfg: ModelConfig, layout: VocabLayout, max_src_len: int, d_code: int):
        super().__init__()
        self.cfg = cfg
        self.layout = layout
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            d = cfg.d_model
            self.embed = nn.Embedding(layout.size, d, padding_idx=PAD)
            self.src_pos = nn.Embedding(max_src_len, d)
            self.tgt_pos = nn.Embedding(layout.seq_len, d)
            self.encoder = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.n_encoder_layers))
            self.decoder = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.n_decoder_layers))
            self.enc_norm = nn.LayerNorm(d)
            self.dec_norm = nn.LayerNorm(d)
            self.head = nn.Linear(d, layout.size)
            self.projection = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, d_code))
            self.drop = nn.Dropout(cfg.dropout)
            for emb in (self.embed, self.src_pos, self.tgt_pos):
                nn.init.normal_(emb.weight, std=0.02)

    @property
    def max_src_len(self) -> int:
        return self.src_pos.num_embeddings

    def encode_history(self, src: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Contextual representation per source position, shape (B, T, d_model)."""
        T = src.shape[1]
        x = self.drop(self.embed(src) + self.src_pos.weight[:T])
        bias = _key_bias(mask, x.dtype)
        for block in self.encoder:
            x = block(x, bias)
        return self.enc_norm(x)

    def decode(self, memory, mask, tgt_in):
        T = tgt_in.shape[1]
        y = self.drop(self.embed(tgt_in) + self.tgt_pos.weight[:T])
        causal = torch.full((T, T), _NEG, dtype=y.dtype).triu(1)
        cross = _key_bias(mask, y.dtype)
        for block in self.decoder:
            y = block(y, memory, causal, cross)
        return self.head(self.dec_norm(y))

    def forward(self, src, mask, tgt):
        """Teacher-forced logits (B, L+1, V) plus the encoder memory."""
        memory = self.encode_history(src, mask)
        tgt_in = torch.cat([torch.full_like(tgt[:, :1], BOS), tgt[:, :-1]], dim=1)
        return self.decode(memory, mask, tgt_in), memory

    def next_token_logits(self, src, mask, prefix, memory=None):
        """Scores for the token following ``prefix`` (B, V); the prefix excludes BOS."""
        if prefix.shape[1] > self.layout.L:
            raise ValueError(f"prefix length {prefix.shape[1]} exceeds {self.layout.L}")
        if memory is None:
            memory = self.encode_history(src, mask)
        tgt_in = torch.cat([torch.full((prefix.shape[0], 1), BOS, dtype=torch.long), prefix], dim=1)
        return self.decode(memory, mask, tgt_in)[:, -1]

    def pool(self, memory, mask):
        return pool_history(memory, mask)

    def project(self, pooled):
        return self.projection(pooled)


def trim_padding(src: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Drop trailing columns that are padding for every row of a right-padded batch."""
    width = max(int(mask.sum(-1).max()), 1)
    return src[:, :width], mask[:, :width]


def _key_bias(mask: torch.Tensor, dtype) -> torch.Tensor:
    """Additive attention bias hiding padded keys, shape (B, 1, 1, T)."""
    bias = torch.zeros(mask.shape, dtype=dtype).masked_fill(~mask, _NEG)
    return bias[:, None, None, :]


def sequence_nll(logits: torch.Tensor, tgt: torch.Tensor) -> torch.Tensor:
    """Per-sequence negative log-likelihood summed over target tokens, shape (B,)."""
    logp = F.log_softmax(logits, dim=-1)
    return -logp.gather(-1, tgt.unsqueeze(-1)).squeeze(-1).sum(-1)


def rec_loss(model: Recommender, src, mask, tgt, reduction: str = "mean") -> torch.Tensor:
    logits, _ = model(src, mask, tgt)
    nll = sequence_nll(logits, tgt)
    return nll.mean() if reduction == "mean" else nll


def pool_history(memory: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean of encoder states over valid positions."""
    counts = mask.sum(-1, keepdim=True)
    if (counts == 0).any():
        raise ValueError("cannot pool an all-padding history")
    m = mask.unsqueeze(-1).to(memory.dtype)
    return (memory * m).sum(-2) / counts.to(memory.dtype)
