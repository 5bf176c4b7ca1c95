"""Residual-quantization item tokenizer (RQ-VAE).

Items are embedded by a small feed-forward encoder, quantized layer by layer
against ``L`` codebooks of ``K`` codewords, and reconstructed by a mirror
decoder from the sum of the chosen codewords.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
from sklearn.cluster import KMeans

logger = logging.getLogger(__name__)


class InitializationError(ValueError):
    """Raised when codebooks cannot be initialized from the given samples."""


@dataclass
class TokenizerConfig:
    d_in: int = 32
    d_code: int = 16
    L: int = 3
    K: int = 16
    hidden_dim: int = 64
    alpha: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        if self.K < 2:
            raise ValueError(f"K must be at least 2, got {self.K}")
        if self.L < 1:
            raise ValueError(f"L must be at least 1, got {self.L}")


class QuantizationTrace(NamedTuple):
    codes: torch.Tensor  # (..., L) long
    residuals: torch.Tensor  # (..., L, d_code); residuals[..., 0, :] is the input latent


@dataclass(frozen=True)
class CodeSequence:
    codes: tuple[int, ...]
    disambiguation: int = 0

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.codes + (self.disambiguation,)


def _mlp(d_in: int, hidden: int, d_out: int) -> nn.Module:
    if hidden <= 0:
        return nn.Linear(d_in, d_out)
    return nn.Sequential(nn.Linear(d_in, hidden), nn.ReLU(), nn.Linear(hidden, d_out))


def squared_distances(v: torch.Tensor, codewords: torch.Tensor) -> torch.Tensor:
    """``||v - e_k||^2`` for every codeword; ``v`` is (..., d), codewords (K, d)."""
    diff = v.unsqueeze(-2) - codewords
    return (diff * diff).sum(-1)


class RQVAE(nn.Module):
    """Encoder, residual codebooks and decoder.

    ``hidden_dim == 0`` makes encoder and decoder single linear maps, which
    is handy for tests that need an identity decoder.
    """

    def __init__(self, config: TokenizerConfig):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(config.seed)
        self.encoder = _mlp(config.d_in, config.hidden_dim, config.d_code)
        self.decoder = _mlp(config.d_code, config.hidden_dim, config.d_in)
        self.codebooks = nn.Parameter(torch.empty(config.L, config.K, config.d_code))
        with torch.no_grad():
            for p in list(self.encoder.parameters()) + list(self.decoder.parameters()):
                if p.dim() > 1:
                    bound = 1.0 / p.shape[1] ** 0.5
                    p.uniform_(-bound, bound, generator=gen)
                else:
                    p.zero_()
            self.codebooks.normal_(0.0, 0.1, generator=gen)

    @property
    def L(self) -> int:
        return self.codebooks.shape[0]

    @property
    def K(self) -> int:
        return self.codebooks.shape[1]

    @property
    def d_code(self) -> int:
        return self.codebooks.shape[2]

    def encode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.config.d_in:
            raise ValueError(f"expected embedding dimension {self.config.d_in}, got {z.shape[-1]}")
        return self.encoder(z)

    def quantize_hard(self, r: torch.Tensor, codebooks: torch.Tensor | None = None) -> QuantizationTrace:
        """Greedy residual quantization; ties go to the lowest codeword index.

        Residuals carry gradient back to ``r`` and to the chosen codewords.
        """
        books = self.codebooks if codebooks is None else codebooks
        if r.shape[-1] != books.shape[-1]:
            raise ValueError(f"latent dimension {r.shape[-1]} != code dimension {books.shape[-1]}")
        v = r
        codes, residuals = [], []
        for layer in range(books.shape[0]):
            residuals.append(v)
            with torch.no_grad():
                c = squared_distances(v, books[layer]).argmin(-1)
            codes.append(c)
            v = v - books[layer][c]
        return QuantizationTrace(torch.stack(codes, -1), torch.stack(residuals, -2))

    def quantize_soft(self, trace: QuantizationTrace, tau: float,
                      codebooks: torch.Tensor | None = None) -> torch.Tensor:
        """Per-layer softmax of negative squared distance over the hard-chain residuals."""
        if not tau > 0:
            raise ValueError(f"tau must be positive, got {tau}")
        books = self.codebooks if codebooks is None else codebooks
        d = torch.stack(
            [squared_distances(trace.residuals[..., layer, :], books[layer]) for layer in range(books.shape[0])],
            dim=-2,
        )
        return torch.softmax(-d / tau, dim=-1)

    def codeword_sum(self, codes: torch.Tensor) -> torch.Tensor:
        codes = torch.as_tensor(codes, dtype=torch.long)
        if codes.shape[-1] != self.L:
            raise ValueError(f"expected {self.L} codes, got {codes.shape[-1]}")
        if codes.numel() and (codes.min() < 0 or codes.max() >= self.K):
            raise IndexError(f"code index out of range [0, {self.K})")
        return sum(self.codebooks[layer][codes[..., layer]] for layer in range(self.L))

    def decode(self, codes: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.codeword_sum(codes))

    def tokenize(self, z: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.quantize_hard(self.encode(z)).codes

    def soft_codes(self, z: torch.Tensor, tau: float) -> torch.Tensor:
        return self.quantize_soft(self.quantize_hard(self.encode(z)), tau)

    def loss(self, z: torch.Tensor, reduction: str = "mean") -> dict[str, torch.Tensor]:
        """Reconstruction plus codebook and commitment terms, per item summed.

        Gradient routing: the decoder sees a straight-through codeword sum, so
        reconstruction reaches the encoder but not the codebooks; codewords
        are pulled only by the codebook term; the encoder is pulled by the
        alpha-weighted commitment term.
        """
        r = self.encode(z)
        trace = self.quantize_hard(r)
        frozen = _frozen_terms(r, trace, self.codebooks)
        return tokenizer_loss_terms(z, r, trace.codes, self.codebooks, self.decoder,
                                    self.config.alpha, frozen, reduction)

    @torch.no_grad()
    def init_codebooks(self, z: torch.Tensor) -> None:
        """k-means codebooks on the current encoder's latents (layer by layer on residuals)."""
        latents = self.encode(z).detach().cpu().double().numpy()
        books = init_codebooks(latents, self.L, self.K, seed=self.config.seed)
        self.codebooks.copy_(torch.as_tensor(books, dtype=self.codebooks.dtype))


def _frozen_terms(r: torch.Tensor, trace: QuantizationTrace, books: torch.Tensor) -> dict[str, torch.Tensor]:
    """Detached values of every stop-gradient operand in the tokenizer loss."""
    chosen = torch.stack([books[layer][trace.codes[..., layer]] for layer in range(books.shape[0])], -2)
    prefix = torch.cumsum(chosen, dim=-2) - chosen  # sum of codewords before layer l
    return {
        "residuals": trace.residuals.detach(),
        "chosen": chosen.detach(),
        "prefix": prefix.detach(),
        "straight_through": (chosen.sum(-2) - r).detach(),
    }


def tokenizer_loss_terms(z, r, codes, books, decoder, alpha, frozen, reduction="mean"):
    """Evaluate the tokenizer loss given explicit stop-gradient operands.

    ``frozen`` holds the detached tensors that the stop-gradient operator
    protects. Supplying them from a fixed base point turns the loss into an
    ordinary differentiable function, which is what finite differences need.
    """
    L = books.shape[0]
    chosen = torch.stack([books[layer][codes[..., layer]] for layer in range(L)], -2)
    # residual as seen by the encoder: earlier codewords are constants
    v_enc = r.unsqueeze(-2) - frozen["prefix"]
    recon = decoder(r + frozen["straight_through"])
    rec = ((recon - z) ** 2).sum(-1)
    codebook = ((frozen["residuals"] - chosen) ** 2).sum((-1, -2))
    commit = ((v_enc - frozen["chosen"]) ** 2).sum((-1, -2))
    total = rec + codebook + alpha * commit
    parts = {"loss": total, "recon": rec, "codebook": codebook, "commit": commit}
    if reduction == "mean":
        return {k: v.mean() for k, v in parts.items()}
    if reduction == "sum":
        return {k: v.sum() for k, v in parts.items()}
    return parts


def init_codebooks(latents: np.ndarray, L: int, K: int, seed: int = 0) -> np.ndarray:
    """Residual k-means: layer ``l`` clusters what layers ``< l`` left over.

    Returns an ``(L, K, d)`` array. Deterministic for a fixed seed.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2:
        raise InitializationError("latent samples must be a 2-D array")
    n = latents.shape[0]
    if n < K:
        raise InitializationError(f"need at least K={K} samples to initialize codebooks, got {n}")
    residual = latents.copy()
    books = []
    for layer in range(L):
        n_distinct = len(np.unique(residual, axis=0))
        if n_distinct < K:
            warnings.warn(
                f"layer {layer}: only {n_distinct} distinct samples for K={K}; duplicate centroids",
                RuntimeWarning,
                stacklevel=2,
            )
            centers = _degenerate_centers(residual, K)
        else:
            km = KMeans(n_clusters=K, n_init=4, random_state=seed + layer).fit(residual)
            centers = km.cluster_centers_
        books.append(centers)
        d = ((residual[:, None, :] - centers[None]) ** 2).sum(-1)
        residual = residual - centers[d.argmin(1)]
    return np.stack(books)


def _degenerate_centers(samples: np.ndarray, K: int) -> np.ndarray:
    distinct = np.unique(samples, axis=0)
    idx = np.arange(K) % len(distinct)
    return distinct[idx].copy()


def assign_semantic_ids(item_ids: Sequence[str], codes: np.ndarray) -> dict[str, CodeSequence]:
    """Attach a collision-breaking suffix token to each item's codes.

    Items are visited in ascending id order; each gets the smallest suffix not
    yet used by an item with the same codes.
    """
    codes = np.asarray(codes)
    if len(item_ids) != len(codes):
        raise ValueError("item_ids and codes differ in length")
    by_id = dict(zip(item_ids, (tuple(int(c) for c in row) for row in codes)))
    used: dict[tuple[int, ...], int] = {}
    out = {}
    for item in sorted(by_id):
        key = by_id[item]
        t = used.get(key, 0)
        used[key] = t + 1
        out[item] = CodeSequence(key, t)
    return out


def semantic_ids_for(model: RQVAE, item_ids: Sequence[str], vectors: np.ndarray,
                     batch_size: int = 1024) -> dict[str, CodeSequence]:
    """Tokenize every item of an embedding table with a trained quantizer."""
    dtype = next(model.parameters()).dtype
    codes = [np.zeros((0, model.L), dtype=np.int64)]
    for start in range(0, len(item_ids), batch_size):
        z = torch.as_tensor(vectors[start:start + batch_size], dtype=dtype)
        codes.append(model.tokenize(z).numpy())
    return assign_semantic_ids(list(item_ids), np.concatenate(codes))
