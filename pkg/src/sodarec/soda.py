"""Distribution-level supervision between user histories and target items.

Distributional representations are ``(..., L, K)`` tensors whose rows are
soft codeword assignments, one row per codebook layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .quantizer import RQVAE


@dataclass
class SodaConfig:
    lam: float = 1e-3
    beta: float = 100.0
    tau: float = 0.1
    epsilon: float = 1e-10

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if not 0 < self.epsilon <= 1e-6:
            raise ValueError(f"epsilon must lie in (0, 1e-6], got {self.epsilon}")


def target_distribution(z_y: torch.Tensor, quantizer: RQVAE, tau: float) -> torch.Tensor:
    return quantizer.quantize_soft(quantizer.quantize_hard(quantizer.encode(z_y)), tau)


def history_distribution(r_x: torch.Tensor, quantizer: RQVAE, tau: float) -> torch.Tensor:
    """Same soft quantization as for targets, entered directly in code space."""
    return quantizer.quantize_soft(quantizer.quantize_hard(r_x), tau)


def aggregate_negative(batch: Sequence[torch.Tensor] | torch.Tensor, self_index: int) -> torch.Tensor:
    """Layer-wise mean of every batch member's distribution except ``self_index``."""
    h = torch.stack(list(batch)) if not torch.is_tensor(batch) else batch
    if h.shape[0] < 2:
        raise ValueError("in-batch negatives need a batch of at least two")
    others = torch.cat([h[:self_index], h[self_index + 1:]])
    return others.mean(0)


def in_batch_negatives(h: torch.Tensor) -> torch.Tensor:
    """Vectorized ``aggregate_negative`` for every row of a (B, L, K) batch."""
    B = h.shape[0]
    if B < 2:
        raise ValueError("in-batch negatives need a batch of at least two")
    return ((h.sum(0, keepdim=True) - h) / (B - 1)).clamp_min(0.0)


def _floor(p: torch.Tensor, eps: float) -> torch.Tensor:
    p = p.clamp_min(eps)
    return p / p.sum(-1, keepdim=True)


def distribution_score(h_a: torch.Tensor, h_b: torch.Tensor, epsilon: float = 1e-10) -> torch.Tensor:
    """Negative symmetric KL per layer, averaged over layers. Always <= 0."""
    if h_a.shape != h_b.shape:
        raise ValueError(f"shape mismatch: {tuple(h_a.shape)} vs {tuple(h_b.shape)}")
    a, b = _floor(h_a, epsilon), _floor(h_b, epsilon)
    log_ratio = a.log() - b.log()
    # KL(a||b) + KL(b||a) = sum (a - b) log(a / b)
    sym = ((a - b) * log_ratio).sum(-1)
    return (-sym / 2).mean(-1)


def soda_loss(h_plus, h_minus, h_y, beta: float, epsilon: float = 1e-10, reduction: str = "mean"):
    """``-log sigmoid(beta * (s(h+, hy) - s(h-, hy)))``."""
    margin = distribution_score(h_plus, h_y, epsilon) - distribution_score(h_minus, h_y, epsilon)
    return bpr_from_scores(margin, beta, reduction)


def bpr_from_scores(margin: torch.Tensor, beta: float, reduction: str = "mean") -> torch.Tensor:
    loss = F.softplus(-beta * margin)
    return loss.mean() if reduction == "mean" else loss


def pointwise_variant(h_plus, h_y, beta: float, epsilon: float = 1e-10, reduction: str = "mean"):
    """Positive-only variant: ``-log sigmoid(beta * s(h+, hy))``."""
    return bpr_from_scores(distribution_score(h_plus, h_y, epsilon), beta, reduction)


def combined_loss(l_rec, l_soda, lam: float):
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    return l_rec + lam * l_soda
