"""Counterfactual contrastive objective.

The step-I answer vector is the anchor, the step-II answer vector given the
predicted step is the positive, and the step-II answer vector given a sampled
counterfactual step is the single negative. All three go through a bias-free
one-hidden-layer projection head before cosine similarity.
"""

from __future__ import annotations

from typing import Optional

import torch
from torch import nn

from .errors import DimensionMismatch, NonPositiveTemperature, ZeroVector


class ProjectionHead(nn.Module):
    """``z = W2 relu(W1 h)`` with no bias terms."""

    def __init__(self, d: int, d_proj: Optional[int] = None, dtype=torch.float64, seed: Optional[int] = None):
        super().__init__()
        d_proj = d_proj or d
        self.d = d
        self.W1 = nn.Parameter(torch.empty(d, d, dtype=dtype))
        self.W2 = nn.Parameter(torch.empty(d_proj, d, dtype=dtype))
        gen = torch.Generator().manual_seed(0 if seed is None else seed)
        with torch.no_grad():
            bound = d ** -0.5
            self.W1.uniform_(-bound, bound, generator=gen)
            self.W2.uniform_(-bound, bound, generator=gen)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.d:
            raise DimensionMismatch(f"expected hidden size {self.d}, got {h.shape[-1]}")
        return torch.relu(h @ self.W1.T) @ self.W2.T


def project(g: ProjectionHead, h: torch.Tensor) -> torch.Tensor:
    return g(h)


def _cosine(zi: torch.Tensor, zj: torch.Tensor, eps: float = 0.0) -> torch.Tensor:
    ni, nj = zi.norm(dim=-1), zj.norm(dim=-1)
    if eps:
        ni, nj = ni.clamp_min(eps), nj.clamp_min(eps)
    return (zi * zj).sum(-1) / (ni * nj)


def similarity(zi: torch.Tensor, zj: torch.Tensor) -> torch.Tensor:
    """Cosine similarity along the last axis."""
    if bool((zi.norm(dim=-1) == 0).any()) or bool((zj.norm(dim=-1) == 0).any()):
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    return _cosine(zi, zj)


def loss_from_similarities(sim_pos: torch.Tensor, sim_neg: torch.Tensor, tau: float) -> torch.Tensor:
    # -log(e^a / (e^a + e^b)) = logsumexp(a, b) - a
    a, b = sim_pos / tau, sim_neg / tau
    return torch.logsumexp(torch.stack([a, b]), dim=0) - a


def contrastive_loss(
    z_x: torch.Tensor, z_pos: torch.Tensor, z_neg: torch.Tensor, tau: float = 1.0
) -> torch.Tensor:
    """Two-way InfoNCE with one positive and one counterfactual negative.

    Works on single vectors or on batches along the leading axes; returns one
    loss per row.
    """
    if not tau > 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {tau}")
    return loss_from_similarities(similarity(z_x, z_pos), similarity(z_x, z_neg), tau)


def batch_contrastive_loss(
    g: ProjectionHead, h_x: torch.Tensor, h_pos: torch.Tensor, h_neg: torch.Tensor, tau: float
) -> torch.Tensor:
    """Training-time variant: a projection that collapses to zero gets a
    clamped norm instead of raising."""
    if not tau > 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {tau}")
    z_x, z_pos, z_neg = g(h_x), g(h_pos), g(h_neg)
    eps = 1e-12
    return loss_from_similarities(_cosine(z_x, z_pos, eps), _cosine(z_x, z_neg, eps), tau)
