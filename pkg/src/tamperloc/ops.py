"""Differentiable primitives shared by the localization branches.

Everything here operates on torch tensors and stays differentiable; the
independent numpy counterparts used for verification live in `oracles`.
"""

from __future__ import annotations

import torch
from torch import Tensor

PROB_EPS = 1e-7


def bce(p: Tensor, target: Tensor | float, eps: float = PROB_EPS) -> Tensor:
    """Elementwise binary cross-entropy on probabilities, clamped for log safety."""
    p = p.clamp(eps, 1.0 - eps)
    if not torch.is_tensor(target):
        target = torch.as_tensor(target, dtype=p.dtype, device=p.device)
    target = target.to(p.dtype)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p))


def lse_mean(x: Tensor, tau: float, dim: int = -1) -> Tensor:
    """Temperature-scaled log-mean-exp: tau * log(mean(exp(x / tau))).

    A smooth surrogate for max along `dim`; max-subtraction keeps the exp
    exact for any input scale.
    """
    if tau <= 0.0:
        raise ValueError("temperature must be positive")
    m = x.max(dim=dim, keepdim=True).values
    out = m.squeeze(dim) + tau * torch.log(torch.exp((x - m) / tau).mean(dim=dim))
    return out


def topk_mean(x: Tensor, k: int, dim: int = -1) -> Tensor:
    """Mean of the k largest entries along `dim`."""
    n = x.shape[dim]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for axis of size {n}")
    values, _ = torch.topk(x, k, dim=dim)
    return values.mean(dim=dim)


def masked_topk_mean(x: Tensor, mask: Tensor, k: Tensor) -> Tensor:
    """Per-row mean of the k[b] largest entries of x[b] where mask[b] is True.

    x, mask: (B, L); k: (B,) with 1 <= k[b] <= mask[b].sum(). Masked positions
    never enter the pool.
    """
    if torch.any(k < 1) or torch.any(k > mask.sum(dim=1)):
        raise ValueError("per-row k must lie in [1, number of unmasked entries]")
    neg = torch.finfo(x.dtype).min
    filled = torch.where(mask, x, torch.full_like(x, neg))
    sorted_vals, _ = torch.sort(filled, dim=1, descending=True)
    csum = torch.cumsum(sorted_vals, dim=1)
    idx = (k - 1).unsqueeze(1)
    return csum.gather(1, idx).squeeze(1) / k.to(x.dtype)


def first_argmax(x: Tensor, dim: int = -1) -> Tensor:
    """Argmax with deterministic lowest-index tie-breaking."""
    m = x.max(dim=dim, keepdim=True).values
    is_max = x == m
    idx = torch.arange(x.shape[dim], device=x.device).view(
        [-1 if d == dim % x.dim() else 1 for d in range(x.dim())]
    )
    big = x.shape[dim]
    candidates = torch.where(is_max, idx, torch.full_like(idx, big).expand_as(is_max))
    return candidates.min(dim=dim).values


def cosine_matrix(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Pairwise cosine similarity between rows: (..., M, D) x (..., N, D) -> (..., M, N)."""
    a_n = a / a.norm(dim=-1, keepdim=True).clamp_min(eps)
    b_n = b / b.norm(dim=-1, keepdim=True).clamp_min(eps)
    return a_n @ b_n.transpose(-1, -2)


def masked_zscore(x: Tensor, mask: Tensor, var_floor: float = 1e-6) -> Tensor:
    """Per-row standardization of x over positions where mask is True.

    Uses the population variance of the unmasked entries with a floor, so a
    constant (or singleton) row maps to zeros. Masked positions are returned
    as zero as well.
    """
    maskf = mask.to(x.dtype)
    count = maskf.sum(dim=-1, keepdim=True).clamp_min(1.0)
    mean = (x * maskf).sum(dim=-1, keepdim=True) / count
    var = (((x - mean) ** 2) * maskf).sum(dim=-1, keepdim=True) / count
    std = torch.sqrt(var.clamp_min(var_floor))
    return ((x - mean) / std) * maskf
