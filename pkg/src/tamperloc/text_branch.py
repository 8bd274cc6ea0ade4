"""Token-level weakly-supervised localization calibrated by visual deviation.

Two cue heads score content tokens for forgery: a window-3 convolution over
the token features captures intrinsic anomalies, and a cross-modal head turns
each token's best-matching patch similarity into a deviation score after
in-sentence standardization (low similarity means high forgery probability).
The fused scores are trained with an asymmetric constraint: every content
token of an authentic sentence is pushed to zero, while only the top-scoring
few tokens of a forged sentence are pushed to one. A margin constraint keeps
authentic pairs' raw similarity above that of text-forged pairs so the
deviation cue stays meaningful.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .ops import bce, cosine_matrix, masked_topk_mean, masked_zscore


@dataclass(frozen=True)
class TextBranchConfig:
    true_suppression_weight: float = 2.0   # weight on the authentic-sentence branch
    consistency_margin: float = 0.1        # similarity-gap margin
    sparse_fraction: float = 0.15          # fraction of content tokens assumed forged
    coarse_fraction: float = 0.15          # top-K fraction for the coarse pool
    conv_window: int = 3

    def __post_init__(self):
        if self.true_suppression_weight <= 0 or self.consistency_margin <= 0:
            raise ValueError("loss weights and margins must be positive")
        if not 0.0 < self.sparse_fraction <= 1.0 or not 0.0 < self.coarse_fraction <= 1.0:
            raise ValueError("top-K fractions must lie in (0, 1]")
        if self.conv_window < 1 or self.conv_window % 2 == 0:
            raise ValueError("conv_window must be odd and positive")


def k_from_length(length: Tensor, fraction: float) -> Tensor:
    """Length-dependent top-K count: max(1, ceil(fraction * length))."""
    return torch.clamp(torch.ceil(fraction * length.to(torch.float64)), min=1.0).to(torch.long)


def asymmetric_sparse_loss(fused_scores: Tensor, y_t: Tensor, content_mask: Tensor,
                           true_weight: float, sparse_fraction: float) -> Tensor:
    """Hard suppression on authentic sentences, sparse activation on forged ones.

    Authentic rows average a zero-target BCE over every content token. Forged
    rows average a one-target BCE over only their top-K highest-scoring
    content tokens (K from the sentence length); the remaining tokens receive
    no gradient. Each branch is averaged over its own sentence set.
    """
    counts = content_mask.sum(dim=1)
    true_rows = (y_t == 0).nonzero(as_tuple=True)[0]
    fake_rows = (y_t == 1).nonzero(as_tuple=True)[0]

    true_term = fused_scores.new_zeros(())
    if true_rows.numel():
        contentf = content_mask.to(fused_scores.dtype)
        per_tok = bce(fused_scores, 0.0) * contentf
        per_row = per_tok[true_rows].sum(dim=1) / counts[true_rows].clamp_min(1).to(fused_scores.dtype)
        true_term = per_row.mean()

    fake_term = fused_scores.new_zeros(())
    if fake_rows.numel():
        parts = []
        for b in fake_rows.tolist():
            n_content = int(counts[b].item())
            if n_content == 0:
                warnings.warn(f"forged sentence {b} has no content tokens; skipped")
                continue
            k = max(1, math.ceil(sparse_fraction * n_content))
            vals = fused_scores[b][content_mask[b]]
            top, _ = torch.topk(vals, k)
            parts.append(bce(top, 1.0).mean())
        if parts:
            fake_term = torch.stack(parts).mean()

    return true_weight * true_term + fake_term


def semantic_consistency_loss(raw_similarity: Tensor, y_v: Tensor, y_t: Tensor,
                              padding_mask: Tensor, margin: float) -> Tensor:
    """Margin on the similarity gap between pure-authentic pairs and
    text-forged pairs with authentic images.

    Per-sentence similarity is the mean of raw token-to-best-patch similarity
    over real (non-padding) tokens. Image-forged samples are excluded from
    both sets; an empty set on either side contributes nothing.
    """
    padf = padding_mask.to(raw_similarity.dtype)
    per_sentence = (raw_similarity * padf).sum(dim=1) / padf.sum(dim=1).clamp_min(1.0)
    pure_true = (y_v == 0) & (y_t == 0)
    text_forged = (y_v == 0) & (y_t == 1)
    if not bool(pure_true.any()) or not bool(text_forged.any()):
        return raw_similarity.new_zeros(())
    gap = per_sentence[pure_true].mean() - per_sentence[text_forged].mean()
    return torch.relu(margin - gap)


class TokenLocalizer(nn.Module):
    """Learnable pieces of the text branch."""

    def __init__(self, dim: int, config: TextBranchConfig | None = None):
        super().__init__()
        self.config = config or TextBranchConfig()
        self.coarse_head = nn.Linear(dim, 1)
        self.conv = nn.Conv1d(dim, dim, self.config.conv_window,
                              padding=self.config.conv_window // 2)
        self.intrinsic_head = nn.Linear(dim, 1)
        self.proj_token = nn.Linear(dim, dim)
        self.proj_patch = nn.Linear(dim, dim)
        self.scale = nn.Parameter(torch.tensor(1.0))    # deviation slope
        self.center = nn.Parameter(torch.tensor(0.0))   # deviation offset
        self.gate_intrinsic = nn.Parameter(torch.tensor(0.5))
        self.gate_extrinsic = nn.Parameter(torch.tensor(0.5))
        self.fine_head = nn.Linear(dim, 1)

    def coarse(self, t_tok_enh: Tensor, content_mask: Tensor,
               y_t: Tensor) -> tuple[Tensor, Tensor]:
        """Sentence-level probability from the top-K content-token scores."""
        counts = content_mask.sum(dim=1)
        if torch.any(counts == 0):
            raise ValueError("coarse text prediction needs at least one content token")
        scores = torch.sigmoid(self.coarse_head(t_tok_enh).squeeze(-1))
        k = torch.minimum(k_from_length(counts, self.config.coarse_fraction), counts)
        y_coarse = masked_topk_mean(scores, content_mask, k)
        return y_coarse, bce(y_coarse, y_t).mean()

    def intrinsic_scores(self, t_tok_enh: Tensor, content_mask: Tensor) -> Tensor:
        """(B, L) in-text cue scores; zero at stop-word and padding positions."""
        x = self.conv(t_tok_enh.transpose(1, 2)).transpose(1, 2)
        scores = torch.sigmoid(self.intrinsic_head(x).squeeze(-1))
        return scores * content_mask.to(scores.dtype)

    def extrinsic_scores(self, t_tok_raw: Tensor, v_pat_raw: Tensor,
                         content_mask: Tensor) -> tuple[Tensor, Tensor]:
        """Cross-modal deviation scores.

        Returns (raw_similarity (B, L), deviation (B, L)): the raw value is
        each token's best cosine match over all projected patches; the
        deviation score standardizes it within the sentence's content tokens
        and maps low similarity to high forgery probability.
        """
        tok = self.proj_token(t_tok_raw)
        pat = self.proj_patch(v_pat_raw)
        raw = cosine_matrix(tok, pat).max(dim=-1).values
        z = masked_zscore(raw, content_mask)
        deviation = torch.sigmoid(self.scale * self.center - self.scale * z)
        return raw, deviation * content_mask.to(raw.dtype)

    def fuse(self, intrinsic: Tensor, extrinsic: Tensor) -> Tensor:
        """Gated combination of the two cues, clamped to probability range."""
        fused = self.gate_intrinsic * intrinsic + self.gate_extrinsic * extrinsic
        return fused.clamp(0.0, 1.0)

    def fine_score(self, fused_scores: Tensor, t_tok_enh: Tensor) -> Tensor:
        """Sentence prediction from the score-weighted token representation."""
        weights = fused_scores.unsqueeze(-1)
        rep = (weights * t_tok_enh).sum(dim=1) / (weights.sum(dim=1) + 1e-6)
        return torch.sigmoid(self.fine_head(rep).squeeze(-1))

    def fine(self, fused_scores: Tensor, t_tok_enh: Tensor,
             y_t: Tensor) -> tuple[Tensor, Tensor]:
        y_fine = self.fine_score(fused_scores, t_tok_enh)
        return y_fine, bce(y_fine, y_t).mean()
