"""Patch-level weakly-supervised localization over prior candidate boxes.

The branch scores every patch for forgery, builds a differentiable soft mask
per candidate box, fuses an implicit cue (masked patch scores) with an
explicit cue (masked text-patch similarity) to pick the most suspicious
candidate, and converts the local/global evidence into an image-level
prediction through temperature-controlled log-mean-exp pooling. Two
constraints sharpen the result on forged images: silencing patch scores
outside the chosen box, and contrasting in-box features against their most
similar background patches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .ops import bce, cosine_matrix, first_argmax, lse_mean, topk_mean

FINE_PROB_EPS = 1e-6


@dataclass(frozen=True)
class ImageBranchConfig:
    mask_sharpness: float = 2.0       # temperature on the soft box edges
    pool_temperature: float = 0.1     # log-mean-exp pooling temperature
    bg_threshold: float = 0.1         # mask value below which a patch is background
    contrast_margin: float = 0.2      # margin of the feature-contrast ranking loss
    k_coarse: int = 0                 # 0 = auto: max(1, ceil(5% of patches))
    k_hard_negatives: int = 5         # background patches mined per in-box patch

    def __post_init__(self):
        if self.mask_sharpness <= 0 or self.pool_temperature <= 0:
            raise ValueError("temperatures must be positive")
        if not 0.0 < self.bg_threshold < 1.0:
            raise ValueError("bg_threshold must lie in (0, 1)")
        if self.contrast_margin <= 0 or self.k_hard_negatives < 1:
            raise ValueError("contrast margin and hard-negative count must be positive")

    def resolve_k_coarse(self, n_patches: int) -> int:
        k = self.k_coarse if self.k_coarse > 0 else max(1, math.ceil(0.05 * n_patches))
        if k > n_patches:
            raise ValueError(f"k_coarse={k} exceeds patch count {n_patches}")
        return k


def patch_centers(grid_side: int, dtype=torch.float64, device=None) -> Tensor:
    """(N, 2) centers in grid units: patch j is at (j % G + 0.5, j // G + 0.5)."""
    idx = torch.arange(grid_side * grid_side, device=device)
    x = (idx % grid_side).to(dtype) + 0.5
    y = torch.div(idx, grid_side, rounding_mode="floor").to(dtype) + 0.5
    return torch.stack([x, y], dim=1)


def soft_mask(boxes: Tensor, grid_side: int, sharpness: float) -> Tensor:
    """Differentiable membership of each patch in each candidate box.

    boxes: (..., 4) normalized (c_x, c_y, w, h). Box coordinates are scaled
    by the grid side so boxes and patch centers share one unit system; the
    mask is the product of two axis-wise sigmoid box profiles and is strictly
    inside (0, 1), decaying smoothly outside the box. Returns (..., N).
    """
    if grid_side < 1:
        raise ValueError("grid_side must be >= 1")
    if torch.any(boxes[..., 2] <= 0) or torch.any(boxes[..., 3] <= 0):
        raise ValueError("degenerate box: width and height must be positive")
    centers = patch_centers(grid_side, dtype=boxes.dtype, device=boxes.device)
    scale = float(grid_side)
    cx = boxes[..., 0:1] * scale
    cy = boxes[..., 1:2] * scale
    half_w = boxes[..., 2:3] * scale / 2.0
    half_h = boxes[..., 3:4] * scale / 2.0
    px = centers[:, 0]
    py = centers[:, 1]
    along_x = torch.sigmoid(sharpness * (half_w - (px - cx).abs()))
    along_y = torch.sigmoid(sharpness * (half_h - (py - cy).abs()))
    return along_x * along_y


def candidate_scores(patch_probs: Tensor, sims: Tensor, masks: Tensor,
                     alpha: Tensor | float) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Fuse implicit and explicit cues per candidate box.

    patch_probs, sims: (B, N); masks: (B, n, N) (already label-filtered when
    training). Returns (implicit (B, n), explicit (B, n), fused (B, n),
    best_idx (B,)); ties in the argmax break to the lowest index.
    """
    implicit = (masks * patch_probs.unsqueeze(1)).sum(dim=-1)
    explicit = (masks * sims.unsqueeze(1)).sum(dim=-1)
    fused = implicit + alpha * explicit
    return implicit, explicit, fused, first_argmax(fused, dim=1)


def scope_gated_fine(fused_scores: Tensor, patch_probs: Tensor, gate: Tensor,
                     y_v: Tensor, pool_temperature: float) -> tuple[Tensor, Tensor]:
    """Image-level score from candidate-local or patch-global pooling.

    gate: (B,) in {0, 1} — the image label during training, the thresholded
    coarse prediction at test time. A gated sample depends only on the
    candidate scores; an ungated one only on the patch probabilities.
    """
    a_local = lse_mean(fused_scores, pool_temperature, dim=1)
    a_global = lse_mean(patch_probs, pool_temperature, dim=1)
    gate = gate.to(fused_scores.dtype)
    y_fine = gate * a_local + (1.0 - gate) * a_global
    y_fine = y_fine.clamp(FINE_PROB_EPS, 1.0 - FINE_PROB_EPS)
    return y_fine, bce(y_fine, y_v).mean()


def background_silencing_loss(patch_probs: Tensor, best_mask: Tensor,
                              bg_threshold: float, y_v: Tensor) -> Tensor:
    """Zero-target score suppression outside the selected box, fake images only.

    Per sample the loss is averaged over the background patches (mask below
    the threshold), so box size does not change the scale; samples without
    background, and authentic images, contribute nothing.
    """
    is_bg = (best_mask < bg_threshold).to(patch_probs.dtype)
    per_patch = bce(patch_probs, 0.0) * is_bg
    counts = is_bg.sum(dim=1)
    per_sample = per_patch.sum(dim=1) / counts.clamp_min(1.0)
    fake = y_v.to(patch_probs.dtype)
    n_fake = fake.sum()
    if n_fake.item() == 0:
        return patch_probs.new_zeros(())
    return (per_sample * fake).sum() / n_fake


def spatial_contrast_loss(v_pat_enh: Tensor, is_bg: Tensor, grid_side: int,
                          k_hard_negatives: int, margin: float,
                          y_v: Tensor) -> Tensor:
    """Margin ranking over spatially weighted patch similarities, fake images only.

    In-box (suspect) patches are pulled together while each is pushed away
    from its most similar background patches. Similarity is cosine modulated
    by a Gaussian in patch-center distance (bandwidth G/4), so nearby look-alikes
    weigh more. Samples with fewer than two suspect patches or no background
    patches are skipped.
    """
    B, n_patches, _ = v_pat_enh.shape
    centers = patch_centers(grid_side, dtype=v_pat_enh.dtype, device=v_pat_enh.device)
    d2 = ((centers.unsqueeze(0) - centers.unsqueeze(1)) ** 2).sum(-1)
    sigma = grid_side / 4.0
    spatial_w = torch.exp(-d2 / (2.0 * sigma * sigma))

    total = v_pat_enh.new_zeros(())
    n_fake = 0
    for b in range(B):
        if y_v[b].item() != 1:
            continue
        n_fake += 1
        fake_idx = torch.nonzero(~is_bg[b], as_tuple=True)[0]
        true_idx = torch.nonzero(is_bg[b], as_tuple=True)[0]
        if fake_idx.numel() < 2 or true_idx.numel() == 0:
            continue
        sim = cosine_matrix(v_pat_enh[b], v_pat_enh[b]) * spatial_w
        ff = sim[fake_idx][:, fake_idx]
        pair_mask = torch.triu(torch.ones_like(ff, dtype=torch.bool), diagonal=1)
        pull = torch.relu(margin - ff[pair_mask]).mean()
        ft = sim[fake_idx][:, true_idx]
        k = min(k_hard_negatives, true_idx.numel())
        hardest, _ = torch.topk(ft, k, dim=1)
        push = torch.relu(margin + hardest).mean()
        total = total + pull + push
    if n_fake == 0:
        return total
    return total / n_fake


class PatchLocalizer(nn.Module):
    """Learnable pieces of the image branch: the patch scoring head, the
    shared-space projections for the explicit cue, and the fusion weight."""

    def __init__(self, dim: int, grid_side: int, config: ImageBranchConfig | None = None):
        super().__init__()
        self.grid_side = grid_side
        self.config = config or ImageBranchConfig()
        self.score_head = nn.Linear(dim, 1)
        self.proj_visual = nn.Linear(dim, dim)
        self.proj_text = nn.Linear(dim, dim)
        self.alpha = nn.Parameter(torch.tensor(1.0))

    def patch_probs(self, v_pat_enh: Tensor) -> Tensor:
        """(B, N) per-patch forgery probabilities."""
        return torch.sigmoid(self.score_head(v_pat_enh).squeeze(-1))

    def coarse(self, patch_probs: Tensor, y_v: Tensor) -> tuple[Tensor, Tensor]:
        """Image-level probability as the mean of the top-K patch scores."""
        k = self.config.resolve_k_coarse(patch_probs.shape[1])
        y_coarse = topk_mean(patch_probs, k, dim=1)
        return y_coarse, bce(y_coarse, y_v).mean()

    def text_similarity(self, v_pat_raw: Tensor, t_cls_raw: Tensor) -> Tensor:
        """(B, N) cosine similarity of projected raw patches vs. the raw text summary."""
        v = self.proj_visual(v_pat_raw)
        t = self.proj_text(t_cls_raw)
        return cosine_matrix(v, t.unsqueeze(1)).squeeze(-1)

    def dual_branch_scores(self, patch_probs: Tensor, v_pat_raw: Tensor,
                           t_cls_raw: Tensor, masks_filtered: Tensor
                           ) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        sims = self.text_similarity(v_pat_raw, t_cls_raw)
        return candidate_scores(patch_probs, sims, masks_filtered, self.alpha)
