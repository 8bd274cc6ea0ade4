"""The full weakly-supervised localization model and its batch interface."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .boxes import Box
from .data import DatasetManifest, ConfigurationError
from .encoders import (CrossModalAligner, FeatureBundle, ImageEncoder,
                       MultimodalClassifier, TextEncoder)
from .image_branch import (ImageBranchConfig, PatchLocalizer,
                           background_silencing_loss, scope_gated_fine,
                           soft_mask, spatial_contrast_loss)
from .ops import lse_mean
from .text_branch import (TextBranchConfig, TokenLocalizer,
                          asymmetric_sparse_loss, semantic_consistency_loss)

LOSS_NAMES = (
    "multimodal_cls",
    "image_coarse",
    "image_fine",
    "background_silencing",
    "spatial_contrast",
    "text_coarse",
    "text_fine",
    "asymmetric_sparse",
    "semantic_consistency",
)


@dataclass(frozen=True)
class ModelConfig:
    grid_side: int = 8
    token_length: int = 16
    patch_dim: int = 16
    vocab_size: int = 64
    n_candidates: int = 5
    embed_dim: int = 32
    n_heads: int = 4
    n_align_layers: int = 2   # deliberately shallow; scale up off the desk
    expansion: int = 2
    image: ImageBranchConfig = field(default_factory=ImageBranchConfig)
    text: TextBranchConfig = field(default_factory=TextBranchConfig)

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ConfigurationError("embed_dim must be divisible by n_heads")
        if self.n_align_layers < 0:
            raise ConfigurationError("n_align_layers must be >= 0")
        for name in ("grid_side", "token_length", "patch_dim", "vocab_size",
                     "n_candidates", "embed_dim", "n_heads", "expansion"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")

    @property
    def n_patches(self) -> int:
        return self.grid_side ** 2

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, **overrides) -> "ModelConfig":
        return cls(grid_side=manifest.grid_side, token_length=manifest.token_length,
                   patch_dim=manifest.patch_dim, vocab_size=manifest.vocab_size,
                   n_candidates=manifest.n_candidates, **overrides)

    def to_flat_dict(self) -> dict:
        out = asdict(self)
        image = out.pop("image")
        text = out.pop("text")
        out.update({f"image_{k}": v for k, v in image.items()})
        out.update({f"text_{k}": v for k, v in text.items()})
        return out

    @classmethod
    def from_flat_dict(cls, flat: dict) -> "ModelConfig":
        image_kwargs, text_kwargs, own = {}, {}, {}
        for key, value in flat.items():
            if key.startswith("image_"):
                image_kwargs[key[len("image_"):]] = value
            elif key.startswith("text_"):
                text_kwargs[key[len("text_"):]] = value
            else:
                own[key] = value
        return cls(image=ImageBranchConfig(**image_kwargs),
                   text=TextBranchConfig(**text_kwargs), **own)


@dataclass
class Batch:
    """Collated training view of a list of samples: coarse labels and priors
    only — fine ground truth never enters a batch."""

    patches: Tensor        # (B, N, patch_dim)
    tokens: Tensor         # (B, L) long
    content_mask: Tensor   # (B, L) bool
    padding_mask: Tensor   # (B, L) bool
    candidates: Tensor     # (B, n, 4)
    y_v: Tensor            # (B,) long
    y_t: Tensor
    y_m: Tensor

    def __len__(self) -> int:
        return self.patches.shape[0]


def collate(samples: Sequence, dtype=torch.float64) -> Batch:
    patches = torch.as_tensor(np.stack([s.patches for s in samples]), dtype=dtype)
    tokens = torch.as_tensor(np.stack([s.tokens for s in samples]), dtype=torch.long)
    content = torch.as_tensor(np.stack([s.content_mask for s in samples]))
    padding = torch.as_tensor(np.stack([s.padding_mask for s in samples]))
    cands = torch.as_tensor(
        np.stack([[c.as_tuple() for c in s.candidates] for s in samples]), dtype=dtype)
    y_v = torch.as_tensor([s.y_v for s in samples], dtype=torch.long)
    y_t = torch.as_tensor([s.y_t for s in samples], dtype=torch.long)
    y_m = torch.as_tensor([s.y_m for s in samples], dtype=torch.long)
    return Batch(patches, tokens, content, padding, cands, y_v, y_t, y_m)


@dataclass
class PredictionBatch:
    """Test-time outputs, one entry per sample."""

    p_multimodal: np.ndarray          # manipulation probability from the fused head
    p_image: np.ndarray               # gated fine image score
    p_image_coarse: np.ndarray
    p_text: np.ndarray                # fine text score
    boxes: list[Box | None]           # chosen candidate when the image gate fires
    token_sets: list[frozenset[int]]  # content tokens above threshold when the text gate fires
    best_idx: np.ndarray
    patch_probs: np.ndarray             # (B, N)
    cand_scores: np.ndarray             # (B, n) fused candidate scores
    best_mask: np.ndarray               # (B, N)
    fused_token_scores: np.ndarray      # (B, L)
    intrinsic_token_scores: np.ndarray  # (B, L)
    extrinsic_token_scores: np.ndarray  # (B, L)
    raw_token_similarity: np.ndarray    # (B, L)


class Model(nn.Module):
    """Encoders, alignment stack, classification head, and both localization
    branches, run end to end. All parameters are float64 so the gradient
    verification suite can use tight tolerances."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.image_encoder = ImageEncoder(config.patch_dim, config.n_patches,
                                          config.embed_dim, config.n_heads)
        self.text_encoder = TextEncoder(config.vocab_size, config.token_length,
                                        config.embed_dim, config.n_heads)
        self.aligner = CrossModalAligner(config.n_align_layers, config.embed_dim,
                                         config.n_heads, config.expansion)
        self.classifier = MultimodalClassifier(config.embed_dim, config.expansion)
        self.patch_localizer = PatchLocalizer(config.embed_dim, config.grid_side,
                                              config.image)
        self.token_localizer = TokenLocalizer(config.embed_dim, config.text)
        self.double()

    def encode(self, batch: Batch) -> FeatureBundle:
        v_cls, v_pat = self.image_encoder(batch.patches)
        t_cls, t_tok = self.text_encoder(batch.tokens, batch.padding_mask)
        v_cls_e, v_pat_e, t_cls_e, t_tok_e = self.aligner(
            v_cls, v_pat, t_cls, t_tok, batch.padding_mask)
        return FeatureBundle(v_cls, v_pat, t_cls, t_tok,
                             v_cls_e, v_pat_e, t_cls_e, t_tok_e)

    def compute_losses(self, batch: Batch,
                       active: set[str] | None = None) -> dict[str, Tensor]:
        """All training losses keyed by name; parts outside `active` are
        omitted entirely so they cannot leak gradient."""
        if active is None:
            active = set(LOSS_NAMES)
        cfg = self.config
        bundle = self.encode(batch)
        parts: dict[str, Tensor] = {}

        if "multimodal_cls" in active:
            parts["multimodal_cls"] = self.classifier.loss(
                bundle.v_cls_enh, bundle.t_cls_enh, batch.y_m)

        # image branch
        patch_probs = self.patch_localizer.patch_probs(bundle.v_pat_enh)
        y_v = batch.y_v.to(patch_probs.dtype)
        if "image_coarse" in active:
            _, parts["image_coarse"] = self.patch_localizer.coarse(patch_probs, y_v)
        image_cfg = cfg.image
        needs_boxes = active & {"image_fine", "background_silencing", "spatial_contrast"}
        if needs_boxes:
            masks = soft_mask(batch.candidates, cfg.grid_side, image_cfg.mask_sharpness)
            masks_filtered = masks * y_v.view(-1, 1, 1)
            _, _, fused, best_idx = self.patch_localizer.dual_branch_scores(
                patch_probs, bundle.v_pat, bundle.t_cls, masks_filtered)
            best_mask = masks[torch.arange(len(batch)), best_idx]
            if "image_fine" in active:
                _, parts["image_fine"] = scope_gated_fine(
                    fused, patch_probs, batch.y_v, y_v, image_cfg.pool_temperature)
            if "background_silencing" in active:
                parts["background_silencing"] = background_silencing_loss(
                    patch_probs, best_mask, image_cfg.bg_threshold, batch.y_v)
            if "spatial_contrast" in active:
                is_bg = best_mask < image_cfg.bg_threshold
                parts["spatial_contrast"] = spatial_contrast_loss(
                    bundle.v_pat_enh, is_bg, cfg.grid_side,
                    image_cfg.k_hard_negatives, image_cfg.contrast_margin, batch.y_v)

        # text branch
        y_t = batch.y_t.to(patch_probs.dtype)
        text_cfg = cfg.text
        if "text_coarse" in active:
            _, parts["text_coarse"] = self.token_localizer.coarse(
                bundle.t_tok_enh, batch.content_mask, y_t)
        needs_tokens = active & {"text_fine", "asymmetric_sparse", "semantic_consistency"}
        if needs_tokens:
            intrinsic = self.token_localizer.intrinsic_scores(
                bundle.t_tok_enh, batch.content_mask)
            raw_sim, extrinsic = self.token_localizer.extrinsic_scores(
                bundle.t_tok, bundle.v_pat, batch.content_mask)
            fused_tok = self.token_localizer.fuse(intrinsic, extrinsic)
            if "text_fine" in active:
                _, parts["text_fine"] = self.token_localizer.fine(
                    fused_tok, bundle.t_tok_enh, y_t)
            if "asymmetric_sparse" in active:
                parts["asymmetric_sparse"] = asymmetric_sparse_loss(
                    fused_tok, batch.y_t, batch.content_mask,
                    text_cfg.true_suppression_weight, text_cfg.sparse_fraction)
            if "semantic_consistency" in active:
                parts["semantic_consistency"] = semantic_consistency_loss(
                    raw_sim, batch.y_v, batch.y_t, batch.padding_mask,
                    text_cfg.consistency_margin)
        return parts

    @torch.no_grad()
    def predict_batch(self, batch: Batch) -> PredictionBatch:
        """Test path: gates come from the coarse predictions, not labels."""
        cfg = self.config
        bundle = self.encode(batch)
        p_multimodal = self.classifier(bundle.v_cls_enh, bundle.t_cls_enh)

        patch_probs = self.patch_localizer.patch_probs(bundle.v_pat_enh)
        k = cfg.image.resolve_k_coarse(patch_probs.shape[1])
        p_image_coarse = torch.topk(patch_probs, k, dim=1).values.mean(dim=1)
        gate = (p_image_coarse > 0.5).to(patch_probs.dtype)
        masks = soft_mask(batch.candidates, cfg.grid_side, cfg.image.mask_sharpness)
        masks_filtered = masks * gate.view(-1, 1, 1)
        _, _, fused, best_idx = self.patch_localizer.dual_branch_scores(
            patch_probs, bundle.v_pat, bundle.t_cls, masks_filtered)
        best_mask = masks[torch.arange(len(batch)), best_idx]
        tau = cfg.image.pool_temperature
        a_local = lse_mean(fused, tau, dim=1)
        a_global = lse_mean(patch_probs, tau, dim=1)
        p_image = (gate * a_local + (1.0 - gate) * a_global).clamp(0.0, 1.0)

        intrinsic = self.token_localizer.intrinsic_scores(
            bundle.t_tok_enh, batch.content_mask)
        raw_sim, extrinsic = self.token_localizer.extrinsic_scores(
            bundle.t_tok, bundle.v_pat, batch.content_mask)
        fused_tok = self.token_localizer.fuse(intrinsic, extrinsic)
        p_text = self.token_localizer.fine_score(fused_tok, bundle.t_tok_enh)

        boxes: list[Box | None] = []
        token_sets: list[frozenset[int]] = []
        for b in range(len(batch)):
            if gate[b].item() > 0:
                c = batch.candidates[b, best_idx[b]].tolist()
                boxes.append(Box(*c))
            else:
                boxes.append(None)
            if p_text[b].item() > 0.5:
                hits = (fused_tok[b] > 0.5) & batch.content_mask[b]
                token_sets.append(frozenset(torch.nonzero(hits).squeeze(-1).tolist()))
            else:
                token_sets.append(frozenset())
        return PredictionBatch(
            p_multimodal=p_multimodal.numpy(), p_image=p_image.numpy(),
            p_image_coarse=p_image_coarse.numpy(), p_text=p_text.numpy(),
            boxes=boxes, token_sets=token_sets, best_idx=best_idx.numpy(),
            patch_probs=patch_probs.numpy(), cand_scores=fused.numpy(),
            best_mask=best_mask.numpy(), fused_token_scores=fused_tok.numpy(),
            intrinsic_token_scores=intrinsic.numpy(),
            extrinsic_token_scores=extrinsic.numpy(),
            raw_token_similarity=raw_sim.numpy(),
        )
