"""Toy unimodal encoders, dual-stream cross-modal alignment, and the
multimodal binary-classification head.

The encoders are deliberately small stand-ins for pretrained backbones: a
linear patch/token embedding, learned positions, a prepended summary token,
and a single self-attention block. The alignment stack runs N stacked
co-attention layers in which each stream applies self-attention and then
attends to the other stream, symmetrically.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .ops import bce


@dataclass
class FeatureBundle:
    """Raw and alignment-enhanced features for one batch.

    Raw tensors come straight from the unimodal encoders; the enhanced ones
    are the co-attention outputs. Both are kept because the explicit cue
    branches consume raw features while the heads consume enhanced ones.
    """

    v_cls: Tensor        # (B, D)
    v_pat: Tensor        # (B, N, D)
    t_cls: Tensor        # (B, D)
    t_tok: Tensor        # (B, L, D)
    v_cls_enh: Tensor
    v_pat_enh: Tensor
    t_cls_enh: Tensor
    t_tok_enh: Tensor


class FeedForward(nn.Module):
    """Position-wise MLP with hidden expansion ratio 2 and GELU."""

    def __init__(self, dim: int, expansion: int = 2):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, expansion * dim),
            nn.GELU(),
            nn.Linear(expansion * dim, dim),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class SelfAttentionBlock(nn.Module):
    """Post-norm transformer block: self-attention + feed-forward."""

    def __init__(self, dim: int, n_heads: int, expansion: int = 2):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, expansion)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x: Tensor, key_padding_mask: Tensor | None = None) -> Tensor:
        attn_out, _ = self.attn(x, x, x, key_padding_mask=key_padding_mask,
                                need_weights=False)
        x = self.norm1(x + attn_out)
        return self.norm2(x + self.ff(x))


class ImageEncoder(nn.Module):
    """Patch-grid encoder: linear embedding + learned positions + one block."""

    def __init__(self, patch_dim: int, n_patches: int, dim: int, n_heads: int):
        super().__init__()
        self.n_patches = n_patches
        self.embed = nn.Linear(patch_dim, dim)
        self.pos = nn.Parameter(torch.zeros(n_patches, dim))
        self.cls = nn.Parameter(torch.zeros(dim))
        self.block = SelfAttentionBlock(dim, n_heads)
        nn.init.normal_(self.pos, std=0.02)
        nn.init.normal_(self.cls, std=0.02)

    def forward(self, patches: Tensor) -> tuple[Tensor, Tensor]:
        """patches: (B, N, patch_dim) -> (v_cls (B, D), v_pat (B, N, D))."""
        if patches.shape[1] != self.n_patches:
            raise ValueError(f"expected {self.n_patches} patches, got {patches.shape[1]}")
        x = self.embed(patches) + self.pos
        cls = self.cls.expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1)
        x = self.block(x)
        return x[:, 0], x[:, 1:]


class TextEncoder(nn.Module):
    """Token encoder with padding-aware self-attention."""

    def __init__(self, vocab_size: int, seq_len: int, dim: int, n_heads: int):
        super().__init__()
        self.seq_len = seq_len
        self.embed = nn.Embedding(vocab_size, dim)
        self.pos = nn.Parameter(torch.zeros(seq_len, dim))
        self.cls = nn.Parameter(torch.zeros(dim))
        self.block = SelfAttentionBlock(dim, n_heads)
        nn.init.normal_(self.pos, std=0.02)
        nn.init.normal_(self.cls, std=0.02)

    def forward(self, tokens: Tensor, padding_mask: Tensor) -> tuple[Tensor, Tensor]:
        """tokens: (B, L) ids; padding_mask: (B, L) True at real tokens.

        Padding positions are excluded as attention keys, so they cannot
        influence the summary token or any real token.
        """
        if tokens.shape[1] != self.seq_len:
            raise ValueError(f"expected length {self.seq_len}, got {tokens.shape[1]}")
        x = self.embed(tokens) + self.pos
        cls = self.cls.expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1)
        x = self.block(x, key_padding_mask=_with_cls(~padding_mask))
        return x[:, 0], x[:, 1:]


def _with_cls(key_ignore: Tensor) -> Tensor:
    # the summary token at position 0 is always attendable
    keep = torch.zeros(key_ignore.shape[0], 1, dtype=torch.bool, device=key_ignore.device)
    return torch.cat([keep, key_ignore], dim=1)


class CoAttentionLayer(nn.Module):
    """One symmetric dual-stream layer: per-stream self-attention, then each
    stream cross-attends the other's self-attended state, then feed-forward."""

    def __init__(self, dim: int, n_heads: int, expansion: int = 2):
        super().__init__()
        self.self_img = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.self_txt = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.cross_img = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.cross_txt = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norms_img = nn.ModuleList(nn.LayerNorm(dim) for _ in range(3))
        self.norms_txt = nn.ModuleList(nn.LayerNorm(dim) for _ in range(3))
        self.ff_img = FeedForward(dim, expansion)
        self.ff_txt = FeedForward(dim, expansion)

    def forward(self, img: Tensor, txt: Tensor,
                txt_key_ignore: Tensor | None) -> tuple[Tensor, Tensor]:
        s_img, _ = self.self_img(img, img, img, need_weights=False)
        s_img = self.norms_img[0](img + s_img)
        s_txt, _ = self.self_txt(txt, txt, txt,
                                 key_padding_mask=txt_key_ignore, need_weights=False)
        s_txt = self.norms_txt[0](txt + s_txt)

        c_img, _ = self.cross_img(s_img, s_txt, s_txt,
                                  key_padding_mask=txt_key_ignore, need_weights=False)
        c_img = self.norms_img[1](s_img + c_img)
        c_txt, _ = self.cross_txt(s_txt, s_img, s_img, need_weights=False)
        c_txt = self.norms_txt[1](s_txt + c_txt)

        out_img = self.norms_img[2](c_img + self.ff_img(c_img))
        out_txt = self.norms_txt[2](c_txt + self.ff_txt(c_txt))
        return out_img, out_txt


class CrossModalAligner(nn.Module):
    """Stack of co-attention layers; zero layers is the identity."""

    def __init__(self, n_layers: int, dim: int, n_heads: int, expansion: int = 2):
        super().__init__()
        if n_layers < 0:
            raise ValueError("layer count must be >= 0")
        self.layers = nn.ModuleList(
            CoAttentionLayer(dim, n_heads, expansion) for _ in range(n_layers))

    def forward(self, v_cls: Tensor, v_pat: Tensor, t_cls: Tensor, t_tok: Tensor,
                padding_mask: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        img = torch.cat([v_cls.unsqueeze(1), v_pat], dim=1)
        txt = torch.cat([t_cls.unsqueeze(1), t_tok], dim=1)
        txt_key_ignore = _with_cls(~padding_mask) if len(self.layers) else None
        for layer in self.layers:
            img, txt = layer(img, txt, txt_key_ignore)
        return img[:, 0], img[:, 1:], txt[:, 0], txt[:, 1:]


class MultimodalClassifier(nn.Module):
    """Binary head on the concatenated enhanced summary tokens."""

    def __init__(self, dim: int, expansion: int = 2):
        super().__init__()
        hidden = expansion * 2 * dim
        self.mlp = nn.Sequential(
            nn.Linear(2 * dim, hidden),
            nn.LayerNorm(hidden),
            nn.GELU(),
            nn.Linear(hidden, 1),
        )

    def forward(self, v_cls_enh: Tensor, t_cls_enh: Tensor) -> Tensor:
        """Probability that the pair contains any manipulation."""
        logit = self.mlp(torch.cat([v_cls_enh, t_cls_enh], dim=-1)).squeeze(-1)
        return torch.sigmoid(logit)

    def loss(self, v_cls_enh: Tensor, t_cls_enh: Tensor, y_m: Tensor) -> Tensor:
        if not torch.all((y_m == 0) | (y_m == 1)):
            raise ValueError("labels must be binary")
        prob = self.forward(v_cls_enh, t_cls_enh)
        return bce(prob, y_m).mean()
