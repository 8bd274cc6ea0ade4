"""Verification harness: finite-difference gradient checks for every loss and
operator-equivalence sweeps against the brute-force oracles.

Used by the `gradcheck` CLI subcommand and by the acceptance tests. Instances
are small, fixed-seed, and built so every probability stays interior (the BCE
clamps would otherwise silently zero the gradients being checked).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import oracles
from .image_branch import (background_silencing_loss, scope_gated_fine,
                           soft_mask, spatial_contrast_loss)
from .model import Model, ModelConfig
from .image_branch import ImageBranchConfig, candidate_scores
from .ops import lse_mean, topk_mean
from .text_branch import TextBranchConfig, asymmetric_sparse_loss, semantic_consistency_loss

GRAD_TOL = 1e-4
FD_STEP = 1e-5
OP_TOL = 1e-9


@dataclass
class CheckResult:
    name: str
    passed: bool
    measure: float       # max relative gradient error, or max numeric deviation
    detail: str = ""

    def row(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} {self.measure:.3e}  {self.detail}"


def _small_model(seed: int) -> Model:
    torch.manual_seed(seed)
    config = ModelConfig(grid_side=4, token_length=8, patch_dim=6, vocab_size=24,
                         n_candidates=3, embed_dim=8, n_heads=2, n_align_layers=1)
    model = Model(config)
    # keep pooled candidate scores interior so the fine-prediction clamp stays inactive
    model.patch_localizer.score_head.bias.data.fill_(-1.0)
    model.patch_localizer.alpha.data.fill_(0.4)
    return model


def check_gradients(name: str, f: Callable[[dict[str, torch.Tensor]], torch.Tensor],
                    arrays: dict[str, np.ndarray], tol: float = GRAD_TOL,
                    step: float = FD_STEP) -> CheckResult:
    """Compare autograd gradients of f against central finite differences for
    every leaf array; f must be a pure function of the given leaves."""
    leaves = {k: torch.tensor(v, dtype=torch.float64, requires_grad=True)
              for k, v in arrays.items()}
    loss = f(leaves)
    if loss.dim() != 0:
        raise ValueError("loss must be scalar")
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    worst = 0.0
    worst_leaf = ""
    for (key, base), grad in zip(arrays.items(), grads):
        analytic = np.zeros_like(base) if grad is None else grad.detach().numpy()

        def f_np(x: np.ndarray, _key=key) -> float:
            frozen = {k: torch.tensor(v, dtype=torch.float64) for k, v in arrays.items()}
            frozen[_key] = torch.tensor(x, dtype=torch.float64)
            with torch.no_grad():
                return float(f(frozen))

        numeric = oracles.finite_diff_grad(f_np, base.copy(), h=step)
        err = oracles.grad_relative_error(analytic, numeric)
        if err > worst:
            worst, worst_leaf = err, key
    return CheckResult(name, worst <= tol, worst, f"worst leaf: {worst_leaf}")


def _boxes_near(rng: np.random.Generator, batch: int, n: int) -> np.ndarray:
    # overlapping candidates keep the pooling softmax weights non-negligible,
    # so no box coordinate ends up with a vanishing (noise-dominated) gradient
    out = np.empty((batch, n, 4))
    out[..., 0] = rng.uniform(0.4, 0.6, (batch, n))
    out[..., 1] = rng.uniform(0.4, 0.6, (batch, n))
    out[..., 2] = rng.uniform(0.3, 0.4, (batch, n))
    out[..., 3] = rng.uniform(0.3, 0.4, (batch, n))
    return out


def gradient_suite(seed: int = 0) -> list[CheckResult]:
    """Finite-difference checks for all nine training losses, including the
    path through the soft box masks into the box coordinates."""
    model = _small_model(seed)
    cfg = model.config
    rng = np.random.default_rng(seed)
    B, N, L, D = 4, cfg.n_patches, cfg.token_length, cfg.embed_dim
    n = cfg.n_candidates
    y_v = torch.tensor([1.0, 1.0, 0.0, 0.0], dtype=torch.float64)
    y_t = torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=torch.float64)
    y_m = torch.tensor([1, 1, 1, 0])
    content = torch.tensor(rng.random((B, L)) < 0.7)
    content[:, :2] = True
    padding = content | torch.tensor(rng.random((B, L)) < 0.5)
    padding[:, :4] = True

    feats = lambda *shape: 0.5 * rng.standard_normal(shape)
    results = []

    results.append(check_gradients(
        "multimodal_cls",
        lambda t: model.classifier.loss(t["v_cls"], t["t_cls"], y_m),
        {"v_cls": feats(B, D), "t_cls": feats(B, D)}))

    results.append(check_gradients(
        "image_coarse",
        lambda t: model.patch_localizer.coarse(
            model.patch_localizer.patch_probs(t["v_pat_enh"]), y_v)[1],
        {"v_pat_enh": feats(B, N, D)}))

    def image_fine(t):
        probs = model.patch_localizer.patch_probs(t["v_pat_enh"])
        masks = soft_mask(t["boxes"], cfg.grid_side, cfg.image.mask_sharpness)
        filtered = masks * y_v.view(-1, 1, 1)
        _, _, fused, _ = model.patch_localizer.dual_branch_scores(
            probs, t["v_pat_raw"], t["t_cls_raw"], filtered)
        return scope_gated_fine(fused, probs, y_v, y_v, cfg.image.pool_temperature)[1]

    results.append(check_gradients(
        "image_fine", image_fine,
        {"v_pat_enh": feats(B, N, D), "v_pat_raw": feats(B, N, D),
         "t_cls_raw": feats(B, D), "boxes": _boxes_near(rng, B, n)}))

    fixed_masks = soft_mask(torch.tensor(_boxes_near(rng, B, n)),
                            cfg.grid_side, cfg.image.mask_sharpness)
    best_mask = fixed_masks[:, 0]
    results.append(check_gradients(
        "background_silencing",
        lambda t: background_silencing_loss(
            model.patch_localizer.patch_probs(t["v_pat_enh"]), best_mask,
            cfg.image.bg_threshold, y_v),
        {"v_pat_enh": feats(B, N, D)}))

    is_bg = best_mask < cfg.image.bg_threshold
    results.append(check_gradients(
        "spatial_contrast",
        lambda t: spatial_contrast_loss(t["v_pat_enh"], is_bg, cfg.grid_side,
                                        cfg.image.k_hard_negatives,
                                        cfg.image.contrast_margin, y_v),
        {"v_pat_enh": feats(B, N, D)}))

    results.append(check_gradients(
        "text_coarse",
        lambda t: model.token_localizer.coarse(t["t_tok_enh"], content, y_t)[1],
        {"t_tok_enh": feats(B, L, D)}))

    def token_scores(t):
        intrinsic = model.token_localizer.intrinsic_scores(t["t_tok_enh"], content)
        raw, extrinsic = model.token_localizer.extrinsic_scores(
            t["t_tok_raw"], t["v_pat_raw"], content)
        return raw, model.token_localizer.fuse(intrinsic, extrinsic)

    token_leaves = {"t_tok_enh": feats(B, L, D), "t_tok_raw": feats(B, L, D),
                    "v_pat_raw": feats(B, N, D)}
    results.append(check_gradients(
        "text_fine",
        lambda t: model.token_localizer.fine(token_scores(t)[1], t["t_tok_enh"], y_t)[1],
        token_leaves))

    results.append(check_gradients(
        "asymmetric_sparse",
        lambda t: asymmetric_sparse_loss(
            token_scores(t)[1], y_t.long(), content,
            cfg.text.true_suppression_weight, cfg.text.sparse_fraction),
        token_leaves))

    y_v_auth = torch.zeros(B, dtype=torch.long)
    results.append(check_gradients(
        "semantic_consistency",
        lambda t: semantic_consistency_loss(
            model.token_localizer.extrinsic_scores(
                t["t_tok_raw"], t["v_pat_raw"], content)[0],
            y_v_auth, y_t.long(), padding, cfg.text.consistency_margin),
        {"t_tok_raw": token_leaves["t_tok_raw"], "v_pat_raw": token_leaves["v_pat_raw"]}))

    return results


def operator_equivalence(seed: int = 0, n_instances: int = 500) -> list[CheckResult]:
    """Model-side pooling and box selection vs. the brute-force oracles."""
    rng = np.random.default_rng(seed)
    worst_lse = 0.0
    worst_topk = 0.0
    argmax_mismatches = 0
    for i in range(n_instances):
        size = int(rng.integers(1, 21))
        x = rng.normal(0.0, 3.0, size)
        tau = float(10.0 ** rng.uniform(-3, 0.5))
        ours = float(lse_mean(torch.tensor(x), tau))
        ref = oracles.reference_lse(x, tau)
        worst_lse = max(worst_lse, abs(ours - ref))

        k = int(rng.integers(1, size + 1))
        ours_tk = float(topk_mean(torch.tensor(x), k))
        worst_topk = max(worst_topk, abs(ours_tk - oracles.reference_topk_mean(x, k)))

        n_cand = int(rng.integers(1, 9))
        n_patch = int(rng.integers(4, 33))
        probs = rng.random(n_patch)
        sims = rng.normal(0.0, 1.0, n_patch)
        masks = np.zeros((n_cand, n_patch)) if i % 10 == 0 else rng.random((n_cand, n_patch))
        alpha = float(rng.normal(0.0, 1.0))
        _, _, _, best = candidate_scores(
            torch.tensor(probs).unsqueeze(0), torch.tensor(sims).unsqueeze(0),
            torch.tensor(masks).unsqueeze(0), alpha)
        if int(best[0]) != oracles.brute_force_best_box(probs, sims, masks, alpha):
            argmax_mismatches += 1
    return [
        CheckResult("lse_vs_oracle", worst_lse <= OP_TOL, worst_lse,
                    f"{n_instances} instances"),
        CheckResult("topk_mean_vs_oracle", worst_topk <= OP_TOL, worst_topk,
                    f"{n_instances} instances"),
        CheckResult("best_box_vs_oracle", argmax_mismatches == 0,
                    float(argmax_mismatches), f"{n_instances} instances, exact argmax"),
    ]


def run_all(seed: int = 0) -> list[CheckResult]:
    return gradient_suite(seed) + operator_equivalence(seed)
