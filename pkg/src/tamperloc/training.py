"""Loss aggregation, the AdamW training loop, checkpointing, and prediction.

Training is deterministic given (config, dataset, seed) and consumes only
coarse labels plus candidate boxes; fine-grained ground truth is read by the
evaluation path alone, which `audit_weak_supervision` verifies at runtime.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import Sample
from .metrics import MetricsReport, evaluate_predictions
from .model import LOSS_NAMES, Batch, Model, ModelConfig, PredictionBatch, collate
from .oracles import ReadRecorder


class TrainingError(RuntimeError):
    pass


def default_loss_weights() -> dict[str, float]:
    return {name: 1.0 for name in LOSS_NAMES}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 0.02
    epochs: int = 5
    batch_size: int = 16
    seed: int = 0
    val_fraction: float = 0.1
    max_steps: int | None = None
    divergence_limit: float = 1e6
    loss_weights: dict[str, float] = field(default_factory=default_loss_weights)

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("rates must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        unknown = set(self.loss_weights) - set(LOSS_NAMES)
        if unknown:
            raise ValueError(f"unknown loss names in weights: {sorted(unknown)}")
        if any(w < 0 for w in self.loss_weights.values()):
            raise ValueError("loss weights must be >= 0")
        for name in LOSS_NAMES:
            self.loss_weights.setdefault(name, 1.0)

    def to_flat_dict(self) -> dict:
        out = asdict(self)
        weights = out.pop("loss_weights")
        out.update({f"weight_{k}": v for k, v in weights.items()})
        return out

    @classmethod
    def from_flat_dict(cls, flat: dict) -> "TrainConfig":
        weights, own = {}, {}
        for key, value in flat.items():
            if key.startswith("weight_"):
                weights[key[len("weight_"):]] = float(value)
            else:
                own[key] = value
        return cls(loss_weights=weights or default_loss_weights(), **own)


@dataclass
class LossReport:
    """Named loss scalars for one step plus their weighted total."""

    parts: dict[str, float]
    total: float

    def as_row(self, step: int) -> dict:
        row = {"step": step}
        row.update({name: self.parts.get(name, 0.0) for name in LOSS_NAMES})
        row["total"] = self.total
        return row


def total_loss(parts: dict[str, torch.Tensor],
               weights: dict[str, float]) -> torch.Tensor:
    """Constant-weighted sum; absent parts count as zero."""
    total = None
    for name, part in parts.items():
        if torch.isnan(part):
            raise TrainingError(f"loss '{name}' is NaN")
    for name in LOSS_NAMES:
        w = weights.get(name, 1.0)
        if w == 0.0 or name not in parts:
            continue
        term = w * parts[name]
        total = term if total is None else total + term
    if total is None:
        raise TrainingError("no active losses: all parts missing or zero-weighted")
    return total


def _take(batch: Batch, idx: np.ndarray) -> Batch:
    t = torch.as_tensor(idx, dtype=torch.long)
    return Batch(*(getattr(batch, f.name)[t] for f in Batch.__dataclass_fields__.values()))


@dataclass
class TrainResult:
    model: Model
    log_rows: list[dict]
    best_state: dict
    best_val_total: float
    final_val_total: float
    steps_run: int


def train(model_config: ModelConfig, config: TrainConfig,
          samples: Sequence[Sample]) -> TrainResult:
    """Deterministic AdamW training; returns the trained model, a per-step
    log, and the best-validation snapshot of the parameters."""
    if not samples:
        raise TrainingError("dataset is empty")
    torch.manual_seed(config.seed)
    model = Model(model_config)
    rng = np.random.default_rng(config.seed)

    order = rng.permutation(len(samples))
    n_val = int(round(config.val_fraction * len(samples)))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:
        raise TrainingError("validation split leaves no training samples")
    full = collate(samples)
    train_batch = _take(full, train_idx)
    val_batch = _take(full, val_idx) if n_val else None

    active = {name for name, w in config.loss_weights.items() if w > 0}
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                                  weight_decay=config.weight_decay)

    def validation_total() -> float:
        batch = val_batch if val_batch is not None else train_batch
        with torch.no_grad():
            parts = model.compute_losses(batch, active)
            return float(total_loss(parts, config.loss_weights))

    log_rows: list[dict] = []
    best_state = copy.deepcopy(model.state_dict())
    best_val = validation_total()
    step = 0
    n_train = train_idx.size
    steps_per_epoch = math.ceil(n_train / config.batch_size)
    done = False
    for _ in range(config.epochs):
        perm = rng.permutation(n_train)
        for s in range(steps_per_epoch):
            chunk = perm[s * config.batch_size:(s + 1) * config.batch_size]
            minibatch = _take(train_batch, chunk)
            parts = model.compute_losses(minibatch, active)
            total = total_loss(parts, config.loss_weights)
            if not torch.isfinite(total) or float(total) > config.divergence_limit:
                raise TrainingError(
                    f"training diverged at step {step}: total={float(total):.3e} "
                    f"(limit {config.divergence_limit:.1e})")
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            step += 1
            report = LossReport({k: float(v) for k, v in parts.items()}, float(total))
            log_rows.append(report.as_row(step))
            if config.max_steps is not None and step >= config.max_steps:
                done = True
                break
        val_total = validation_total()
        if val_total < best_val:
            best_val = val_total
            best_state = copy.deepcopy(model.state_dict())
        if done:
            break
    final_val = validation_total()
    if final_val < best_val:
        best_val = final_val
        best_state = copy.deepcopy(model.state_dict())
    return TrainResult(model=model, log_rows=log_rows, best_state=best_state,
                       best_val_total=best_val, final_val_total=final_val,
                       steps_run=step)


CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, model: Model,
                    state_dict: dict | None = None,
                    train_config: TrainConfig | None = None,
                    meta: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_flat_dict(),
        "train_config": train_config.to_flat_dict() if train_config else None,
        "state_dict": state_dict if state_dict is not None else model.state_dict(),
        "meta": meta or {},
    }
    torch.save(payload, str(path))


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    payload = torch.load(str(path), weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version}")
    config = ModelConfig.from_flat_dict(payload["model_config"])
    model = Model(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


def predict(model: Model, samples: Sequence[Sample],
            batch_size: int = 128) -> PredictionBatch:
    """Batched test-time predictions over a sample list."""
    chunks = [model.predict_batch(collate(samples[i:i + batch_size]))
              for i in range(0, len(samples), batch_size)]
    return PredictionBatch(
        p_multimodal=np.concatenate([c.p_multimodal for c in chunks]),
        p_image=np.concatenate([c.p_image for c in chunks]),
        p_image_coarse=np.concatenate([c.p_image_coarse for c in chunks]),
        p_text=np.concatenate([c.p_text for c in chunks]),
        boxes=[b for c in chunks for b in c.boxes],
        token_sets=[t for c in chunks for t in c.token_sets],
        best_idx=np.concatenate([c.best_idx for c in chunks]),
        patch_probs=np.concatenate([c.patch_probs for c in chunks]),
        cand_scores=np.concatenate([c.cand_scores for c in chunks]),
        best_mask=np.concatenate([c.best_mask for c in chunks]),
        fused_token_scores=np.concatenate([c.fused_token_scores for c in chunks]),
        intrinsic_token_scores=np.concatenate([c.intrinsic_token_scores for c in chunks]),
        extrinsic_token_scores=np.concatenate([c.extrinsic_token_scores for c in chunks]),
        raw_token_similarity=np.concatenate([c.raw_token_similarity for c in chunks]),
    )


def predict_sample(model: Model, sample: Sample) -> dict:
    """Single-sample prediction: multimodal/image/text scores, the chosen box
    (absent unless the image gate fires), and the predicted token set."""
    if sample.patches.shape != (model.config.n_patches, model.config.patch_dim):
        raise ValueError("sample patch shape does not match the checkpoint config")
    if sample.tokens.shape != (model.config.token_length,):
        raise ValueError("sample token length does not match the checkpoint config")
    preds = model.predict_batch(collate([sample]))
    return {
        "p_multimodal": float(preds.p_multimodal[0]),
        "p_image": float(preds.p_image[0]),
        "p_image_coarse": float(preds.p_image_coarse[0]),
        "p_text": float(preds.p_text[0]),
        "box": preds.boxes[0],
        "tokens": preds.token_sets[0],
    }


def evaluate_model(model: Model, samples: Sequence[Sample]) -> MetricsReport:
    """Full metric report; the only path that touches fine ground truth."""
    preds = predict(model, samples)
    return evaluate_predictions(
        scores_multimodal=preds.p_multimodal.tolist(),
        labels_multimodal=[s.y_m for s in samples],
        pred_boxes=preds.boxes,
        gt_boxes=[s.gt_box for s in samples],
        pred_token_sets=preds.token_sets,
        gt_token_sets=[s.gt_tokens for s in samples],
    )


def inspect_sample(model: Model, sample: Sample) -> dict:
    """Structured localization dump for one sample: the patch score heat map,
    per-candidate scores, the chosen box, the background bitmap, and the
    per-token score table."""
    preds = model.predict_batch(collate([sample]))
    g = model.config.grid_side
    heat = preds.patch_probs[0].reshape(g, g)
    is_bg = (preds.best_mask[0] < model.config.image.bg_threshold).astype(int)
    counts = int(sample.content_mask.sum())
    k2 = max(1, math.ceil(model.config.text.sparse_fraction * counts))
    content_scores = np.where(sample.content_mask, preds.fused_token_scores[0], -np.inf)
    in_o = set(np.argsort(-content_scores, kind="stable")[:k2].tolist())
    token_table = [
        {
            "position": i,
            "token_id": int(sample.tokens[i]),
            "is_content": bool(sample.content_mask[i]),
            "is_padding": not bool(sample.padding_mask[i]),
            "intrinsic_score": float(preds.intrinsic_token_scores[0][i]),
            "extrinsic_score": float(preds.extrinsic_token_scores[0][i]),
            "fused_score": float(preds.fused_token_scores[0][i]),
            "raw_similarity": float(preds.raw_token_similarity[0][i]),
            "in_sparse_set": i in in_o,
        }
        for i in range(len(sample.tokens))
    ]
    return {
        "p_multimodal": float(preds.p_multimodal[0]),
        "p_image_coarse": float(preds.p_image_coarse[0]),
        "p_image": float(preds.p_image[0]),
        "p_text": float(preds.p_text[0]),
        "patch_heat": [[float(v) for v in row] for row in heat],
        "candidate_scores": [float(v) for v in preds.cand_scores[0]],
        "chosen_candidate": int(preds.best_idx[0]),
        "chosen_box": list(preds.boxes[0].as_tuple()) if preds.boxes[0] else None,
        "background_bitmap": [[int(v) for v in row] for row in is_bg.reshape(g, g)],
        "token_table": token_table,
    }


def audit_weak_supervision(model: Model, samples: Sequence[Sample]) -> set[str]:
    """Run a full loss computation + backward over access-recording proxies
    and return every sample field the loss path read."""
    reads: set[str] = set()
    proxies = [ReadRecorder(s, reads) for s in samples]
    batch = collate(proxies)
    parts = model.compute_losses(batch)
    total_loss(parts, default_loss_weights()).backward()
    model.zero_grad(set_to_none=True)
    return reads
