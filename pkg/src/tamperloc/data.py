"""Synthetic image-text forgery pairs with coarse labels and fine ground truth.

Images are emitted directly at patch granularity: a G x G grid of feature
vectors, standard normal for authentic content and mean-shifted inside the
ground-truth box for forged content. Sentences are token-id sequences drawn
from a vocabulary split into padding / stop-word / content / manipulated
strata; forged sentences replace a sparse subset of content tokens with
manipulated-stratum ids.

Ground-truth boxes and token sets are carried for evaluation only; training
consumes just the coarse labels and the candidate boxes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .boxes import Box, iou

SCHEMA_VERSION = 1
PAD_ID = 0
STOP_WORD_PROB = 0.3
GOOD_BOX_MIN_IOU = 0.55
DISTRACTOR_MAX_IOU = 0.2
FORGED_TOKEN_FRAC = 0.15


class ConfigurationError(ValueError):
    """Invalid manifest or model configuration."""


class ParseError(ValueError):
    """Malformed dataset file; message names the record index and field."""


@dataclass(frozen=True)
class DatasetManifest:
    """Generation recipe; together with the seed it fully determines a dataset."""

    num_samples: int
    grid_side: int = 8
    token_length: int = 16
    vocab_size: int = 64
    patch_dim: int = 16
    n_candidates: int = 5
    stop_vocab_size: int = 8
    manipulated_vocab_size: int = 12
    # authenticity mix of (image, text): true/true, fake/true, true/fake, fake/fake
    mix_tt: float = 0.25
    mix_ft: float = 0.25
    mix_tf: float = 0.25
    mix_ff: float = 0.25
    signal_strength: float = 1.2
    seed: int = 0

    def __post_init__(self):
        if self.num_samples < 0:
            raise ConfigurationError("num_samples must be >= 0")
        for name in ("grid_side", "token_length", "vocab_size", "patch_dim",
                     "n_candidates", "stop_vocab_size", "manipulated_vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.grid_side < 3:
            raise ConfigurationError("grid_side must be >= 3 so boxes can cover patches")
        mix = (self.mix_tt, self.mix_ft, self.mix_tf, self.mix_ff)
        if any(p < 0 for p in mix):
            raise ConfigurationError("mix proportions must be non-negative")
        if abs(sum(mix) - 1.0) > 1e-9:
            raise ConfigurationError(f"mix proportions sum to {sum(mix)}, expected 1")
        n_special = 1 + self.stop_vocab_size + self.manipulated_vocab_size
        if self.vocab_size <= n_special:
            raise ConfigurationError(
                f"vocab_size {self.vocab_size} leaves no content stratum "
                f"(needs > {n_special})")
        if self.token_length < 4:
            raise ConfigurationError("token_length must be >= 4")

    @property
    def n_patches(self) -> int:
        return self.grid_side ** 2

    def stop_ids(self) -> range:
        return range(1, 1 + self.stop_vocab_size)

    def content_ids(self) -> range:
        return range(1 + self.stop_vocab_size,
                     self.vocab_size - self.manipulated_vocab_size)

    def manipulated_ids(self) -> range:
        return range(self.vocab_size - self.manipulated_vocab_size, self.vocab_size)


@dataclass(eq=False)
class Sample:
    """One image-text pair at patch/token granularity."""

    patches: np.ndarray          # (N, patch_dim) float64, row-major over the grid
    tokens: np.ndarray           # (L,) int64
    content_mask: np.ndarray     # (L,) bool — non-stop-word, non-padding tokens
    padding_mask: np.ndarray     # (L,) bool — real (non-padding) tokens
    candidates: tuple[Box, ...]
    gt_box: Box | None
    gt_tokens: frozenset[int]
    y_v: int
    y_t: int
    y_m: int

    def validate(self, manifest: DatasetManifest | None = None) -> None:
        if self.y_m != (self.y_v | self.y_t):
            raise ValueError("y_m must equal y_v OR y_t")
        if (self.gt_box is not None) != (self.y_v == 1):
            raise ValueError("gt_box must be present exactly when y_v = 1")
        if bool(self.gt_tokens) != (self.y_t == 1):
            raise ValueError("gt_tokens must be non-empty exactly when y_t = 1")
        content_pos = set(np.flatnonzero(self.content_mask).tolist())
        if not set(self.gt_tokens) <= content_pos:
            raise ValueError("gt_tokens must lie on content-token positions")
        if np.any(self.content_mask & ~self.padding_mask):
            raise ValueError("content positions must be real tokens")
        if self.y_v == 1:
            hits = sum(iou(c, self.gt_box) >= 0.5 for c in self.candidates)
            if hits != 1:
                raise ValueError(f"expected exactly one candidate with IoU >= 0.5, got {hits}")
        if manifest is not None:
            if self.patches.shape != (manifest.n_patches, manifest.patch_dim):
                raise ValueError("patch array shape does not match manifest")
            if self.tokens.shape != (manifest.token_length,):
                raise ValueError("token array shape does not match manifest")
            if len(self.candidates) != manifest.n_candidates:
                raise ValueError("candidate count does not match manifest")


def samples_equal(a: Sample, b: Sample) -> bool:
    """Field-for-field exact equality (used for round-trip checks)."""
    return (
        np.array_equal(a.patches, b.patches)
        and np.array_equal(a.tokens, b.tokens)
        and np.array_equal(a.content_mask, b.content_mask)
        and np.array_equal(a.padding_mask, b.padding_mask)
        and a.candidates == b.candidates
        and a.gt_box == b.gt_box
        and a.gt_tokens == b.gt_tokens
        and (a.y_v, a.y_t, a.y_m) == (b.y_v, b.y_t, b.y_m)
    )


def _round9(x: float) -> float:
    """Round to 9 significant digits, the on-disk float precision."""
    return float(f"{float(x):.9g}")


def _round9_array(x: np.ndarray) -> np.ndarray:
    return np.array([[_round9(v) for v in row] for row in x], dtype=np.float64)


def _round9_box(c_x: float, c_y: float, w: float, h: float) -> Box:
    return Box(_round9(c_x), _round9(c_y), _round9(w), _round9(h))


def _box_side_range(grid_side: int) -> tuple[float, float]:
    # sides wider than one patch pitch guarantee the box covers a patch center
    lo = 1.5 / grid_side
    hi = min(0.6, 2.5 / grid_side)
    return lo, hi


def _random_box(rng: np.random.Generator, grid_side: int) -> Box:
    lo, hi = _box_side_range(grid_side)
    w = rng.uniform(lo, hi)
    h = rng.uniform(lo, hi)
    c_x = rng.uniform(w / 2, 1 - w / 2)
    c_y = rng.uniform(h / 2, 1 - h / 2)
    return _round9_box(c_x, c_y, w, h)


def propose_candidates(gt_box: Box | None, n: int,
                       seed: int | np.random.Generator,
                       grid_side: int = 8) -> tuple[Box, ...]:
    """Candidate boxes standing in for an external region detector.

    For a forged image (gt_box given) one candidate overlaps the ground truth
    with IoU >= 0.5 and the remaining n-1 are low-overlap distractors; for an
    authentic image all n are distractors.
    """
    if n < 1:
        raise ValueError("need at least one candidate")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    boxes: list[Box] = []
    if gt_box is not None:
        while True:
            w = gt_box.w * rng.uniform(0.85, 1.2)
            h = gt_box.h * rng.uniform(0.85, 1.2)
            c_x = np.clip(gt_box.c_x + rng.uniform(-0.2, 0.2) * gt_box.w, w / 2, 1 - w / 2)
            c_y = np.clip(gt_box.c_y + rng.uniform(-0.2, 0.2) * gt_box.h, h / 2, 1 - h / 2)
            good = _round9_box(c_x, c_y, w, h)
            if iou(good, gt_box) >= GOOD_BOX_MIN_IOU:
                boxes.append(good)
                break
    while len(boxes) < n:
        cand = _random_box(rng, grid_side)
        if gt_box is None or iou(cand, gt_box) < DISTRACTOR_MAX_IOU:
            boxes.append(cand)
    order = rng.permutation(n)
    return tuple(boxes[i] for i in order)


def _generate_text(rng: np.random.Generator, manifest: DatasetManifest,
                   forged: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray, frozenset[int]]:
    L = manifest.token_length
    length = int(rng.integers(max(4, L - 6), L + 1))
    tokens = np.full(L, PAD_ID, dtype=np.int64)
    stop_ids = manifest.stop_ids()
    content_ids = manifest.content_ids()
    is_stop = rng.random(length) < STOP_WORD_PROB
    # keep at least two content tokens so in-sentence statistics are defined
    if (~is_stop).sum() < 2:
        is_stop[:2] = False
    for pos in range(length):
        pool = stop_ids if is_stop[pos] else content_ids
        tokens[pos] = int(rng.integers(pool.start, pool.stop))
    padding_mask = np.zeros(L, dtype=bool)
    padding_mask[:length] = True
    content_mask = np.zeros(L, dtype=bool)
    content_mask[:length] = ~is_stop
    gt_tokens: frozenset[int] = frozenset()
    if forged:
        content_pos = np.flatnonzero(content_mask)
        n_forged = max(1, math.ceil(FORGED_TOKEN_FRAC * content_pos.size))
        chosen = rng.choice(content_pos, size=n_forged, replace=False)
        manip = manifest.manipulated_ids()
        for pos in chosen:
            tokens[pos] = int(rng.integers(manip.start, manip.stop))
        gt_tokens = frozenset(int(p) for p in chosen)
    return tokens, content_mask, padding_mask, gt_tokens


def _generate_image(rng: np.random.Generator, manifest: DatasetManifest,
                    forged: bool) -> tuple[np.ndarray, Box | None]:
    G = manifest.grid_side
    patches = rng.standard_normal((manifest.n_patches, manifest.patch_dim))
    gt_box: Box | None = None
    if forged:
        while True:
            gt_box = _random_box(rng, G)
            cols = (np.arange(manifest.n_patches) % G + 0.5) / G
            rows = (np.arange(manifest.n_patches) // G + 0.5) / G
            inside = (np.abs(cols - gt_box.c_x) < gt_box.w / 2) & \
                     (np.abs(rows - gt_box.c_y) < gt_box.h / 2)
            if inside.any():
                break
        patches[inside] += manifest.signal_strength
    return _round9_array(patches), gt_box


def generate_sample(manifest: DatasetManifest, index: int, kind: str,
                    rng: np.random.Generator) -> Sample:
    """One sample of the given authenticity kind ('tt'|'ft'|'tf'|'ff')."""
    y_v = int(kind in ("ft", "ff"))
    y_t = int(kind in ("tf", "ff"))
    patches, gt_box = _generate_image(rng, manifest, forged=bool(y_v))
    tokens, content_mask, padding_mask, gt_tokens = _generate_text(
        rng, manifest, forged=bool(y_t))
    candidates = propose_candidates(gt_box, manifest.n_candidates, rng,
                                    grid_side=manifest.grid_side)
    sample = Sample(patches=patches, tokens=tokens, content_mask=content_mask,
                    padding_mask=padding_mask, candidates=candidates,
                    gt_box=gt_box, gt_tokens=gt_tokens,
                    y_v=y_v, y_t=y_t, y_m=y_v | y_t)
    sample.validate(manifest)
    return sample


def _mix_counts(manifest: DatasetManifest) -> list[tuple[str, int]]:
    # largest-remainder apportionment keeps the realized mix as close as possible
    kinds = ("tt", "ft", "tf", "ff")
    props = (manifest.mix_tt, manifest.mix_ft, manifest.mix_tf, manifest.mix_ff)
    exact = [p * manifest.num_samples for p in props]
    counts = [int(math.floor(e)) for e in exact]
    short = manifest.num_samples - sum(counts)
    order = sorted(range(4), key=lambda i: exact[i] - counts[i], reverse=True)
    for i in order[:short]:
        counts[i] += 1
    return list(zip(kinds, counts))


def generate_dataset(manifest: DatasetManifest) -> list[Sample]:
    """Deterministic dataset for the manifest; per-sample child RNGs keep it
    reproducible independent of generation order."""
    seq = np.random.SeedSequence(manifest.seed)
    children = seq.spawn(manifest.num_samples + 1)
    order_rng = np.random.default_rng(children[0])
    kinds: list[str] = []
    for kind, count in _mix_counts(manifest):
        kinds.extend([kind] * count)
    kinds = [kinds[i] for i in order_rng.permutation(len(kinds))]
    return [
        generate_sample(manifest, i, kind, np.random.default_rng(children[i + 1]))
        for i, kind in enumerate(kinds)
    ]


def _sample_to_record(s: Sample) -> dict:
    return {
        "patches": [[float(v) for v in row] for row in s.patches],
        "tokens": [int(t) for t in s.tokens],
        "content_mask": [int(b) for b in s.content_mask],
        "padding_mask": [int(b) for b in s.padding_mask],
        "candidates": [list(c.as_tuple()) for c in s.candidates],
        "gt_box": list(s.gt_box.as_tuple()) if s.gt_box is not None else None,
        "gt_tokens": sorted(s.gt_tokens),
        "y_v": s.y_v,
        "y_t": s.y_t,
        "y_m": s.y_m,
    }


_RECORD_FIELDS = ("patches", "tokens", "content_mask", "padding_mask",
                  "candidates", "gt_box", "gt_tokens", "y_v", "y_t", "y_m")


def _record_to_sample(rec: dict, index: int, manifest: DatasetManifest) -> Sample:
    for name in _RECORD_FIELDS:
        if name not in rec:
            raise ParseError(f"record {index}: missing field '{name}'")

    def fail(fieldname: str, why: str):
        raise ParseError(f"record {index}: field '{fieldname}' {why}")

    try:
        patches = np.array(rec["patches"], dtype=np.float64)
    except (TypeError, ValueError):
        fail("patches", "is not a numeric matrix")
    if patches.ndim != 2 or patches.shape != (manifest.n_patches, manifest.patch_dim):
        fail("patches", f"has shape {patches.shape}, expected "
             f"{(manifest.n_patches, manifest.patch_dim)}")
    tokens = np.array(rec["tokens"], dtype=np.int64)
    if tokens.shape != (manifest.token_length,):
        fail("tokens", f"has length {tokens.size}, expected {manifest.token_length}")
    content_mask = np.array(rec["content_mask"], dtype=bool)
    padding_mask = np.array(rec["padding_mask"], dtype=bool)
    if content_mask.shape != tokens.shape or padding_mask.shape != tokens.shape:
        fail("content_mask", "mask lengths must match the token length")
    try:
        candidates = tuple(Box(*map(float, c)) for c in rec["candidates"])
    except (TypeError, ValueError) as exc:
        fail("candidates", f"is invalid: {exc}")
    try:
        gt_box = Box(*map(float, rec["gt_box"])) if rec["gt_box"] is not None else None
    except (TypeError, ValueError) as exc:
        fail("gt_box", f"is invalid: {exc}")
    sample = Sample(patches=patches, tokens=tokens, content_mask=content_mask,
                    padding_mask=padding_mask, candidates=candidates, gt_box=gt_box,
                    gt_tokens=frozenset(int(t) for t in rec["gt_tokens"]),
                    y_v=int(rec["y_v"]), y_t=int(rec["y_t"]), y_m=int(rec["y_m"]))
    try:
        sample.validate(manifest)
    except ValueError as exc:
        raise ParseError(f"record {index}: {exc}") from exc
    return sample


def write_dataset(path: str | Path, samples: list[Sample],
                  manifest: DatasetManifest) -> None:
    """Line-delimited records behind a schema-version header."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        header = {"schema_version": SCHEMA_VERSION, "manifest": asdict(manifest)}
        fh.write(json.dumps(header) + "\n")
        for s in samples:
            fh.write(json.dumps(_sample_to_record(s)) + "\n")


def read_dataset(path: str | Path) -> tuple[DatasetManifest, list[Sample]]:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty file: missing header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"header: not valid JSON ({exc})") from exc
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ParseError(f"header: unsupported schema_version {header.get('schema_version')}")
    try:
        manifest = DatasetManifest(**header["manifest"])
    except (KeyError, TypeError, ConfigurationError) as exc:
        raise ParseError(f"header: invalid manifest ({exc})") from exc
    samples = []
    for i, line in enumerate(lines[1:]):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"record {i}: not valid JSON ({exc})") from exc
        samples.append(_record_to_sample(rec, i, manifest))
    return manifest, samples
