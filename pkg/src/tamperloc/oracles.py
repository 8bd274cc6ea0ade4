"""Independent brute-force verifiers used by tests and the acceptance suite.

Deliberately numpy/pure-python only and written from the definitions, so they
share no code with the model-side tensor implementations. Clarity over speed;
quadratic loops are fine here.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                     h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function at x."""
    if h <= 0.0:
        raise ValueError("step size must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ValueError(f"function is non-finite near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def grad_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                        floor: float = 1e-8) -> float:
    """Max per-coordinate relative disagreement between two gradients."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def reference_lse(x: Sequence[float], tau: float) -> float:
    """tau * log((1/n) * sum(exp(x_i / tau))) with explicit max-subtraction."""
    xs = [float(v) for v in x]
    if not xs:
        raise ValueError("empty input")
    if tau <= 0.0:
        raise ValueError("temperature must be positive")
    m = max(xs)
    acc = 0.0
    for v in xs:
        acc += math.exp((v - m) / tau)
    return m + tau * math.log(acc / len(xs))


def reference_topk_mean(x: Sequence[float], k: int) -> float:
    """Mean of the k largest values."""
    xs = sorted((float(v) for v in x), reverse=True)
    if not 1 <= k <= len(xs):
        raise ValueError(f"k={k} out of range for {len(xs)} values")
    return sum(xs[:k]) / k


def brute_force_best_box(patch_probs: np.ndarray, sims: np.ndarray,
                         masks: np.ndarray, alpha: float) -> int:
    """Recompute fused candidate scores by explicit loops and return the argmax.

    patch_probs: (N,) per-patch forgery probabilities; sims: (N,) per-patch
    text-similarity values; masks: (n, N) per-candidate soft masks. The fused
    score of candidate i is sum_j masks[i, j] * (patch_probs[j] + alpha * sims[j]);
    ties break to the lowest index.
    """
    n_cand, n_patch = masks.shape
    best_idx = 0
    best_score = -math.inf
    for i in range(n_cand):
        s_implicit = 0.0
        s_explicit = 0.0
        for j in range(n_patch):
            s_implicit += float(masks[i, j]) * float(patch_probs[j])
            s_explicit += float(masks[i, j]) * float(sims[j])
        score = s_implicit + alpha * s_explicit
        if score > best_score:
            best_score = score
            best_idx = i
    return best_idx


def pairwise_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """AUC by exhaustive positive/negative pair comparison (ties count half)."""
    pos = [float(s) for s, y in zip(scores, labels) if y == 1]
    neg = [float(s) for s, y in zip(scores, labels) if y == 0]
    if not pos or not neg:
        raise ValueError("need at least one positive and one negative")
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


class ReadRecorder:
    """Attribute-access proxy used to audit which sample fields a code path reads."""

    def __init__(self, target, log: set[str]):
        object.__setattr__(self, "_target", target)
        object.__setattr__(self, "_log", log)

    def __getattr__(self, name: str):
        self._log.add(name)
        return getattr(self._target, name)

    def __setattr__(self, name: str, value):
        raise AttributeError("recorded samples are read-only")
