"""Training losses with analytic gradients.

All functions are pure and return ``(loss, grad...)`` tuples so callers can
chain them by hand.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEGENERATE_NORM = 1e-12


class DegenerateFeatureError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_lmks: float = 50.0
    lambda_segm: float = 1.0

    def __post_init__(self):
        if self.lambda_lmks < 0 or self.lambda_segm < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class SegmentationHead:
    """1x1-conv segmentation head: ``logits = feats @ weight.T + bias``."""

    weight: np.ndarray  # (N_S, D)
    bias: np.ndarray  # (N_S,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("weight must be (N_S, D) and bias (N_S,)")
        if self.weight.shape[0] < 2:
            raise ValueError("segmentation head needs at least 2 classes")

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, num_classes: int, feature_dim: int, seed: int = 0) -> "SegmentationHead":
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(feature_dim)
        return cls(rng.uniform(-bound, bound, (num_classes, feature_dim)), np.zeros(num_classes))


def _normalize_rows(f: np.ndarray):
    norms = np.linalg.norm(f, axis=1)
    if np.any(norms < DEGENERATE_NORM):
        raise DegenerateFeatureError(
            f"feature row {int(np.argmin(norms))} has norm {norms.min():.3g}")
    return f / norms[:, None], norms


def _normalize_backward(g_hat: np.ndarray, f_hat: np.ndarray, norms: np.ndarray) -> np.ndarray:
    # d(f/|f|) = (I - f_hat f_hat^T) / |f|
    radial = np.sum(g_hat * f_hat, axis=1, keepdims=True)
    return (g_hat - radial * f_hat) / norms[:, None]


def contrastive_loss(f1: np.ndarray, f2: np.ndarray):
    """Frobenius distance between the cosine cross-Gram of two batches and identity.

    Row ``p`` of ``f1`` and row ``p`` of ``f2`` are a positive pair; every
    other combination is a negative. Returns ``(loss, grad_f1, grad_f2)``.
    """
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    if f1.shape != f2.shape or f1.ndim != 2:
        raise ValueError(f"feature batches must share shape (P, D), got {f1.shape} and {f2.shape}")
    a, na = _normalize_rows(f1)
    b, nb = _normalize_rows(f2)
    resid = a @ b.T - np.eye(len(a))
    loss = float(np.sqrt(np.sum(resid * resid)))
    if loss == 0.0:
        return 0.0, np.zeros_like(f1), np.zeros_like(f2)
    g_gram = resid / loss
    g_a = g_gram @ b
    g_b = g_gram.T @ a
    return loss, _normalize_backward(g_a, a, na), _normalize_backward(g_b, b, nb)


def landmark_loss(predicted: np.ndarray, anchors: np.ndarray):
    """Sum of L1 distances between predicted canonical points and their anchors."""
    predicted = np.asarray(predicted, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    if predicted.shape != anchors.shape:
        raise ValueError(f"expected {anchors.shape} predictions, got {predicted.shape}")
    diff = predicted - anchors
    return float(np.abs(diff).sum()), np.sign(diff)


def seg_forward(head: SegmentationHead, feats: np.ndarray) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != head.weight.shape[1]:
        raise ValueError(f"features must be (P, {head.weight.shape[1]}), got {feats.shape}")
    return feats @ head.weight.T + head.bias


def seg_backward(head: SegmentationHead, feats: np.ndarray, grad_logits: np.ndarray):
    """Returns ``(grad_feats, grad_weight, grad_bias)``."""
    return grad_logits @ head.weight, grad_logits.T @ feats, grad_logits.sum(axis=0)


def segmentation_loss(logits: np.ndarray, gt_class: np.ndarray):
    """Pixel-averaged softmax cross-entropy; returns ``(loss, grad_logits)``."""
    logits = np.asarray(logits, dtype=np.float64)
    gt = np.asarray(gt_class)
    n, k = logits.shape
    if gt.shape != (n,):
        raise ValueError(f"expected {n} class indices, got shape {gt.shape}")
    if np.any(gt < 0) or np.any(gt >= k):
        raise ValueError(f"class indices must lie in [0, {k})")
    gt = gt.astype(np.int64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[np.arange(n), gt]))
    prob = np.exp(shifted - lse[:, None])
    prob[np.arange(n), gt] -= 1.0
    return loss, prob / n


def total_loss(contr: float, lmk1: float, lmk2: float, seg1: float, seg2: float,
               w: LossWeights = LossWeights()) -> float:
    return contr + w.lambda_lmks * (lmk1 + lmk2) + w.lambda_segm * (seg1 + seg2)
