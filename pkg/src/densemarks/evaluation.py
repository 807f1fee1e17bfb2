"""Matching-quality evaluation of an embedder on held-out sequences."""
from __future__ import annotations

import numpy as np

from .embedder import embed_image
from .matcher import nn_warp


def eval_pairs(seq, count: int, seed: int = 0) -> list:
    """Deterministic choice of ``count`` tracked frame pairs of a sequence."""
    keys = sorted(seq.tracks)
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(keys), size=min(count, len(keys)), replace=False)
    return [keys[k] for k in sorted(pick)]


def matching_errors(params, sequences, pairs_per_sequence: int = 4, seed: int = 0) -> np.ndarray:
    """Pixel errors of target-to-source nearest-embedding matches at ground-truth tracks."""
    errors = []
    for s, seq in enumerate(sequences):
        cache = {}
        for i, j in eval_pairs(seq, pairs_per_sequence, seed + s):
            for t in (i, j):
                if t not in cache:
                    cache[t] = embed_image(params, seq.images[t], seq.masks[t])
            _, field = nn_warp(cache[i], seq.images[i], cache[j])
            tr = seq.pair_tracks(i, j)
            got = field.source_xy[tr.pixels_b[:, 1], tr.pixels_b[:, 0]]
            errors.append(np.linalg.norm(got - tr.pixels_a, axis=1))
    return np.concatenate(errors) if errors else np.zeros(0)


def matching_quality(params, sequences, pairs_per_sequence: int = 4, seed: int = 0):
    """``(MAE, RMSE)`` in pixels over held-out track pairs."""
    err = matching_errors(params, sequences, pairs_per_sequence, seed)
    return float(err.mean()), float(np.sqrt(np.mean(err ** 2)))
