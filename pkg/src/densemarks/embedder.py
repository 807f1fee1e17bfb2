"""Per-pixel embedder with hand-written backprop and the siamese training loop.

The network sees a sinusoidal encoding of the pixel position, the pixel color
and the mean color of its 4x4 neighborhood. In canonical mode it emits a
point in the unit cube (logistic output) that is turned into a semantic
feature by querying the latent grid; in direct mode it emits the feature
itself and the grid is bypassed.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import grid as gridmod
from .geometry import UVWMap
from .io import FormatError
from .losses import (LossWeights, SegmentationHead, contrastive_loss, landmark_loss, seg_backward,
                     seg_forward, segmentation_loss, total_loss)
from .synthetic import NUM_REGIONS, FrameBundle, augment, draw_augmentation, make_template

log = logging.getLogger(__name__)

CANONICAL = "canonical"
DIRECT = "direct_feature"
NET_MAGIC = b"DMNET01"


@dataclass
class EmbedderParams:
    weights: list  # [W1 (in, H), W2 (H, H), W3 (H, out)]
    biases: list
    n_freq: int = 6
    mode: str = CANONICAL

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def arrays(self) -> list:
        return [*self.weights, *self.biases]

    def copy(self) -> "EmbedderParams":
        return EmbedderParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                              self.n_freq, self.mode)

    @classmethod
    def init(cls, seed: int = 0, hidden: int = 64, n_freq: int = 6, mode: str = CANONICAL,
             feature_dim: int = 16) -> "EmbedderParams":
        if mode not in (CANONICAL, DIRECT):
            raise ValueError(f"unknown embedder mode {mode!r}")
        rng = np.random.default_rng(seed)
        out = 3 if mode == CANONICAL else feature_dim
        dims = [input_dim(n_freq), hidden, hidden, out]
        weights = [rng.standard_normal((a, b)) / np.sqrt(a) for a, b in zip(dims[:-1], dims[1:])]
        biases = [np.zeros(b) for b in dims[1:]]
        return cls(weights, biases, n_freq, mode)

    @classmethod
    def zeros_like(cls, other: "EmbedderParams") -> "EmbedderParams":
        return cls([np.zeros_like(w) for w in other.weights], [np.zeros_like(b) for b in other.biases],
                   other.n_freq, other.mode)


def input_dim(n_freq: int) -> int:
    return 4 * n_freq + 6


def neighborhood_mean(image: np.ndarray) -> np.ndarray:
    return np.stack([ndimage.uniform_filter(image[..., c], size=4, mode="constant")
                     for c in range(image.shape[2])], axis=-1)


def pixel_inputs(image: np.ndarray, mean: np.ndarray, pixels: np.ndarray, n_freq: int) -> np.ndarray:
    """Network inputs ``(P, 4F + 6)`` for integer pixels ``(P, 2)`` given as (x, y)."""
    h, w = image.shape[:2]
    xs, ys = pixels[:, 0], pixels[:, 1]
    xn = 2.0 * xs / max(w - 1, 1) - 1.0
    yn = 2.0 * ys / max(h - 1, 1) - 1.0
    freqs = np.pi * 2.0 ** np.arange(n_freq)
    ax = xn[:, None] * freqs
    ay = yn[:, None] * freqs
    return np.hstack([np.sin(ax), np.cos(ax), np.sin(ay), np.cos(ay), image[ys, xs], mean[ys, xs]])


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def mlp_forward(params: EmbedderParams, x: np.ndarray):
    acts = [x]
    h = x
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = np.tanh(h @ w + b)
        acts.append(h)
    z = h @ params.weights[-1] + params.biases[-1]
    out = sigmoid(z) if params.mode == CANONICAL else z
    return out, acts


def mlp_backward(params: EmbedderParams, acts: list, out: np.ndarray, grad_out: np.ndarray) -> EmbedderParams:
    g = grad_out * out * (1.0 - out) if params.mode == CANONICAL else grad_out
    gw, gb = [], []
    for layer in range(len(params.weights) - 1, -1, -1):
        a = acts[layer]
        gw.append(a.T @ g)
        gb.append(g.sum(axis=0))
        if layer > 0:
            g = (g @ params.weights[layer].T) * (1.0 - a * a)
    return EmbedderParams(gw[::-1], gb[::-1], params.n_freq, params.mode)


def embed_pixels(params: EmbedderParams, image: np.ndarray, pixels: np.ndarray, mean=None) -> np.ndarray:
    mean = neighborhood_mean(image) if mean is None else mean
    out, _ = mlp_forward(params, pixel_inputs(image, mean, pixels, params.n_freq))
    return out


def embed_image(params: EmbedderParams, image: np.ndarray, mask: np.ndarray) -> UVWMap:
    """Dense embedding of every foreground pixel."""
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if image.shape[:2] != mask.shape:
        raise ValueError(f"image {image.shape[:2]} and mask {mask.shape} differ in size")
    ys, xs = np.nonzero(mask)
    coords = np.zeros(mask.shape + (params.out_dim,))
    if len(xs):
        coords[ys, xs] = embed_pixels(params, image, np.stack([xs, ys], axis=1))
    return UVWMap(coords, mask)


# ---------------------------------------------------------------------------
# one training pair


@dataclass
class PairSample:
    """Everything the loss needs about two frames of one sequence."""

    images: tuple  # two (H, W, 3)
    masks: tuple  # two (H, W) bool
    labels: tuple  # two (H, W) int
    tracks: tuple  # two (P, 2) int pixel arrays, row p of each is a match
    landmarks: tuple  # two (K, 2) int pixel arrays
    landmark_valid: tuple  # two (K,) bool
    anchors: np.ndarray  # (K, 3)
    means: tuple = None

    def __post_init__(self):
        if self.means is None:
            self.means = tuple(neighborhood_mean(im) for im in self.images)


@dataclass
class Grads:
    embedder: EmbedderParams
    grid: np.ndarray | None
    seg_weight: np.ndarray
    seg_bias: np.ndarray


def _on_valid(mask: np.ndarray, px: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    inside = (px[:, 0] >= 0) & (px[:, 0] < w) & (px[:, 1] >= 0) & (px[:, 1] < h)
    ok = np.zeros(len(px), dtype=bool)
    ok[inside] = mask[px[inside, 1], px[inside, 0]]
    return ok


def forward_backward(params: EmbedderParams, grid: gridmod.LatentGrid | None, seghead: SegmentationHead,
                     pair: PairSample, weights: LossWeights = LossWeights()):
    """Total loss of one image pair and exact gradients for all parameter groups.

    Returns ``(loss, grads, info)``; ``info`` holds the individual loss terms
    and the number of dropped tracks. Raises ``ValueError`` if fewer than two
    tracks survive.
    """
    canonical = params.mode == CANONICAL
    keep = _on_valid(pair.masks[0], pair.tracks[0]) & _on_valid(pair.masks[1], pair.tracks[1])
    dropped = int((~keep).sum())
    if keep.sum() < 2:
        raise ValueError(f"only {int(keep.sum())} tracks on valid pixels")
    tracks = [t[keep] for t in pair.tracks]
    n_trk = len(tracks[0])

    feats, cache, lmk = [], [], []
    for v in range(2):
        if canonical:
            lv = pair.landmark_valid[v] & _on_valid(pair.masks[v], pair.landmarks[v])
            lpx = pair.landmarks[v][lv]
        else:
            lv = np.zeros(len(pair.anchors), dtype=bool)
            lpx = np.zeros((0, 2), dtype=np.int64)
        pix = np.vstack([tracks[v], lpx]).astype(np.int64)
        x = pixel_inputs(pair.images[v], pair.means[v], pix, params.n_freq)
        out, acts = mlp_forward(params, x)
        cache.append((out, acts))
        lmk.append(lv)
        feats.append(gridmod.query_points(grid, out[:n_trk]) if canonical else out[:n_trk])

    contr, g_f1, g_f2 = contrastive_loss(feats[0], feats[1])
    g_feats = [g_f1, g_f2]
    seg_terms, lmk_terms = [], []
    g_seg_w = np.zeros_like(seghead.weight)
    g_seg_b = np.zeros_like(seghead.bias)
    g_grid_s = None
    g_embed = EmbedderParams.zeros_like(params)

    for v in range(2):
        labels = pair.labels[v][tracks[v][:, 1], tracks[v][:, 0]]
        logits = seg_forward(seghead, feats[v])
        seg, g_logits = segmentation_loss(logits, labels)
        seg_terms.append(seg)
        g_logits *= weights.lambda_segm
        gf, gw, gb = seg_backward(seghead, feats[v], g_logits)
        g_seg_w += gw
        g_seg_b += gb
        g_feat = g_feats[v] + gf

        out, acts = cache[v]
        g_out = np.zeros_like(out)
        if canonical:
            pg, idx, cg = gridmod.query_points_grad(grid, out[:n_trk], g_feat)
            g_out[:n_trk] = pg
            dense = gridmod.scatter_corner_grads(grid, idx, cg)
            g_grid_s = dense if g_grid_s is None else g_grid_s + dense
            lm_val, lm_grad = landmark_loss(out[n_trk:], pair.anchors[lmk[v]])
            g_out[n_trk:] = weights.lambda_lmks * lm_grad
            lmk_terms.append(lm_val)
        else:
            g_out[:n_trk] = g_feat
            lmk_terms.append(0.0)
        ge = mlp_backward(params, acts, out, g_out)
        for a, b in zip(g_embed.arrays, ge.arrays):
            a += b

    loss = total_loss(contr, lmk_terms[0], lmk_terms[1], seg_terms[0], seg_terms[1], weights)
    g_grid = gridmod.raw_gradient(grid, g_grid_s) if canonical else None
    info = {"contrastive": contr, "lmk1": lmk_terms[0], "lmk2": lmk_terms[1],
            "seg1": seg_terms[0], "seg2": seg_terms[1], "dropped": dropped, "tracks": n_trk}
    return loss, Grads(g_embed, g_grid, g_seg_w, g_seg_b), info


# ---------------------------------------------------------------------------
# optimization


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros(cls, arrays) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def adamw_step(params: list, grads: list, state: AdamState, lr: float, weight_decay: float = 0.0,
               decay: list | None = None, betas=(0.9, 0.999), eps: float = 1e-8) -> list:
    """In-place AdamW update with decoupled weight decay on the arrays flagged in ``decay``."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    decay = decay if decay is not None else [True] * len(params)
    for p, g, m, v, dec in zip(params, grads, state.m, state.v, decay):
        if dec and weight_decay:
            p *= 1.0 - lr * weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


def cosine_lr(step: float, total: float, warmup: float, base_lr: float) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to zero at ``total``."""
    if step < warmup:
        return base_lr * step / warmup
    if total <= warmup:
        return 0.0 if step >= total else base_lr
    progress = min((step - warmup) / (total - warmup), 1.0)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_pairs: int = 4
    lr_embedder: float = 2e-3
    lr_grid: float = 0.04
    lr_seghead: float = 2e-3
    warmup_steps: int = 100
    weight_decay: float = 1e-4
    seed: int = 0
    mode: str = CANONICAL
    hidden: int = 64
    n_freq: int = 6
    grid_resolution: int = 32
    feature_dim: int = 16
    sigma: float = 1.0
    lambda_lmks: float = 50.0
    lambda_segm: float = 1.0
    augment: bool = True
    augment_prob: float = 0.5

    def __post_init__(self):
        if self.steps < 0 or self.batch_pairs < 1:
            raise ValueError("steps must be >= 0 and batch_pairs >= 1")
        if self.warmup_steps > self.steps and self.steps > 0:
            raise ValueError("warmup_steps must not exceed steps")
        if min(self.lr_embedder, self.lr_grid, self.lr_seghead) <= 0:
            raise ValueError("learning rates must be positive")
        if self.mode not in (CANONICAL, DIRECT):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_lmks, self.lambda_segm)


@dataclass
class TrainResult:
    params: EmbedderParams
    grid: gridmod.LatentGrid
    seghead: SegmentationHead
    losses: list = field(default_factory=list)
    contrastive: list = field(default_factory=list)
    skipped: int = 0


def init_model(cfg: TrainConfig):
    params = EmbedderParams.init(cfg.seed, cfg.hidden, cfg.n_freq, cfg.mode, cfg.feature_dim)
    grid = gridmod.new_grid(cfg.grid_resolution, cfg.feature_dim, cfg.sigma, cfg.seed + 1)
    seghead = SegmentationHead.init(NUM_REGIONS, cfg.feature_dim, cfg.seed + 2)
    return params, grid, seghead


def _augmented_view(seq, t: int, points: np.ndarray, rng, cfg: TrainConfig):
    bundle = FrameBundle(seq.images[t], seq.masks[t], seq.labels[t], None,
                         seq.landmarks[t], seq.landmark_visible[t], points.astype(np.float64))
    if cfg.augment:
        h, w = seq.masks[t].shape
        bundle = augment(bundle, draw_augmentation(rng, w, h, cfg.augment_prob))
    pts = np.round(bundle.points).astype(np.int64)
    lms = np.round(bundle.landmarks).astype(np.int64)
    pv = bundle.point_visible if bundle.point_visible is not None else np.ones(len(pts), dtype=bool)
    return bundle, pts, pv, lms


def sample_pair(dataset, anchors, rng, cfg: TrainConfig) -> PairSample:
    """Draw a sequence, one of its tracked frame pairs, and augment both frames."""
    seq = dataset[int(rng.integers(len(dataset)))]
    keys = sorted(seq.tracks)
    i, j = keys[int(rng.integers(len(keys)))]
    if rng.uniform() < 0.5:
        i, j = j, i
    tr = seq.pair_tracks(i, j)
    b1, p1, v1, l1 = _augmented_view(seq, i, tr.pixels_a, rng, cfg)
    b2, p2, v2, l2 = _augmented_view(seq, j, tr.pixels_b, rng, cfg)
    # points pushed off-frame by augmentation no longer count
    vis = v1 & v2
    lv1 = b1.landmark_visible if b1.landmark_visible is not None else seq.landmark_visible[i]
    lv2 = b2.landmark_visible if b2.landmark_visible is not None else seq.landmark_visible[j]
    return PairSample((b1.image, b2.image), (b1.mask, b2.mask), (b1.labels, b2.labels),
                      (p1[vis], p2[vis]), (l1, l2), (lv1, lv2), anchors)


def train(dataset, cfg: TrainConfig = TrainConfig(), anchors=None, callback=None) -> TrainResult:
    """Siamese training over tracked frame pairs; deterministic given ``cfg.seed``."""
    dataset = [s for s in dataset if s.tracks]
    if not dataset:
        raise ValueError("dataset has no sequences with track pairs")
    anchors = make_template().anchors if anchors is None else anchors
    params, grid, seghead = init_model(cfg)
    result = TrainResult(params, grid, seghead)
    if cfg.steps == 0:
        return result

    rng = np.random.default_rng(cfg.seed)
    weights = cfg.loss_weights
    canonical = cfg.mode == CANONICAL
    emb_state = AdamState.zeros(params.arrays)
    emb_decay = [True] * len(params.weights) + [False] * len(params.biases)
    seg_state = AdamState.zeros([seghead.weight, seghead.bias])
    grid_state = AdamState.zeros([grid.raw])

    for step in range(cfg.steps):
        total, contr, used = 0.0, 0.0, 0
        acc = None
        for _ in range(cfg.batch_pairs):
            pair = sample_pair(dataset, anchors, rng, cfg)
            if len(pair.tracks[0]) < 2:
                result.skipped += 1
                continue
            try:
                loss, g, info = forward_backward(params, grid if canonical else None, seghead, pair, weights)
            except ValueError:
                result.skipped += 1
                continue
            total += loss
            contr += info["contrastive"]
            used += 1
            if acc is None:
                acc = g
            else:
                for a, b in zip(acc.embedder.arrays, g.embedder.arrays):
                    a += b
                if canonical:
                    acc.grid += g.grid
                acc.seg_weight += g.seg_weight
                acc.seg_bias += g.seg_bias
        if used == 0:
            result.losses.append(float("nan"))
            result.contrastive.append(float("nan"))
            continue
        scale = 1.0 / used
        frac = cosine_lr(step + 1, cfg.steps, cfg.warmup_steps, 1.0)
        adamw_step(params.arrays, [a * scale for a in acc.embedder.arrays], emb_state,
                   cfg.lr_embedder * frac, cfg.weight_decay, emb_decay)
        adamw_step([seghead.weight, seghead.bias], [acc.seg_weight * scale, acc.seg_bias * scale], seg_state,
                   cfg.lr_seghead * frac, cfg.weight_decay, [True, False])
        if canonical:
            adamw_step([grid.raw], [acc.grid * scale], grid_state, cfg.lr_grid * frac, 0.0, [False])
            grid.refresh()
        result.losses.append(total * scale)
        result.contrastive.append(contr * scale)
        if callback is not None:
            callback(step, result)
    log.info("trained %d steps, %d pairs skipped", cfg.steps, result.skipped)
    return result


# ---------------------------------------------------------------------------
# checkpoint


def save_model(path, params: EmbedderParams, grid: gridmod.LatentGrid, seghead: SegmentationHead) -> None:
    """DMNET01: u32 F, H, out_dim, mode; f32 weights and biases layer by layer;
    the grid block; then u32 N_S, D and the segmentation head."""
    hidden = params.weights[0].shape[1]
    parts = [NET_MAGIC, struct.pack("<IIII", params.n_freq, hidden, params.out_dim, int(params.mode == DIRECT))]
    for w, b in zip(params.weights, params.biases):
        parts += [np.ascontiguousarray(w, dtype="<f4").tobytes(), np.ascontiguousarray(b, dtype="<f4").tobytes()]
    parts.append(gridmod.grid_to_bytes(grid))
    parts.append(struct.pack("<II", *seghead.weight.shape))
    parts += [np.ascontiguousarray(seghead.weight, dtype="<f4").tobytes(),
              np.ascontiguousarray(seghead.bias, dtype="<f4").tobytes()]
    Path(path).write_bytes(b"".join(parts))


def load_model(path):
    """Returns ``(params, grid, seghead)``."""
    data = Path(path).read_bytes()
    if data[:7] != NET_MAGIC:
        raise FormatError(path, 0, "bad magic, expected DMNET01")
    if len(data) < 23:
        raise FormatError(path, len(data), "truncated header")
    n_freq, hidden, out_dim, flag = struct.unpack_from("<IIII", data, 7)
    if flag not in (0, 1):
        raise FormatError(path, 19, f"unknown mode flag {flag}")
    pos = 23

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        if pos + 4 * n > len(data):
            raise FormatError(path, len(data), "truncated weights")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).astype(np.float64).reshape(shape)
        pos += 4 * n
        return arr

    dims = [input_dim(n_freq), hidden, hidden, out_dim]
    weights, biases = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        weights.append(take((a, b)))
        biases.append(take((b,)))
    grid, pos = gridmod.grid_from_bytes(data, path, pos)
    if pos + 8 > len(data):
        raise FormatError(path, len(data), "truncated segmentation head")
    n_s, d = struct.unpack_from("<II", data, pos)
    pos += 8
    seghead = SegmentationHead(take((n_s, d)), take((n_s,)))
    if pos != len(data):
        raise FormatError(path, pos, "trailing bytes after segmentation head")
    params = EmbedderParams(weights, biases, n_freq, DIRECT if flag else CANONICAL)
    return params, grid, seghead
