"""Clip-level feature aggregation.

Given per-frame feature maps (N, H, W, D) and a score matrix (N, K), the
fused clip map is the depth concatenation of two H x W x D maps:

  * a discriminative map: per region, a verbatim copy of the block from
    the frame with the highest score for that region (ties to the lowest
    frame index);
  * a global map: per region, the score-weighted sum of that region
    across frames (column weights are nonnegative and sum to 1).

Ablation aggregators (frame averaging, weighted sum only) produce the
same H x W x 2D layout so one projection head serves every arm.  The clip
embedding is global average pooling followed by an affine projection.
"""

import numpy as np

from .errors import ConfigurationError, DimensionError
from .numerics import GradPair, fully_connected, global_avg_pool

__all__ = [
    "argmax_selection",
    "fuse",
    "weighted_sum_aggregate",
    "average_pool_baseline",
    "clip_embedding",
]


def argmax_selection(scores):
    """Per column, the index of the maximum score; ties go to the lowest frame."""
    return np.argmax(np.asarray(scores), axis=0)


def _check_fuse_shapes(f, s):
    if f.ndim != 4:
        raise DimensionError(f"fuse: feature maps must have rank 4 (n, h, w, d), got rank {f.ndim}")
    if s.ndim != 2:
        raise DimensionError(f"fuse: score matrix must have rank 2 (n, k), got rank {s.ndim}")
    if s.shape[0] != f.shape[0]:
        raise DimensionError(
            f"fuse: frame axis mismatch, {f.shape[0]} feature frames vs {s.shape[0]} score rows"
        )
    k = s.shape[1]
    if f.shape[1] % k != 0:
        raise ConfigurationError(f"fuse: map height {f.shape[1]} not divisible by {k} regions")
    return k, f.shape[1] // k


def fuse(fmaps, scores):
    """Fused clip map: discriminative (argmax) and global (weighted) halves.

    Backward routes the global-half gradient to both inputs and the
    discriminative-half gradient only to the selected blocks, holding the
    selection constant.
    """
    f = np.asarray(fmaps)
    s = np.asarray(scores)
    k_regions, rows = _check_fuse_shapes(f, s)
    n, h, w, d = f.shape
    blocks = f.reshape(n, k_regions, rows, w, d)
    selected = argmax_selection(s)
    region_idx = np.arange(k_regions)
    picked = blocks[selected, region_idx]                      # (K, rows, W, D)
    weighted = np.einsum("nkrwd,nk->krwd", blocks, s)
    out = np.concatenate([picked.reshape(h, w, d), weighted.reshape(h, w, d)], axis=2)

    def backward(dout):
        dout = np.asarray(dout)
        dpicked = dout[:, :, :d].reshape(k_regions, rows, w, d)
        dweighted = dout[:, :, d:].reshape(k_regions, rows, w, d)
        dblocks = np.einsum("krwd,nk->nkrwd", dweighted, s)
        dblocks[selected, region_idx] += dpicked
        dscores = np.einsum("krwd,nkrwd->nk", dweighted, blocks)
        return dblocks.reshape(n, h, w, d), dscores

    return GradPair(out, backward)


def weighted_sum_aggregate(fmaps, scores):
    """Score-weighted map only, duplicated along depth to the fused layout."""
    f = np.asarray(fmaps)
    s = np.asarray(scores)
    k_regions, rows = _check_fuse_shapes(f, s)
    n, h, w, d = f.shape
    blocks = f.reshape(n, k_regions, rows, w, d)
    weighted = np.einsum("nkrwd,nk->krwd", blocks, s).reshape(h, w, d)
    out = np.concatenate([weighted, weighted], axis=2)

    def backward(dout):
        dout = np.asarray(dout)
        dweighted = (dout[:, :, :d] + dout[:, :, d:]).reshape(k_regions, rows, w, d)
        dblocks = np.einsum("krwd,nk->nkrwd", dweighted, s)
        dscores = np.einsum("krwd,nkrwd->nk", dweighted, blocks)
        return dblocks.reshape(n, h, w, d), dscores

    return GradPair(out, backward)


def average_pool_baseline(fmaps):
    """Frame-average map duplicated along depth to the fused layout."""
    f = np.asarray(fmaps)
    if f.ndim != 4:
        raise DimensionError(f"average_pool_baseline: feature maps must have rank 4, got rank {f.ndim}")
    n = f.shape[0]
    mean = f.mean(axis=0)
    out = np.concatenate([mean, mean], axis=2)
    d = f.shape[3]

    def backward(dout):
        dout = np.asarray(dout)
        dmean = (dout[:, :, :d] + dout[:, :, d:]) / n
        return np.broadcast_to(dmean, f.shape).copy()

    return GradPair(out, backward)


def clip_embedding(fused, weight, bias):
    """Clip embedding: global average pooling then an affine projection.

    No nonlinearity follows the projection; the identity classifier
    consumes the embedding separately during training.
    """
    fused = np.asarray(fused)
    weight = np.asarray(weight)
    if fused.ndim != 3:
        raise DimensionError(f"clip_embedding: fused map must have rank 3, got rank {fused.ndim}")
    if weight.ndim != 2 or weight.shape[0] != fused.shape[2]:
        raise DimensionError(
            f"clip_embedding: head input axis must match fused depth {fused.shape[2]}, "
            f"got weight shape {weight.shape}"
        )
    pooled = global_avg_pool(fused)
    projected = fully_connected(pooled.value, weight, bias)

    def backward(dembed):
        dpooled, dweight, dbias = projected.backward(dembed)
        return pooled.backward(dpooled), dweight, dbias

    return GradPair(projected.value, backward)
