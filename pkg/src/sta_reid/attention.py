"""Parameter-free spatial-temporal attention scoring.

Feature maps for one clip are a nonnegative (N, H, W, D) array, one
post-ReLU map per frame.  From them this module derives, with no learned
parameters:

  * attention maps (N, H, W): per-cell squared channel energy, normalized
    so every frame's map sums to 1;
  * raw block scores (N, K): mass of each of K horizontal row bands;
  * the score matrix (N, K): block scores normalized down each column, so
    every column sums to 1;
  * an inter-frame penalty: Frobenius distance between the attention maps
    of two frames of the same clip.

All ops return GradPairs so gradients can flow back into the backbone.
"""

import numpy as np

from .errors import ConfigurationError, DimensionError
from .numerics import GradPair

__all__ = [
    "attention_map",
    "split_blocks",
    "block_scores",
    "normalize_scores",
    "inter_frame_reg",
]


def attention_map(fmaps):
    """Per-frame attention maps from squared channel energy.

    Cell weight is the sum over channels of the squared feature value,
    divided by the frame's total.  A frame with zero total energy falls
    back to the exactly uniform map (and contributes zero gradient).
    """
    f = np.asarray(fmaps)
    if f.ndim != 4:
        raise DimensionError(f"attention_map: feature maps must have rank 4 (n, h, w, d), got rank {f.ndim}")
    _, h, w, _ = f.shape
    energy = np.square(f).sum(axis=3)
    total = energy.sum(axis=(1, 2), keepdims=True)
    zero = total[:, 0, 0] == 0
    safe = np.where(total == 0, 1, total)
    maps = energy / safe
    if zero.any():
        maps[zero] = 1.0 / (h * w)

    def backward(dmaps):
        dmaps = np.asarray(dmaps)
        inner = (dmaps * maps).sum(axis=(1, 2), keepdims=True)
        denergy = (dmaps - inner) / safe
        if zero.any():
            denergy = denergy.copy()
            denergy[zero] = 0
        return 2 * f * denergy[..., None]

    return GradPair(maps, backward)


def _check_regions(height, k_regions):
    if k_regions < 1:
        raise ConfigurationError(f"k_regions must be >= 1, got {k_regions}")
    if height % k_regions != 0:
        raise ConfigurationError(
            f"map height {height} is not divisible by k_regions={k_regions}; "
            f"choose a region count that divides the height"
        )
    return height // k_regions


def split_blocks(maps, k_regions):
    """Split each frame into k_regions equal horizontal row bands.

    Accepts (N, H, W) attention maps or (N, H, W, D) feature maps and
    returns, per frame, the list of K blocks (views into the input; treat
    them as read-only).
    """
    m = np.asarray(maps)
    if m.ndim not in (3, 4):
        raise DimensionError(f"split_blocks: input must have rank 3 or 4, got rank {m.ndim}")
    rows = _check_regions(m.shape[1], k_regions)
    return [[m[n, k * rows:(k + 1) * rows] for k in range(k_regions)] for n in range(m.shape[0])]


def block_scores(att, k_regions):
    """Raw per-region scores: the absolute mass of each horizontal block.

    For valid attention maps (nonnegative, each frame summing to 1) the
    scores of one frame sum to 1 as well.
    """
    a = np.asarray(att)
    if a.ndim != 3:
        raise DimensionError(f"block_scores: attention maps must have rank 3 (n, h, w), got rank {a.ndim}")
    n, h, w = a.shape
    rows = _check_regions(h, k_regions)
    blocks = a.reshape(n, k_regions, rows, w)
    scores = np.abs(blocks).sum(axis=(2, 3))

    def backward(dscores):
        dblocks = np.sign(blocks) * np.asarray(dscores)[:, :, None, None]
        return dblocks.reshape(n, h, w)

    return GradPair(scores, backward)


def normalize_scores(raw):
    """Normalize raw (N, K) scores down each column so columns sum to 1.

    An all-zero column falls back to the uniform 1/N column (zero gradient).
    """
    s = np.asarray(raw)
    if s.ndim != 2:
        raise DimensionError(f"normalize_scores: raw scores must have rank 2 (n, k), got rank {s.ndim}")
    if np.any(s < 0):
        raise ValueError("normalize_scores: raw scores must be nonnegative")
    n = s.shape[0]
    col = s.sum(axis=0, keepdims=True)
    zero = col[0] == 0
    safe = np.where(col == 0, 1, col)
    scores = s / safe
    if zero.any():
        scores[:, zero] = 1.0 / n

    def backward(dscores):
        dscores = np.asarray(dscores)
        inner = (dscores * scores).sum(axis=0, keepdims=True)
        draw = (dscores - inner) / safe
        if zero.any():
            draw = draw.copy()
            draw[:, zero] = 0
        return draw

    return GradPair(scores, backward)


def inter_frame_reg(att, pair, squared=False):
    """Frobenius distance between the attention maps of two frames.

    ``pair`` selects the two frame indices (chosen by the caller, normally
    at random from the harness RNG).  By default the value is the norm
    itself; ``squared=True`` selects the squared variant.  Backward returns
    the gradient w.r.t. the full (N, H, W) attention stack.
    """
    a = np.asarray(att)
    if a.ndim != 3:
        raise DimensionError(f"inter_frame_reg: attention maps must have rank 3 (n, h, w), got rank {a.ndim}")
    i, j = pair
    n = a.shape[0]
    if not (0 <= i < n and 0 <= j < n):
        raise ValueError(f"inter_frame_reg: frame pair {pair} out of range for {n} frames")
    if i == j:
        raise ValueError(f"inter_frame_reg: frame pair must be distinct, got {pair}")
    diff = a[i] - a[j]
    sq = np.square(diff).sum()

    if squared:
        def backward(dv):
            datt = np.zeros_like(a)
            datt[i] = 2 * diff * dv
            datt[j] = -datt[i]
            return datt

        return GradPair(sq, backward)

    value = np.sqrt(sq)

    def backward(dv):
        datt = np.zeros_like(a)
        if value > 0:
            datt[i] = diff / value * dv
            datt[j] = -datt[i]
        return datt

    return GradPair(value, backward)
