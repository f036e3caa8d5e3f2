"""Training objectives: batch-hard triplet, identity cross-entropy, combination.

Both losses reduce by summation over anchors/rows by default (a mean
switch is provided).  Nondifferentiable selections (hardest positive and
negative, ties) are deterministic: ties resolve to the lowest row index
and are held constant during backward.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .numerics import GradPair

__all__ = [
    "LabeledBatch",
    "LossReport",
    "batch_hard_stats",
    "batch_hard_triplet",
    "softmax_xent",
    "total_objective",
    "make_loss_report",
]


@dataclass(frozen=True)
class LabeledBatch:
    """One training mini-batch: embeddings, identity labels, classifier logits.

    ``labels`` are class indices; ``logits`` may be None when only the
    metric loss is used.
    """

    embeddings: np.ndarray
    labels: np.ndarray
    logits: np.ndarray | None = None

    def __post_init__(self):
        emb = np.asarray(self.embeddings)
        labels = np.asarray(self.labels)
        if emb.ndim != 2:
            raise DimensionError(f"LabeledBatch: embeddings must have rank 2, got rank {emb.ndim}")
        if labels.shape != (emb.shape[0],):
            raise DimensionError(
                f"LabeledBatch: labels shape {labels.shape} does not match batch size {emb.shape[0]}"
            )
        if self.logits is not None and np.asarray(self.logits).shape[0] != emb.shape[0]:
            raise DimensionError("LabeledBatch: logits row count does not match batch size")


@dataclass(frozen=True)
class LossReport:
    """Per-step loss bookkeeping; total = softmax + triplet + lam * reg."""

    l_triplet: float
    l_softmax: float
    reg: float
    total: float
    active_triplets: int


def make_loss_report(l_softmax, l_triplet, reg, lam, active_triplets=0):
    total = total_objective(l_softmax, l_triplet, reg, lam)
    return LossReport(
        l_triplet=float(l_triplet),
        l_softmax=float(l_softmax),
        reg=float(reg),
        total=total,
        active_triplets=int(active_triplets),
    )


def batch_hard_stats(batch, margin):
    """Hardest-positive/negative distances and the active-hinge mask.

    Returns (dist, hp_idx, hn_idx, terms, active) where ``terms`` is
    margin + hardest_positive - hardest_negative per anchor and ``active``
    marks strictly positive terms.  Any identity with fewer than two rows
    has no positive and raises ValueError.
    """
    emb = np.asarray(batch.embeddings)
    labels = np.asarray(batch.labels)
    _, counts = np.unique(labels, return_counts=True)
    if np.any(counts < 2):
        raise ValueError("batch_hard_triplet: every identity in the batch needs at least 2 rows")

    diff = emb[:, None, :] - emb[None, :, :]
    dist = np.sqrt(np.square(diff).sum(axis=2))
    same = labels[:, None] == labels[None, :]
    pos = np.where(same, dist, -np.inf)
    neg = np.where(same, np.inf, dist)
    hp_idx = np.argmax(pos, axis=1)
    hn_idx = np.argmin(neg, axis=1)
    rows = np.arange(emb.shape[0])
    terms = margin + dist[rows, hp_idx] - dist[rows, hn_idx]
    active = terms > 0
    return dist, hp_idx, hn_idx, terms, active


def batch_hard_triplet(batch, margin, reduction="sum"):
    """Batch-hard triplet loss over a P x K mini-batch.

    Per anchor: hinge of margin plus the largest same-identity distance
    minus the smallest different-identity distance, summed (or averaged)
    over all anchors.  Backward treats the hard selections as constant;
    zero-distance pairs contribute zero gradient.
    """
    if reduction not in ("sum", "mean"):
        raise ValueError(f"batch_hard_triplet: unknown reduction {reduction!r}")
    emb = np.asarray(batch.embeddings)
    dist, hp_idx, hn_idx, terms, active = batch_hard_stats(batch, margin)
    b = emb.shape[0]
    loss = terms[active].sum()
    if reduction == "mean":
        loss = loss / b

    def backward(dloss):
        # python-float scale keeps the gradient in the embeddings' dtype
        scale = float(dloss) / b if reduction == "mean" else float(dloss)
        demb = np.zeros_like(emb)
        rows = np.flatnonzero(active)
        for a in rows:
            p = hp_idx[a]
            n = hn_idx[a]
            dp = dist[a, p]
            if dp > 0:
                u = (emb[a] - emb[p]) / dp * scale
                demb[a] += u
                demb[p] -= u
            dn = dist[a, n]
            if dn > 0:
                v = (emb[a] - emb[n]) / dn * scale
                demb[a] -= v
                demb[n] += v
        return demb

    return GradPair(np.asarray(loss), backward)


def softmax_xent(batch, reduction="sum"):
    """Cross-entropy of softmax over identity logits, with max-subtraction.

    Summed over rows by default; backward yields the gradient w.r.t. the
    logits.
    """
    if reduction not in ("sum", "mean"):
        raise ValueError(f"softmax_xent: unknown reduction {reduction!r}")
    if batch.logits is None:
        raise ValueError("softmax_xent: batch has no logits")
    logits = np.asarray(batch.logits)
    labels = np.asarray(batch.labels)
    b, c = logits.shape
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"softmax_xent: labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logprob = shifted - logsumexp
    rows = np.arange(b)
    loss = -logprob[rows, labels].sum()
    if reduction == "mean":
        loss = loss / b

    def backward(dloss):
        # python-float scale keeps the gradient in the logits' dtype
        scale = float(dloss) / b if reduction == "mean" else float(dloss)
        dlogits = np.exp(logprob)
        dlogits[rows, labels] -= 1
        return dlogits * scale

    return GradPair(np.asarray(loss), backward)


def total_objective(l_softmax, l_triplet, reg, lam):
    """Combined objective: softmax + triplet + lam * regularizer."""
    if lam < 0:
        raise ValueError(f"total_objective: lam must be >= 0, got {lam}")
    parts = (float(l_softmax), float(l_triplet), float(reg))
    if not all(np.isfinite(parts)):
        raise ValueError(f"total_objective: non-finite loss component in {parts}")
    return parts[0] + parts[1] + lam * parts[2]
