"""Retrieval evaluation: pairwise distances, cross-camera CMC, and mAP.

Protocol per query: gallery items sharing both the query's identity and
camera are dropped, distractor items are dropped, remaining items are
ranked by ascending Euclidean distance with ties broken by gallery index,
and queries left without any same-identity item are skipped (and counted).

Embedding files (STAE): magic "STAE", little-endian u32 version (=1),
u32 count, u32 E, then per item u32 identity, u32 camera, u8 is_distractor
and E float32 values.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, FormatError, VersionError

__all__ = [
    "RetrievalSet",
    "MetricsReport",
    "pairwise_distances",
    "cmc",
    "mean_ap",
    "evaluate_retrieval",
    "save_embeddings",
    "load_embeddings",
]

STAE_MAGIC = b"STAE"
STAE_VERSION = 1
_STAE_HEADER = struct.Struct("<4sIII")
_STAE_ITEM = struct.Struct("<IIB")

DEFAULT_RANKS = (1, 5, 10, 20)


@dataclass
class RetrievalSet:
    """Query and gallery embeddings with identity/camera metadata."""

    query: np.ndarray
    query_ids: np.ndarray
    query_cams: np.ndarray
    gallery: np.ndarray
    gallery_ids: np.ndarray
    gallery_cams: np.ndarray
    gallery_distractor: np.ndarray | None = None

    def __post_init__(self):
        self.query = np.asarray(self.query)
        self.gallery = np.asarray(self.gallery)
        if self.query.ndim != 2 or self.gallery.ndim != 2:
            raise DimensionError("RetrievalSet: embeddings must have rank 2")
        if self.query.shape[0] and self.gallery.shape[0] and self.query.shape[1] != self.gallery.shape[1]:
            raise DimensionError(
                f"RetrievalSet: query width {self.query.shape[1]} != gallery width {self.gallery.shape[1]}"
            )
        if self.gallery_distractor is None:
            self.gallery_distractor = np.zeros(self.gallery.shape[0], dtype=bool)
        self.query_ids = np.asarray(self.query_ids)
        self.query_cams = np.asarray(self.query_cams)
        self.gallery_ids = np.asarray(self.gallery_ids)
        self.gallery_cams = np.asarray(self.gallery_cams)
        self.gallery_distractor = np.asarray(self.gallery_distractor, dtype=bool)


@dataclass
class MetricsReport:
    """Rank accuracies, mAP, and query bookkeeping for one evaluation."""

    rank_accuracy: dict
    map_score: float
    num_evaluated: int
    num_skipped: int
    cmc_curve: tuple = field(default=())

    def lines(self):
        out = [f"rank{r}={acc:.6f}" for r, acc in sorted(self.rank_accuracy.items())]
        out.append(f"map={self.map_score:.6f}")
        out.append(f"evaluated={self.num_evaluated}")
        out.append(f"skipped={self.num_skipped}")
        return out


def pairwise_distances(query, gallery):
    """Euclidean distance matrix between query rows and gallery rows."""
    q = np.asarray(query)
    g = np.asarray(gallery)
    if q.ndim != 2 or g.ndim != 2:
        raise DimensionError("pairwise_distances: inputs must have rank 2")
    if q.shape[0] and g.shape[0] and q.shape[1] != g.shape[1]:
        raise DimensionError(
            f"pairwise_distances: embedding width mismatch, {q.shape[1]} vs {g.shape[1]}"
        )
    diff = q[:, None, :] - g[None, :, :]
    return np.sqrt(np.square(diff).sum(axis=2))


def _ranked_match_lists(dist, meta):
    """Per query: boolean match vector over the kept gallery, rank order.

    Yields (matches, skipped) where matches is None when the query has no
    valid match after filtering.
    """
    dist = np.asarray(dist)
    for qi in range(dist.shape[0]):
        keep = ~((meta.gallery_ids == meta.query_ids[qi]) & (meta.gallery_cams == meta.query_cams[qi]))
        keep &= ~meta.gallery_distractor
        kept_ids = meta.gallery_ids[keep]
        if kept_ids.size == 0 or not np.any(kept_ids == meta.query_ids[qi]):
            yield None
            continue
        order = np.argsort(dist[qi, keep], kind="stable")
        yield kept_ids[order] == meta.query_ids[qi]


def cmc(dist, meta, ranks=DEFAULT_RANKS):
    """Rank-r retrieval accuracies over the evaluated (non-skipped) queries.

    Returns ({rank: accuracy}, num_evaluated, num_skipped).  Requested
    ranks must not exceed the gallery size.
    """
    ranks = tuple(int(r) for r in ranks)
    num_gallery = np.asarray(meta.gallery).shape[0]
    for r in ranks:
        if r < 1 or r > num_gallery:
            raise ValueError(f"cmc: rank {r} outside [1, {num_gallery}]")
    hits = {r: 0 for r in ranks}
    evaluated = 0
    skipped = 0
    for matches in _ranked_match_lists(dist, meta):
        if matches is None:
            skipped += 1
            continue
        evaluated += 1
        first = int(np.argmax(matches))  # matches has at least one True
        for r in ranks:
            if first < r:
                hits[r] += 1
    if evaluated == 0:
        return {r: 0.0 for r in ranks}, 0, skipped
    return {r: hits[r] / evaluated for r in ranks}, evaluated, skipped


def mean_ap(dist, meta):
    """Mean average precision over the evaluated queries.

    Per query, AP is the mean over ground-truth positions of the precision
    at that position; filtering and skipping follow cmc.
    """
    ap_values = []
    for matches in _ranked_match_lists(dist, meta):
        if matches is None:
            continue
        positions = np.flatnonzero(matches) + 1
        precisions = np.arange(1, positions.size + 1) / positions
        ap_values.append(precisions.mean())
    if not ap_values:
        return 0.0
    return float(np.mean(ap_values))


def evaluate_retrieval(meta, ranks=DEFAULT_RANKS, normalize=False):
    """Full retrieval report for a RetrievalSet.

    Ranks are clipped to the gallery size; with ``normalize`` embeddings
    are scaled to unit length before distances.  An empty query set yields
    an all-zero report with num_evaluated 0.
    """
    query, gallery = meta.query, meta.gallery
    if normalize:
        query = _unit_rows(query)
        gallery = _unit_rows(gallery)
        meta = RetrievalSet(query, meta.query_ids, meta.query_cams,
                            gallery, meta.gallery_ids, meta.gallery_cams,
                            meta.gallery_distractor)
    usable = [r for r in ranks if 1 <= r <= gallery.shape[0]]
    if query.shape[0] == 0 or not usable:
        return MetricsReport({r: 0.0 for r in ranks}, 0.0, 0, 0)
    dist = pairwise_distances(query, gallery)
    accuracy, evaluated, skipped = cmc(dist, meta, usable)
    curve_ranks = range(1, min(20, gallery.shape[0]) + 1)
    curve, _, _ = cmc(dist, meta, curve_ranks)
    return MetricsReport(
        rank_accuracy=accuracy,
        map_score=mean_ap(dist, meta),
        num_evaluated=evaluated,
        num_skipped=skipped,
        cmc_curve=tuple(sorted(curve.items())),
    )


def _unit_rows(x):
    x = np.asarray(x)
    norms = np.sqrt(np.square(x).sum(axis=1, keepdims=True))
    return x / np.where(norms == 0, 1, norms)


def save_embeddings(path, embeddings, identities, cameras, distractor=None):
    """Write embeddings with metadata as a STAE file."""
    emb = np.ascontiguousarray(np.asarray(embeddings), dtype=np.float32)
    if emb.ndim != 2:
        raise DimensionError(f"save_embeddings: embeddings must have rank 2, got rank {emb.ndim}")
    count, width = emb.shape
    identities = np.asarray(identities)
    cameras = np.asarray(cameras)
    if distractor is None:
        distractor = np.zeros(count, dtype=bool)
    distractor = np.asarray(distractor, dtype=bool)
    if not (identities.shape == cameras.shape == distractor.shape == (count,)):
        raise DimensionError("save_embeddings: metadata length must match embedding count")
    with open(path, "wb") as fh:
        fh.write(_STAE_HEADER.pack(STAE_MAGIC, STAE_VERSION, count, width))
        for i in range(count):
            fh.write(_STAE_ITEM.pack(int(identities[i]), int(cameras[i]), int(distractor[i])))
            fh.write(emb[i].tobytes())


def load_embeddings(path):
    """Read a STAE file; returns (embeddings, identities, cameras, distractor)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _STAE_HEADER.size:
        raise FormatError(f"{path}: truncated header, file ends at byte {len(blob)} of {_STAE_HEADER.size}")
    magic, version, count, width = _STAE_HEADER.unpack_from(blob, 0)
    if magic != STAE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0, expected {STAE_MAGIC!r}")
    if version != STAE_VERSION:
        raise VersionError(f"{path}: unsupported version {version} at byte 4")
    emb = np.empty((count, width), dtype=np.float32)
    identities = np.empty(count, dtype=np.int64)
    cameras = np.empty(count, dtype=np.int64)
    distractor = np.empty(count, dtype=bool)
    offset = _STAE_HEADER.size
    item_bytes = _STAE_ITEM.size + 4 * width
    for i in range(count):
        if offset + item_bytes > len(blob):
            raise FormatError(f"{path}: item {i} truncated at byte {len(blob)}")
        identities[i], cameras[i], flag = _STAE_ITEM.unpack_from(blob, offset)
        distractor[i] = bool(flag)
        offset += _STAE_ITEM.size
        emb[i] = np.frombuffer(blob, dtype="<f4", count=width, offset=offset)
        offset += 4 * width
    return emb, identities, cameras, distractor
