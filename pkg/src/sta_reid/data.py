"""Tracklets, clip sampling, P x K batches, and a synthetic benchmark generator.

A tracklet is an ordered frame sequence from one camera with one identity
label; clips are fixed-length samples drawn from it.  The synthetic
generator builds a desk-scale retrieval world: each identity is a bright
random texture, frames are translated/noised copies, cameras apply fixed
color gains, and frames are occluded with a flat dark band aligned to the
horizontal region grid so region-level attention has a signal to exploit.

On-disk layout: one subdirectory per tracklet named
``<identity>_<camera>_<tracklet_id>/`` holding ordered ``frame_####.png``
images or a single ``features.staf``, plus a ``manifest.csv`` with
``tracklet,split`` rows (split in train/query/gallery/distractor).
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .backbone import load_feature_maps, save_feature_maps
from .errors import ConfigurationError, FormatError

__all__ = [
    "Tracklet",
    "SynthConfig",
    "TrackletDataset",
    "sample_frames",
    "evenly_spaced_indices",
    "pk_batch",
    "synth_generate",
    "synth_probe_clip",
    "save_dataset",
    "load_dataset",
    "load_tracklet",
]

SPLITS = ("train", "query", "gallery", "distractor")


@dataclass
class Tracklet:
    """Ordered frame sequence of one person from one camera.

    Either ``frames`` (T, H, W, 3) in [0, 1] or precomputed ``features``
    (T, H, W, D) must be present.
    """

    identity: int
    camera: int
    tracklet_id: int
    frames: np.ndarray | None = None
    features: np.ndarray | None = None

    def __post_init__(self):
        if self.identity < 0 or self.camera < 0:
            raise ValueError(f"Tracklet: identity and camera must be nonnegative, got {self.identity}, {self.camera}")
        if self.frames is None and self.features is None:
            raise ValueError("Tracklet: needs frames or features")
        if len(self) < 1:
            raise ValueError("Tracklet: needs at least one frame")

    def __len__(self):
        data = self.frames if self.frames is not None else self.features
        return data.shape[0]

    @property
    def name(self):
        return f"{self.identity}_{self.camera}_{self.tracklet_id}"

    def select(self, indices):
        """New tracklet holding the given frame indices (order as given)."""
        indices = np.asarray(indices)
        return Tracklet(
            identity=self.identity,
            camera=self.camera,
            tracklet_id=self.tracklet_id,
            frames=None if self.frames is None else self.frames[indices],
            features=None if self.features is None else self.features[indices],
        )


@dataclass
class TrackletDataset:
    train: list = field(default_factory=list)
    query: list = field(default_factory=list)
    gallery: list = field(default_factory=list)
    distractor: list = field(default_factory=list)

    def split(self, name):
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}, expected one of {SPLITS}")
        return getattr(self, name)

    def all_tracklets(self):
        return self.train + self.query + self.gallery + self.distractor


def sample_frames(tracklet, n, rng):
    """Clip of n frames in temporal order, sampled uniformly at random.

    Without replacement when the tracklet has at least n frames, with
    replacement otherwise; indices are sorted so order is preserved.
    """
    if n < 1:
        raise ValueError(f"sample_frames: n must be >= 1, got {n}")
    length = len(tracklet)
    if length < 1:
        raise ValueError("sample_frames: empty tracklet")
    indices = np.sort(rng.choice(length, size=n, replace=length < n))
    return tracklet.select(indices)


def evenly_spaced_indices(length, n):
    """n non-decreasing indices spread evenly over [0, length)."""
    if length < 1 or n < 1:
        raise ValueError(f"evenly_spaced_indices: need length >= 1 and n >= 1, got {length}, {n}")
    return np.round(np.linspace(0, length - 1, n)).astype(int)


def pk_batch(dataset, p, k_per_id, rng):
    """Mini-batch of p identities with k_per_id tracklets each, shuffled.

    Identities with fewer than k_per_id tracklets are completed by
    resampling with replacement.  Returns (tracklets, identity labels).
    """
    by_id = {}
    for t in dataset:
        by_id.setdefault(t.identity, []).append(t)
    ids = sorted(by_id)
    if len(ids) < p:
        raise ValueError(f"pk_batch: need at least {p} identities, dataset has {len(ids)}")
    chosen = rng.choice(len(ids), size=p, replace=False)
    picked = []
    for idx in chosen:
        pool = by_id[ids[idx]]
        take = rng.choice(len(pool), size=k_per_id, replace=len(pool) < k_per_id)
        picked.extend(pool[j] for j in take)
    order = rng.permutation(len(picked))
    batch = [picked[j] for j in order]
    labels = np.array([t.identity for t in batch], dtype=np.int64)
    return batch, labels


@dataclass
class SynthConfig:
    """Synthetic occlusion benchmark parameters.

    The occluder is a flat band of ``occlusion_value`` gray covering
    ``occlusion_frac`` of the image height, placed on the aligned region
    grid.  Queries come from camera 0 and galleries from camera 1 of the
    held-out identities; distractor identities (if any) only appear in the
    gallery-side split.  Cameras differ by a fixed per-channel gain drawn
    within ``gain_spread`` of 1 plus an offset within ``offset_spread``.
    """

    num_identities: int = 20
    tracklets_per_identity: int = 4
    frames_per_tracklet: int = 8
    image_h: int = 64
    image_w: int = 32
    occlusion_prob: float = 0.3
    occlusion_frac: float = 0.25
    occlusion_value: float = 0.1
    shift_amplitude: int = 2
    noise_std: float = 0.05
    seed: int = 0
    num_cameras: int = 2
    train_fraction: float = 0.5
    num_distractors: int = 0
    gain_spread: float = 0.2
    offset_spread: float = 0.05

    def validate(self):
        for name in ("num_identities", "tracklets_per_identity", "frames_per_tracklet",
                     "image_h", "image_w", "num_cameras"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"SynthConfig: {name} must be >= 1, got {getattr(self, name)}")
        for name in ("occlusion_prob", "occlusion_frac", "train_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"SynthConfig: {name} must lie in [0, 1], got {getattr(self, name)}")
        if not 0.0 <= self.occlusion_value <= 1.0:
            raise ConfigurationError(f"SynthConfig: occlusion_value must lie in [0, 1], got {self.occlusion_value}")
        if self.shift_amplitude < 0 or self.noise_std < 0 or self.num_distractors < 0:
            raise ConfigurationError("SynthConfig: shift_amplitude, noise_std and num_distractors must be >= 0")
        if self.gain_spread < 0 or self.offset_spread < 0:
            raise ConfigurationError("SynthConfig: gain_spread and offset_spread must be >= 0")


PROTO_LOW, PROTO_HIGH = 0.3, 1.0


def _band_rows(cfg):
    rows = max(1, int(round(cfg.occlusion_frac * cfg.image_h)))
    return min(rows, cfg.image_h)


def _make_frame(proto, gain, offset, cfg, rng, force_band_start=None):
    dy, dx = rng.integers(-cfg.shift_amplitude, cfg.shift_amplitude + 1, size=2)
    frame = np.roll(proto, (dy, dx), axis=(0, 1))
    frame = frame * gain + offset
    if cfg.noise_std > 0:
        frame = frame + rng.normal(0.0, cfg.noise_std, size=frame.shape)
    band = _band_rows(cfg)
    if force_band_start is not None:
        frame[force_band_start:force_band_start + band] = cfg.occlusion_value
    elif cfg.occlusion_prob > 0 and rng.random() < cfg.occlusion_prob:
        slots = max(1, cfg.image_h // band)
        start = int(rng.integers(0, slots)) * band
        frame[start:start + band] = cfg.occlusion_value
    return np.clip(frame, 0.0, 1.0).astype(np.float32)


def _make_tracklet(identity, camera, tid, proto, gains, offsets, cfg, rng):
    frames = np.stack([
        _make_frame(proto, gains[camera], offsets[camera], cfg, rng)
        for _ in range(cfg.frames_per_tracklet)
    ])
    return Tracklet(identity=identity, camera=camera, tracklet_id=tid, frames=frames)


def synth_generate(cfg):
    """Deterministic synthetic dataset with train/query/gallery/distractor splits.

    The first ``train_fraction`` of the identities train; the rest are
    held out, their camera-0 tracklets forming the query split and all
    other cameras the gallery.  Extra distractor identities contribute
    gallery-side tracklets flagged as distractors.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    gains = rng.uniform(1.0 - cfg.gain_spread, 1.0 + cfg.gain_spread, size=(cfg.num_cameras, 3))
    offsets = rng.uniform(-cfg.offset_spread, cfg.offset_spread, size=(cfg.num_cameras, 3))

    num_train = int(round(cfg.num_identities * cfg.train_fraction))
    ds = TrackletDataset()
    tid = 0
    total_ids = cfg.num_identities + cfg.num_distractors
    for identity in range(total_ids):
        proto = rng.uniform(PROTO_LOW, PROTO_HIGH, size=(cfg.image_h, cfg.image_w, 3))
        for t in range(cfg.tracklets_per_identity):
            camera = t % cfg.num_cameras
            tracklet = _make_tracklet(identity, camera, tid, proto, gains, offsets, cfg, rng)
            tid += 1
            if identity >= cfg.num_identities:
                if camera != 0:
                    ds.distractor.append(tracklet)
            elif identity < num_train:
                ds.train.append(tracklet)
            elif camera == 0:
                ds.query.append(tracklet)
            else:
                ds.gallery.append(tracklet)
    return ds


def synth_probe_clip(cfg, rng, n_frames, occluded_frame, region, k_regions):
    """Clip whose single occluded frame has its band over one region.

    The band covers exactly the image rows that map to feature region
    ``region`` when the image height is split into ``k_regions`` equal
    parts.  Used for attention-localization probes.
    """
    if not 0 <= occluded_frame < n_frames:
        raise ValueError(f"occluded_frame {occluded_frame} out of range for {n_frames} frames")
    if not 0 <= region < k_regions:
        raise ValueError(f"region {region} out of range for {k_regions} regions")
    if cfg.image_h % k_regions != 0:
        raise ConfigurationError(f"image height {cfg.image_h} not divisible by {k_regions} regions")
    probe = SynthConfig(**{**cfg.__dict__, "occlusion_prob": 0.0,
                           "occlusion_frac": 1.0 / k_regions})
    gains = np.ones((1, 3))
    offsets = np.zeros((1, 3))
    proto = rng.uniform(PROTO_LOW, PROTO_HIGH, size=(probe.image_h, probe.image_w, 3))
    band = probe.image_h // k_regions
    frames = []
    for i in range(n_frames):
        start = region * band if i == occluded_frame else None
        frames.append(_make_frame(proto, gains[0], offsets[0], probe, rng, force_band_start=start))
    return Tracklet(identity=0, camera=0, tracklet_id=0, frames=np.stack(frames))


def save_dataset(root, dataset):
    """Write a dataset as per-tracklet directories plus manifest.csv."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for split in SPLITS:
        for t in dataset.split(split):
            tdir = root / t.name
            tdir.mkdir(parents=True, exist_ok=True)
            if t.frames is not None:
                for i, frame in enumerate(t.frames):
                    img = Image.fromarray((np.clip(frame, 0, 1) * 255).round().astype(np.uint8))
                    img.save(tdir / f"frame_{i:04d}.png")
            else:
                save_feature_maps(tdir / "features.staf", t.features)
            rows.append((t.name, split))
    with open(root / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tracklet", "split"])
        writer.writerows(rows)


def load_tracklet(tdir):
    """Read one tracklet directory (frame PNGs or features.staf)."""
    tdir = Path(tdir)
    try:
        identity, camera, tid = (int(part) for part in tdir.name.split("_"))
    except ValueError as exc:
        raise FormatError(f"{tdir}: directory name must be <identity>_<camera>_<tracklet_id>") from exc
    staf = tdir / "features.staf"
    if staf.exists():
        return Tracklet(identity=identity, camera=camera, tracklet_id=tid,
                        features=load_feature_maps(staf))
    paths = sorted(tdir.glob("frame_*.png"))
    if not paths:
        raise FormatError(f"{tdir}: no frame images and no features.staf")
    frames = np.stack([np.asarray(Image.open(p), dtype=np.float32) / 255.0 for p in paths])
    return Tracklet(identity=identity, camera=camera, tracklet_id=tid, frames=frames)


def load_dataset(root):
    """Read a dataset directory written by save_dataset."""
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise FormatError(f"{manifest}: manifest not found")
    ds = TrackletDataset()
    with open(manifest, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["tracklet", "split"]:
            raise FormatError(f"{manifest}: expected header tracklet,split, got {header}")
        for row in reader:
            if len(row) != 2:
                raise FormatError(f"{manifest}: malformed row {row}")
            name, split = row
            ds.split(split).append(load_tracklet(root / name))
    return ds
