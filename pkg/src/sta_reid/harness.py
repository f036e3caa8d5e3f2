"""End-to-end training and evaluation driver.

One training step: sample a P x K batch of tracklets, draw an N-frame clip
from each, extract per-frame feature maps, run the attention chain, fuse
(or run an ablation aggregator), project to clip embeddings, score both
losses plus the inter-frame penalty, and apply one Adam update.  All
randomness flows from a single seeded generator so runs are bit-for-bit
reproducible, and resuming from a checkpoint continues the exact
trajectory.

Ablation arms are pure configuration: ``aggregator`` selects full fusion,
weighted-sum only, frame averaging, or the frame-by-frame baseline, and
``use_triplet`` / ``use_reg`` toggle the loss terms.
"""

from dataclasses import dataclass, replace

import numpy as np

from .attention import attention_map, block_scores, inter_frame_reg, normalize_scores
from .backbone import BackboneParams, init_backbone, output_shape, tiny_backbone_forward
from .checkpoint import Checkpoint, rng_from_text, rng_state_text
from .config import backbone_plan, lr_schedule, validate_config
from .data import evenly_spaced_indices, pk_batch, sample_frames
from .errors import ConfigurationError, VersionError
from .fusion import average_pool_baseline, clip_embedding, fuse, weighted_sum_aggregate
from .losses import (
    LabeledBatch,
    batch_hard_stats,
    batch_hard_triplet,
    make_loss_report,
    softmax_xent,
)
from .metrics import RetrievalSet, evaluate_retrieval, save_embeddings
from .numerics import linear
from .optim import adam_init, adam_step, lr_at

__all__ = [
    "EpochStats",
    "TrainResult",
    "init_params",
    "clip_batch_loss",
    "embed_clip",
    "embed_tracklet",
    "train",
    "evaluate",
    "extract",
    "dump_attention",
]


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    total: float
    softmax: float
    triplet: float
    reg: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list


def init_params(cfg, image_hw, num_classes, rng):
    """Fresh float32 parameter dict for the given config and input size."""
    widths, strides = backbone_plan(cfg)
    bb = init_backbone(3, widths, strides, rng)
    feat_hw = output_shape(image_hw, bb)
    if feat_hw[0] % cfg.k_regions != 0:
        raise ConfigurationError(
            f"feature map height {feat_hw[0]} (from image height {image_hw[0]}) "
            f"is not divisible by k_regions={cfg.k_regions}"
        )
    params = {}
    for i, (k, b) in enumerate(zip(bb.kernels, bb.biases)):
        params[f"backbone.k{i}"] = k
        params[f"backbone.b{i}"] = b
    head_in = 2 * cfg.feat_channels
    params["head.w"] = rng.normal(0.0, np.sqrt(1.0 / head_in), size=(head_in, cfg.embed_dim)).astype(np.float32)
    params["head.b"] = np.zeros(cfg.embed_dim, dtype=np.float32)
    params["cls.w"] = rng.normal(0.0, np.sqrt(1.0 / cfg.embed_dim), size=(cfg.embed_dim, num_classes)).astype(np.float32)
    params["cls.b"] = np.zeros(num_classes, dtype=np.float32)
    return params


def _backbone_from_params(cfg, params):
    widths, strides = backbone_plan(cfg)
    kernels = [params[f"backbone.k{i}"] for i in range(len(widths))]
    biases = [params[f"backbone.b{i}"] for i in range(len(widths))]
    return BackboneParams(kernels=kernels, biases=biases, strides=list(strides))


def check_checkpoint_compat(cfg, params):
    """Raise VersionError when checkpoint tensors do not fit the config."""
    widths, strides = backbone_plan(cfg)
    expected_names = {f"backbone.k{i}" for i in range(len(widths))}
    expected_names |= {f"backbone.b{i}" for i in range(len(widths))}
    expected_names |= {"head.w", "head.b", "cls.w", "cls.b"}
    if set(params) != expected_names:
        raise VersionError(
            f"checkpoint tensors {sorted(params)} do not match the configured model {sorted(expected_names)}"
        )
    head_in = 2 * cfg.feat_channels
    if params["head.w"].shape != (head_in, cfg.embed_dim):
        raise VersionError(
            f"checkpoint head shape {params['head.w'].shape} incompatible with "
            f"feat_channels={cfg.feat_channels}, embed_dim={cfg.embed_dim}"
        )
    if params["cls.w"].shape[0] != cfg.embed_dim:
        raise VersionError(
            f"checkpoint classifier expects embeddings of width {params['cls.w'].shape[0]}, "
            f"config has embed_dim={cfg.embed_dim}"
        )


def _aggregate(fmaps, cfg, need_attention):
    """Attention chain plus the configured aggregator for one clip.

    Returns (agg_pair, chain) where chain is (att, raw, scores) GradPairs,
    or None when the arm does not need them.
    """
    chain = None
    if cfg.aggregator in ("sta", "sta_no_fusion") or need_attention:
        att = attention_map(fmaps)
        if cfg.aggregator in ("sta", "sta_no_fusion"):
            raw = block_scores(att.value, cfg.k_regions)
            scores = normalize_scores(raw.value)
            chain = (att, raw, scores)
        else:
            chain = (att, None, None)
    if cfg.aggregator == "sta":
        agg = fuse(fmaps, chain[2].value)
    elif cfg.aggregator == "sta_no_fusion":
        agg = weighted_sum_aggregate(fmaps, chain[2].value)
    elif cfg.aggregator == "average":
        agg = average_pool_baseline(fmaps)
    else:
        raise ConfigurationError(f"unknown aggregator {cfg.aggregator!r}")
    return agg, chain


def _chain_backward(chain, dscores, datt_extra):
    """Gradient into the clip feature maps through the attention chain."""
    att, raw, scores = chain
    datt = 0
    if dscores is not None:
        draw = scores.backward(dscores)
        datt = raw.backward(draw)
    if datt_extra is not None:
        datt = datt + datt_extra
    return att.backward(datt)


def clip_batch_loss(fmaps, labels, params, cfg, reg_pairs=None):
    """Losses and gradients for one batch of per-clip feature maps.

    ``fmaps`` is (B, N, H, W, D); ``labels`` are class indices; ``params``
    must hold head.w/head.b/cls.w/cls.b.  ``reg_pairs`` gives the frame
    pair per clip for the inter-frame penalty when cfg.use_reg.  Returns
    (LossReport, grads) with grads keyed fmaps/head.w/head.b/cls.w/cls.b.
    """
    fmaps = np.asarray(fmaps)
    b = fmaps.shape[0]
    if cfg.use_reg:
        if reg_pairs is None or len(reg_pairs) != b:
            raise ConfigurationError("use_reg needs one frame pair per clip")

    frame_level = cfg.aggregator == "none"
    squared = cfg.frobenius == "squared"

    agg_pairs, emb_pairs, chains, reg_grad_pairs = [], [], [], []
    embeddings = []
    for i in range(b):
        if frame_level:
            clip_aggs, clip_embs = [], []
            for n in range(fmaps.shape[1]):
                agg = average_pool_baseline(fmaps[i, n][None])
                emb = clip_embedding(agg.value, params["head.w"], params["head.b"])
                clip_aggs.append(agg)
                clip_embs.append(emb)
                embeddings.append(emb.value)
            agg_pairs.append(clip_aggs)
            emb_pairs.append(clip_embs)
            chains.append((attention_map(fmaps[i]), None, None) if cfg.use_reg else None)
        else:
            agg, chain = _aggregate(fmaps[i], cfg, need_attention=cfg.use_reg)
            emb = clip_embedding(agg.value, params["head.w"], params["head.b"])
            agg_pairs.append(agg)
            emb_pairs.append(emb)
            chains.append(chain)
            embeddings.append(emb.value)
        if cfg.use_reg:
            reg_grad_pairs.append(inter_frame_reg(chains[i][0].value, reg_pairs[i], squared=squared))

    x = np.stack(embeddings)
    row_labels = np.repeat(np.asarray(labels), fmaps.shape[1]) if frame_level else np.asarray(labels)
    logits = linear(x, params["cls.w"], params["cls.b"])
    batch = LabeledBatch(embeddings=x, labels=row_labels, logits=logits.value)

    l_soft = softmax_xent(batch, reduction=cfg.reduction)
    active = 0
    l_trip = None
    if cfg.use_triplet:
        l_trip = batch_hard_triplet(batch, cfg.margin, reduction=cfg.reduction)
        active = int(batch_hard_stats(batch, cfg.margin)[4].sum())

    reg_values = [float(p.value) for p in reg_grad_pairs]
    if cfg.use_reg:
        reg_total = float(np.sum(reg_values)) if cfg.reduction == "sum" else float(np.mean(reg_values))
    else:
        reg_total = 0.0
    lam = cfg.lam if cfg.use_reg else 0.0
    report = make_loss_report(
        l_softmax=float(l_soft.value),
        l_triplet=float(l_trip.value) if l_trip is not None else 0.0,
        reg=reg_total,
        lam=lam,
        active_triplets=active,
    )

    # Backward pass: accumulate embedding gradients from both losses, then
    # push each clip's gradient through its aggregator and attention chain.
    dlogits = l_soft.backward(1.0)
    dx, dcls_w, dcls_b = logits.backward(dlogits)
    if l_trip is not None:
        dx = dx + l_trip.backward(1.0)

    dtype = fmaps.dtype
    dfmaps = np.zeros_like(fmaps)
    dhead_w = np.zeros_like(params["head.w"])
    dhead_b = np.zeros_like(params["head.b"])
    reg_scale = lam if cfg.reduction == "sum" else (lam / b if b else 0.0)
    for i in range(b):
        datt_extra = None
        if cfg.use_reg and reg_scale != 0.0:
            datt_extra = reg_grad_pairs[i].backward(np.asarray(reg_scale, dtype=dtype))
        if frame_level:
            for n in range(fmaps.shape[1]):
                dagg, dw, db = emb_pairs[i][n].backward(dx[i * fmaps.shape[1] + n])
                dhead_w += dw
                dhead_b += db
                dfmaps[i, n] += agg_pairs[i][n].backward(dagg)[0]
            if datt_extra is not None:
                dfmaps[i] += chains[i][0].backward(datt_extra)
        else:
            dagg, dw, db = emb_pairs[i].backward(dx[i])
            dhead_w += dw
            dhead_b += db
            if cfg.aggregator in ("sta", "sta_no_fusion"):
                dclip, dscores = agg_pairs[i].backward(dagg)
                dfmaps[i] += dclip
                dfmaps[i] += _chain_backward(chains[i], dscores, datt_extra)
            else:
                dfmaps[i] += agg_pairs[i].backward(dagg)
                if datt_extra is not None:
                    dfmaps[i] += chains[i][0].backward(datt_extra)

    grads = {
        "fmaps": dfmaps,
        "head.w": dhead_w,
        "head.b": dhead_b,
        "cls.w": dcls_w,
        "cls.b": dcls_b,
    }
    return report, grads


def embed_clip(fmaps, params, cfg):
    """Embedding of one clip's feature maps, forward only."""
    if cfg.aggregator == "none":
        embs = [
            clip_embedding(average_pool_baseline(fmaps[n][None]).value,
                           params["head.w"], params["head.b"]).value
            for n in range(fmaps.shape[0])
        ]
        return np.mean(np.stack(embs), axis=0)
    agg, _ = _aggregate(np.asarray(fmaps), cfg, need_attention=False)
    return clip_embedding(agg.value, params["head.w"], params["head.b"]).value


def _clip_feature_maps(clip, cfg, params):
    """Feature maps for a sampled clip: backbone pass or stored features."""
    if clip.features is not None:
        fm = np.asarray(clip.features, dtype=np.float32)
        if fm.shape[3] != cfg.feat_channels:
            raise ConfigurationError(
                f"stored features have {fm.shape[3]} channels, config expects {cfg.feat_channels}"
            )
        return fm, None
    bb = _backbone_from_params(cfg, params)
    pair = tiny_backbone_forward(np.asarray(clip.frames, dtype=np.float32), bb)
    return pair.value, pair


def _clip_indices(tracklet, n, cfg, rng):
    if cfg.eval_frames == "even":
        return evenly_spaced_indices(len(tracklet), n)
    return np.sort(rng.choice(len(tracklet), size=n, replace=len(tracklet) < n))


def embed_tracklet(tracklet, params, cfg, n, rng=None):
    """Test-time embedding of a whole tracklet.

    Uses one evenly-spaced clip by default; with eval_frames=random the
    embeddings of eval_repeats sampled clips are averaged.
    """
    if cfg.eval_frames == "random" and rng is None:
        raise ConfigurationError("eval_frames=random needs an RNG")
    repeats = cfg.eval_repeats if cfg.eval_frames == "random" else 1
    out = []
    for _ in range(repeats):
        clip = tracklet.select(_clip_indices(tracklet, n, cfg, rng))
        fmaps, _ = _clip_feature_maps(clip, cfg, params)
        out.append(embed_clip(fmaps, params, cfg))
    return np.mean(np.stack(out), axis=0)


def _draw_pair(n, rng):
    i = int(rng.integers(n))
    j = int(rng.integers(n - 1))
    if j >= i:
        j += 1
    return i, j


def _train_image_hw(dataset):
    for t in dataset.train:
        if t.frames is not None:
            return t.frames.shape[1:3]
    return None


def train(cfg, dataset=None, resume=None):
    """Train per the config; deterministic under the seed.

    Returns a TrainResult with the final checkpoint and the per-epoch loss
    history.  ``resume`` continues a previous checkpoint's trajectory
    exactly (same dataset and config required).
    """
    validate_config(cfg)
    if dataset is None:
        from .data import load_dataset

        if not cfg.data_dir:
            raise ConfigurationError("train: no dataset given and data_dir is empty")
        dataset = load_dataset(cfg.data_dir)
    if not dataset.train:
        raise ConfigurationError("train: dataset has no training tracklets")

    classes = sorted({t.identity for t in dataset.train})
    class_index = {identity: i for i, identity in enumerate(classes)}
    if len(classes) < cfg.p:
        raise ConfigurationError(f"train: p={cfg.p} but only {len(classes)} training identities")

    image_hw = _train_image_hw(dataset)
    if resume is not None:
        params = dict(resume.params)
        check_checkpoint_compat(cfg, params)
        opt = resume.opt
        rng = rng_from_text(resume.rng_state)
        start_epoch = resume.epoch
    else:
        rng = np.random.default_rng(cfg.seed)
        # features-only datasets never drive the backbone; size it nominally
        # so the head and classifier shapes still exist.
        params = init_params(cfg, image_hw or _nominal_image_hw(cfg), len(classes), rng)
        opt = adam_init(params, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                        weight_decay=cfg.weight_decay)
        start_epoch = 0

    schedule = lr_schedule(cfg)
    batch_size = cfg.p * cfg.k_per_id
    steps = cfg.steps_per_epoch or max(1, len(dataset.train) // batch_size)
    history = []

    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_at(schedule, epoch)
        epoch_reports = []
        for _ in range(steps):
            batch, ids = pk_batch(dataset.train, cfg.p, cfg.k_per_id, rng)
            labels = np.array([class_index[i] for i in ids], dtype=np.int64)
            reg_pairs, bb_pairs, values = [], [], []
            for t in batch:
                clip = sample_frames(t, cfg.n_frames, rng)
                if clip.frames is not None and cfg.flip_prob > 0 and rng.random() < cfg.flip_prob:
                    clip = replace(clip, frames=clip.frames[:, :, ::-1, :])
                fm, pair = _clip_feature_maps(clip, cfg, params)
                if fm.shape[1] % cfg.k_regions != 0:
                    raise ConfigurationError(
                        f"feature height {fm.shape[1]} not divisible by k_regions={cfg.k_regions}"
                    )
                values.append(fm)
                bb_pairs.append(pair)
                reg_pairs.append(_draw_pair(cfg.n_frames, rng) if cfg.use_reg else None)
            fmaps = np.stack(values)
            report, grads = clip_batch_loss(fmaps, labels, params, cfg,
                                            reg_pairs if cfg.use_reg else None)
            param_grads = {name: np.zeros_like(p) for name, p in params.items()}
            param_grads["head.w"] = grads["head.w"]
            param_grads["head.b"] = grads["head.b"]
            param_grads["cls.w"] = grads["cls.w"]
            param_grads["cls.b"] = grads["cls.b"]
            for i, pair in enumerate(bb_pairs):
                if pair is None:
                    continue
                _, dks, dbs = pair.backward(grads["fmaps"][i])
                for layer, (dk, db) in enumerate(zip(dks, dbs)):
                    param_grads[f"backbone.k{layer}"] += dk
                    param_grads[f"backbone.b{layer}"] += db
            params, opt = adam_step(params, param_grads, opt, lr)
            epoch_reports.append(report)

        history.append(EpochStats(
            epoch=epoch,
            total=float(np.mean([r.total for r in epoch_reports])),
            softmax=float(np.mean([r.l_softmax for r in epoch_reports])),
            triplet=float(np.mean([r.l_triplet for r in epoch_reports])),
            reg=float(np.mean([r.reg for r in epoch_reports])),
        ))

    ckpt = Checkpoint(params=params, opt=opt, cfg=cfg, epoch=cfg.epochs,
                      rng_state=rng_state_text(rng))
    return TrainResult(checkpoint=ckpt, history=history)


def _nominal_image_hw(cfg):
    """Image size whose backbone output is the classic 16 x 8 map."""
    _, strides = backbone_plan(cfg)
    scale = int(np.prod(strides))
    return 16 * scale, 8 * scale


def _split_sets(dataset, split):
    if split == "test":
        queries = dataset.query
        gallery = [(t, False) for t in dataset.gallery] + [(t, True) for t in dataset.distractor]
    elif split == "train":
        queries = [t for t in dataset.train if t.camera == 0]
        gallery = [(t, False) for t in dataset.train if t.camera != 0]
    else:
        raise ConfigurationError(f"unknown evaluation split {split!r}")
    return queries, gallery


def evaluate(cfg, ckpt, dataset=None, split="test", test_n=None):
    """Embed the query/gallery tracklets and compute the retrieval report.

    ``test_n`` (or cfg.test_n) overrides the clip length used at test
    time; the attention chain is length-agnostic so any N >= 1 works with
    a checkpoint trained at another length.
    """
    validate_config(cfg)
    check_checkpoint_compat(cfg, ckpt.params)
    if dataset is None:
        from .data import load_dataset

        if not cfg.data_dir:
            raise ConfigurationError("evaluate: no dataset given and data_dir is empty")
        dataset = load_dataset(cfg.data_dir)
    n = int(test_n) if test_n else (cfg.test_n or cfg.n_frames)
    rng = np.random.default_rng([cfg.seed, 1])
    queries, gallery = _split_sets(dataset, split)

    def embed_all(tracklets):
        if not tracklets:
            return np.zeros((0, cfg.embed_dim), dtype=np.float32)
        return np.stack([embed_tracklet(t, ckpt.params, cfg, n, rng) for t in tracklets])

    meta = RetrievalSet(
        query=embed_all(queries),
        query_ids=np.array([t.identity for t in queries], dtype=np.int64),
        query_cams=np.array([t.camera for t in queries], dtype=np.int64),
        gallery=embed_all([t for t, _ in gallery]),
        gallery_ids=np.array([t.identity for t, _ in gallery], dtype=np.int64),
        gallery_cams=np.array([t.camera for t, _ in gallery], dtype=np.int64),
        gallery_distractor=np.array([flag for _, flag in gallery], dtype=bool),
    )
    return evaluate_retrieval(meta, normalize=cfg.normalize_embeddings)


def extract(cfg, ckpt, tracklets, out_path, distractor_flags=None, test_n=None):
    """Embed tracklets and write them as a STAE embeddings file."""
    validate_config(cfg)
    check_checkpoint_compat(cfg, ckpt.params)
    n = int(test_n) if test_n else (cfg.test_n or cfg.n_frames)
    rng = np.random.default_rng([cfg.seed, 1])
    emb = np.stack([embed_tracklet(t, ckpt.params, cfg, n, rng) for t in tracklets]) \
        if tracklets else np.zeros((0, cfg.embed_dim), dtype=np.float32)
    identities = np.array([t.identity for t in tracklets], dtype=np.int64)
    cameras = np.array([t.camera for t in tracklets], dtype=np.int64)
    if distractor_flags is None:
        distractor_flags = np.zeros(len(tracklets), dtype=bool)
    save_embeddings(out_path, emb, identities, cameras, distractor_flags)
    return emb


def dump_attention(cfg, ckpt, tracklet, test_n=None):
    """Score matrix (N, K) of one tracklet's evenly-spaced clip."""
    validate_config(cfg)
    check_checkpoint_compat(cfg, ckpt.params)
    n = int(test_n) if test_n else (cfg.test_n or cfg.n_frames)
    clip = tracklet.select(evenly_spaced_indices(len(tracklet), n))
    fmaps, _ = _clip_feature_maps(clip, cfg, ckpt.params)
    att = attention_map(fmaps)
    raw = block_scores(att.value, cfg.k_regions)
    return normalize_scores(raw.value).value
