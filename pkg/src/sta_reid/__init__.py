"""Spatial-temporal attention clip aggregation for video re-identification.

A desk-scale, numpy-backed implementation: parameter-free 2-D attention
scoring over horizontal regions of per-frame feature maps, inter-frame
regularization, discriminative/global feature fusion, metric plus
discriminative training, and CMC/mAP retrieval evaluation, all with
hand-derived gradients verified by finite differences.
"""

from .attention import attention_map, block_scores, inter_frame_reg, normalize_scores, split_blocks
from .backbone import (
    BackboneParams,
    init_backbone,
    load_feature_maps,
    save_feature_maps,
    tiny_backbone_forward,
)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, parse_config_text, save_config, validate_config
from .data import (
    SynthConfig,
    Tracklet,
    TrackletDataset,
    load_dataset,
    pk_batch,
    sample_frames,
    save_dataset,
    synth_generate,
)
from .errors import (
    ConfigurationError,
    DimensionError,
    EvaluationError,
    FormatError,
    VersionError,
)
from .fusion import argmax_selection, average_pool_baseline, clip_embedding, fuse, weighted_sum_aggregate
from .harness import dump_attention, embed_tracklet, evaluate, extract, train
from .losses import LabeledBatch, LossReport, batch_hard_triplet, softmax_xent, total_objective
from .metrics import (
    MetricsReport,
    RetrievalSet,
    cmc,
    evaluate_retrieval,
    load_embeddings,
    mean_ap,
    pairwise_distances,
    save_embeddings,
)
from .numerics import GradPair, conv2d, fully_connected, global_avg_pool, gradcheck, relu
from .optim import AdamState, LrSchedule, adam_init, adam_step, lr_at

__version__ = "0.1.0"
