"""Run configuration and the flat key=value config file format.

Every RunConfig field is a config key.  Files hold one ``key = value``
pair per line; blank lines and ``#`` comments are ignored.  Booleans are
``true``/``false``, the decay schedule is ``epoch:rate`` pairs joined by
commas (empty for a constant rate), and backbone widths/strides are
comma-separated integers.
"""

import dataclasses
from dataclasses import dataclass

from .errors import ConfigurationError
from .optim import LrSchedule

__all__ = [
    "RunConfig",
    "parse_config_text",
    "load_config",
    "config_text",
    "save_config",
    "validate_config",
    "lr_schedule",
    "backbone_plan",
    "parse_synth_config",
]

AGGREGATORS = ("sta", "sta_no_fusion", "average", "none")
FROBENIUS = ("sqrt", "squared")
REDUCTIONS = ("sum", "mean")
EVAL_FRAMES = ("even", "random")


@dataclass
class RunConfig:
    """All knobs of one training/evaluation run."""

    n_frames: int = 4
    k_regions: int = 4
    p: int = 16
    k_per_id: int = 4
    margin: float = 0.3
    lam: float = 0.1
    frobenius: str = "sqrt"
    reduction: str = "sum"
    aggregator: str = "sta"
    use_triplet: bool = True
    use_reg: bool = True
    embed_dim: int = 128
    feat_channels: int = 32
    backbone_widths: str = "16,32"
    backbone_strides: str = "2,2,1"
    epochs: int = 30
    steps_per_epoch: int = 0
    lr: float = 3e-4
    lr_decay: str = "8:3e-05,15:3e-06"
    weight_decay: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    flip_prob: float = 0.5
    seed: int = 0
    eval_frames: str = "even"
    eval_repeats: int = 1
    normalize_embeddings: bool = False
    test_n: int = 0
    data_dir: str = ""
    out_dir: str = "runs"


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(text, target_type, key):
    text = text.strip()
    if target_type is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigurationError(f"config key {key!r}: expected a boolean, got {text!r}")
    try:
        return target_type(text)
    except ValueError as exc:
        raise ConfigurationError(f"config key {key!r}: cannot parse {text!r} as {target_type.__name__}") from exc


def _parse_pairs(text, cls):
    defaults = cls()
    types = {f.name: type(getattr(defaults, f.name)) for f in dataclasses.fields(cls)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in types:
            raise ConfigurationError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(value, types[key], key)
    return cls(**values)


def parse_config_text(text):
    """RunConfig from key=value text; unknown keys and bad values raise."""
    return _parse_pairs(text, RunConfig)


def parse_synth_config(text):
    """SynthConfig from key=value text (same format as run configs)."""
    from .data import SynthConfig

    return _parse_pairs(text, SynthConfig)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def config_text(cfg):
    """Canonical key=value rendering covering every field, in field order."""
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in dataclasses.fields(cfg)]
    return "\n".join(lines) + "\n"


def save_config(path, cfg):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_text(cfg))


def _parse_int_list(text, key):
    if not text.strip():
        raise ConfigurationError(f"config key {key!r}: needs at least one integer")
    try:
        return [int(part) for part in text.split(",")]
    except ValueError as exc:
        raise ConfigurationError(f"config key {key!r}: cannot parse {text!r} as integers") from exc


def backbone_plan(cfg):
    """(widths, strides) of the backbone; the last layer is feat_channels wide."""
    widths = _parse_int_list(cfg.backbone_widths, "backbone_widths") if cfg.backbone_widths.strip() else []
    widths = widths + [cfg.feat_channels]
    strides = _parse_int_list(cfg.backbone_strides, "backbone_strides")
    if len(strides) != len(widths):
        raise ConfigurationError(
            f"backbone_strides has {len(strides)} entries but the stack has {len(widths)} layers "
            f"(backbone_widths plus the final feat_channels layer)"
        )
    return widths, strides


def lr_schedule(cfg):
    """LrSchedule from the lr / lr_decay fields."""
    steps = []
    text = cfg.lr_decay.strip()
    if text:
        for part in text.split(","):
            if ":" not in part:
                raise ConfigurationError(f"lr_decay entry {part!r} must look like epoch:rate")
            epoch, _, rate = part.partition(":")
            try:
                steps.append((int(epoch.strip()), float(rate.strip())))
            except ValueError as exc:
                raise ConfigurationError(f"lr_decay entry {part!r} must look like epoch:rate") from exc
    return LrSchedule(base=cfg.lr, steps=tuple(steps))


def validate_config(cfg):
    """Check field ranges and cross-field constraints; raise on the first error."""
    if cfg.aggregator not in AGGREGATORS:
        raise ConfigurationError(f"aggregator must be one of {AGGREGATORS}, got {cfg.aggregator!r}")
    if cfg.frobenius not in FROBENIUS:
        raise ConfigurationError(f"frobenius must be one of {FROBENIUS}, got {cfg.frobenius!r}")
    if cfg.reduction not in REDUCTIONS:
        raise ConfigurationError(f"reduction must be one of {REDUCTIONS}, got {cfg.reduction!r}")
    if cfg.eval_frames not in EVAL_FRAMES:
        raise ConfigurationError(f"eval_frames must be one of {EVAL_FRAMES}, got {cfg.eval_frames!r}")
    for name in ("n_frames", "k_regions", "p", "k_per_id", "embed_dim", "feat_channels",
                 "epochs", "eval_repeats"):
        if getattr(cfg, name) < 1:
            raise ConfigurationError(f"{name} must be >= 1, got {getattr(cfg, name)}")
    for name in ("margin", "lam", "weight_decay", "flip_prob", "steps_per_epoch", "test_n"):
        if getattr(cfg, name) < 0:
            raise ConfigurationError(f"{name} must be >= 0, got {getattr(cfg, name)}")
    if not 0.0 <= cfg.flip_prob <= 1.0:
        raise ConfigurationError(f"flip_prob must lie in [0, 1], got {cfg.flip_prob}")
    if cfg.use_reg and cfg.n_frames < 2:
        raise ConfigurationError("use_reg needs n_frames >= 2 (a frame pair must exist)")
    if cfg.use_triplet and (cfg.p < 2 or cfg.k_per_id < 2):
        raise ConfigurationError(
            f"use_triplet needs p >= 2 and k_per_id >= 2, got p={cfg.p}, k_per_id={cfg.k_per_id}"
        )
    backbone_plan(cfg)
    lr_schedule(cfg)
    return cfg
