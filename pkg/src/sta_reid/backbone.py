"""Per-frame feature extraction: a tiny conv net and the STAF file format.

The trainable path is a small stack of conv/ReLU layers standing in for a
large pretrained extractor; the final ReLU guarantees the nonnegative
feature-map contract the attention scoring relies on.  Stride-2 layers use
4x4 kernels and stride-1 layers 3x3 kernels, both with pad 1, so spatial
extents divide exactly.

The alternative path loads precomputed feature maps from a STAF file:
magic "STAF", little-endian u32 version (=1), u32 N, H, W, D, then
N*H*W*D float32 values in row-major (n, h, w, d) order.  Negative values
in loaded files are clamped to 0 with a warning carrying the count.
"""

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, FormatError, VersionError
from .numerics import GradPair, conv2d_batch, relu

__all__ = [
    "BackboneParams",
    "kernel_size_for_stride",
    "init_backbone",
    "output_shape",
    "tiny_backbone_forward",
    "save_feature_maps",
    "load_feature_maps",
]

STAF_MAGIC = b"STAF"
STAF_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


@dataclass
class BackboneParams:
    """Per-layer kernels and biases plus the stride descriptor."""

    kernels: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    strides: list = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.kernels) == len(self.biases) == len(self.strides)):
            raise ConfigurationError(
                f"BackboneParams: {len(self.kernels)} kernels, {len(self.biases)} biases and "
                f"{len(self.strides)} strides must all agree"
            )
        for i, (k, s) in enumerate(zip(self.kernels, self.strides)):
            expected = kernel_size_for_stride(s)
            if k.shape[0] != expected or k.shape[1] != expected:
                raise ConfigurationError(
                    f"BackboneParams: layer {i} with stride {s} needs a {expected}x{expected} kernel, "
                    f"got {k.shape[0]}x{k.shape[1]}"
                )


def kernel_size_for_stride(stride):
    """4x4 kernels for stride-2 layers, 3x3 otherwise (pad 1 in both cases)."""
    if stride not in (1, 2):
        raise ConfigurationError(f"backbone strides must be 1 or 2, got {stride}")
    return 4 if stride == 2 else 3


def init_backbone(in_channels, widths, strides, rng, dtype=np.float32):
    """He-normal kernels and zero biases for a widths/strides layer stack."""
    if len(widths) != len(strides):
        raise ConfigurationError(
            f"backbone widths {list(widths)} and strides {list(strides)} must have equal length"
        )
    if not widths:
        raise ConfigurationError("backbone needs at least one layer")
    kernels, biases = [], []
    c_in = in_channels
    for width, stride in zip(widths, strides):
        k = kernel_size_for_stride(stride)
        std = np.sqrt(2.0 / (k * k * c_in))
        kernels.append(rng.normal(0.0, std, size=(k, k, c_in, width)).astype(dtype))
        biases.append(np.zeros(width, dtype=dtype))
        c_in = width
    return BackboneParams(kernels=kernels, biases=biases, strides=list(strides))


def output_shape(image_hw, params):
    """Spatial shape of the feature maps for a given input image size.

    Raises ConfigurationError when any layer would not divide exactly.
    """
    h, w = image_hw
    for i, stride in enumerate(params.strides):
        k = kernel_size_for_stride(stride)
        for name, size in (("height", h), ("width", w)):
            if (size + 2 - k) % stride != 0 or (size + 2 - k) // stride + 1 < 1:
                raise ConfigurationError(
                    f"backbone layer {i}: input {name} {size} incompatible with stride {stride}"
                )
        h = (h + 2 - k) // stride + 1
        w = (w + 2 - k) // stride + 1
    return h, w


def tiny_backbone_forward(frames, params):
    """Feature maps for a stack of frames, (N, H_img, W_img, C) -> (N, H, W, D).

    Every layer is conv (pad 1) followed by ReLU, so outputs are
    elementwise nonnegative.  Backward maps the upstream (N, H, W, D)
    gradient to (d_frames, d_kernels, d_biases).
    """
    x = np.asarray(frames)
    if x.ndim != 4:
        raise ConfigurationError(f"backbone: frames must have rank 4 (n, h, w, c), got rank {x.ndim}")
    if x.shape[3] != params.kernels[0].shape[2]:
        raise ConfigurationError(
            f"backbone: frames have {x.shape[3]} channels but the first layer expects "
            f"{params.kernels[0].shape[2]}"
        )
    output_shape(x.shape[1:3], params)

    steps = []
    for kernel, bias, stride in zip(params.kernels, params.biases, params.strides):
        conv = conv2d_batch(x, kernel, bias, stride=stride, pad=1)
        act = relu(conv.value)
        steps.append((conv, act))
        x = act.value

    def backward(dout):
        dx = np.asarray(dout)
        dkernels = [None] * len(steps)
        dbiases = [None] * len(steps)
        for i in range(len(steps) - 1, -1, -1):
            conv, act = steps[i]
            dx = act.backward(dx)
            dx, dkernels[i], dbiases[i] = conv.backward(dx)
        return dx, dkernels, dbiases

    return GradPair(x, backward)


def save_feature_maps(path, maps):
    """Write an (N, H, W, D) feature-map stack as a STAF file."""
    m = np.ascontiguousarray(np.asarray(maps), dtype=np.float32)
    if m.ndim != 4:
        raise ConfigurationError(f"save_feature_maps: maps must have rank 4, got rank {m.ndim}")
    header = _HEADER.pack(STAF_MAGIC, STAF_VERSION, *m.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(m.tobytes())


def load_feature_maps(path):
    """Read a STAF file into a float32 (N, H, W, D) feature-map stack.

    Negative payload values are clamped to 0 and reported through a
    RuntimeWarning carrying the clamp count.  Malformed files raise
    FormatError naming the byte offset of the problem.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header, file ends at byte {len(blob)} of {_HEADER.size}")
    magic, version, n, h, w, d = _HEADER.unpack_from(blob, 0)
    if magic != STAF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0, expected {STAF_MAGIC!r}")
    if version != STAF_VERSION:
        raise VersionError(f"{path}: unsupported version {version} at byte 4")
    for offset, name, size in ((8, "N", n), (12, "H", h), (16, "W", w), (20, "D", d)):
        if size < 1:
            raise FormatError(f"{path}: dimension {name}={size} at byte {offset} must be >= 1")
    expected = n * h * w * d * 4
    payload = blob[_HEADER.size:]
    if len(payload) < expected:
        raise FormatError(
            f"{path}: payload truncated at byte {_HEADER.size + len(payload)}, "
            f"expected {_HEADER.size + expected} bytes total"
        )
    maps = np.frombuffer(payload[:expected], dtype="<f4").reshape(n, h, w, d).copy()
    negative = int(np.count_nonzero(maps < 0))
    if negative:
        warnings.warn(
            f"{path}: clamped {negative} negative feature values to 0",
            RuntimeWarning,
            stacklevel=2,
        )
        np.maximum(maps, 0, out=maps)
    return maps
