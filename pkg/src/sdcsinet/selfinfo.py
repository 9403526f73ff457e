"""Self-information domain transform.

Per-pixel self-information over the 9-pixel neighborhood (replicate padding
at borders), a fixed non-trainable mapping convolution, per-frame-per-channel
quantile thresholding into binary index masks, and the trainable
extract -> Hadamard gate -> restore chain. The mask is a constant of the
forward pass: no gradient flows through the threshold or into the mapping
kernel.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import ParameterSet, Tensor, conv3d, mul, reshape, transpose, uniform_fan_in
from .tensor import _conv_forward  # raw-array conv, used for the frozen mapping layer

FEATURE_CHANNELS = 64

_LOG2_NORM = math.log2(9.0 * math.sqrt(2.0 * math.pi))

_selfinfo_calls = 0


def selfinfo_call_count() -> int:
    """How many times the pixel-entropy computation ran (test instrumentation)."""
    return _selfinfo_calls


def self_information_pixel(patch) -> float:
    """Self-information in bits of the center of a 3x3 patch (center included)."""
    p = np.asarray(patch, dtype=np.float64)
    if p.shape != (3, 3):
        raise DimensionError(f"patch must be 3x3, got {p.shape}")
    d = p[1, 1] - p
    return float(_LOG2_NORM - np.log2(np.exp(-0.5 * d * d).sum()))


def selfinfo_matrix(values) -> np.ndarray:
    """Per-pixel self-information over the last two axes, channels independent."""
    global _selfinfo_calls
    _selfinfo_calls += 1
    v = np.asarray(values, dtype=np.float64)
    if v.ndim < 2:
        raise DimensionError(f"need at least 2 axes, got shape {v.shape}")
    h, w = v.shape[-2:]
    padded = np.pad(v, [(0, 0)] * (v.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
    acc = np.zeros_like(v)
    for di in range(3):
        for dj in range(3):
            diff = v - padded[..., di:di + h, dj:dj + w]
            acc += np.exp(-0.5 * diff * diff)
    return _LOG2_NORM - np.log2(acc)


@dataclass
class SfParams:
    """Kernels of the transform; `mapping` is frozen at construction."""

    extract: Tensor   # (64, 2, 1, 3, 3), trainable
    restore: Tensor   # (2, 64, 1, 3, 3), trainable
    mapping: Tensor   # (64, 2, 3, 3), non-trainable
    quantile: float = 0.5

    @classmethod
    def initialize(cls, rng: np.random.Generator, quantile: float = 0.5) -> "SfParams":
        extract = Tensor(uniform_fan_in(rng, (FEATURE_CHANNELS, 2, 1, 3, 3), 2 * 9),
                         requires_grad=True)
        restore = Tensor(uniform_fan_in(rng, (2, FEATURE_CHANNELS, 1, 3, 3),
                                        FEATURE_CHANNELS * 9),
                         requires_grad=True)
        mapping = Tensor(uniform_fan_in(rng, (FEATURE_CHANNELS, 2, 3, 3), 2 * 9))
        return cls(extract, restore, mapping, quantile)

    def register(self, params: ParameterSet, prefix: str = "sf."):
        params.add(prefix + "extract", self.extract)
        params.add(prefix + "restore", self.restore)

    def mapping_checksum(self) -> str:
        return hashlib.sha256(self.mapping.data.tobytes()).hexdigest()


def mapping_layer(info, params: SfParams) -> np.ndarray:
    """Frozen conv of the self-information matrix, (..., 2, H, W) -> (..., 64, H, W)."""
    v = np.asarray(info, dtype=np.float64)
    if v.ndim < 3 or v.shape[-3] != 2:
        raise DimensionError(f"expected (..., 2, H, W), got {v.shape}")
    lead = v.shape[:-3]
    batch = v.reshape((-1,) + v.shape[-3:])
    out, _ = _conv_forward(batch, params.mapping.data, (1, 1), (1, 1), 2)
    return out.reshape(lead + out.shape[1:])


def index_mask(mapped, quantile: float) -> np.ndarray:
    """Binary mask keeping entries at or above the per-frame-per-channel quantile.

    An all-equal channel keeps everything (d >= Y holds at every position).
    """
    if not 0.0 < quantile < 1.0:
        raise ConfigError(f"threshold quantile must lie in (0, 1), got {quantile}")
    d = np.asarray(mapped, dtype=np.float64)
    if d.ndim < 3:
        raise DimensionError(f"expected (..., C, H, W), got {d.shape}")
    thr = np.quantile(d, quantile, axis=(-2, -1), keepdims=True)
    return (d >= thr).astype(np.float64)


def stack_masks(masks) -> np.ndarray:
    """Stack per-frame masks along a new leading time axis, order preserved."""
    arrs = [np.asarray(m, dtype=np.float64) for m in masks]
    if not arrs:
        raise DimensionError("need at least one mask")
    if any(a.shape != arrs[0].shape for a in arrs):
        raise DimensionError(f"mask shapes differ: {[a.shape for a in arrs]}")
    return np.stack(arrs, axis=0)


def compute_masks(values, params: SfParams) -> np.ndarray:
    """Index masks for normalized CSI (..., T, 2, H, W) -> (..., T, 64, H, W)."""
    info = selfinfo_matrix(values)
    return index_mask(mapping_layer(info, params), params.quantile)


def extract_features(x, params: SfParams) -> Tensor:
    """Feature extraction conv in layout (B, 2, T, H, W) -> (B, 64, T, H, W)."""
    return conv3d(x, params.extract, padding=(0, 1, 1))


def gate_and_restore(features, mask_conv, params: SfParams) -> Tensor:
    """Hadamard-gate features with a constant mask, then restore to 2 channels."""
    gated = mul(features, Tensor(mask_conv))
    return conv3d(gated, params.restore, padding=(0, 1, 1))


def sf_forward(x, params: SfParams, mask: np.ndarray | None = None) -> Tensor:
    """Full transform of (T, 2, H, W) or (B, T, 2, H, W); shape preserved.

    `mask` may carry precomputed index masks in the input layout
    (.., T, 64, H, W); otherwise they are derived from x itself.
    """
    squeeze = x.ndim == 4
    if squeeze:
        x = reshape(x, (1,) + x.shape)
        if mask is not None:
            mask = mask[None]
    if x.ndim != 5 or x.shape[2] != 2:
        raise DimensionError(f"expected (B, T, 2, H, W), got {x.shape}")
    if mask is None:
        mask = compute_masks(x.data, params)
    if mask.shape != (x.shape[0], x.shape[1], FEATURE_CHANNELS, *x.shape[3:]):
        raise DimensionError(f"mask shape {mask.shape} does not match input {x.shape}")
    xc = transpose(x, (0, 2, 1, 3, 4))
    feats = extract_features(xc, params)
    restored = gate_and_restore(feats, np.moveaxis(mask, 2, 1), params)
    out = transpose(restored, (0, 2, 1, 3, 4))
    return reshape(out, out.shape[1:]) if squeeze else out
