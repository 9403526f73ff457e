"""Synthetic multipath channel sequences and the angular-delay CSI transform.

A parameterized sparse multipath generator stands in for measured indoor
channel data: each frame is a sum of paths with fixed integer delay taps,
ULA steering vectors, and per-path complex gains that evolve across frames
as a Gauss-Markov process. Frequency-antenna frames map to the angular-delay
domain via unitary DFTs, are truncated to the first N_c delay rows, split
into real/imaginary channels, and normalized to [0, 1] with one global
symmetric affine map (0 lands exactly on 0.5).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError, DimensionError

DATASET_MAGIC = b"SDCD"
DATASET_VERSION = 1


@dataclass(frozen=True)
class MultipathParams:
    """Configuration of the synthetic channel generator."""

    num_paths: int = 6
    aod_range: tuple[float, float] = (-math.pi / 9, math.pi / 9)
    delay_taps: tuple[int, ...] | None = None  # default: 0..num_paths-1
    gain_profile: tuple[float, ...] | None = None  # default: exp decay, sum 1
    temporal_rho: float = 0.9
    seed: int = 0

    def resolved_taps(self) -> np.ndarray:
        if self.delay_taps is None:
            return np.arange(self.num_paths)
        return np.asarray(self.delay_taps, dtype=np.int64)

    def resolved_gains(self) -> np.ndarray:
        if self.gain_profile is None:
            prof = np.exp(-0.5 * np.arange(self.num_paths))
        else:
            prof = np.asarray(self.gain_profile, dtype=np.float64)
        return prof / prof.sum()

    def validate(self):
        if self.num_paths < 1:
            raise ConfigError("multipath generator needs at least one path")
        if not 0.0 <= self.temporal_rho <= 1.0:
            raise ConfigError(f"temporal_rho must lie in [0, 1], got {self.temporal_rho}")
        taps = self.resolved_taps()
        if taps.shape != (self.num_paths,) or (taps < 0).any():
            raise ConfigError(f"delay taps {taps.tolist()} invalid for {self.num_paths} paths")
        gains = self.resolved_gains()
        if gains.shape != (self.num_paths,) or (gains <= 0).any():
            raise ConfigError("gain profile must be positive, one entry per path")


@dataclass
class RawChannelSequence:
    """T complex frequency-antenna frames, shape (T, N_s, N_t)."""

    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.complex128)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise DimensionError(f"channel sequence must be (T, N_s, N_t), got {self.frames.shape}")


@dataclass
class AngularDelayCsi:
    """Normalized real CSI sequence (T, 2, N_c, N_t) plus its affine record."""

    values: np.ndarray
    offset: float | None
    scale: float | None

    def denormalized(self) -> np.ndarray:
        if self.offset is None or self.scale is None:
            raise ValueError("normalization record missing")
        return denormalize(self.values, self.offset, self.scale)


def generate_sequence(params: MultipathParams, num_frames: int, n_s: int,
                      n_t: int) -> RawChannelSequence:
    """Draw one temporally correlated multipath sequence, deterministic in seed."""
    params.validate()
    if n_t < 1 or n_s < 1:
        raise DimensionError(f"need N_s, N_t >= 1, got {n_s}, {n_t}")
    taps = params.resolved_taps()
    if (taps >= n_s).any():
        raise ConfigError(f"delay taps {taps.tolist()} must stay below N_s={n_s}")
    var = params.resolved_gains()
    rho = params.temporal_rho
    rng = np.random.default_rng(params.seed)
    aod = rng.uniform(params.aod_range[0], params.aod_range[1], params.num_paths)
    # columns: per-path delay signature over subcarriers / ULA steering over antennas
    delay_sig = np.exp(2j * np.pi * np.outer(np.arange(n_s), taps) / n_s)
    steer = np.exp(-1j * np.pi * np.outer(np.arange(n_t), np.sin(aod)))
    amp = np.sqrt(var / 2.0)
    gains = amp * (rng.standard_normal(params.num_paths)
                   + 1j * rng.standard_normal(params.num_paths))
    frames = np.empty((num_frames, n_s, n_t), dtype=np.complex128)
    innov = math.sqrt(max(0.0, 1.0 - rho * rho))
    for t in range(num_frames):
        if t > 0:
            w = amp * (rng.standard_normal(params.num_paths)
                       + 1j * rng.standard_normal(params.num_paths))
            gains = rho * gains + innov * w
        frames[t] = (delay_sig * gains) @ steer.T
    return RawChannelSequence(frames)


# ---------------------------------------------------------------------------
# angular-delay transform


def angular_delay_real(raw: RawChannelSequence, n_c: int) -> np.ndarray:
    """Unitary 2D-DFT, truncation to the first n_c delay rows, real/imag split."""
    frames = raw.frames
    n_s = frames.shape[1]
    if n_c > n_s:
        raise DimensionError(f"N_c={n_c} exceeds N_s={n_s}")
    if n_c < 1:
        raise DimensionError(f"N_c must be >= 1, got {n_c}")
    ha = np.fft.fft(frames, axis=1, norm="ortho")
    ha = np.fft.fft(ha, axis=2, norm="ortho")
    hf = ha[:, :n_c, :]
    return np.stack([hf.real, hf.imag], axis=1)


def symmetric_norm_record(values: np.ndarray) -> tuple[float, float]:
    """Affine record mapping [-amp, amp] to [0, 1]; all-zero data maps to 0.5."""
    amp = float(np.abs(values).max())
    if amp == 0.0:
        return -0.5, 1.0
    return -amp, 2.0 * amp


def normalize(values: np.ndarray, offset: float, scale: float) -> np.ndarray:
    return (values - offset) / scale


def denormalize(values: np.ndarray, offset: float, scale: float) -> np.ndarray:
    return values * scale + offset


def to_angular_delay(raw: RawChannelSequence, n_c: int) -> AngularDelayCsi:
    """Transform one sequence and normalize it with its own symmetric record."""
    vals = angular_delay_real(raw, n_c)
    offset, scale = symmetric_norm_record(vals)
    return AngularDelayCsi(normalize(vals, offset, scale), offset, scale)


def from_angular_delay(csi: AngularDelayCsi, n_s: int) -> RawChannelSequence:
    """Invert to_angular_delay: denormalize, zero-pad delay rows, inverse DFTs."""
    vals = csi.denormalized()
    if vals.ndim != 4 or vals.shape[1] != 2:
        raise DimensionError(f"expected (T, 2, N_c, N_t), got {vals.shape}")
    n_c = vals.shape[2]
    if n_c > n_s:
        raise DimensionError(f"N_c={n_c} exceeds N_s={n_s}")
    hf = vals[:, 0] + 1j * vals[:, 1]
    padded = np.zeros((vals.shape[0], n_s, vals.shape[3]), dtype=np.complex128)
    padded[:, :n_c, :] = hf
    h = np.fft.ifft(padded, axis=1, norm="ortho")
    h = np.fft.ifft(h, axis=2, norm="ortho")
    return RawChannelSequence(h)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class CsiDataset:
    """Normalized CSI samples (num_samples, T, 2, N_c, N_t) with one shared record."""

    values: np.ndarray
    offset: float
    scale: float

    @property
    def num_samples(self) -> int:
        return self.values.shape[0]

    @property
    def frame_shape(self) -> tuple[int, ...]:
        return self.values.shape[1:]

    def sample(self, i: int) -> AngularDelayCsi:
        return AngularDelayCsi(self.values[i], self.offset, self.scale)

    def denormalized(self) -> np.ndarray:
        return denormalize(self.values, self.offset, self.scale)

    def save(self, path):
        s, t, two, n_c, n_t = self.values.shape
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sI", DATASET_MAGIC, DATASET_VERSION))
            fh.write(struct.pack("<5I", s, t, two, n_c, n_t))
            fh.write(self.values.astype("<f4").tobytes())
            fh.write(struct.pack("<2d", self.offset, self.scale))

    @classmethod
    def load(cls, path) -> "CsiDataset":
        with open(path, "rb") as fh:
            blob = fh.read()
        try:
            magic, version = struct.unpack_from("<4sI", blob, 0)
        except struct.error as exc:
            raise DataError(f"{path}: truncated dataset header") from exc
        if magic != DATASET_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}, expected {DATASET_MAGIC!r}")
        if version != DATASET_VERSION:
            raise DataError(f"{path}: unsupported dataset version {version}")
        dims = struct.unpack_from("<5I", blob, 8)
        if dims[2] != 2:
            raise DataError(f"{path}: channel axis must be 2, got {dims[2]}")
        count = int(np.prod(dims))
        body = 28
        expect = body + 4 * count + 16
        if len(blob) != expect:
            raise DataError(f"{path}: size {len(blob)} != expected {expect}")
        values = np.frombuffer(blob, dtype="<f4", count=count, offset=body)
        offset, scale = struct.unpack_from("<2d", blob, body + 4 * count)
        return cls(values.astype(np.float64).reshape(dims), offset, scale)


def build_dataset(params: MultipathParams, num_samples: int, num_frames: int,
                  n_c: int, n_t: int, n_s: int) -> CsiDataset:
    """Generate samples with per-sample seeds base+i and one joint norm record."""
    params.validate()
    if num_samples < 1:
        raise ConfigError("dataset needs at least one sample")
    taps = params.resolved_taps()
    if (taps >= n_c).any():
        raise ConfigError(
            f"delay taps {taps.tolist()} must stay below N_c={n_c} so truncation is lossless"
        )
    samples = np.empty((num_samples, num_frames, 2, n_c, n_t))
    for i in range(num_samples):
        raw = generate_sequence(replace(params, seed=params.seed + i),
                                num_frames, n_s, n_t)
        samples[i] = angular_delay_real(raw, n_c)
    offset, scale = symmetric_norm_record(samples)
    return CsiDataset(normalize(samples, offset, scale), offset, scale)
