"""Lloyd-Max non-uniform scalar quantization for the feedback codeword path.

One shared scalar codebook is trained on a pool of codeword values: levels
start at sample quantiles, then thresholds (level midpoints) and levels (cell
conditional means) alternate until levels stop moving. Values exactly on a
threshold quantize into the upper cell.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

CODEBOOK_MAGIC = b"SDCQ"


@dataclass
class QuantizerCodebook:
    bits: int
    levels: np.ndarray  # ascending; may hold fewer than 2^bits after collapse
    distortion_history: list[float] = field(default_factory=list)

    @property
    def thresholds(self) -> np.ndarray:
        return 0.5 * (self.levels[:-1] + self.levels[1:])

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sII", CODEBOOK_MAGIC, self.bits, len(self.levels)))
            fh.write(np.asarray(self.levels, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "QuantizerCodebook":
        with open(path, "rb") as fh:
            blob = fh.read()
        try:
            magic, bits, count = struct.unpack_from("<4sII", blob, 0)
        except struct.error as exc:
            raise DataError(f"{path}: truncated codebook header") from exc
        if magic != CODEBOOK_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        if len(blob) != 12 + 8 * count:
            raise DataError(f"{path}: size {len(blob)} != expected {12 + 8 * count}")
        levels = np.frombuffer(blob, dtype="<f8", count=count, offset=12).copy()
        if count < 1 or np.any(np.diff(levels) < 0):
            raise DataError(f"{path}: levels must be ascending and non-empty")
        return cls(int(bits), levels)


def _cell_stats(samples, thresholds, n_levels):
    idx = np.searchsorted(thresholds, samples, side="right")
    counts = np.bincount(idx, minlength=n_levels)
    sums = np.bincount(idx, weights=samples, minlength=n_levels)
    return idx, counts, sums


def train_lloyd_max(samples, bits: int, max_iters: int = 500,
                    tol: float = 1e-9) -> QuantizerCodebook:
    """Fit a b-bit scalar codebook to a sample pool."""
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    if samples.size == 0:
        raise ConfigError("Lloyd-Max needs a non-empty sample pool")
    if bits < 1:
        raise ConfigError(f"Lloyd-Max needs bits >= 1, got {bits}")
    n_levels = 2 ** bits
    distinct = np.unique(samples)
    if distinct.size < n_levels:
        warnings.warn(
            f"only {distinct.size} distinct samples for {n_levels} levels; "
            "codebook degenerates to the distinct values",
            RuntimeWarning,
        )
        levels = distinct
        idx = np.searchsorted(0.5 * (levels[:-1] + levels[1:]), samples, side="right")
        distortion = float(np.mean((samples - levels[idx]) ** 2))
        return QuantizerCodebook(bits, levels, [distortion])

    quantiles = (np.arange(n_levels) + 0.5) / n_levels
    levels = np.quantile(samples, quantiles)
    lo, hi = samples.min(), samples.max()
    history = []
    for _ in range(max_iters):
        thresholds = 0.5 * (levels[:-1] + levels[1:])
        _idx, counts, sums = _cell_stats(samples, thresholds, n_levels)
        new_levels = levels.copy()
        filled = counts > 0
        new_levels[filled] = sums[filled] / counts[filled]
        if not filled.all():
            # split the widest cell: park each empty level at its midpoint
            for j in np.flatnonzero(~filled):
                bounds = np.concatenate([[lo], thresholds, [hi]])
                widest = int(np.argmax(np.diff(bounds)))
                new_levels[j] = 0.5 * (bounds[widest] + bounds[widest + 1])
            new_levels.sort()
        move = np.abs(new_levels - levels).max()
        levels = new_levels
        thresholds = 0.5 * (levels[:-1] + levels[1:])
        idx = np.searchsorted(thresholds, samples, side="right")
        history.append(float(np.mean((samples - levels[idx]) ** 2)))
        if move < tol:
            break
    if np.unique(levels).size < levels.size:
        warnings.warn("duplicate quantizer levels collapsed", RuntimeWarning)
        levels = np.unique(levels)
    return QuantizerCodebook(bits, levels, history)


def quantize(values, book: QuantizerCodebook) -> np.ndarray:
    """Map values to level indices; threshold hits go to the upper cell."""
    v = np.asarray(values, dtype=np.float64)
    return np.searchsorted(book.thresholds, v, side="right").reshape(v.shape)


def dequantize(indices, book: QuantizerCodebook) -> np.ndarray:
    """Map level indices back to reconstruction values."""
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= len(book.levels)):
        raise DataError(
            f"index out of range [0, {len(book.levels)}): "
            f"[{idx.min()}, {idx.max()}]"
        )
    return book.levels[idx]


def quantize_roundtrip(values, book: QuantizerCodebook) -> np.ndarray:
    """quantize then dequantize; the codeword the decoder actually sees."""
    return dequantize(quantize(values, book), book)
