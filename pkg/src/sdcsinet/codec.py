"""Feature-coupling encoder, feature-decoupling decoder, ablation variants.

The encoder compresses each frame with a shared dense (length-1 conv) map and,
when the temporal branch is enabled, adds a projected LSTM feature computed
from max-pooled frames: c = S + Q. The decoder expands codewords per frame and
refines through six 1xkxk 3D conv stages (BN + LReLU(0.3), sigmoid on the
last). Variants toggle the self-information transform and the LSTM branch.
"""

from __future__ import annotations

import enum
import json
import struct

import numpy as np

from .errors import ConfigError, DataError, DimensionError
from .selfinfo import SfParams, sf_forward
from .tensor import (
    ParameterSet,
    RunningStats,
    Tensor,
    add,
    batchnorm,
    conv1d_dense,
    conv3d,
    lrelu,
    lstm_forward,
    maxpool_lastaxis,
    reshape,
    sigmoid,
    transpose,
    uniform_fan_in,
)

CHECKPOINT_MAGIC = b"SDCK"
CHECKPOINT_VERSION = 1


class Variant(enum.Enum):
    BASELINE = "baseline"
    PLUS_LSTM = "plus_lstm"
    PLUS_SF = "plus_sf"
    FULL = "full"

    @property
    def has_lstm(self) -> bool:
        return self in (Variant.PLUS_LSTM, Variant.FULL)

    @property
    def has_sf(self) -> bool:
        return self in (Variant.PLUS_SF, Variant.FULL)

    @classmethod
    def parse(cls, name) -> "Variant":
        if isinstance(name, Variant):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ConfigError(
                f"unknown variant {name!r}; pick one of "
                f"{[v.value for v in cls]}"
            ) from None


def codeword_length(sigma: float, n_c: int, n_t: int) -> int:
    m = round(sigma * 2 * n_c * n_t)
    if m < 1:
        raise ConfigError(
            f"compression ratio {sigma} yields codeword length {m} < 1 "
            f"for N_c={n_c}, N_t={n_t}"
        )
    return int(m)


# (out_channels, spatial kernel k, padding); every stage is stride-1 with a
# 1 x k x k kernel, padded so the (N_c, N_t) extents never change.
DECODER_LAYERS = (
    (2, 7, 3),
    (4, 5, 2),
    (8, 5, 2),
    (8, 3, 1),
    (2, 1, 0),
    (2, 3, 1),
)


class SdCsiNet:
    """The full compression network; parameters are sampled at construction."""

    def __init__(self, n_c: int, n_t: int, sigma: float, variant=Variant.FULL,
                 quantile: float = 0.5, seed: int = 0):
        self.n_c = int(n_c)
        self.n_t = int(n_t)
        self.sigma = float(sigma)
        self.variant = Variant.parse(variant)
        self.quantile = float(quantile)
        self.seed = int(seed)
        self.m = codeword_length(sigma, n_c, n_t)
        feat = 2 * self.n_c * self.n_t
        pooled = self.n_c * self.n_t

        rng = np.random.default_rng(seed)
        params = ParameterSet()
        self.sf = None
        if self.variant.has_sf:
            self.sf = SfParams.initialize(rng, self.quantile)
            self.sf.register(params)
        params.add("enc.spatial.w",
                   Tensor(uniform_fan_in(rng, (self.m, feat), feat), requires_grad=True))
        params.add("enc.spatial.b", Tensor(np.zeros(self.m), requires_grad=True))
        self._lstm_ps = None
        if self.variant.has_lstm:
            params.add("enc.lstm.w",
                       Tensor(uniform_fan_in(rng, (2 * pooled, 4 * pooled), 2 * pooled),
                              requires_grad=True))
            params.add("enc.lstm.b", Tensor(np.zeros(4 * pooled), requires_grad=True))
            params.add("enc.proj.w",
                       Tensor(uniform_fan_in(rng, (self.m, pooled), pooled),
                              requires_grad=True))
            params.add("enc.proj.b", Tensor(np.zeros(self.m), requires_grad=True))
            self._lstm_ps = ParameterSet()
            self._lstm_ps.add("w", params["enc.lstm.w"])
            self._lstm_ps.add("b", params["enc.lstm.b"])
        params.add("dec.expand.w",
                   Tensor(uniform_fan_in(rng, (feat, self.m), self.m), requires_grad=True))
        params.add("dec.expand.b", Tensor(np.zeros(feat), requires_grad=True))
        self.bn_stats: list[RunningStats] = []
        in_ch = 2
        for i, (out_ch, k, _pad) in enumerate(DECODER_LAYERS, start=1):
            params.add(f"dec.conv{i}.w",
                       Tensor(uniform_fan_in(rng, (out_ch, in_ch, 1, k, k),
                                             in_ch * k * k),
                              requires_grad=True))
            params.add(f"dec.conv{i}.b", Tensor(np.zeros(out_ch), requires_grad=True))
            # the sigmoid stage must start near the codomain midpoint: the
            # normalized CSI it reproduces is centered tightly around 0.5
            gamma0 = 0.05 if i == len(DECODER_LAYERS) else 1.0
            params.add(f"dec.bn{i}.gamma",
                       Tensor(np.full(out_ch, gamma0), requires_grad=True))
            params.add(f"dec.bn{i}.beta", Tensor(np.zeros(out_ch), requires_grad=True))
            self.bn_stats.append(RunningStats(out_ch))
            in_ch = out_ch
        self.params = params

    # ------------------------------------------------------------------
    def _ensure_batched(self, x, rank: int, stage: str):
        if x.ndim == rank - 1:
            return reshape(x, (1,) + x.shape), True
        if x.ndim == rank:
            return x, False
        raise DimensionError(
            f"{stage}: expected rank {rank - 1} or {rank} input, got {x.shape}"
        )

    def encode(self, h_e) -> Tensor:
        """Compress (.., T, 2, N_c, N_t) to per-frame codewords (.., T, M)."""
        h_e = h_e if isinstance(h_e, Tensor) else Tensor(h_e)
        h_e, squeeze = self._ensure_batched(h_e, 5, "encoder")
        b, t = h_e.shape[0], h_e.shape[1]
        if h_e.shape[2:] != (2, self.n_c, self.n_t):
            raise DimensionError(
                f"encoder: frames must be (2, {self.n_c}, {self.n_t}), "
                f"got {h_e.shape[2:]}"
            )
        v = reshape(h_e, (b, t, 2 * self.n_c * self.n_t))
        spatial = conv1d_dense(v, self.params["enc.spatial.w"],
                               self.params["enc.spatial.b"])
        if self.variant.has_lstm:
            pooled = maxpool_lastaxis(v, 2, 2)
            hidden = lstm_forward(pooled, self._lstm_ps, self.n_c * self.n_t)
            temporal = conv1d_dense(hidden, self.params["enc.proj.w"],
                                    self.params["enc.proj.b"])
            code = add(spatial, temporal)
        else:
            code = spatial
        return reshape(code, (t, self.m)) if squeeze else code

    def decode(self, code, training: bool = False) -> Tensor:
        """Reconstruct (.., T, 2, N_c, N_t) from codewords; output in (0, 1)."""
        code = code if isinstance(code, Tensor) else Tensor(code)
        code, squeeze = self._ensure_batched(code, 3, "decoder")
        b, t = code.shape[0], code.shape[1]
        if code.shape[2] != self.m:
            raise DimensionError(
                f"decoder: codeword length {code.shape[2]} != M={self.m}"
            )
        w = conv1d_dense(code, self.params["dec.expand.w"],
                         self.params["dec.expand.b"])
        x = reshape(w, (b, t, 2, self.n_c, self.n_t))
        x = transpose(x, (0, 2, 1, 3, 4))
        mode = "train" if training else "eval"
        for i, (out_ch, _k, pad) in enumerate(DECODER_LAYERS, start=1):
            try:
                x = conv3d(x, self.params[f"dec.conv{i}.w"], padding=(0, pad, pad))
            except DimensionError as exc:
                raise DimensionError(f"decoder layer ({i}): {exc}") from exc
            x = add(x, reshape(self.params[f"dec.conv{i}.b"], (1, out_ch, 1, 1, 1)))
            x = batchnorm(x, 1, self.params[f"dec.bn{i}.gamma"],
                          self.params[f"dec.bn{i}.beta"], self.bn_stats[i - 1],
                          mode=mode)
            x = sigmoid(x) if i == len(DECODER_LAYERS) else lrelu(x, 0.3)
        x = transpose(x, (0, 2, 1, 3, 4))
        return reshape(x, x.shape[1:]) if squeeze else x

    def compress(self, h_c, masks: np.ndarray | None = None) -> Tensor:
        """UE-side pass: SF transform (when enabled) followed by the encoder.

        `masks` optionally carries precomputed index masks
        (.., T, 64, N_c, N_t) to skip the per-batch entropy pass.
        """
        h_c = h_c if isinstance(h_c, Tensor) else Tensor(h_c)
        if self.variant.has_sf:
            h_e = sf_forward(h_c, self.sf, mask=masks)
        else:
            h_e = h_c
        return self.encode(h_e)

    def forward(self, h_c, training: bool = False, codeword_transform=None,
                masks: np.ndarray | None = None) -> Tensor:
        """End-to-end pass; SF variants route through the gating transform first.

        `codeword_transform`, when given, maps the raw codeword array before
        decoding (the quantized feedback path); it detaches the graph, so it is
        meant for evaluation only.
        """
        code = self.compress(h_c, masks=masks)
        if codeword_transform is not None:
            code = Tensor(codeword_transform(code.data))
        return self.decode(code, training=training)

    # ------------------------------------------------------------------
    def parameter_count(self, side: str) -> int:
        """Trainable parameter total for one link end: "ue", "bs", or "total"."""
        side = side.lower()
        if side == "ue":
            prefixes = ("sf.", "enc.")
        elif side == "bs":
            prefixes = ("dec.",)
        elif side == "total":
            prefixes = ("sf.", "enc.", "dec.")
        else:
            raise ValueError(f"side must be 'ue', 'bs' or 'total', got {side!r}")
        return sum(p.size for name, p in self.params.items()
                   if name.startswith(prefixes))

    def state_records(self):
        """(name, trainable, array) triples covering params and buffers."""
        records = [(name, True, p.data) for name, p in self.params.items()]
        if self.sf is not None:
            records.append(("sf.mapping", False, self.sf.mapping.data))
        for i, stats in enumerate(self.bn_stats, start=1):
            records.append((f"dec.bn{i}.running_mean", False, stats.mean))
            records.append((f"dec.bn{i}.running_var", False, stats.var))
        return records

    def snapshot(self):
        """Copy of all learnable state + buffers (for best-model tracking)."""
        return {name: arr.copy() for name, _t, arr in self.state_records()}

    def load_snapshot(self, state):
        for name, _trainable, arr in self.state_records():
            arr[...] = state[name]


def model_config_echo(model: SdCsiNet, extra: dict | None = None) -> dict:
    echo = {
        "sigma": model.sigma,
        "n_c": model.n_c,
        "n_t": model.n_t,
        "variant": model.variant.value,
        "quantile": model.quantile,
        "seed": model.seed,
    }
    if extra:
        echo.update(extra)
    return echo


def save_checkpoint(model: SdCsiNet, echo: dict, path):
    """Write model state: magic, version, config echo, per-tensor records."""
    blob = json.dumps(echo, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        records = model.state_records()
        fh.write(struct.pack("<I", len(records)))
        for name, trainable, arr in records:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<II", 1 if trainable else 0, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[SdCsiNet, dict]:
    """Rebuild the model a checkpoint describes and restore all its state."""
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(fmt):
        nonlocal off
        try:
            vals = struct.unpack_from(fmt, blob, off)
        except struct.error as exc:
            raise DataError(f"{path}: truncated checkpoint") from exc
        off += struct.calcsize(fmt)
        return vals

    magic, version = take("<4sI")
    if magic != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (echo_len,) = take("<I")
    echo = json.loads(blob[off:off + echo_len].decode("utf-8"))
    off += echo_len
    try:
        model = SdCsiNet(echo["n_c"], echo["n_t"], echo["sigma"], echo["variant"],
                         echo["quantile"], echo["seed"])
    except KeyError as exc:
        raise DataError(f"{path}: config echo missing key {exc}") from exc
    known = {name: (trainable, arr)
             for name, trainable, arr in model.state_records()}
    (n_records,) = take("<I")
    seen = set()
    for _ in range(n_records):
        (name_len,) = take("<I")
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        trainable, rank = take("<II")
        shape = take(f"<{rank}I")
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        off += 4 * count
        if name not in known:
            raise DataError(f"{path}: unknown record {name!r}")
        want_trainable, arr = known[name]
        if bool(trainable) != want_trainable or tuple(shape) != arr.shape:
            raise DataError(
                f"{path}: record {name!r} shape/flag mismatch "
                f"({tuple(shape)} vs {arr.shape})"
            )
        arr[...] = data.astype(np.float64).reshape(shape)
        seen.add(name)
    missing = set(known) - seen
    if missing:
        raise DataError(f"{path}: missing records {sorted(missing)}")
    return model, echo
