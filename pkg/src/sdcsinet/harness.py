"""Experiment harness: configs, splits, training, NMSE evaluation, ablation.

Training minimizes MSE between the normalized CSI sequence and the network
output with Adam, tracks the best-validation parameter snapshot, and reports
NMSE (denormalized scale, dB) on the held-out test split, optionally through
a trained Lloyd-Max codeword quantizer.
"""

from __future__ import annotations

import csv
import json
import math
import os
import subprocess
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .channel import CsiDataset, MultipathParams, build_dataset, denormalize
from .codec import SdCsiNet, Variant, codeword_length, model_config_echo
from .errors import ConfigError, DataError, NumericalError
from .quantizer import QuantizerCodebook, quantize_roundtrip, train_lloyd_max
from .selfinfo import compute_masks
from .tensor import Adam, Tensor, mse_loss, no_grad

NMSE_DB_FLOOR = -300.0  # stands in for -inf in serialized reports
EVAL_CHUNK = 128
VAL_INTERVAL = 5  # epochs between best-model validation checks


@dataclass
class ExperimentConfig:
    """Flat experiment settings; also the schema of the key=value config files."""

    sigma: float = 0.25
    t: int = 3
    n_c: int = 8
    n_t: int = 8
    n_s: int = 64
    variant: str = "full"
    sf_quantile: float = 0.5
    epochs: int = 200
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    samples: int = 512
    rho: float = 0.9
    num_paths: int = 4
    quant_bits: int = 6
    split_train: float = 0.70
    split_val: float = 0.15
    split_test: float = 0.15
    dataset: str = ""
    out_dir: str = "results"

    def validate(self):
        Variant.parse(self.variant)
        codeword_length(self.sigma, self.n_c, self.n_t)
        checks = [
            (self.t >= 1, "t must be >= 1"),
            (self.n_c >= 1 and self.n_t >= 1, "n_c and n_t must be >= 1"),
            (self.n_s >= self.n_c, f"n_s={self.n_s} must be >= n_c={self.n_c}"),
            (0.0 < self.sf_quantile < 1.0, "sf_quantile must lie in (0, 1)"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.learning_rate > 0, "learning_rate must be positive"),
            (self.samples >= 1, "samples must be >= 1"),
            (0.0 <= self.rho <= 1.0, "rho must lie in [0, 1]"),
            (self.num_paths >= 1, "num_paths must be >= 1"),
            (self.quant_bits >= 1, "quant_bits must be >= 1"),
            (min(self.split_train, self.split_val, self.split_test) >= 0.0,
             "split fractions must be non-negative"),
            (abs(self.split_train + self.split_val + self.split_test - 1.0) < 1e-9,
             "split fractions must sum to 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def multipath_params(self) -> MultipathParams:
        return MultipathParams(num_paths=self.num_paths, temporal_rho=self.rho,
                               seed=self.seed)

    def build_model(self) -> SdCsiNet:
        return SdCsiNet(self.n_c, self.n_t, self.sigma, self.variant,
                        self.sf_quantile, seed=self.seed)

    # -- flat key=value files ------------------------------------------------
    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        spec = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        try:
            lines = open(path, encoding="utf-8").read().splitlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for lineno, line in enumerate(lines, 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, val = (s.strip() for s in body.split("=", 1))
            if key not in spec:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            kwargs[key] = _parse_value(key, val, spec[key], f"{path}:{lineno}")
        return cls(**kwargs)

    def to_file(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for f in fields(self):
                fh.write(f"{f.name} = {getattr(self, f.name)}\n")


def _parse_value(key, raw, ftype, where):
    try:
        if ftype in ("int", int):
            return int(raw)
        if ftype in ("float", float):
            if "/" in raw:  # ratios like 1/8
                num, den = raw.split("/")
                return float(num) / float(den)
            return float(raw)
        return raw
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"{where}: bad value {raw!r} for {key}") from exc


def parse_ratio(raw) -> float:
    """Accept plain floats or a/b ratios for the compression ratio flag."""
    return _parse_value("sigma", str(raw), float, "command line")


@dataclass
class MetricsReport:
    variant: str
    sigma: float
    seed: int
    nmse_db: float
    nmse_q_db: float | None
    params_ue: int
    params_bs: int
    params_total: int
    epoch_losses: list[float] = field(default_factory=list)
    steps: int = 0
    wall_clock_s: float = 0.0
    config: dict = field(default_factory=dict)
    revision: str = "unknown"


def source_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"],
                             cwd=os.path.dirname(os.path.abspath(__file__)),
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


# ---------------------------------------------------------------------------
# metrics


def nmse_db(h_true, h_pred) -> float:
    """Mean per-sample ||err||^2/||ref||^2 in dB over the leading axis.

    Zero-norm reference samples are excluded with a warning; identical inputs
    give -inf (clamped only when serialized).
    """
    a = np.asarray(h_true, dtype=np.float64)
    b = np.asarray(h_pred, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"nmse: shapes differ, {a.shape} vs {b.shape}")
    a2 = a.reshape(a.shape[0], -1)
    b2 = b.reshape(b.shape[0], -1)
    den = (a2**2).sum(axis=1)
    keep = den > 0.0
    if not keep.any():
        raise DataError("nmse: every reference sample has zero norm")
    if not keep.all():
        warnings.warn(f"nmse: excluding {int((~keep).sum())} zero-norm samples",
                      RuntimeWarning)
    num = ((a2 - b2)[keep] ** 2).sum(axis=1)
    ratio = float(np.mean(num / den[keep]))
    if ratio == 0.0:
        return float("-inf")
    return 10.0 * math.log10(ratio)


def split_indices(n: int, fractions, seed: int):
    """Deterministic shuffle-split; the three parts partition range(n)."""
    f_train, f_val, f_test = fractions
    if min(f_train, f_val, f_test) < 0 or abs(f_train + f_val + f_test - 1.0) > 1e-9:
        raise ConfigError(f"split fractions {fractions} must be >= 0 and sum to 1")
    perm = np.random.default_rng((seed, 0x5117)).permutation(n)
    n_train = int(round(f_train * n))
    n_val = int(round(f_val * n))
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


# ---------------------------------------------------------------------------
# forward helpers


def _model_masks(model: SdCsiNet, values: np.ndarray):
    return compute_masks(values, model.sf) if model.variant.has_sf else None


def _chunked_forward(model: SdCsiNet, values, masks=None, codeword_transform=None):
    outs = []
    with no_grad():
        for lo in range(0, values.shape[0], EVAL_CHUNK):
            sl = slice(lo, lo + EVAL_CHUNK)
            m = masks[sl] if masks is not None else None
            outs.append(model.forward(Tensor(values[sl]), training=False,
                                      codeword_transform=codeword_transform,
                                      masks=m).data)
    return np.concatenate(outs, axis=0)


def _dataset_mse(model: SdCsiNet, values, masks=None) -> float:
    pred = _chunked_forward(model, values, masks)
    return float(np.mean((pred - values) ** 2))


def collect_codewords(model: SdCsiNet, values, masks=None) -> np.ndarray:
    """Raw codeword pool (flattened) for quantizer training."""
    outs = []
    with no_grad():
        for lo in range(0, values.shape[0], EVAL_CHUNK):
            sl = slice(lo, lo + EVAL_CHUNK)
            m = masks[sl] if masks is not None else None
            outs.append(model.compress(Tensor(values[sl]), masks=m).data)
    return np.concatenate(outs, axis=0).reshape(-1)


# ---------------------------------------------------------------------------
# training


def _check_dims(config: ExperimentConfig, dataset: CsiDataset):
    want = (config.t, 2, config.n_c, config.n_t)
    if dataset.frame_shape != want:
        raise ConfigError(
            f"dataset samples {dataset.frame_shape} do not match config {want}"
        )


def make_dataset(config: ExperimentConfig) -> CsiDataset:
    config.validate()
    return build_dataset(config.multipath_params(), config.samples, config.t,
                         config.n_c, config.n_t, config.n_s)


def load_or_make_dataset(config: ExperimentConfig) -> CsiDataset:
    if config.dataset:
        ds = CsiDataset.load(config.dataset)
        _check_dims(config, ds)
        return ds
    return make_dataset(config)


def train(config: ExperimentConfig, dataset: CsiDataset):
    """Fit one model; returns (model, MetricsReport) with test-split NMSE."""
    config.validate()
    _check_dims(config, dataset)
    if dataset.num_samples < config.batch_size:
        raise ConfigError(
            f"dataset has {dataset.num_samples} samples < batch size {config.batch_size}"
        )
    t0 = time.perf_counter()
    tr_idx, va_idx, te_idx = split_indices(
        dataset.num_samples, (config.split_train, config.split_val, config.split_test),
        config.seed)
    if len(tr_idx) == 0 or len(va_idx) == 0 or len(te_idx) == 0:
        raise ConfigError("every split needs at least one sample")
    model = config.build_model()
    opt = Adam(model.params, lr=config.learning_rate)
    shuffle = np.random.default_rng((config.seed, 0xABA7))
    values = dataset.values
    # index masks depend only on the frozen mapping kernel and the inputs,
    # so one pass up front covers the whole run
    masks = _model_masks(model, values)

    epoch_losses: list[float] = []
    best_val = math.inf
    best_state = model.snapshot()
    steps = 0
    for epoch in range(config.epochs):
        order = shuffle.permutation(tr_idx)
        batch_losses = []
        for bi, lo in enumerate(range(0, len(order), config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            opt.zero_grad()
            out = model.forward(Tensor(values[idx]), training=True,
                                masks=None if masks is None else masks[idx])
            loss = mse_loss(out, Tensor(values[idx]))
            val = loss.item()
            if not math.isfinite(val):
                raise NumericalError(
                    f"non-finite loss {val} at epoch {epoch}, batch {bi}, "
                    f"lr {config.learning_rate}"
                )
            loss.backward()
            opt.step()
            steps += 1
            batch_losses.append(val)
        epoch_losses.append(float(np.mean(batch_losses)))
        if (epoch + 1) % VAL_INTERVAL == 0 or epoch == config.epochs - 1:
            val_loss = _dataset_mse(model, values[va_idx],
                                    None if masks is None else masks[va_idx])
            if val_loss < best_val:
                best_val = val_loss
                best_state = model.snapshot()
    model.load_snapshot(best_state)

    pred = _chunked_forward(model, values[te_idx],
                            None if masks is None else masks[te_idx])
    test_nmse = nmse_db(denormalize(values[te_idx], dataset.offset, dataset.scale),
                        denormalize(pred, dataset.offset, dataset.scale))
    report = MetricsReport(
        variant=model.variant.value,
        sigma=config.sigma,
        seed=config.seed,
        nmse_db=test_nmse,
        nmse_q_db=None,
        params_ue=model.parameter_count("ue"),
        params_bs=model.parameter_count("bs"),
        params_total=model.parameter_count("total"),
        epoch_losses=epoch_losses,
        steps=steps,
        wall_clock_s=time.perf_counter() - t0,
        config=asdict(config),
        revision=source_revision(),
    )
    return model, report


def evaluate(model: SdCsiNet, dataset: CsiDataset, indices=None,
             codebook: QuantizerCodebook | None = None,
             config: ExperimentConfig | None = None) -> MetricsReport:
    """NMSE (and NMSE-Q when a codebook is given) over the chosen samples."""
    if dataset.frame_shape[1:] != (2, model.n_c, model.n_t):
        raise ConfigError(
            f"dataset frames {dataset.frame_shape} incompatible with model "
            f"(2, {model.n_c}, {model.n_t})"
        )
    t0 = time.perf_counter()
    idx = np.arange(dataset.num_samples) if indices is None else np.asarray(indices)
    values = dataset.values[idx]
    masks = _model_masks(model, values)
    truth = denormalize(values, dataset.offset, dataset.scale)
    pred = _chunked_forward(model, values, masks)
    plain = nmse_db(truth, denormalize(pred, dataset.offset, dataset.scale))
    quantized = None
    if codebook is not None:
        pred_q = _chunked_forward(model, values, masks,
                                  codeword_transform=lambda c: quantize_roundtrip(c, codebook))
        quantized = nmse_db(truth, denormalize(pred_q, dataset.offset, dataset.scale))
        if quantized < plain - 1e-6:
            warnings.warn(
                f"quantized NMSE {quantized:.3f} dB beat plain {plain:.3f} dB",
                RuntimeWarning,
            )
    return MetricsReport(
        variant=model.variant.value,
        sigma=model.sigma,
        seed=(config.seed if config is not None else model.seed),
        nmse_db=plain,
        nmse_q_db=quantized,
        params_ue=model.parameter_count("ue"),
        params_bs=model.parameter_count("bs"),
        params_total=model.parameter_count("total"),
        wall_clock_s=time.perf_counter() - t0,
        config=asdict(config) if config is not None else {},
        revision=source_revision(),
    )


def train_codeword_quantizer(model: SdCsiNet, dataset: CsiDataset, indices,
                             bits: int = 6, max_iters: int = 500,
                             tol: float = 1e-9) -> QuantizerCodebook:
    """Fit the shared scalar codebook on the codewords of the given samples."""
    values = dataset.values[np.asarray(indices)]
    pool = collect_codewords(model, values, _model_masks(model, values))
    return train_lloyd_max(pool, bits, max_iters=max_iters, tol=tol)


ABLATION_ARMS = (Variant.BASELINE, Variant.PLUS_LSTM, Variant.PLUS_SF, Variant.FULL)


def ablate(config: ExperimentConfig, dataset: CsiDataset) -> list[MetricsReport]:
    """Train and evaluate all four variants under identical budgets."""
    reports = []
    for variant in ABLATION_ARMS:
        _model, report = train(replace(config, variant=variant.value), dataset)
        reports.append(report)
    return reports


# ---------------------------------------------------------------------------
# reporting


def _clamp_db(value):
    if value is None:
        return None
    if value == float("-inf") or value < NMSE_DB_FLOOR:
        return NMSE_DB_FLOOR
    return value


def report_files(reports, out_dir) -> tuple[str, str]:
    """Write results.json and results.csv; byte-identical for equal inputs."""
    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, "results.json")
    csv_path = os.path.join(out_dir, "results.csv")
    payload = []
    for r in reports:
        d = asdict(r)
        d["nmse_db"] = _clamp_db(d["nmse_db"])
        d["nmse_q_db"] = _clamp_db(d["nmse_q_db"])
        payload.append(d)
    with open(json_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "sigma", "seed", "nmse_db", "nmse_q_db",
                         "params_ue", "params_bs"])
        for d in payload:
            writer.writerow([d["variant"], d["sigma"], d["seed"], d["nmse_db"],
                             "" if d["nmse_q_db"] is None else d["nmse_q_db"],
                             d["params_ue"], d["params_bs"]])
    return json_path, csv_path
