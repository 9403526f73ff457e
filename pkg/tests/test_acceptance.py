"""Acceptance criteria, one test per criterion.

Each test prints one `ACCEPTANCE <n>: PASS/FAIL` line (run with -s to see
them live). Criteria 7-9 share one desk-scale training run via a fixture;
criterion 8 trains all four ablation arms over three seeds and dominates
the runtime.
"""

import math
import time
from dataclasses import replace

import mpmath as mp
import numpy as np
import pytest

from sdcsinet.channel import (
    MultipathParams,
    RawChannelSequence,
    angular_delay_real,
    from_angular_delay,
    generate_sequence,
    to_angular_delay,
)
from sdcsinet.codec import SdCsiNet, Variant
from sdcsinet.harness import (
    ExperimentConfig,
    ablate,
    evaluate,
    make_dataset,
    split_indices,
    train,
    train_codeword_quantizer,
)
from sdcsinet.quantizer import dequantize, quantize, quantize_roundtrip, train_lloyd_max
from sdcsinet.selfinfo import (
    SfParams,
    compute_masks,
    extract_features,
    gate_and_restore,
    mapping_layer,
    self_information_pixel,
    selfinfo_matrix,
)
from sdcsinet.tensor import (
    Adam,
    ParameterSet,
    RunningStats,
    Tensor,
    batchnorm,
    conv1d_dense,
    conv2d,
    conv3d,
    lrelu,
    lstm_forward,
    maxpool_lastaxis,
    mse_loss,
    sigmoid,
    tanh,
    transpose,
    tsum,
)

from oracles import conv2d_loops, conv3d_loops, numeric_grad, rel_error

GRAD_TOL = 1e-4
FD_H = 1e-6


def verdict(n, ok, detail):
    print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {n}: {detail}"


# ---------------------------------------------------------------------------
# 1. analytic self-information values


def test_criterion_1_selfinfo_analytic():
    uniform = self_information_pixel(np.full((3, 3), 0.42))
    floor = 0.5 * math.log2(2.0 * math.pi)
    ok_uniform = abs(uniform - floor) < 1e-9 and abs(uniform - 1.3257480647) < 1e-9

    spike = np.zeros((3, 3))
    spike[1, 1] = 1.0
    got = self_information_pixel(spike)
    with mp.workdps(60):
        total = 1 + 8 * mp.exp(mp.mpf(-1) / 2)
        oracle = float(-mp.log(total / (9 * mp.sqrt(2 * mp.pi)), 2))
    ok_spike = abs(got - oracle) < 1e-12 and abs(got - 1.94668) < 1e-5
    verdict(1, ok_uniform and ok_spike,
            f"uniform patch {uniform:.10f} (analytic {floor:.10f}), "
            f"spike {got:.6f} vs oracle {oracle:.6f}")


# ---------------------------------------------------------------------------
# 2. finite-difference gradient suite


def _fd_check_op(seed, build):
    """build(arrays) -> (loss_tensor, [(tensor, array, scalar_fn)...])"""
    loss, probes = build(seed)
    loss.backward()
    worst = 0.0
    for tensor, arr, fn in probes:
        err = rel_error(tensor.grad, numeric_grad(fn, arr.copy(), FD_H))
        worst = max(worst, err)
    return worst


def _conv3d_probe(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((2, 2, 2, 4, 4))
    k0 = rng.standard_normal((3, 2, 1, 3, 3)) * 0.5
    r = rng.standard_normal((2, 3, 2, 4, 4))

    def run(x, k):
        xt, kt = Tensor(x, requires_grad=True), Tensor(k, requires_grad=True)
        return tsum(conv3d(xt, kt, padding=(0, 1, 1)) * Tensor(r)), xt, kt

    loss, xt, kt = run(x0, k0)
    return loss, [
        (xt, x0, lambda a: run(a, k0)[0].item()),
        (kt, k0, lambda a: run(x0, a)[0].item()),
    ]


def _conv2d_probe(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((2, 2, 5, 5))
    k0 = rng.standard_normal((3, 2, 3, 3)) * 0.5
    r = rng.standard_normal((2, 3, 5, 5))

    def run(x, k):
        xt, kt = Tensor(x, requires_grad=True), Tensor(k, requires_grad=True)
        return tsum(conv2d(xt, kt, padding=1) * Tensor(r)), xt, kt

    loss, xt, kt = run(x0, k0)
    return loss, [
        (xt, x0, lambda a: run(a, k0)[0].item()),
        (kt, k0, lambda a: run(x0, a)[0].item()),
    ]


def _dense_probe(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((4, 6))
    w0 = rng.standard_normal((3, 6)) * 0.5
    b0 = rng.standard_normal(3) * 0.1
    r = rng.standard_normal((4, 3))

    def run(x, w, b):
        xt = Tensor(x, requires_grad=True)
        wt = Tensor(w, requires_grad=True)
        bt = Tensor(b, requires_grad=True)
        return tsum(conv1d_dense(xt, wt, bt) * Tensor(r)), xt, wt, bt

    loss, xt, wt, bt = run(x0, w0, b0)
    return loss, [
        (xt, x0, lambda a: run(a, w0, b0)[0].item()),
        (wt, w0, lambda a: run(x0, a, b0)[0].item()),
        (bt, b0, lambda a: run(x0, w0, a)[0].item()),
    ]


def _pool_probe(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((3, 8))
    r = rng.standard_normal((3, 4))

    def run(x):
        xt = Tensor(x, requires_grad=True)
        return tsum(maxpool_lastaxis(xt, 2, 2) * Tensor(r)), xt

    loss, xt = run(x0)
    return loss, [(xt, x0, lambda a: run(a)[0].item())]


def _lstm_probe(seed):
    rng = np.random.default_rng(seed)
    d_in, hidden, steps = 3, 2, 3
    x0 = rng.standard_normal((steps, d_in))
    w0 = rng.uniform(-0.5, 0.5, (d_in + hidden, 4 * hidden))
    b0 = rng.uniform(-0.5, 0.5, 4 * hidden)
    r = rng.standard_normal((steps, hidden))

    def run(x, w, b):
        ps = ParameterSet()
        ps.add("w", Tensor(w, requires_grad=True))
        ps.add("b", Tensor(b, requires_grad=True))
        xt = Tensor(x, requires_grad=True)
        return tsum(lstm_forward(xt, ps, hidden) * Tensor(r)), xt, ps

    loss, xt, ps = run(x0, w0, b0)
    return loss, [
        (xt, x0, lambda a: run(a, w0, b0)[0].item()),
        (ps["w"], w0, lambda a: run(x0, a, b0)[0].item()),
        (ps["b"], b0, lambda a: run(x0, w0, a)[0].item()),
    ]


def _bn_probe(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((3, 4, 5))
    g0 = rng.uniform(0.5, 1.5, 4)
    b0 = rng.uniform(-0.5, 0.5, 4)
    r = rng.standard_normal((3, 4, 5))

    def run(x, g, b):
        xt = Tensor(x, requires_grad=True)
        gt = Tensor(g, requires_grad=True)
        bt = Tensor(b, requires_grad=True)
        out = batchnorm(xt, 1, gt, bt, RunningStats(4), mode="train")
        return tsum(out * Tensor(r)), xt, gt, bt

    loss, xt, gt, bt = run(x0, g0, b0)
    return loss, [
        (xt, x0, lambda a: run(a, g0, b0)[0].item()),
        (gt, g0, lambda a: run(x0, a, b0)[0].item()),
        (bt, b0, lambda a: run(x0, g0, a)[0].item()),
    ]


def _activation_probe(op):
    def probe(seed):
        rng = np.random.default_rng(seed)
        x0 = rng.uniform(0.2, 2.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
        r = rng.standard_normal((3, 4))

        def run(x):
            xt = Tensor(x, requires_grad=True)
            return tsum(op(xt) * Tensor(r)), xt

        loss, xt = run(x0)
        return loss, [(xt, x0, lambda a: run(a)[0].item())]

    return probe


def _full_forward_errors(seed):
    """FD on sampled coordinates of every trainable parameter of a tiny model."""
    model = SdCsiNet(n_c=4, n_t=4, sigma=0.25, variant=Variant.FULL, seed=seed)
    rng = np.random.default_rng(200 + seed)
    x = rng.uniform(0, 1, (2, 2, 2, 4, 4))
    target = rng.uniform(0, 1, (2, 2, 2, 4, 4))
    masks = compute_masks(x, model.sf)

    def loss_value():
        for i in range(6):  # keep BN running stats frozen across FD evals
            model.bn_stats[i].mean[:] = 0.0
            model.bn_stats[i].var[:] = 1.0
        out = model.forward(Tensor(x), training=True, masks=masks)
        return mse_loss(out, Tensor(target))

    model.params.zero_grad()
    loss_value().backward()
    skip = {f"dec.conv{i}.b" for i in range(1, 7)}  # killed by train-mode BN
    worst = 0.0
    for name, p in model.params.items():
        if name in skip:
            continue
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        coords = rng.choice(flat.size, size=min(3, flat.size), replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + FD_H
            fp = loss_value().item()
            flat[c] = orig - FD_H
            fm = loss_value().item()
            flat[c] = orig
            num = (fp - fm) / (2 * FD_H)
            err = abs(gflat[c] - num) / max(abs(gflat[c]), abs(num), 1.0)
            worst = max(worst, err)
    return worst


def test_criterion_2_gradient_suite():
    t0 = time.time()
    probes = {
        "conv3d": _conv3d_probe,
        "conv2d": _conv2d_probe,
        "conv1d_dense": _dense_probe,
        "maxpool": _pool_probe,
        "lstm": _lstm_probe,
        "batchnorm": _bn_probe,
        "sigmoid": _activation_probe(sigmoid),
        "tanh": _activation_probe(tanh),
        "lrelu": _activation_probe(lrelu),
    }
    worst = {}
    for name, probe in probes.items():
        worst[name] = max(_fd_check_op(seed, probe) for seed in range(5))
    worst["full_forward"] = max(_full_forward_errors(seed) for seed in range(5))
    elapsed = time.time() - t0
    bad = {k: v for k, v in worst.items() if v >= GRAD_TOL}
    peak = max(worst.values())
    verdict(2, not bad and elapsed < 120.0,
            f"worst relative error {peak:.2e} over "
            f"{len(worst)} op families x 5 seeds in {elapsed:.0f}s"
            + (f"; failing: {bad}" if bad else ""))


# ---------------------------------------------------------------------------
# 3. convolution oracle equivalence


def test_criterion_3_conv_oracles():
    worst3 = worst2 = worst1 = 0.0
    for seed in range(8):
        rng = np.random.default_rng(seed)
        n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        d, h, w = rng.integers(2, 7, size=3)
        kd, kh, kw = (rng.integers(1, e + 1) for e in (d, h, w))
        pad = tuple(rng.integers(0, 2, size=3))
        x = rng.standard_normal((n, c, d, h, w))
        k = rng.standard_normal((o, c, kd, kh, kw))
        got = conv3d(Tensor(x), Tensor(k), padding=pad).data
        worst3 = max(worst3, np.abs(got - conv3d_loops(x, k, padding=pad)).max())

        x2 = rng.standard_normal((n, c, h, w))
        k2 = rng.standard_normal((o, c, kh, kw))
        stride = tuple(rng.integers(1, 3, size=2))
        pad2 = tuple(rng.integers(0, 2, size=2))
        got2 = conv2d(Tensor(x2), Tensor(k2), stride=stride, padding=pad2).data
        worst2 = max(worst2, np.abs(
            got2 - conv2d_loops(x2, k2, stride=stride, padding=pad2)).max())

        xd = rng.standard_normal((5, 6))
        wd = rng.standard_normal((4, 6))
        bd = rng.standard_normal(4)
        got1 = conv1d_dense(Tensor(xd), Tensor(wd), Tensor(bd)).data
        want1 = np.array([[row @ wd[j] + bd[j] for j in range(4)] for row in xd])
        worst1 = max(worst1, np.abs(got1 - want1).max())
    ok = worst3 < 1e-12 and worst2 < 1e-12 and worst1 < 1e-12
    verdict(3, ok, f"max abs diff vs oracles: conv3d {worst3:.1e}, "
                   f"conv2d {worst2:.1e}, conv1d_dense {worst1:.1e}")


# ---------------------------------------------------------------------------
# 4. angular-delay transform round trip


def test_criterion_4_transform_round_trip():
    worst_rt = worst_fro = 0.0
    for seed in range(5):
        params = MultipathParams(num_paths=4, delay_taps=(0, 1, 2, 3), seed=seed)
        raw = generate_sequence(params, 3, 64, 8)
        back = from_angular_delay(to_angular_delay(raw, 8), 64)
        worst_rt = max(worst_rt, np.linalg.norm(back.frames - raw.frames)
                       / np.linalg.norm(raw.frames))
        full = angular_delay_real(raw, 64)
        worst_fro = max(worst_fro, abs(np.linalg.norm(full)
                                       - np.linalg.norm(raw.frames)))
    verdict(4, worst_rt < 1e-9 and worst_fro < 1e-10,
            f"round-trip rel err {worst_rt:.1e} (< 1e-9), "
            f"Frobenius drift {worst_fro:.1e} (< 1e-10)")


# ---------------------------------------------------------------------------
# 5. mask contract


def test_criterion_5_mask_contract():
    rng = np.random.default_rng(0)
    params = SfParams.initialize(rng, quantile=0.5)
    frames = rng.uniform(0, 1, (4, 3, 2, 8, 8))
    masks = compute_masks(frames, params)
    frac = masks.mean(axis=(-2, -1))
    frac_ok = np.abs(frac - 0.5).max() <= 1.0 / 64.0

    x = Tensor(frames[:1])
    mask_conv = np.moveaxis(masks[:1], 2, 1)
    feats = extract_features(transpose(x, (0, 2, 1, 3, 4)), params)
    base = gate_and_restore(feats, mask_conv, params)
    poked = feats.data.copy()
    poked[mask_conv == 0.0] += rng.standard_normal(int((mask_conv == 0.0).sum()))
    again = gate_and_restore(Tensor(poked), mask_conv, params)
    gate_ok = np.array_equal(base.data, again.data)

    ps = ParameterSet()
    params.register(ps)
    opt = Adam(ps, lr=1e-3)
    target = Tensor(rng.uniform(0, 1, (3, 2, 8, 8)))
    checksum = params.mapping_checksum()
    from sdcsinet.selfinfo import sf_forward
    for _ in range(100):
        opt.zero_grad()
        mse_loss(sf_forward(Tensor(frames[0]), params), target).backward()
        opt.step()
    checksum_ok = params.mapping_checksum() == checksum

    verdict(5, frac_ok and gate_ok and checksum_ok,
            f"kept fraction max dev {np.abs(frac - 0.5).max():.4f} "
            f"(<= {1/64:.4f}), masked positions inert: {gate_ok}, "
            f"mapping checksum constant over 100 steps: {checksum_ok}")


# ---------------------------------------------------------------------------
# 6. Lloyd-Max


def test_criterion_6_lloyd_max():
    book1 = train_lloyd_max(np.linspace(0.0, 1.0, 1_000_001), bits=1)
    fixed_ok = (np.abs(book1.levels - np.array([0.25, 0.75])).max() < 1e-6
                and abs(book1.thresholds[0] - 0.5) < 1e-6)

    rng = np.random.default_rng(1)
    monotone_ok = True
    for samples in (rng.uniform(-1, 1, 40_000), rng.standard_normal(40_000),
                    np.concatenate([rng.normal(-2, 0.3, 20_000),
                                    rng.normal(2, 0.3, 20_000)])):
        hist = np.array(train_lloyd_max(samples, bits=4).distortion_history)
        monotone_ok &= bool(np.all(np.diff(hist) <= 1e-15))

    book6 = train_lloyd_max(rng.standard_normal(50_000), bits=6)
    idx = np.arange(len(book6.levels))
    round_ok = np.array_equal(quantize(dequantize(idx, book6), book6), idx)

    verdict(6, fixed_ok and monotone_ok and round_ok,
            f"1-bit uniform fixed point {book1.levels.round(7).tolist()}, "
            f"distortion monotone: {monotone_ok}, "
            f"6-bit index round trip: {round_ok}")


# ---------------------------------------------------------------------------
# 7-9. desk-scale training, ablation, quantization gap


@pytest.fixture(scope="module")
def desk_run():
    cfg = ExperimentConfig()  # calibrated desk defaults: 512 samples, 200 epochs
    assert (cfg.n_c, cfg.n_t, cfg.t, cfg.sigma, cfg.samples, cfg.epochs) == \
        (8, 8, 3, 0.25, 512, 200)
    ds = make_dataset(cfg)
    _tr, va, te = split_indices(ds.num_samples,
                                (cfg.split_train, cfg.split_val, cfg.split_test),
                                cfg.seed)
    untrained = evaluate(cfg.build_model(), ds, indices=te, config=cfg)
    model, report = train(cfg, ds)
    book = train_codeword_quantizer(model, ds, va, bits=cfg.quant_bits)
    quantized = evaluate(model, ds, indices=te, codebook=book, config=cfg)
    return dict(cfg=cfg, ds=ds, untrained=untrained.nmse_db, report=report,
                quantized=quantized)


@pytest.mark.slow
def test_criterion_7_desk_training(desk_run):
    report = desk_run["report"]
    untrained = desk_run["untrained"]
    gain = untrained - report.nmse_db
    loss_ratio = report.epoch_losses[0] / report.epoch_losses[-1]
    ok = gain >= 10.0 and report.wall_clock_s <= 900.0 and loss_ratio >= 10.0
    verdict(7, ok,
            f"trained {report.nmse_db:+.2f} dB vs untrained {untrained:+.2f} dB "
            f"(gain {gain:.2f} >= 10), loss ratio {loss_ratio:.1f}x (>= 10), "
            f"wall clock {report.wall_clock_s:.0f}s (<= 900)")


@pytest.mark.slow
def test_criterion_8_ablation_ordering(desk_run):
    cfg = desk_run["cfg"]
    means = {v.value: [] for v in Variant}
    for k in range(3):
        run_cfg = replace(cfg, seed=cfg.seed + 1000 * k)
        ds = make_dataset(run_cfg)
        for r in ablate(run_cfg, ds):
            means[r.variant].append(r.nmse_db)
    mean = {k: float(np.mean(v)) for k, v in means.items()}
    ok = (mean["full"] <= mean["plus_sf"] <= mean["baseline"]
          and mean["full"] <= mean["plus_lstm"] <= mean["baseline"])
    detail = ", ".join(f"{k} {v:+.2f} dB" for k, v in mean.items())
    verdict(8, ok, f"3-seed means: {detail}; "
                   f"need full <= plus_sf <= baseline and full <= plus_lstm <= baseline")


@pytest.mark.slow
def test_criterion_9_quantization_gap(desk_run):
    q = desk_run["quantized"]
    gap = q.nmse_q_db - q.nmse_db
    ok = q.nmse_q_db >= q.nmse_db and gap <= 1.0
    verdict(9, ok, f"NMSE {q.nmse_db:+.2f} dB, NMSE-Q {q.nmse_q_db:+.2f} dB, "
                   f"gap {gap:.3f} dB (0 <= gap <= 1)")


# ---------------------------------------------------------------------------
# 10. complexity asymmetry


def test_criterion_10_complexity_asymmetry():
    model = SdCsiNet(n_c=32, n_t=32, sigma=1 / 8, variant=Variant.FULL, seed=0)
    ue, bs = model.parameter_count("ue"), model.parameter_count("bs")
    verdict(10, ue > bs,
            f"paper-scale sigma=1/8: UE {ue:,} > BS {bs:,} "
            f"(total {model.parameter_count('total'):,}; exact totals reported, "
            f"not asserted)")
