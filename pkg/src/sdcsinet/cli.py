"""Command-line front end: gen-data, train, eval, quantize, ablate.

Every subcommand accepts --config <file> (flat key=value schema of
ExperimentConfig) plus overrides. Exit codes: 0 ok, 2 config error,
3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from .codec import load_checkpoint, model_config_echo, save_checkpoint
from .errors import ConfigError, DataError, NumericalError
from .harness import (
    ExperimentConfig,
    ablate,
    evaluate,
    load_or_make_dataset,
    make_dataset,
    parse_ratio,
    report_files,
    split_indices,
    train,
    train_codeword_quantizer,
)
from .quantizer import QuantizerCodebook


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for key in ("sigma", "seed", "epochs", "variant", "out_dir"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    for key in ("samples", "t", "n_c", "n_t", "n_s", "rho", "dataset", "quant_bits"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--sigma", type=parse_ratio, help="compression ratio (0.125 or 1/8)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--variant", choices=["baseline", "plus_lstm", "plus_sf", "full"])
    p.add_argument("--out-dir", dest="out_dir")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sdcsinet",
                                 description="Self-information-domain CSI compression")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic CSI dataset")
    _add_common(g)
    g.add_argument("--samples", type=int)
    g.add_argument("--T", dest="t", type=int)
    g.add_argument("--nc", dest="n_c", type=int)
    g.add_argument("--nt", dest="n_t", type=int)
    g.add_argument("--ns", dest="n_s", type=int)
    g.add_argument("--rho", type=float)
    g.add_argument("--out", required=True, help="output dataset path")

    t = sub.add_parser("train", help="train one model and write a checkpoint")
    _add_common(t)
    t.add_argument("--dataset", help="dataset file (generated if omitted)")

    e = sub.add_parser("eval", help="evaluate a checkpoint (NMSE, optional NMSE-Q)")
    _add_common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", help="dataset file (generated if omitted)")
    e.add_argument("--codebook", help="quantizer codebook for the NMSE-Q column")

    q = sub.add_parser("quantize", help="fit a Lloyd-Max codebook on codewords")
    _add_common(q)
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--bits", dest="quant_bits", type=int)
    q.add_argument("--data", dest="dataset", help="dataset file (generated if omitted)")
    q.add_argument("--out", required=True, help="output codebook path")

    a = sub.add_parser("ablate", help="train and compare all four variants")
    _add_common(a)
    a.add_argument("--dataset", help="dataset file (generated if omitted)")
    a.add_argument("--seeds", type=int, default=1,
                   help="number of consecutive spaced seeds to run (default 1)")
    return ap


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    ds = make_dataset(cfg)
    ds.save(args.out)
    print(f"wrote {ds.num_samples} samples {ds.frame_shape} to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    ds = load_or_make_dataset(cfg)
    model, report = train(cfg, ds)
    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt = os.path.join(cfg.out_dir, f"{cfg.variant}_s{cfg.seed}.sdck")
    save_checkpoint(model, model_config_echo(model, {"t": cfg.t, "epochs": cfg.epochs}),
                    ckpt)
    report_files([report], cfg.out_dir)
    print(f"checkpoint {ckpt}")
    print(f"final train loss {report.epoch_losses[-1]:.6g}" if report.epoch_losses
          else "no epochs run")
    print(f"test NMSE {report.nmse_db:+.2f} dB  ({report.wall_clock_s:.1f}s, "
          f"{report.steps} steps)")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    model, _echo = load_checkpoint(args.checkpoint)
    ds = load_or_make_dataset(cfg)
    book = QuantizerCodebook.load(args.codebook) if args.codebook else None
    _tr, _va, te = split_indices(ds.num_samples,
                                 (cfg.split_train, cfg.split_val, cfg.split_test),
                                 cfg.seed)
    report = evaluate(model, ds, indices=te, codebook=book, config=cfg)
    report_files([report], cfg.out_dir)
    print(f"NMSE {report.nmse_db:+.2f} dB over {len(te)} test samples")
    if report.nmse_q_db is not None:
        print(f"NMSE-Q {report.nmse_q_db:+.2f} dB "
              f"(gap {report.nmse_q_db - report.nmse_db:+.2f} dB)")
    return 0


def cmd_quantize(args) -> int:
    cfg = _load_config(args)
    model, _echo = load_checkpoint(args.checkpoint)
    ds = load_or_make_dataset(cfg)
    _tr, va, _te = split_indices(ds.num_samples,
                                 (cfg.split_train, cfg.split_val, cfg.split_test),
                                 cfg.seed)
    book = train_codeword_quantizer(model, ds, va, bits=cfg.quant_bits)
    book.save(args.out)
    print(f"trained {cfg.quant_bits}-bit codebook on {len(va)} validation samples; "
          f"{len(book.levels)} levels -> {args.out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    ds = load_or_make_dataset(cfg)
    reports = []
    for k in range(args.seeds):
        run_cfg = replace(cfg, seed=cfg.seed + 1000 * k)
        reports.extend(ablate(run_cfg, ds))
    json_path, csv_path = report_files(reports, cfg.out_dir)
    print(f"wrote {json_path} and {csv_path}")
    by_variant = {}
    for r in reports:
        by_variant.setdefault(r.variant, []).append(r.nmse_db)
    width = max(len(v) for v in by_variant)
    for variant, vals in by_variant.items():
        print(f"{variant:<{width}}  mean NMSE {np.mean(vals):+7.2f} dB "
              f"over {len(vals)} seed(s)")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "quantize": cmd_quantize,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
