"""Command-line entry point: ``dwinformer <command> ...``.

Exit codes: 0 success, 1 failed gradient check, 2 usage/config/file errors,
3 numeric failure. Set ``DWINFORMER_LOG`` (DEBUG, INFO, WARNING, ...) to
control log verbosity on stderr.
"""

import argparse
import csv
import logging
import os
import sys

import numpy as np

from dwinformer import attention as A
from dwinformer import gradcheck
from dwinformer import model as M
from dwinformer import tensor as T
from dwinformer.config import init_seed, load_config
from dwinformer.errors import CheckpointError, ConfigError, DwinError, NumericError
from dwinformer.fileio import export_pgm16, read_tensor, write_tensor
from dwinformer.losses import EVAL_MIN_DEPTH, MetricReport, clamp_for_eval, compute_metrics, mean_report
from dwinformer.train import load_dataset, train, write_dataset

log = logging.getLogger("dwinformer")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def _setup_logging():
    level = os.environ.get("DWINFORMER_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _require_file(path, what, error=ConfigError):
    if not os.path.isfile(path):
        raise error(f"{what} not found: {path}")


def cmd_gen_data(args):
    run = load_config(args.config)
    entries = write_dataset(run, args.out)
    print(f"wrote {len(entries)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args):
    run = load_config(args.config)
    if not os.path.isfile(os.path.join(args.data, "manifest.json")):
        raise ConfigError(f"no manifest.json in data directory {args.data}")
    if args.resume is not None:
        _require_file(args.resume, "checkpoint", CheckpointError)
    samples = load_dataset(args.data)

    def emit(line):
        print(line, flush=True)

    train(run, samples, args.out, emit=emit, resume=args.resume, max_steps=args.max_steps,
          init_seed=init_seed(run))
    return EXIT_OK


def _predict(image, params, config):
    with T.no_grad():
        return M.model_forward(image[None], params, config).depth.data[0]


def cmd_eval(args):
    _require_file(args.ckpt, "checkpoint", CheckpointError)
    config, params, _, _ = M.load_checkpoint(args.ckpt)
    samples = load_dataset(args.data)
    if args.export_depth:
        os.makedirs(args.export_depth, exist_ok=True)
    reports = []
    for i, s in enumerate(samples):
        pred = clamp_for_eval(_predict(s.image, params, config), EVAL_MIN_DEPTH, config.max_depth)
        reports.append(compute_metrics(pred, s.depth))
        if args.export_depth:
            export_pgm16(pred, os.path.join(args.export_depth, f"sample_{i:04d}_pred.pgm"), config.max_depth)
    with open(args.report, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample"] + MetricReport.columns())
        for i, r in enumerate(reports):
            w.writerow([i] + r.as_row())
        w.writerow(["mean"] + mean_report(reports).as_row())
    mean = mean_report(reports)
    print(f"{len(reports)} samples: abs_rel={mean.abs_rel:.4f} delta1={mean.delta1:.4f} -> {args.report}")
    return EXIT_OK


def cmd_gradcheck(args):
    def report(r):
        status = "PASS" if r.ok else "FAIL"
        print(f"{r.name:<14} max_rel_err={r.error:.3e} tol={r.tol:.0e} {status} "
              f"(worst: analytic={r.analytic:.6e} numeric={r.numeric:.6e}; {r.seconds:.1f}s)", flush=True)

    results = gradcheck.run_suite(args.scale, seed=args.seed, report=report)
    failed = [r.name for r in results if not r.ok]
    print("all checks passed" if not failed else "failed: " + ", ".join(failed))
    return EXIT_OK if not failed else EXIT_CHECK_FAILED


def cmd_export_attn(args):
    _require_file(args.ckpt, "checkpoint", CheckpointError)
    config, params, _, _ = M.load_checkpoint(args.ckpt)
    names = M.attention_layer_names(config)
    if args.layer not in names:
        print(f"error: unknown layer {args.layer!r}; valid layers:", file=sys.stderr)
        for n in names:
            print(f"  {n}", file=sys.stderr)
        return EXIT_USAGE
    _require_file(args.sample, "sample")
    image = read_tensor(args.sample).data.astype(np.float32)
    if image.ndim == 4 and image.shape[0] == 1:
        image = image[0]
    with A.record_attention() as rec:
        _predict(image, params, config)
    weights = rec[args.layer][0]  # (windows, heads, M*M, M*M)
    os.makedirs(args.out, exist_ok=True)
    write_tensor(os.path.join(args.out, f"{args.layer}.dwt"), weights.astype(np.float32))
    heat = weights.mean(axis=0)
    for h in range(heat.shape[0]):
        # weights are probabilities, so 1.0 maps to full scale
        export_pgm16(np.clip(heat[h], 0.0, 1.0), os.path.join(args.out, f"{args.layer}.head{h}.pgm"), 1.0)
    print(f"{args.layer}: {weights.shape[0]} windows x {weights.shape[1]} heads -> {args.out}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="dwinformer", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic depth dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train and log step,lr,loss as CSV on stdout")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path (rewritten periodically)")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--max-steps", type=int, help="stop after this step (schedule still uses total_steps)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-sample metrics plus a mean row as CSV")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--export-depth", help="directory for 16-bit PGM predictions")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="float64 finite-difference checks")
    c.add_argument("--scale", choices=sorted(gradcheck.SCALES), default="tiny")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("export-attn", help="dump one layer's attention weights")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--sample", required=True, help="image TensorFile (H, W, 3)")
    a.add_argument("--layer", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_export_attn)
    return p


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DwinError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
