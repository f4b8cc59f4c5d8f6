# main.py

"""Command-line entry point: synth, train, infer, eval, ablate, gradcheck, cost."""

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np
import pandas as pd

from . import tensor as T
from .analysis import evaluate, write_report
from .checkpoint import load_model, read_checkpoint, restore_state
from .config import load_config
from .cost import cost_table, summarize
from .dataset import SnowDataset, read_clean_dir, synthesize_dataset
from .errors import ConfigError, FormatError, InputError, NumericError, ShapeError
from .figures import plot_comparison, plot_loss_curve
from .gradcheck import SCOPES, STEPS, run_suite
from .image_io import image_read, image_write
from .model import MSPFormer, restore
from .train import METRICS_LOG, read_metrics_log, train_loop

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

# CLI variant name -> ModelConfig overrides
ABLATIONS = {
    "msp": {},
    "ssp": {"attention": "SSP"},
    "sra": {"attention": "SRA"},
    "ma": {"attention": "MA"},
    "no-lcb": {"use_lcb": False},
    "no-cs": {"channel_shuffle": False},
    "no-ca": {"channel_attention": False},
}
ABLATION_COLUMNS = ["variant", "params", "macs", "psnr", "ssim"]


def parse_extent(text):
    """'HxW' -> (H, W)."""
    try:
        h, w = (int(part) for part in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got '{text}'") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"extents must be positive, got '{text}'")
    return h, w


def worker_threads(cfg, deterministic):
    if deterministic:
        return 1
    if cfg.io.threads > 0:
        return cfg.io.threads
    try:
        return max(1, int(os.environ.get("MSPF_THREADS", "1")))
    except ValueError:
        raise ConfigError(f"MSPF_THREADS must be an integer, got '{os.environ['MSPF_THREADS']}'") from None


def run_config(args):
    cfg = load_config(args.config)
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got '{item}'")
        cfg.set(key.strip(), value)
    return cfg


# --- Commands ---

def cmd_synth(args, cfg):
    clean_images = read_clean_dir(args.clean) if args.clean else None
    count = args.count if args.count is not None else (len(clean_images) if clean_images else 8)
    if count < 0:
        raise InputError(f"--count must be >= 0, got {count}")
    seed = args.seed if args.seed is not None else cfg.snow.seed
    synthesize_dataset(args.out, cfg.snow, seed, count, clean_images, size=args.size, ext=cfg.io.image_format)
    print(f"wrote {count} pairs to {args.out}")
    return EXIT_OK


def cmd_train(args, cfg):
    dataset = SnowDataset(args.data)
    model = MSPFormer(cfg.model, seed=cfg.train.seed)
    state = cfg.train.optim_state()
    start_epoch = start_step = 0
    if args.resume:
        ckpt = read_checkpoint(args.resume)
        model.load_state(ckpt.tensors)
        restore_state(ckpt, state)
        start_epoch, start_step = ckpt.epoch, ckpt.step
        logger.info("resume=%s epoch=%d step=%d", args.resume, start_epoch, start_step)
    logger.info("train params=%d pairs=%d epochs=%d", model.count_params(), len(dataset), cfg.train.epochs)

    result = train_loop(model, dataset, cfg.train, args.out, state, start_epoch, start_step,
                        deterministic=args.deterministic, config_text=cfg.to_ini())
    if cfg.io.plot and result.epoch > 0:
        plot_loss_curve(read_metrics_log(os.path.join(args.out, METRICS_LOG)), os.path.join(args.out, "loss.png"))
    print(f"epoch={result.epoch} step={result.step} final={result.final_path}")
    return EXIT_OK


def cmd_infer(args, cfg):
    model, _, _ = load_model(args.ckpt)
    image = image_read(args.input)
    image_write(restore(model, image), args.output)
    logger.info("infer input=%s output=%s size=%dx%d", args.input, args.output, image.shape[2], image.shape[3])
    return EXIT_OK


def cmd_eval(args, cfg):
    model, _, _ = load_model(args.ckpt)
    dataset = SnowDataset(args.data)
    result = evaluate(model, dataset, workers=worker_threads(cfg, args.deterministic))
    print(result.table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    print(f"mean psnr={result.mean_psnr:.4f} ssim={result.mean_ssim:.4f} "
          f"baseline_psnr={result.baseline_psnr:.4f} baseline_ssim={result.baseline_ssim:.4f} "
          f"skipped={result.skipped}")
    if args.report:
        write_report(result, args.report)
    if args.figure:
        _, snowy, clean = dataset.pair(0)
        restored = restore(model, T.Tensor(snowy[None])).data
        plot_comparison(snowy, restored, clean, args.figure)
    return EXIT_OK


def cmd_ablate(args, cfg):
    dataset = SnowDataset(args.data)
    eval_set = SnowDataset(args.eval_data) if args.eval_data else dataset
    h, w = args.res
    rows = []
    for variant in args.variant:
        model_cfg = dataclasses.replace(cfg.model, **ABLATIONS[variant])
        variant_cfg = dataclasses.replace(cfg, model=model_cfg)
        model = MSPFormer(model_cfg, seed=cfg.train.seed)
        out_dir = os.path.join(args.out, variant)
        logger.info("ablate variant=%s params=%d", variant, model.count_params())
        train_loop(model, dataset, cfg.train, out_dir, deterministic=args.deterministic,
                   config_text=variant_cfg.to_ini())
        scores = evaluate(model, eval_set, workers=worker_threads(cfg, args.deterministic))
        rows.append({"variant": variant, "params": model.count_params(), "macs": model.count_macs(h, w),
                     "psnr": scores.mean_psnr, "ssim": scores.mean_ssim})

    table = pd.DataFrame(rows, columns=ABLATION_COLUMNS)
    os.makedirs(args.out, exist_ok=True)
    table.to_csv(os.path.join(args.out, "ablation.tsv"), sep="\t", index=False, float_format="%.6f")
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return EXIT_OK


def cmd_gradcheck(args, cfg):
    scopes = SCOPES if args.scope == "all" else (args.scope,)
    failed = 0
    for scope in scopes:
        report = run_suite(scope, instances=args.instances, seed=args.seed, tol=args.tol)
        summary = report.groupby("case", sort=False).agg(
            instances=("instance", "count"), worst=("max_rel_error", "max"), passed=("passed", "all"))
        print(f"[{scope}] tol={args.tol:g} step={STEPS[scope]:g}")
        print(summary.to_string(float_format=lambda v: f"{v:.3e}"))
        failed += int((~summary["passed"]).sum())
    print("PASS" if failed == 0 else f"FAIL cases={failed}")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def cmd_cost(args, cfg):
    h, w = args.res
    model = MSPFormer(cfg.model, seed=cfg.train.seed)
    if args.per_layer:
        with pd.option_context("display.max_rows", None, "display.width", 120):
            print(cost_table(model, h, w).to_string(index=False))
    print(summarize(model, h, w).to_string())
    params, macs = model.count_params(), model.count_macs(h, w)
    print(f"params={params} ({params / 1e6:.3f}M) macs={macs} ({macs / 1e9:.3f}G) res={h}x{w}")
    return EXIT_OK


# --- Parser ---

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration (defaults when omitted)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one configuration value; repeatable")
    common.add_argument("--deterministic", action="store_true",
                        help="64-bit scalars, one worker thread, zero timings in the metrics log")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true")
    verbosity.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="mspformer", description="Single-image snow removal toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="synthesize snowy/clean image pairs")
    p.add_argument("--clean", help="directory of clean .ppm/.png images (procedural scenes when omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=parse_extent, default=(64, 64), help="HxW of procedural scenes")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model on a pair directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", metavar="CKPT")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="restore one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a pair directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", help="write the per-image table as TSV")
    p.add_argument("--figure", help="write a snowy/restored/ground-truth panel of the first pair")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="train and score architecture variants")
    p.add_argument("--variant", nargs="+", choices=list(ABLATIONS), default=list(ABLATIONS))
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", help="pairs to score on (training pairs when omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--res", type=parse_extent, default=(256, 256), help="HxW for the MAC column")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--scope", choices=list(SCOPES) + ["all"], default="ops")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("cost", parents=[common], help="parameter and MAC accounting")
    p.add_argument("--res", type=parse_extent, default=(256, 256))
    p.add_argument("--per-layer", action="store_true")
    p.set_defaults(func=cmd_cost)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    previous = T.get_default_dtype()
    if args.deterministic:
        T.set_default_dtype(np.float64)
    try:
        cfg = run_config(args)
        return args.func(args, cfg)
    except (ConfigError, InputError, FormatError, ShapeError, OSError) as e:
        logger.error("%s", e)
        return EXIT_USAGE
    except NumericError as e:
        logger.error("numeric failure: %s", e)
        return EXIT_NUMERIC
    finally:
        T.set_default_dtype(previous)


if __name__ == "__main__":
    sys.exit(main())
