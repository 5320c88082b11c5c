"""Command-line entry point: degrade, train, restore, evaluate, sweep, stratify, tables."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import eval_harness as eh
from . import jpeg_sim, metrics, plotting
from . import rrdb_model as rm
from . import trainer
from .imaging import ImageFormatError, list_images, load_image, save_image

log = logging.getLogger("rrdbjpeg")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _qf(text: str) -> int:
    try:
        return jpeg_sim.check_qf(int(text))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid quality factor {text!r} (integer 1-100)")


def _qf_list(text: str) -> list[int]:
    parts = [p for p in text.replace(" ", "").split(",") if p]
    if not parts:
        raise argparse.ArgumentTypeError("empty QF list")
    return [_qf(p) for p in parts]


def _qf_range(text: str) -> tuple[int, int]:
    lo, sep, hi = text.partition(",")
    if not sep:
        lo, sep, hi = text.partition("-")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}")
    lo, hi = _qf(lo), _qf(hi)
    if lo > hi:
        raise argparse.ArgumentTypeError(f"empty range {text!r}")
    return lo, hi


def _inputs(path: Path) -> list[Path]:
    if path.is_dir():
        found = list_images(path)
        if not found:
            raise FileNotFoundError(f"no images in {path}")
        return found
    if not path.exists():
        raise FileNotFoundError(f"input not found: {path}")
    return [path]


def _echo(args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    log.info("resolved configuration: %s", " ".join(f"{k}={v}" for k, v in resolved.items()))


def _models(args) -> eh.RestorationModels:
    y = rm.load_weights(args.y_weights)
    c = rm.load_weights(args.cbcr_weights) if getattr(args, "cbcr_weights", None) else None
    if y.spec.variant is not rm.Variant.Y:
        raise UsageError(f"{args.y_weights} holds a {y.spec.variant.value} network, expected y")
    if c is not None and c.spec.variant is not rm.Variant.CBCR:
        raise UsageError(f"{args.cbcr_weights} holds a {c.spec.variant.value} network, expected cbcr")
    return eh.RestorationModels(y, c)


# --------------------------------------------------------------------------
# subcommands


def cmd_degrade(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for path in _inputs(Path(args.input)):
        img = load_image(path)
        for qf in args.qf:
            target = out / f"{path.stem}_qf{qf}{path.suffix.lower()}"
            save_image(jpeg_sim.degrade(img, qf), target)
            n += 1
    print(f"wrote {n} degraded image(s) to {out}")


def cmd_train(args) -> None:
    overrides = {"variant": args.variant, "seed": args.seed, "train_dir": args.train_dir,
                 "out_dir": args.out, "max_steps": args.max_steps, "epochs": args.epochs,
                 "y_weights": args.y_weights}
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.config:
        cfg = trainer.load_config(args.config, overrides)
    else:
        cfg = trainer.parse_config("", overrides)
    if not cfg.train_dir:
        raise UsageError("no training directory (set train_dir in the config or pass --train-dir)")
    log.info("training configuration:\n%s", cfg.to_text().rstrip())
    log.info("seed %d drives initialization, crop sampling and shuffling", cfg.seed)
    cache = cfg.cache_dir or str(Path(cfg.out_dir) / "cache")
    dataset = trainer.build_dataset(cfg.train_dir, cfg.qf_set, cache)
    log.info("dataset: %d pairs (%d cache hits)", len(dataset), dataset.cache_hits)
    if cfg.variant == "cbcr":
        if not cfg.y_weights:
            raise UsageError("CbCr training needs --y-weights")
        model, rows = trainer.train_cbcr(cfg, dataset, cfg.y_weights)
    else:
        model, rows = trainer.train_y(cfg, dataset)
    last = rows[-1] if rows else {}
    print(f"trained {cfg.variant} network: {model.spec.parameter_count()} parameters, "
          f"{last.get('step', 0)} steps, final loss {last.get('train_loss', float('nan')):.5f}")


def cmd_restore(args) -> None:
    models = _models(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = _inputs(Path(args.input))
    for path in paths:
        save_image(models.restore_rgb(load_image(path)), out / path.name)
    print(f"restored {len(paths)} image(s) into {out}")


EVAL_COLUMNS = ("filename", "qf", "stage", "psnr", "psnr_b", "ssim")
TABLE_COLUMNS = ("qf", "metric", "degraded", "restored")


def _evaluate_dirs(args, mode: metrics.ChannelMode) -> None:
    refs = {p.name: p for p in list_images(args.ref)}
    tests = list_images(args.test)
    if not tests:
        raise FileNotFoundError(f"no images in {args.test}")
    rows = []
    for path in tests:
        if path.name not in refs:
            raise FileNotFoundError(f"no reference for {path.name} in {args.ref}")
        rep = metrics.evaluate_pair(load_image(refs[path.name]), load_image(path), mode)
        rows.append({"filename": path.name, "psnr": rep.psnr, "psnr_b": rep.psnr_b, "ssim": rep.ssim})
    rows.append({"filename": "MEAN", "psnr": metrics.capped_mean(r["psnr"] for r in rows),
                 "psnr_b": metrics.capped_mean(r["psnr_b"] for r in rows),
                 "ssim": sum(r["ssim"] for r in rows) / len(rows)})
    path = eh.write_csv(Path(args.out) / "evaluate.csv", rows, ("filename", "psnr", "psnr_b", "ssim"),
                        [f"channel_mode={mode.value}"])
    mean = rows[-1]
    print(f"{len(rows) - 1} pair(s), {mode.value}: PSNR {mean['psnr']:.3f}  PSNR-B {mean['psnr_b']:.3f}  "
          f"SSIM {mean['ssim']:.4f}  -> {path}")


def cmd_evaluate(args) -> None:
    mode = metrics.ChannelMode.parse(args.mode)
    if args.ref or args.test:
        if not (args.ref and args.test):
            raise UsageError("--ref and --test must be given together")
        _evaluate_dirs(args, mode)
        return
    if not (args.testset and args.y_weights):
        raise UsageError("evaluate needs --testset and --y-weights (or --ref/--test)")
    report = eh.fixed_qf_eval(_models(args), args.testset, args.qf, mode)
    out = Path(args.out)
    header = [f"channel_mode={mode.value}"]
    eh.write_csv(out / "evaluate.csv", report.table, TABLE_COLUMNS, header)
    eh.write_csv(out / "evaluate_per_image.csv", report.per_image, EVAL_COLUMNS, header)
    plotting.plot_fixed_qf(report.table, out / "evaluate.png")
    print(f"channel mode {mode.value}")
    print(f"{'qf':>4} {'metric':>7} {'degraded':>10} {'restored':>10}")
    for r in report.table:
        print(f"{r['qf']:>4} {r['metric']:>7} {r['degraded']:>10.4f} {r['restored']:>10.4f}")


def cmd_sweep(args) -> None:
    result = eh.unknown_qf_sweep(_models(args), args.testset, args.qf_range, args.mode)
    out = Path(args.out)
    paths = eh.write_sweep(result, out)
    plotting.plot_sweep(result.rows, out / "sweep.png", eh.TRAINING_QFS)
    for r in result.rows:
        mark = " " if r["seen_in_training"] else "*"
        print(f"qf {r['qf']:>3}{mark} PSNR {r['psnr']:.3f}  PSNR-B {r['psnr_b']:.3f}  SSIM {r['ssim']:.4f}")
    for metric, qf, drop in result.unstable:
        print(f"instability: {metric} drops {drop:.3f} dB at qf {qf}")
    print(f"(* = QF not in the training set)  -> {paths['csv']}")


STRAT_COLUMNS = ("bin", "label", "n_patches", "degraded_psnr", "degraded_psnr_b", "degraded_ssim",
                 "restored_psnr", "restored_psnr_b", "restored_ssim")
PATCH_COLUMNS = ("patch_id", "source", "row", "col", "frequency_score", "detail_score", "freq_bin", "detail_bin",
                 "degraded_psnr", "degraded_psnr_b", "degraded_ssim", "restored_psnr", "restored_psnr_b",
                 "restored_ssim")


def cmd_stratify(args) -> None:
    report = eh.stratified_eval(_models(args), args.testset, args.qf, args.score_on)
    out = Path(args.out)
    eh.write_csv(out / "stratify_frequency.csv", report.frequency_table, STRAT_COLUMNS)
    eh.write_csv(out / "stratify_detail.csv", report.detail_table, STRAT_COLUMNS)
    eh.write_csv(out / "stratify_patches.csv", report.per_patch, PATCH_COLUMNS)
    plotting.plot_bins(report.frequency_table, out / "stratify_frequency.png", "frequency bins")
    plotting.plot_bins(report.detail_table, out / "stratify_detail.png", "detail bins")
    for name, table in (("frequency", report.frequency_table), ("detail", report.detail_table)):
        print(f"{name} bins ({len(report.patches)} patches)")
        for r in table:
            print(f"  {r['label']:>12} n={r['n_patches']:<4} PSNR {r['degraded_psnr']:.3f} -> {r['restored_psnr']:.3f}")


def cmd_tables(args) -> None:
    luma, chroma = jpeg_sim.tables_for(args.qf)
    text = f"# qf={args.qf}\n{luma.to_text()}\n{chroma.to_text()}\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text, end="")


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rrdbjpeg", description="JPEG artifact removal with two-stage RRDB networks")
    p.add_argument("--log-dir", help="also write a log file here")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("degrade", help="simulate JPEG compression")
    d.add_argument("--in", dest="input", required=True, help="image file or directory")
    d.add_argument("--qf", type=_qf_list, required=True, help="quality factor or comma list")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_degrade)

    t = sub.add_parser("train", help="train the Y or CbCr network")
    t.add_argument("--variant", choices=("y", "cbcr"), required=True)
    t.add_argument("--config", help="key=value config file; flags override it")
    t.add_argument("--train-dir")
    t.add_argument("--out", help="run directory (weights, logs, cache)")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--y-weights", help="frozen Y-Net for CbCr training")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("restore", help="restore compressed images")
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--y-weights", required=True)
    r.add_argument("--cbcr-weights")
    r.set_defaults(func=cmd_restore)

    def model_flags(sp):
        sp.add_argument("--testset", help="directory of clean test images")
        sp.add_argument("--y-weights")
        sp.add_argument("--cbcr-weights")
        sp.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", help="fixed-QF benchmark, or score --test against --ref")
    model_flags(e)
    e.add_argument("--qf", type=_qf_list, default=list(eh.BENCHMARK_QFS))
    e.add_argument("--mode", choices=("y", "rgb"), default="y")
    e.add_argument("--ref")
    e.add_argument("--test")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="unknown-QF robustness sweep")
    model_flags(s)
    s.add_argument("--qf-range", type=_qf_range, default=(5, 25))
    s.add_argument("--mode", choices=("y", "rgb"), default="y")
    s.set_defaults(func=cmd_sweep, needs_models=True)

    st = sub.add_parser("stratify", help="frequency / detail quintile breakdown")
    model_flags(st)
    st.add_argument("--qf", type=_qf, default=10)
    st.add_argument("--score-on", choices=("degraded", "clean"), default="degraded")
    st.set_defaults(func=cmd_stratify, needs_models=True)

    q = sub.add_parser("tables", help="print scaled quantization tables")
    q.add_argument("--qf", type=_qf, required=True)
    q.add_argument("--out")
    q.set_defaults(func=cmd_tables)
    return p


def _setup_logging(args) -> None:
    level = logging.DEBUG if args.verbose else logging.INFO
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if args.log_dir:
        Path(args.log_dir).mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(Path(args.log_dir) / "rrdbjpeg.log"))
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", handlers=handlers, force=True)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    _setup_logging(args)
    _echo(args)
    if getattr(args, "needs_models", False) and not (args.testset and args.y_weights):
        print(f"rrdbjpeg {args.command}: --testset and --y-weights are required", file=sys.stderr)
        return EXIT_USAGE
    try:
        args.func(args)
    except UsageError as exc:
        print(f"rrdbjpeg {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"rrdbjpeg {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ImageFormatError, rm.WeightFormatError) as exc:
        print(f"rrdbjpeg {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"rrdbjpeg {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
