"""``srkit`` command line: analyze | sweep | train | upscale | eval.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

from . import checkpoint, cost, metrics
from .arch import SpecError, load_network
from .config import ConfigError, RunConfig
from .imaging import list_pngs, read_png, write_png
from .tensor import NumericError, ShapeError
from .train import AdamState, DataError, PairedDataset, TrainingDiverged, load_state, log_to_csv, save_state, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("srkit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _hr(text: str) -> tuple:
    try:
        w, h = (int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError("HR dimensions must be positive")
    return w, h


def _int_list(text: str) -> list:
    try:
        return [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _write_text(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


def _load_images(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"dataset directory not found: {directory}")
    paths = list_pngs(directory)
    if not paths:
        raise DataError(f"no PNG images in {directory}")
    return [p.stem for p in paths], [read_png(p) for p in paths]


def _load_checkpoint(path):
    try:
        return load_network(checkpoint.load(path))
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_analyze(args) -> int:
    overrides = ([f"variant={args.variant}"] if args.variant else []) + args.set
    spec = RunConfig.load(args.config, overrides).network_spec()
    report = cost.count(spec, args.hr[0], args.hr[1], args.scale)
    print(report.table())
    if args.out:
        _write_text(args.out, report.to_csv())
    return EXIT_OK


def cmd_sweep(args) -> int:
    recursive = {"no": (False,), "yes": (True,), "both": (False, True)}[args.recursive]
    base = RunConfig.load(None, args.set).network_spec()
    rows = cost.sweep(args.groups, recursive, args.hr, args.scale, base)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["groups", "recursive", "params", "body_params", "mult_adds"])
    for r in rows:
        writer.writerow([r["groups"], r["recursive"], r["params"], r["body_params"], int(r["mult_adds"])])
    text = buf.getvalue()
    if args.out:
        _write_text(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config, args.set)
    spec, tcfg = cfg.network_spec(), cfg.train_config()
    if not cfg.get("dataset"):
        raise ConfigError("config must set 'dataset'")
    ckpt_path = Path(cfg.get("checkpoint", "model.crnk"))
    state_path = ckpt_path.with_name(ckpt_path.name + ".state")
    log_path = Path(cfg.get("log", str(ckpt_path.with_suffix(".csv"))))
    _, images = _load_images(cfg.get("dataset"))
    dataset = PairedDataset(images, tcfg.scales)

    store = state = None
    if args.resume:
        if not ckpt_path.exists() or not state_path.exists():
            raise DataError(f"cannot resume: {ckpt_path} or {state_path} missing")
        store, state = checkpoint.load(ckpt_path), load_state(state_path)
        log.info("resuming from step %d", state.t)

    def on_checkpoint(step, store_, state_: AdamState):
        checkpoint.save(store_, ckpt_path)
        save_state(state_, state_path)
        log.info("checkpoint at step %d", step)

    store, state, rows = train(spec, dataset, tcfg, store=store, state=state, on_checkpoint=on_checkpoint)
    checkpoint.save(store, ckpt_path)
    save_state(state, state_path)
    text = log_to_csv(rows)
    if args.resume and log_path.exists():
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(text.split("\n", 1)[1])
    else:
        _write_text(log_path, text)
    if rows:
        print(f"step {state.t}: loss {rows[-1].loss:.5f}; saved {ckpt_path}")
    return EXIT_OK


def cmd_upscale(args) -> int:
    net = _load_checkpoint(args.ckpt)
    if args.scale not in net.spec.scales:
        raise DataError(f"checkpoint supports scales {net.spec.scales}, not {args.scale}")
    try:
        img = read_png(args.input)
    except (FileNotFoundError, OSError) as e:
        raise DataError(f"cannot read {args.input}: {e}") from None
    sr = metrics.network_upscaler(net)(img, args.scale)
    write_png(args.out, sr)
    print(f"{img.shape[1]}x{img.shape[0]} -> {sr.shape[1]}x{sr.shape[0]}: {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    names, images = _load_images(args.dataset)
    baseline = metrics.evaluate(metrics.bicubic_upscaler, images, args.scale, names)
    if args.ckpt:
        net = _load_checkpoint(args.ckpt)
        if args.scale not in net.spec.scales:
            raise DataError(f"checkpoint supports scales {net.spec.scales}, not {args.scale}")
        report = metrics.evaluate(metrics.network_upscaler(net), images, args.scale, names)
    else:
        report = baseline
    text = report.to_csv()
    text += f"BICUBIC,{args.scale},{baseline.mean_psnr!r},{baseline.mean_ssim!r}\n"
    if args.out:
        _write_text(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="srkit", description="Cascading residual networks for super-resolution.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("analyze", help="parameter and Mult-Adds report")
    p.add_argument("--variant", help="baseline, carn-nl, carn-ng, carn, carn-m or custom (default carn)")
    p.add_argument("--config", help="key=value file with network settings")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a setting")
    p.add_argument("--hr", type=_hr, default=cost.HD_720P, metavar="WxH", help="HR output size (default 1280x720)")
    p.add_argument("--scale", type=int, default=4, choices=(2, 3, 4))
    p.add_argument("--out", help="write per-layer CSV here")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="group size / recursion efficiency sweep")
    p.add_argument("--groups", type=_int_list, default=[1, 2, 4, 8, 16, 32, 64])
    p.add_argument("--recursive", choices=("no", "yes", "both"), default="both")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override base network settings")
    p.add_argument("--hr", type=_hr, default=cost.HD_720P, metavar="WxH")
    p.add_argument("--scale", type=int, default=4, choices=(2, 3, 4))
    p.add_argument("--out", help="write CSV here")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("config", help="key=value run config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a setting")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint and its .state file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("upscale", help="super-resolve one PNG")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--scale", type=int, required=True, choices=(2, 3, 4))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_upscale)

    p = sub.add_parser("eval", help="PSNR/SSIM on a directory of HR PNGs")
    p.add_argument("--dataset", required=True)
    p.add_argument("--scale", type=int, required=True, choices=(2, 3, 4))
    p.add_argument("--ckpt", help="checkpoint to evaluate; bicubic only when omitted")
    p.add_argument("--out", help="write CSV here")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SpecError, UsageError) as e:
        print(f"srkit: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NumericError, FloatingPointError) as e:
        print(f"srkit: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, checkpoint.CheckpointError, ShapeError, ValueError, OSError) as e:
        print(f"srkit: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
