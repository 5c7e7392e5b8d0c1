"""
Command-line interface: ``ravnet <subcommand> [flags]``.

Exit status is 0 on success, 1 on usage errors (bad flags, bad config file,
invalid settings) and 2 on runtime failures. Diagnostics go to stderr.
"""

import argparse
import contextlib
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .arch import CA_MODES, DECODERS, ENCODERS, NetworkConfig
from .data import (
    WindowSpec,
    hu_window,
    load_manifest,
    read_image_file,
    read_slice,
    split_train_val,
    synth_generate,
    write_png,
)
from .errors import ConfigError, RavNetError
from .losses import binarize
from .trainer import LOSS_KINDS, TrainConfig, evaluate, load_checkpoint, predict_prob, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
THREADS_ENV = "RAVNET_THREADS"

log = logging.getLogger("ravnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# Training settings accepted from the config file and as flags: key -> parser.
TRAIN_KEYS = {
    "lr": float,
    "batch_size": int,
    "max_epochs": int,
    "early_stop_loss": float,
    "loss_kind": str,
    "seed": int,
    "wl": float,
    "ww": float,
    "levels": int,
    "base_channels": int,
    "encoder": str,
    "decoder": str,
    "ca": str,
    "val_frac": float,
}
CHOICES = {"loss_kind": LOSS_KINDS, "encoder": ENCODERS, "decoder": DECODERS, "ca": CA_MODES}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in TRAIN_KEYS:
            raise UsageError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[key] = TRAIN_KEYS[key](value)
        except ValueError:
            raise UsageError(f"{source}:{lineno}: bad value for {key}: {value!r}") from None
        if key in CHOICES and out[key] not in CHOICES[key]:
            raise UsageError(f"{source}:{lineno}: {key} must be one of {CHOICES[key]}")
    return out


def read_config(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror or exc}") from None
    return parse_config_text(text, str(path))


def build_train_config(settings: dict) -> tuple:
    """``(TrainConfig, val_frac)`` from merged settings; defaults fill the gaps."""
    net = NetworkConfig.desk()
    net = replace(net, **{k: settings[k] for k in ("levels", "base_channels", "encoder", "decoder", "ca")
                          if k in settings})
    base = WindowSpec()
    window = WindowSpec(settings.get("wl", base.wl), settings.get("ww", base.ww))
    keys = ("lr", "batch_size", "max_epochs", "early_stop_loss", "loss_kind", "seed")
    cfg = TrainConfig(window=window, net=net, **{k: settings[k] for k in keys if k in settings})
    val_frac = settings.get("val_frac", 0.2)
    if not 0 <= val_frac < 1:
        raise ConfigError(f"val_frac must be in [0, 1), got {val_frac}")
    return cfg, val_frac


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    m = synth_generate(args.count, args.size, args.seed, args.out_dir)
    print(os.path.join(args.out_dir, "manifest.csv"))
    log.info("wrote %d phantoms", len(m))


def cmd_preprocess(args):
    m = load_manifest(args.manifest)
    window = WindowSpec(args.wl, args.ww)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for entry in m:
        s = read_slice(entry, m)
        write_png(out / f"{s.id}.png", hu_window(s.image, window))
    print(f"{len(m)} previews in {out}")


def cmd_train(args):
    settings = read_config(args.config) if args.config else {}
    settings.update({k: v for k, v in vars(args).items() if k in TRAIN_KEYS and v is not None})
    cfg, val_frac = build_train_config(settings)
    manifest = load_manifest(args.manifest)
    if args.val_manifest:
        train_m, val_m = manifest, load_manifest(args.val_manifest)
    elif val_frac > 0 and len(manifest) > 1:
        train_m, val_m = split_train_val(manifest, val_frac, cfg.seed)
    else:
        train_m, val_m = manifest, None
    history_path = args.history or f"{args.out}.history.csv"
    best, history = train(cfg, train_m, val_m, args.out, history_path)
    last = history.rows[-1]
    print(f"epochs={len(history.rows)} train_loss={last[1]!r} val_dsc={last[2]!r}")
    print(f"checkpoint={args.out} history={history_path}")


def cmd_eval(args):
    ck = load_checkpoint(args.checkpoint)
    agg, _ = evaluate(ck, load_manifest(args.manifest), report_path=args.report, pooled=args.pooled)
    sys.stdout.write(agg.to_text())


def cmd_predict(args):
    ck = load_checkpoint(args.checkpoint)
    model = ck.build_model()
    image = read_image_file(args.image)
    prob = predict_prob(model, image, ck.window)
    write_png(args.out, binarize(prob).astype(np.uint8) * 255)
    print(args.out)


def cmd_gradcheck(args):
    from .suite import format_table, run_suite

    results = run_suite(args.module, range(args.seed, args.seed + args.seeds))
    sys.stdout.write(format_table(results))
    failed = sorted({r.name for r in results if not r.passed})
    if failed:
        raise RavNetError(f"gradient check failed: {', '.join(failed)}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ravnet", description="RA V-Net segmentation toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="write synthetic phantoms and a manifest")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="write windowed PNG previews")
    s.add_argument("--manifest", required=True)
    s.add_argument("--wl", type=float, default=WindowSpec.wl)
    s.add_argument("--ww", type=float, default=WindowSpec.ww)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train a model (flags override --config)")
    s.add_argument("--manifest", required=True, help="training manifest")
    s.add_argument("--val-manifest", help="validation manifest; default is a nested split")
    s.add_argument("--config", help="key=value settings file")
    s.add_argument("--out", required=True, help="best checkpoint path")
    s.add_argument("--history", help="history CSV path (default <out>.history.csv)")
    for key, typ in TRAIN_KEYS.items():
        s.add_argument(f"--{key.replace('_', '-')}", dest=key, type=typ, choices=CHOICES.get(key))
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--report", help="per-sample CSV report path")
    s.add_argument("--pooled", action="store_true", help="aggregate summed counts instead of per-slice means")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="segment one HUSL slice into a 0/255 PNG")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--module", default="all", choices=("all", "tensor", "layers", "arch"))
    s.add_argument("--seed", type=int, default=0, help="first seed")
    s.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds")
    s.set_defaults(func=cmd_gradcheck)
    return p


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "gradcheck" and args.seeds < 1:
            raise UsageError("--seeds must be >= 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        with _thread_limit():
            args.func(args)
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RavNetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run())
