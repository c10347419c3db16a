"""``udcface`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt_io
from . import dgformer as dgf
from . import dmnet as dmn
from .config import PROFILES, ConfigError, RunConfig
from .imaging import ImageShapeError
from .pipeline import ManifestError



class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("run configuration")
    g.add_argument("--config", type=Path, help="JSON or YAML file of config keys (nested or dotted)")
    g.add_argument("--profile", choices=PROFILES, default="desk", help="built-in defaults (default: desk)")
    g.add_argument("--seed", type=int, help="overrides train.seed and the synthesis seed")
    g.add_argument("--workers", type=int, help="per-image parallelism (data.workers)")
    g.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key; repeatable"
    )
    return p


def _train_flags(p: argparse.ArgumentParser, ablations) -> None:
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="directory for checkpoints and the log")
    p.add_argument("--resume", type=Path, help="training checkpoint to continue from")
    p.add_argument("--ablation", choices=sorted(ablations), default="full")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--crop-size", type=int)
    p.add_argument("--lr-init", type=float)
    p.add_argument("--lr-final", type=float)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--no-plot", action="store_true", help="skip train_log.png")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="udcface", description="UDC face degradation synthesis and dictionary-guided restoration.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synthesize", parents=[common], help="degrade a directory of clean faces")
    p.add_argument("clean_dir", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--generator", choices=("classical", "dmnet"))
    p.add_argument("--checkpoint", type=Path, help="dmnet checkpoint for --generator dmnet")
    p.add_argument("--alpha", type=float)
    p.add_argument("--kernel", choices=("delta", "box", "gaussian"))
    p.add_argument("--kernel-size", type=int)
    p.add_argument("--kernel-sigma", type=float)
    p.add_argument("--noise-sigma", type=float)

    p = sub.add_parser("train-dmnet", parents=[common], help="adversarially train the degradation generator")
    _train_flags(p, dmn.ABLATIONS)
    p.add_argument("--lambda-per", type=float)
    p.add_argument("--lambda-adv", type=float)

    p = sub.add_parser("train-dgformer", parents=[common], help="train the dictionary-guided restorer")
    _train_flags(p, dgf.ABLATIONS)
    p.add_argument("--perceptual-weight", type=float)

    p = sub.add_parser("restore", parents=[common], help="restore a directory of degraded faces")
    p.add_argument("input_dir", type=Path)
    p.add_argument("--checkpoint", type=Path, required=True, help="dgformer checkpoint")
    p.add_argument("--landmarks", type=Path, required=True, help="directory of <id>.json landmark files")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("evaluate", parents=[common], help="PSNR / SSIM / LMD report over a manifest")
    p.add_argument("--manifest", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--identity", action="store_true", help="evaluate the pass-through restorer")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--points-dir", type=Path, help="<id>.json files with landmark points found on the outputs")
    p.add_argument("--save-images", action="store_true")
    p.add_argument("--no-plot", action="store_true", help="skip report.png")

    sub.add_parser("selftest", parents=[common], help="run the built-in oracle and invariant checks")
    return parser


def _run_config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    if args.seed is not None:
        overrides["train.seed"] = args.seed
    if args.workers is not None:
        overrides["data.workers"] = args.workers
    cmd = args.command
    if cmd == "synthesize":
        for flag, key in (
            ("generator", "data.generator"),
            ("checkpoint", "data.checkpoint"),
            ("alpha", "data.alpha"),
            ("kernel", "data.kernel"),
            ("kernel_size", "data.kernel_size"),
            ("kernel_sigma", "data.kernel_sigma"),
            ("noise_sigma", "data.noise_sigma"),
        ):
            val = getattr(args, flag)
            if val is not None:
                overrides[key] = str(val) if isinstance(val, Path) else val
    elif cmd in ("train-dmnet", "train-dgformer"):
        family = cmd.split("-")[1]
        flags = ["iterations", "batch_size", "crop_size", "lr_init", "lr_final", "checkpoint_every"]
        flags += ["lambda_per", "lambda_adv"] if family == "dmnet" else ["perceptual_weight"]
        for flag in flags:
            val = getattr(args, flag)
            if val is not None:
                overrides[f"train.{family}.{flag}"] = val
        for k, v in (dmn.ABLATIONS if family == "dmnet" else dgf.ABLATIONS)[args.ablation].items():
            overrides[f"{family}.{k}"] = v
    return RunConfig.build(args.profile, args.config, overrides)


def _synthesize(args, cfg: RunConfig) -> int:
    from .pipeline import DMNetGenerator, synthesize_dataset

    if cfg["data.generator"] == "dmnet":
        if not cfg["data.checkpoint"]:
            raise ConfigError("--generator dmnet needs --checkpoint (data.checkpoint)")
        gen = DMNetGenerator(cfg["data.checkpoint"])
    else:
        gen = cfg.classical()
    m = synthesize_dataset(args.clean_dir, gen, args.out, seed=cfg["train.seed"], workers=cfg["data.workers"])
    print(f"wrote {len(m.entries)} pairs to {args.out / 'manifest.json'}")
    return 0


def _train(args, cfg: RunConfig) -> int:
    from .pipeline import train_dgformer, train_dmnet

    if args.command == "train-dmnet":
        path = train_dmnet(
            args.manifest, cfg.dmnet(), cfg.train("dmnet"), args.out, cfg.loss_weights(), args.resume, not args.no_plot
        )
    else:
        path = train_dgformer(
            args.manifest,
            cfg.dgformer(),
            cfg.train("dgformer"),
            args.out,
            cfg["train.dgformer.perceptual_weight"],
            args.resume,
            not args.no_plot,
        )
    print(f"final checkpoint: {path}")
    return 0


def _restore(args, cfg: RunConfig) -> int:
    from .pipeline import restore_directory

    ck = ckpt_io.load(args.checkpoint)
    if ck.family != "dgformer":
        raise ckpt_io.CheckpointError(f"{args.checkpoint}: restore needs a dgformer checkpoint, got {ck.family}")
    outs = restore_directory(args.checkpoint, args.input_dir, args.landmarks, args.out, cfg["data.workers"])
    print(f"restored {len(outs)} images into {args.out}")
    return 0


def _evaluate(args, cfg: RunConfig) -> int:
    from .pipeline import evaluate

    report = evaluate(
        None if args.identity else args.checkpoint,
        args.manifest,
        args.out,
        save_images=args.save_images,
        points_dir=args.points_dir,
        workers=cfg["data.workers"],
        plot=not args.no_plot,
    )
    print(json.dumps({"count": report["count"], "mean": report["mean"]}))
    return 0


def _selftest(args, cfg: RunConfig) -> int:
    from .selftest import run

    return 0 if run() else 2


_COMMANDS = {
    "synthesize": _synthesize,
    "train-dmnet": _train,
    "train-dgformer": _train,
    "restore": _restore,
    "evaluate": _evaluate,
    "selftest": _selftest,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _run_config(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return _COMMANDS[args.command](args, cfg)
    except (ConfigError, ManifestError, ckpt_io.CheckpointError, ImageShapeError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
