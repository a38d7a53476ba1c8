"""Command-line entry point: ``cpganet {train,enhance,eval,gradcheck,inspect}``.

Exit codes: 0 success, 1 some enhance inputs failed, 2 bad flags or config,
3 data errors, 4 non-finite loss during training, 5 gradient check failure.
Tabular results go to stdout; progress and diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from typing import Optional, Sequence

import numpy as np

from .data import DataError, PairedDataset, index_dataset, list_images, load_png, save_png
from .losses import LOSS_ABLATIONS, LossSpec, psnr, ssim_metric
from .model import (
    REFERENCE_BLOCK_PARAMS_M,
    REFERENCE_FLOPS_G,
    REFERENCE_PARAMS_M,
    CheckpointError,
    CPGANetPlus,
    ModelConfig,
    count_parameters,
    flop_breakdown,
    load_checkpoint,
    read_checkpoint,
)
from .train import NonFiniteLossError, Schedule, Trainer, TrainRun, enhance_array

log = logging.getLogger("cpganet")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 1, 2, 3, 4, 5


class ConfigError(Exception):
    pass


# ----------------------------------------------------------------- parsing
def _resolution(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like 600x400, got {text!r}") from None
    if w < 16 or h < 16 or w % 2 or h % 2:
        raise argparse.ArgumentTypeError("resolution needs even sides >= 16")
    return w, h


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of model config fields")
    p.add_argument("--ablation", choices=["a", "b", "c"],
                   help="component ablation row: a=local branch only, b=+global branch, c=+CPGA blocks")
    p.add_argument("--blocks", type=int, metavar="N", help="number of CP/CPGA blocks in the local branch")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpganet", description="Low-light image enhancement with CPGA-Net+.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--quiet", action="store_true", help="only print results and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model on paired low/high images")
    t.add_argument("--data", required=True, help="dataset root holding low/ and high/ (or split subdirs)")
    t.add_argument("--split", help="subdirectory of --data to train on, e.g. train or our485")
    t.add_argument("--val", help="dataset root for periodic validation")
    t.add_argument("--out", required=True, help="directory for checkpoints and train.log")
    t.add_argument("--checkpoint", help="resume from this checkpoint")
    t.add_argument("--epochs", type=_positive_int, default=600)
    t.add_argument("--steps", type=_positive_int, help="stop after this many optimizer steps")
    t.add_argument("--batch", type=_positive_int, default=8)
    t.add_argument("--crop", type=_positive_int, default=256)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--cycle", type=_positive_int, default=67, help="cosine restart period in epochs")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--loss", default="l1,perceptual,hdr_l1,ssim",
                   help="comma list with optional weights (l1:1,ssim:0.5) or a row letter a-e")
    t.add_argument("--checkpoint-every", type=_positive_int, default=10, help="epochs between last.ckpt writes")
    _add_model_flags(t)

    e = sub.add_parser("enhance", parents=[common], help="enhance a PNG file or a directory of PNGs")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="input PNG or directory")
    e.add_argument("--out", required=True, help="output directory")

    v = sub.add_parser("eval", parents=[common], help="PSNR / SSIM over a paired dataset")
    v.add_argument("--data", required=True)
    v.add_argument("--split")
    v.add_argument("--checkpoint", help="model to evaluate; without it the low images are scored as-is")
    v.add_argument("--out", help="also write the table to this file")

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every differentiable op")
    g.add_argument("--op", action="append", help="restrict to these ops (repeatable or comma list)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--instances", type=_positive_int, default=20)

    i = sub.add_parser("inspect", parents=[common], help="parameter count and FLOPs of a configuration")
    i.add_argument("--checkpoint")
    i.add_argument("--res", type=_resolution, default=(600, 400), help="WxH for FLOP counting (default 600x400)")
    _add_model_flags(i)
    return parser


def model_config(args) -> ModelConfig:
    """Resolve --config, --ablation and --blocks into one validated config."""
    fields: dict = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                fields = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(fields, dict):
            raise ConfigError("config file must hold a JSON object")
    if getattr(args, "blocks", None) is not None:
        fields["n_cp_blocks"] = args.blocks
    if getattr(args, "seed", None) is not None and "seed" not in fields:
        fields["seed"] = args.seed
    try:
        if getattr(args, "ablation", None):
            return ModelConfig.ablation(args.ablation, **fields)
        return ModelConfig.from_dict(fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def loss_spec(text: str) -> LossSpec:
    key = text.strip().lower()
    if key in LOSS_ABLATIONS:
        return LOSS_ABLATIONS[key]
    try:
        return LossSpec.parse(text)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------- commands
def cmd_train(args) -> int:
    cfg = model_config(args)
    spec = loss_spec(args.loss)
    if args.lr <= 0:
        raise ConfigError("--lr must be positive")
    dataset = PairedDataset(index_dataset(args.data, args.split))
    val = PairedDataset(index_dataset(args.val)) if args.val else None
    run = TrainRun(
        dataset=dataset,
        config=cfg,
        loss=spec,
        schedule=Schedule(base_lr=args.lr, epochs=args.epochs, cycle=args.cycle),
        batch_size=args.batch,
        crop_size=args.crop,
        seed=args.seed,
        max_steps=args.steps,
        out_dir=args.out,
        checkpoint_every=args.checkpoint_every,
        val_dataset=val,
    )
    trainer = Trainer.resume(args.checkpoint, run) if args.checkpoint else Trainer(run)
    log.info("training %d params on %d pairs, loss %s", count_parameters(trainer.model), len(dataset),
             ",".join(k for k, w in spec.weights().items() if w > 0))
    t0 = time.perf_counter()
    trainer.train()
    last = trainer.log[-1] if trainer.log else None
    log.info("done: %d steps in %.1fs%s", trainer.progress.step, time.perf_counter() - t0,
             f", last total loss {last.total:.5f}" if last else "")
    print(os.path.join(args.out, "last.ckpt"))
    return EXIT_OK


def _inputs(path: str) -> list[str]:
    if os.path.isdir(path):
        files = [os.path.join(path, f) for f in list_images(path)]
        if not files:
            raise DataError(f"no PNG files in {path}")
        return files
    if not os.path.isfile(path):
        raise DataError(f"input {path} does not exist")
    return [path]


def cmd_enhance(args) -> int:
    model = load_checkpoint(args.checkpoint)
    files = _inputs(args.data)
    single = len(files) == 1 and not os.path.isdir(args.data)
    failed = 0
    for path in files:
        name = os.path.basename(path)
        t0 = time.perf_counter()
        try:
            img = load_png(path)
            out = enhance_array(model, img)
            save_png(out, os.path.join(args.out, name))
        except (DataError, ValueError, OSError) as exc:
            if single:
                raise DataError(str(exc)) from exc
            failed += 1
            print(f"error: {name}: {exc}", file=sys.stderr)
            continue
        print(f"{name}\t{time.perf_counter() - t0:.3f}s")
    if failed:
        print(f"{failed} of {len(files)} inputs failed", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = PairedDataset(index_dataset(args.data, args.split))
    model = load_checkpoint(args.checkpoint) if args.checkpoint else None
    rows = []
    for stem in dataset.ids:
        s = dataset.get(stem)
        pred = enhance_array(model, s.low) if model is not None else s.low
        rows.append((stem, psnr(pred, s.gt), ssim_metric(pred, s.gt)))
    mean_p = float(np.mean([r[1] for r in rows]))
    mean_s = float(np.mean([r[2] for r in rows]))
    lines = [f"{stem}\t{p:.6f}\t{s:.6f}" for stem, p, s in rows]
    lines.append(f"mean\t{mean_p:.6f}\t{mean_s:.6f}")
    text = "\n".join(lines)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("id\tpsnr\tssim\n" + text + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import CASES, run_suite

    ops = None
    if args.op:
        ops = [o.strip() for item in args.op for o in item.split(",") if o.strip()]
        unknown = [o for o in ops if o not in CASES]
        if unknown:
            raise ConfigError(f"unknown op(s) {', '.join(unknown)}; available: {', '.join(CASES)}")
    results = run_suite(ops, instances=args.instances, seed=args.seed, stream=sys.stdout)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    print(f"all {len(results)} ops passed")
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.checkpoint:
        try:
            cfg = read_checkpoint(args.checkpoint).config
        except (OSError, CheckpointError) as exc:
            raise ConfigError(f"cannot read checkpoint: {exc}") from exc
        if cfg is None:
            raise ConfigError("checkpoint carries no model config")
    else:
        cfg = model_config(args)
    model = CPGANetPlus(cfg)
    w, h = args.res
    n = count_parameters(model)
    breakdown = flop_breakdown(model, h, w)
    total = sum(breakdown.values())
    print(f"parameters\t{n}\t{n / 1e6:.4f} M")
    print(f"flops@{w}x{h}\t{total}\t{total / 1e9:.3f} G\t(reference {REFERENCE_FLOPS_G} G)")
    for name, flops in sorted(breakdown.items(), key=lambda kv: -kv[1]):
        print(f"  {name}\t{flops}\t{flops / 1e9:.3f} G\t{100 * flops / total:.1f}%")
    if args.ablation:
        print("ablation\tparams\tM\treference M")
        for row in "abc":
            c = ModelConfig.ablation(row, **{k: v for k, v in cfg.to_dict().items()
                                             if k not in ("enable_global_branch", "enable_cpga_blocks")})
            m = count_parameters(CPGANetPlus(c))
            mark = " *" if row == args.ablation else ""
            print(f"  ({row}){mark}\t{m}\t{m / 1e6:.4f}\t{REFERENCE_PARAMS_M[row]:.3f}")
    if args.blocks is not None and args.blocks in REFERENCE_BLOCK_PARAMS_M:
        print(f"reference for N={args.blocks}\t{REFERENCE_BLOCK_PARAMS_M[args.blocks]:.3f} M")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "enhance": cmd_enhance,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "inspect": cmd_inspect,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLossError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
