"""Command-line interface.

Subcommands::

    agileir train     --data DIR --out DIR [--config FILE] [--set k=v ...]
    agileir eval      --ckpt FILE --data DIR [--report FILE] [--identity]
    agileir infer     --ckpt FILE --input IMG --output IMG
    agileir gradcheck [--scope op|layer|model|all] [--only NAME]
    agileir memreport [--preset-a NAME] [--preset-b NAME] [--batch N]
    agileir qksweep   --dk LIST | --qk-total LIST [--groups N]

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
(including a failed gradient check).
"""

from __future__ import annotations

import argparse
import os
import sys
import traceback

from . import data as D
from . import gradcheck as G
from . import memcost
from . import metrics
from . import training as Tr
from .config import ConfigError, echo, model_config, resolve, train_config
from .model import (PRESETS, AgileIR, build, count_params, load_checkpoint,
                    load_state, preset)


class UsageError(ValueError):
    """Bad command-line input (mapped to exit code 1)."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage errors; this tool reserves 2 for
    # runtime failures, so remap usage problems to exit code 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="agileir", description="Lightweight windowed-attention super-resolution.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a directory of PNGs")
    p.add_argument("--data", help="directory of HR training PNGs")
    p.add_argument("--out", help="output directory for checkpoint and log")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override a config value")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--iters", type=int, help="override train.iters")
    p.add_argument("--scale", type=int, choices=(2, 3, 4), help="override model.scale")
    p.add_argument("--init-ckpt", help="warm-start checkpoint (upsampler is reinitialised on scale change)")
    p.add_argument("--eval-data", help="directory of PNGs for periodic eval (default: training data)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a model on paired data, write a report")
    p.add_argument("--ckpt", help="checkpoint file")
    p.add_argument("--data", required=True, help="directory of HR PNGs (optional LR/ subdirectory)")
    p.add_argument("--scale", type=int, choices=(2, 3, 4),
                   help="expected scale; must match the checkpoint")
    p.add_argument("--report", help="report file (default: report.txt next to the checkpoint)")
    p.add_argument("--identity", action="store_true",
                   help="score ground truth against itself instead of running a model (metrics sanity check)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("infer", help="upscale one PNG")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="input PNG")
    p.add_argument("--output", required=True, help="output PNG")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("gradcheck", help="compare analytic gradients against finite differences")
    p.add_argument("--scope", choices=("op", "layer", "model", "all"), default="all")
    p.add_argument("--only", help="run only checks whose name contains this substring")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("memreport", help="analytic training-memory comparison of two presets")
    p.add_argument("--preset-a", default="swinir_light_ref", choices=sorted(PRESETS))
    p.add_argument("--preset-b", default="agileir", choices=sorted(PRESETS))
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--height", type=int, default=64, help="LR patch height")
    p.add_argument("--width", type=int, default=64, help="LR patch width")
    p.add_argument("--scale", type=int, choices=(2, 3, 4), default=2)
    p.add_argument("--machine", action="store_true", help="emit machine-readable key=value lines")
    p.set_defaults(func=_cmd_memreport)

    p = sub.add_parser("qksweep", help="parameter cost (and optional quality) across q/k widths")
    p.add_argument("--dk", help="comma-separated per-group q/k widths, e.g. 4,8,15")
    p.add_argument("--qk-total", help="comma-separated total q/k widths; must divide evenly by --groups")
    p.add_argument("--groups", type=int, default=4)
    p.add_argument("--scale", type=int, choices=(2, 3, 4), default=2)
    p.add_argument("--data", help="HR PNG directory; if given, train each width briefly and report PSNR")
    p.add_argument("--iters", type=int, default=200, help="training iterations per width when --data is given")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_qksweep)

    return parser


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")


class _Tee:
    """Mirror written lines to stdout; the file stays the source of truth."""

    def __init__(self, path: str):
        self.handle = open(path, "w")

    def write(self, line: str):
        self.handle.write(line + "\n")
        self.handle.flush()
        print(line)

    def close(self):
        self.handle.close()


def _cmd_train(args) -> int:
    _require(args, "data", "out")
    values = resolve(args.config, list(args.overrides))
    values[("paths", "data_dir")] = args.data
    values[("paths", "out_dir")] = args.out
    if args.seed is not None:
        values[("train", "seed")] = args.seed
    if args.iters is not None:
        values[("train", "iters")] = args.iters
    if args.scale is not None:
        values[("model", "scale")] = args.scale
    if args.init_ckpt is not None:
        values[("paths", "init_ckpt")] = args.init_ckpt

    mcfg = model_config(values)
    tcfg = train_config(values)
    if not os.path.isdir(args.data):
        raise UsageError(f"data directory not found: {args.data}")
    os.makedirs(args.out, exist_ok=True)

    dataset = D.load_dataset(args.data, scale=mcfg.scale)
    eval_dir = args.eval_data if args.eval_data else args.data
    if tcfg.eval_every and not os.path.isdir(eval_dir):
        raise UsageError(f"eval data directory not found: {eval_dir}")

    model = build(mcfg, seed=tcfg.seed)
    header = [
        f"# preset={values.get(('model', 'preset'), 'agileir')} scale={mcfg.scale} "
        f"params={count_params(mcfg)}",
        f"# config {echo(values)}",
    ]
    eval_fn = None
    if tcfg.eval_every:
        def eval_fn(m, _dir=eval_dir, _s=mcfg.scale):
            return metrics.evaluate(m, _dir, scale=_s).mean_psnr

    ckpt_path = os.path.join(args.out, "model.ckpt")
    log = _Tee(os.path.join(args.out, "train.log"))
    try:
        Tr.train(model, dataset, tcfg,
                 ckpt_path=ckpt_path,
                 init_ckpt=values.get(("paths", "init_ckpt")) or None,
                 eval_fn=eval_fn,
                 header=header,
                 emit=log.write)
    finally:
        log.close()
    print(f"wrote {ckpt_path}")
    return 0


def _cmd_eval(args) -> int:
    if not args.identity:
        _require(args, "ckpt")
    if not os.path.isdir(args.data):
        raise UsageError(f"data directory not found: {args.data}")
    if args.identity:
        model = None
        scale = args.scale if args.scale else 1
        report_path = args.report or os.path.join(args.data, "report.txt")
    else:
        model = _load_model(args.ckpt)
        scale = model.cfg.scale
        if args.scale is not None and args.scale != scale:
            raise UsageError(
                f"--scale {args.scale} does not match checkpoint scale {scale}")
        report_path = args.report or os.path.join(
            os.path.dirname(os.path.abspath(args.ckpt)), "report.txt")
    report = metrics.evaluate(model, args.data, scale=scale)
    for line in report.lines():
        print(line)
    report.write(report_path)
    print(f"wrote {report_path}")
    return 0


def _cmd_infer(args) -> int:
    if not os.path.isfile(args.input):
        raise UsageError(f"input image not found: {args.input}")
    model = _load_model(args.ckpt)
    lr = D.imread(args.input)
    sr = metrics.upscale_image(model, lr)
    out_dir = os.path.dirname(os.path.abspath(args.output))
    os.makedirs(out_dir, exist_ok=True)
    D.imwrite(args.output, sr)
    print(f"wrote {args.output} ({sr.shape[1]}x{sr.shape[0]}, scale {model.cfg.scale})")
    return 0


def _load_model(path: str) -> AgileIR:
    if not os.path.isfile(path):
        raise UsageError(f"checkpoint not found: {path}")
    cfg, state = load_checkpoint(path)
    model = build(cfg, seed=0)
    load_state(model, state)
    return model


def _cmd_gradcheck(args) -> int:
    try:
        failures = G.run(scope=args.scope, seed=args.seed, only=args.only)
    except ValueError as exc:  # unknown --only pattern
        raise UsageError(str(exc)) from exc
    if failures:
        print(f"gradcheck: {failures} check(s) exceeded tolerance {G.TOLERANCE:g}")
        return 2
    print("gradcheck: all checks passed")
    return 0


def _cmd_memreport(args) -> int:
    cfg_a = preset(args.preset_a, scale=args.scale)
    cfg_b = preset(args.preset_b, scale=args.scale)
    comparison = memcost.compare(cfg_a, cfg_b, batch=args.batch,
                                 height=args.height, width=args.width)
    print(f"preset a = {args.preset_a}, preset b = {args.preset_b}")
    for line in comparison.lines(machine=args.machine):
        print(line)
    return 0


def _parse_dk_list(args) -> list[int]:
    if args.dk and args.qk_total:
        raise UsageError("give either --dk or --qk-total, not both")
    if args.dk:
        try:
            return [int(x) for x in args.dk.split(",")]
        except ValueError as e:
            raise UsageError(f"bad --dk list: {e}") from e
    if args.qk_total:
        try:
            totals = [int(x) for x in args.qk_total.split(",")]
        except ValueError as e:
            raise UsageError(f"bad --qk-total list: {e}") from e
        widths = []
        for total in totals:
            if total % args.groups != 0:
                raise UsageError(
                    f"total q/k width {total} is not divisible by {args.groups} groups")
            widths.append(total // args.groups)
        return widths
    raise UsageError("one of --dk or --qk-total is required")


def _cmd_qksweep(args) -> int:
    import dataclasses

    widths = _parse_dk_list(args)
    if any(w < 1 for w in widths):
        raise UsageError("q/k widths must be positive")
    base = preset("agileir", scale=args.scale)
    base = dataclasses.replace(base, groups=args.groups)
    rows = []
    for dk in widths:
        cfg = dataclasses.replace(base, qk_dim=dk)
        rows.append((dk, cfg, count_params(cfg)))

    psnrs: list[str] = []
    if args.data:
        if not os.path.isdir(args.data):
            raise UsageError(f"data directory not found: {args.data}")
        dataset = D.load_dataset(args.data, scale=args.scale)
        for dk, cfg, _ in rows:
            tcfg = Tr.TrainConfig(iters=args.iters, seed=args.seed, eval_every=0)
            model = build(cfg, seed=args.seed)
            Tr.train(model, dataset, tcfg)
            report = metrics.evaluate(model, args.data, scale=cfg.scale)
            psnrs.append(f"{report.mean_psnr:.4f}" if report.names else "-")
            del model
    else:
        psnrs = ["-"] * len(rows)

    print(f"# groups={args.groups} scale={args.scale}")
    print("dk_per_group qk_total params psnr")
    for (dk, cfg, n), psnr in zip(rows, psnrs):
        print(f"{dk} {dk * args.groups} {n} {psnr}")
    return 0


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as e:  # --help exits 0; usage errors exit 1
        return int(e.code or 0)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as e:  # runtime failure
        traceback.print_exc()
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
