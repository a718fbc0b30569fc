"""Command-line entry point.

Every subcommand prints an effective-config banner made of ``key=value``
lines; saving the banner and passing it back with ``--config`` re-creates the
run.  Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .ablation import GRID_ORDER, ablation_csv, run_grids
from .data import DatasetSpec, generate_dataset, read_archive, read_ppm, tensor_to_image, write_ppm
from .enhancer import (AGGREGATIONS, DOWNSAMPLE_METHODS, PROJECTIONS, VALUE_SOURCES, EnhancerConfig,
                       enhance, init_params, param_count)
from .gradcheck import check_gradients
from .head import cross_entropy, head_forward, init_head
from .tensor import Tensor
from .train import TrainConfig, evaluate_checkpoint, load_checkpoint, train

PROG = "featenhancer"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _pair(text: str) -> tuple[int, int]:
    parts = text.replace("(", "").replace(")", "").split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma-separated integers, got {text!r}")
    return int(parts[0]), int(parts[1])


def _floats(text: str) -> tuple[float, ...]:
    text = text.strip()
    return tuple(float(v) for v in text.split(",")) if text else ()


def _bool(text: str) -> bool:
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_seed(p):
    p.add_argument("--seed", type=int, default=None,
                   help="random seed (falls back to $FEL_SEED, then 0)")


def _add_enhancer_flags(p):
    d = EnhancerConfig()
    g = p.add_argument_group("enhancer")
    g.add_argument("--scale-pair", type=_pair, default=d.scale_pair, help="downsampling factors s1,s2")
    g.add_argument("--blocks", type=int, default=d.num_blocks, help="attention blocks N")
    g.add_argument("--channels", type=int, default=d.feat_channels, help="feature channels C")
    g.add_argument("--downsample", choices=DOWNSAMPLE_METHODS, default=d.downsample_method)
    g.add_argument("--agg-high", choices=AGGREGATIONS, default=d.aggregation_high,
                   help="fusion of F and F_q")
    g.add_argument("--agg-low", choices=("skip", "safa", "average"), default=d.aggregation_low,
                   help="fusion of the aggregate with F_o")
    g.add_argument("--value-source", choices=VALUE_SOURCES, default=d.value_source)
    g.add_argument("--attention-scaling", type=_bool, default=d.attention_scaling,
                   help="divide attention scores by sqrt(d)")
    g.add_argument("--projection", choices=PROJECTIONS, default=d.output_projection)
    g.add_argument("--share-fen", type=_bool, default=d.share_fen_across_scales,
                   help="one FEN shared by all three scales")


def _add_train_flags(p):
    d = TrainConfig()
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=d.epochs)
    g.add_argument("--batch-size", type=int, default=d.batch_size)
    g.add_argument("--optimizer", choices=("adamw", "sgd"), default=d.optimizer)
    g.add_argument("--lr", type=float, default=d.lr)
    g.add_argument("--weight-decay", type=float, default=d.weight_decay)
    g.add_argument("--momentum", type=float, default=d.momentum)
    g.add_argument("--milestones", type=_floats, default=d.lr_milestones,
                   help="epoch fractions at which the learning rate drops x0.1")
    g.add_argument("--timing", type=_bool, default=True,
                   help="record wall time in the metrics CSV (false: write 0 for reproducible CSVs)")
    _add_seed(g)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog=PROG, description="Hierarchical feature enhancement for low-light images.",
                     formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.add_argument("--config", type=Path, default=None,
                       help="key=value file; command-line flags override its values")
        return p

    d = DatasetSpec()
    p = command("gen-data", "generate the synthetic low-light dataset archives")
    p.add_argument("--out", type=Path, default=Path("data"), help="output directory")
    p.add_argument("--num-classes", type=int, default=d.num_classes)
    p.add_argument("--image-size", type=int, default=d.image_size)
    p.add_argument("--train-count", type=int, default=d.train_count)
    p.add_argument("--val-count", type=int, default=d.val_count)
    p.add_argument("--gamma-range", type=_floats, default=d.gamma_range)
    p.add_argument("--brightness-range", type=_floats, default=d.brightness_range)
    p.add_argument("--noise-sigma", type=float, default=d.noise_sigma)
    p.add_argument("--seed", type=int, default=None,
                   help=f"dataset seed (falls back to $FEL_SEED, then {d.seed})")

    p = command("train", "train head (+ enhancer) under the classification loss")
    p.add_argument("--train", type=Path, default=Path("data/train.feld"), help="training archive")
    p.add_argument("--val", type=Path, default=Path("data/val.feld"), help="validation archive")
    p.add_argument("--out", type=Path, default=Path("runs/train"), help="output directory")
    p.add_argument("--enhancer", type=_bool, default=True,
                   help="false trains the head alone on raw images (baseline)")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    p.add_argument("--stop-after", type=int, default=None,
                   help="stop once this many epochs are complete (the run can be resumed later)")
    _add_train_flags(p)
    _add_enhancer_flags(p)

    p = command("eval", "report accuracy of a checkpoint on an archive")
    p.add_argument("--checkpoint", type=Path, default=Path("runs/train/checkpoint.feck"))
    p.add_argument("--data", type=Path, default=Path("data/val.feld"))

    p = command("ablate", "train every cell of an ablation grid")
    p.add_argument("--grid", choices=GRID_ORDER + ("all",), default="all")
    p.add_argument("--train", type=Path, default=Path("data/train.feld"))
    p.add_argument("--val", type=Path, default=Path("data/val.feld"))
    p.add_argument("--out", type=Path, default=Path("runs/ablation"))
    _add_train_flags(p)
    _add_enhancer_flags(p)

    p = command("gradcheck", "compare backward() against central finite differences")
    p.add_argument("--size", type=int, default=16, help="input height and width")
    p.add_argument("--channels", type=int, default=8, help="feature channels C")
    p.add_argument("--blocks", type=int, default=2, help="attention blocks N")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4, help="maximum allowed relative error")
    p.add_argument("--coords", type=int, default=0,
                   help="probe at most this many coordinates per tensor (0: all)")
    _add_seed(p)

    p = command("visualize", "write PPMs of every enhancer stage for one image")
    p.add_argument("--checkpoint", type=Path, default=None,
                   help="trained checkpoint (default: freshly initialised enhancer)")
    p.add_argument("--image", type=Path, default=None, help="input PPM")
    p.add_argument("--data", type=Path, default=Path("data/val.feld"), help="archive used without --image")
    p.add_argument("--index", type=int, default=0, help="sample index within --data")
    p.add_argument("--out", type=Path, default=Path("runs/visual"), help="output prefix directory")
    _add_seed(p)
    _add_enhancer_flags(p)

    p = command("params", "print the enhancer parameter count")
    p.add_argument("--include-projection", type=_bool, default=False,
                   help="count the 1x1 RGB projection as well")
    _add_enhancer_flags(p)
    return parser


# --------------------------------------------------------------------------
# config file + banner
# --------------------------------------------------------------------------

def read_config_file(path: Path) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _format(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    return str(value)


def banner(args: argparse.Namespace) -> str:
    lines = [f"# {PROG} {args.command}"]
    for key, value in sorted(vars(args).items()):
        if key in ("command", "config", "verbose"):
            continue
        lines.append(f"{key}={_format(value)}")
    return "\n".join(lines)


def parse(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        raise UsageError(f"{PROG}: error: a command is required")
    if args.config is not None:
        sp = _subparser(parser, args.command)
        known = {a.dest: a for a in sp._actions if a.dest not in ("help", "config")}
        values = read_config_file(args.config)
        unknown = sorted(set(values) - set(known))
        if unknown:
            sp.print_usage(sys.stderr)
            raise UsageError(f"{args.config}: unknown keys {unknown}")
        defaults = {}
        for key, text in values.items():
            action = known[key]
            if text == "None":
                defaults[key] = None
                continue
            try:
                value = action.type(text) if action.type else text
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"{args.config}: bad value for {key}: {exc}") from exc
            if action.choices is not None and value not in action.choices:
                raise UsageError(f"{args.config}: {key} must be one of {list(action.choices)}")
            defaults[key] = value
        sp.set_defaults(**defaults)
        args = parser.parse_args(argv)
    if getattr(args, "seed", "absent") is None:
        env = os.environ.get("FEL_SEED")
        if env is not None:
            args.seed = int(env)
        else:
            args.seed = DatasetSpec().seed if args.command == "gen-data" else 0
    return args


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def _enhancer_config(args) -> EnhancerConfig:
    return EnhancerConfig(
        scale_pair=args.scale_pair, num_blocks=args.blocks, feat_channels=args.channels,
        downsample_method=args.downsample, aggregation_high=args.agg_high,
        aggregation_low=args.agg_low, value_source=args.value_source,
        attention_scaling=args.attention_scaling, output_projection=args.projection,
        share_fen_across_scales=args.share_fen)


def _train_config(args, enhancer: EnhancerConfig | None, label: str) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, optimizer=args.optimizer, lr=args.lr,
        weight_decay=args.weight_decay, momentum=args.momentum,
        lr_milestones=tuple(args.milestones), seed=args.seed, enhancer=enhancer,
        train_path=str(args.train), val_path=str(args.val), label=label)


def cmd_gen_data(args) -> int:
    spec = DatasetSpec(num_classes=args.num_classes, image_size=args.image_size,
                       train_count=args.train_count, val_count=args.val_count,
                       gamma_range=tuple(args.gamma_range), brightness_range=tuple(args.brightness_range),
                       noise_sigma=args.noise_sigma, seed=args.seed)
    train_set, val_set = generate_dataset(spec, args.out)
    print(f"wrote {len(train_set)} train / {len(val_set)} val samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    enh = _enhancer_config(args) if args.enhancer else None
    cfg = _train_config(args, enh, "baseline" if enh is None else "featenhancer")
    ckpt = train(cfg, out_dir=args.out, resume=args.resume, timing=args.timing,
                 stop_after=args.stop_after)
    if ckpt.rows:
        last = ckpt.rows[-1]
        print(f"epoch {last.epoch}: val_acc={last.val_acc:.4f} val_loss={last.val_loss:.4f}")
    print(f"checkpoint: {args.out / 'checkpoint.feck'}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    acc = evaluate_checkpoint(ckpt, read_archive(args.data))
    print(f"accuracy={acc:.6f}")
    return 0


def cmd_ablate(args) -> int:
    base = _train_config(args, _enhancer_config(args), "ablation")
    results = run_grids(args.grid, base, read_archive(args.train), read_archive(args.val),
                        args.out, timing=args.timing)
    for axis, rows in results.items():
        print(f"# {axis} -> {args.out / f'ablation_{axis}.csv'}")
        print(ablation_csv(rows), end="")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = EnhancerConfig(feat_channels=args.channels, num_blocks=args.blocks)
    rng = np.random.default_rng(args.seed)
    params = init_params(cfg, rng)
    head = init_head(args.classes, args.size, rng)
    # small random biases keep pre-activations away from exact ReLU kinks
    for p in (*params.values(), *head.values()):
        if p.ndim == 1:
            p.data[:] = rng.normal(0.0, 0.1, p.shape)
    image = Tensor(rng.random((3, args.size, args.size)))
    label = int(rng.integers(args.classes))
    everything = {**params, **head}

    def loss_fn():
        return cross_entropy(head_forward(enhance(image, params, cfg), head), label)

    errors = check_gradients(loss_fn, everything, eps=args.eps,
                             max_coords=args.coords or None, seed=args.seed)
    for name, err in errors.items():
        print(f"{name:28s} {err:.3e}")
    worst = max(errors.values())
    ok = worst < args.tol
    print(f"max_rel_error={worst:.3e} tol={args.tol:g} {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 2


def cmd_visualize(args) -> int:
    if args.checkpoint is not None:
        ckpt = load_checkpoint(args.checkpoint)
        if ckpt.enhancer is None:
            raise ValueError("checkpoint has no enhancer (baseline run)")
        params, cfg = ckpt.enhancer, ckpt.enhancer_config
    else:
        cfg = _enhancer_config(args)
        params = init_params(cfg, np.random.default_rng(args.seed))
    image = read_ppm(args.image) if args.image is not None else read_archive(args.data).images[args.index]
    stages: dict = {}
    enhance(Tensor(image), params, cfg, stages=stages)
    args.out.mkdir(parents=True, exist_ok=True)
    for name, t in stages.items():
        path = args.out / f"stage_{name}.ppm"
        write_ppm(tensor_to_image(t.data), path)
        print(f"{name:4s} {'x'.join(map(str, t.shape)):>12s} -> {path}")
    return 0


def cmd_params(args) -> int:
    print(param_count(_enhancer_config(args), include_projection=args.include_projection))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck, "visualize": cmd_visualize, "params": cmd_params,
}


def dispatch(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    print(banner(args))
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:
        print(f"{PROG}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())
