"""Command-line entry point: pretrain, adapt, ablate, report."""
from __future__ import annotations

import argparse
import configparser
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import report as rep
from . import tasks
from .align import AlignConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .lora import LoraError, PlacementSpec, adapted_layers
from .trainer import DEFAULT_LR, DEFAULT_STEPS, TrainConfig, adapt, eval_set, pretrain

log = logging.getLogger("loralign")

MODE_ALIASES = {"full": "finetune-full", "finetune-full": "finetune-full", "lora": "lora", "lora-a": "lora-a"}
SWEEPS = ("rank", "k", "placement")
DEFAULT_PRETRAIN_TASKS = ("fog", "rain", "snow")
DEFAULT_NOVEL = "raindrop"

# section -> key -> parser; anything else in a config file is rejected
CONFIG_KEYS = {
    "train": {
        "lr": float,
        "steps": int,
        "batch": int,
        "gamma": float,
        "epoch_steps": int,
        "rank": int,
        "placement": str,
        "seed": int,
        "pool": int,
        "eval_every": int,
        "mode": str,
    },
    "align": {"k": int, "T": float, "w_align": float},
    "tasks": {"pretrain": str, "novel": str},
}

DESCRIPTION = """\
Toy all-weather restoration with LoRA and singular-vector-aligned LoRA.

Typical session:
  loralign pretrain --out runs/pre
  loralign adapt --ckpt runs/pre/model.laln --mode lora-a --out runs/lora-a
  loralign report --runs runs/pre runs/lora-a
"""

EPILOG = """\
Config files use [train], [align] and [tasks] sections of `key = value`
lines.  Keys: train: lr steps batch gamma epoch_steps rank placement seed pool
eval_every mode; align: k T w_align; tasks: pretrain novel.  Flags override
the file.  Exit status: 0 success, 2 usage error, 1 runtime error.
"""


class UsageError(Exception):
    pass


def _formatter(prog):
    return argparse.RawDescriptionHelpFormatter(prog, width=88, max_help_position=30)


# --------------------------------------------------------------------------
# config handling
# --------------------------------------------------------------------------


def read_config(path) -> dict[str, dict]:
    """Parse and type-check a config file; unknown sections or keys are errors."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise UsageError(f"config {path}: {exc}") from None
    out: dict[str, dict] = {}
    for section in cp.sections():
        if section not in CONFIG_KEYS:
            raise UsageError(f"config {path}: unknown section [{section}]")
        out[section] = {}
        for key, raw in cp.items(section):
            if key not in CONFIG_KEYS[section]:
                raise UsageError(f"config {path}: unknown key {key!r} in [{section}]")
            try:
                out[section][key] = CONFIG_KEYS[section][key](raw)
            except ValueError:
                raise UsageError(f"config {path}: bad value {raw!r} for {section}.{key}") from None
    return out


class Settings:
    """Flag value if given, else config-file value, else the built-in default."""

    def __init__(self, args, config: dict[str, dict]):
        self.args = args
        self.config = config

    def get(self, flag: str, section: str, key: str, default=None):
        val = getattr(self.args, flag, None)
        if val is not None:
            return val
        return self.config.get(section, {}).get(key, default)

    def given(self, flag: str, section: str, key: str) -> bool:
        return getattr(self.args, flag, None) is not None or key in self.config.get(section, {})


def _task_list(text: str, what: str) -> list[str]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    for t in items:
        if t not in tasks.KINDS:
            raise UsageError(f"unknown task {t!r} in {what}; choose from {', '.join(tasks.KINDS)}")
    if len(set(items)) != len(items):
        raise UsageError(f"{what} lists a task more than once: {text}")
    return items


def _placement(text: str) -> PlacementSpec:
    try:
        return PlacementSpec.parse(text)
    except LoraError as exc:
        raise UsageError(str(exc)) from None


def _mode(text: str) -> str:
    if text not in MODE_ALIASES:
        raise UsageError(f"unknown mode {text!r}; choose from full, lora, lora-a")
    return MODE_ALIASES[text]


def _positive(name: str, value, allow_zero: bool = False):
    if value is None:
        return value
    if value < 0 or (value == 0 and not allow_zero):
        raise UsageError(f"{name} must be {'non-negative' if allow_zero else 'positive'}, got {value}")
    return value


def train_config(s: Settings, mode: str) -> TrainConfig:
    try:
        return _train_config(s, mode)
    except (ValueError, RuntimeError) as exc:
        raise UsageError(str(exc)) from None


def _train_config(s: Settings, mode: str) -> TrainConfig:
    align = AlignConfig(
        k=_positive("--k", s.get("k", "align", "k", 16)),
        T=_positive("--T", s.get("T", "align", "T", 7.0)),
        w_align=_positive("--w-align", s.get("w_align", "align", "w_align", 100.0), allow_zero=True),
    )
    return TrainConfig(
        mode=mode,
        lr=_positive("--lr", s.get("lr", "train", "lr")),
        steps=_positive("--steps", s.get("steps", "train", "steps")),
        batch=_positive("--batch", s.get("batch", "train", "batch", 32)),
        gamma=s.get("gamma", "train", "gamma", 0.95),
        epoch_steps=s.get("epoch_steps", "train", "epoch_steps", 50),
        rank=_positive("--rank", s.get("rank", "train", "rank", 4)),
        placement=_placement(s.get("placement", "train", "placement", "enc+dec+attn+mlp")),
        align=align,
        pool=_positive("--pool", s.get("pool", "train", "pool", 1000)),
        eval_every=s.get("eval_every", "train", "eval_every", 100),
        seed=s.get("seed", "train", "seed", 0),
    )


# --------------------------------------------------------------------------
# outputs
# --------------------------------------------------------------------------


def write_samples(model, kinds, n: int, out_dir: Path) -> None:
    """Per task, one PNG with rows of degraded | restored | clean (4x nearest upscale)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    for kind in kinds:
        clean, deg = eval_set(kind, n)
        restored = np.clip(model.restore(deg), 0.0, 1.0)
        rows = [np.concatenate([d, r, c], axis=1) for d, r, c in zip(deg, restored, clean)]
        grid = np.concatenate(rows, axis=0).repeat(4, axis=0).repeat(4, axis=1)
        tasks.save_png(out_dir / f"{kind}.png", grid)


def _print_params(report) -> None:
    pct = 100.0 * report.trainable_params / report.total_params
    print(f"trainable parameters: {report.trainable_params} of {report.total_params} ({pct:.2f}%)")


def _finish_run(report, model, out: Path, png_samples: int) -> None:
    paths = rep.write_run(report, out)
    if png_samples:
        write_samples(model, list(report.pretrain_tasks) + [report.novel], png_samples, out / "samples")
    sys.stdout.write(paths["md"].read_text())
    print(f"wrote {out}")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_pretrain(args, s: Settings) -> int:
    kinds = _task_list(s.get("tasks", "tasks", "pretrain", ",".join(DEFAULT_PRETRAIN_TASKS)), "--tasks")
    if len(kinds) != 3:
        raise UsageError(f"pretrain needs 3 distinct tasks, got {len(kinds)}")
    if s.given("mode", "train", "mode") and s.get("mode", "train", "mode") != "pretrain":
        raise UsageError("pretrain always runs in mode 'pretrain'")
    cfg = train_config(s, "pretrain")
    out = Path(args.out)
    model, report = pretrain(kinds, cfg)
    save_checkpoint(model, out / "model.laln")
    _finish_run(report, model, out, args.png_samples)
    return 0


def _load_pretrained(path):
    model = load_checkpoint(path)
    if adapted_layers(model):
        raise UsageError(f"{path} already carries LoRA adapters; adapt expects a pre-trained checkpoint")
    return model


def _adapt_tasks(s: Settings) -> tuple[list[str], str]:
    novel = s.get("novel", "tasks", "novel", DEFAULT_NOVEL)
    _task_list(novel, "--novel")
    default_pre = ",".join(k for k in tasks.KINDS if k != novel)
    pre = _task_list(s.get("tasks", "tasks", "pretrain", default_pre), "--tasks")
    if novel in pre:
        raise UsageError(f"novel task {novel!r} is also listed as pre-trained")
    return pre, novel


def _adapt_mode(s: Settings, fallback: str) -> str:
    mode = _mode(s.get("mode", "train", "mode", fallback))
    if mode == "finetune-full" and s.given("rank", "train", "rank"):
        log.warning("--mode full trains every weight; ignoring --rank")
    return mode


def cmd_adapt(args, s: Settings) -> int:
    pre, novel = _adapt_tasks(s)
    mode = _adapt_mode(s, "lora")
    cfg = train_config(s, mode)
    model = _load_pretrained(args.ckpt)
    out = Path(args.out)
    adapted, report = adapt(model.state_dict(), pre, novel, cfg)
    _print_params(report)
    save_checkpoint(adapted, out / "model.laln")
    _finish_run(report, adapted, out, args.png_samples)
    return 0


def _sweep_values(sweep: str, text: str):
    raw = [v for v in text.replace(",", " ").split() if v]
    if not raw:
        raise UsageError("--values is empty")
    if sweep == "placement":
        return [(v, _placement(v)) for v in raw]
    try:
        vals = [int(v) for v in raw]
    except ValueError:
        raise UsageError(f"--values for {sweep} must be integers, got {text!r}") from None
    for v in vals:
        _positive(f"{sweep} value", v)
    return [(str(v), v) for v in vals]


def cmd_ablate(args, s: Settings) -> int:
    values = _sweep_values(args.sweep, args.values)
    pre, novel = _adapt_tasks(s)
    mode = _adapt_mode(s, "lora-a" if args.sweep == "k" else "lora")
    if args.sweep == "k" and mode != "lora-a":
        raise UsageError("a k sweep only makes sense with --mode lora-a")
    if args.sweep in ("rank", "placement") and mode == "finetune-full":
        raise UsageError(f"a {args.sweep} sweep needs --mode lora or lora-a")
    base = train_config(s, mode)
    state = _load_pretrained(args.ckpt).state_dict()
    out = Path(args.out)
    rows = []
    for label, val in values:
        if args.sweep == "rank":
            cfg = replace(base, rank=val)
        elif args.sweep == "k":
            cfg = replace(base, align=replace(base.align, k=val))
        else:
            cfg = replace(base, placement=val)
        log.info("ablate %s=%s", args.sweep, label)
        _, report = adapt(state, pre, novel, cfg)
        rep.write_run(report, out / f"{args.sweep}-{label}")
        rows.append(rep.ablation_row(args.sweep, label, report))
    text = rep.ablation_csv(rows)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_report(args, s: Settings) -> int:
    runs = [rep.load_run(p) for p in args.runs]
    table = rep.markdown_table(runs)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(table)
    sys.stdout.write(table)
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _add_training_flags(p, adapt_flags: bool) -> None:
    g = p.add_argument_group("training")
    if adapt_flags:
        lr_help = f"learning rate (default: {DEFAULT_LR['finetune-full']:g} full, {DEFAULT_LR['lora']:g} lora/lora-a)"
        steps_help = f"optimizer steps (default: {DEFAULT_STEPS['lora']})"
    else:
        lr_help = f"learning rate (default: {DEFAULT_LR['pretrain']:g})"
        steps_help = f"optimizer steps (default: {DEFAULT_STEPS['pretrain']})"
    g.add_argument("--lr", type=float, metavar="LR", help=lr_help)
    g.add_argument("--steps", type=int, metavar="N", help=steps_help)
    g.add_argument("--batch", type=int, metavar="N", help="batch size (default: 32)")
    g.add_argument("--gamma", type=float, metavar="G", help="lr decay per epoch (default: 0.95)")
    g.add_argument("--epoch-steps", dest="epoch_steps", type=int, metavar="N", help="steps per lr epoch (default: 50)")
    g.add_argument("--pool", type=int, metavar="N", help="training pairs generated per task (default: 1000)")
    g.add_argument("--eval-every", dest="eval_every", type=int, metavar="N", help="log progress every N steps, 0 = never (default: 100)")
    g.add_argument("--seed", type=int, metavar="S", help="run seed (default: 0)")


def _add_adapt_flags(p, ablate: bool = False) -> None:
    p.add_argument("--ckpt", required=True, metavar="PATH", help="pre-trained checkpoint (.laln)")
    p.add_argument("--novel", metavar="TASK", help=f"task to adapt to (default: {DEFAULT_NOVEL})")
    p.add_argument("--tasks", metavar="LIST", help="pre-trained tasks (default: the other three)")
    mode_default = "lora-a for a k sweep, else lora" if ablate else "lora"
    p.add_argument("--mode", metavar="MODE", help=f"full, lora or lora-a (default: {mode_default})")
    g = p.add_argument_group("adapters")
    g.add_argument("--rank", type=int, metavar="R", help="LoRA rank (default: 4)")
    g.add_argument("--placement", metavar="SPEC", help="adapted layers, e.g. enc+attn+mlp (default: enc+dec+attn+mlp)")
    g.add_argument("--k", type=int, metavar="K", help="aligned singular vectors per layer (default: 16)")
    g.add_argument("--T", type=float, metavar="T", help="sign-flip ratio threshold (default: 7)")
    g.add_argument("--w-align", dest="w_align", type=float, metavar="W", help="alignment loss weight (default: 100)")


def _add_common(p, outdir: bool = True) -> None:
    p.add_argument("--config", metavar="FILE", help="config file with [train]/[align]/[tasks] sections")
    if outdir:
        p.add_argument("--out", required=True, metavar="DIR", help="output directory")
        p.add_argument("--png-samples", dest="png_samples", type=int, default=0, metavar="N", help="dump N degraded/restored/clean rows per task as PNG (default: 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loralign", description=DESCRIPTION, epilog=EPILOG, formatter_class=_formatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("pretrain", help="train a model from scratch on three tasks", formatter_class=_formatter)
    p.add_argument("--tasks", metavar="LIST", help="three distinct tasks (default: fog,rain,snow)")
    _add_common(p)
    _add_training_flags(p, adapt_flags=False)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="adapt a pre-trained model to a novel task", formatter_class=_formatter)
    _add_adapt_flags(p)
    _add_common(p)
    _add_training_flags(p, adapt_flags=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("ablate", help="one adaptation run per value of rank, k or placement", formatter_class=_formatter)
    p.add_argument("--sweep", required=True, choices=SWEEPS, help="axis to sweep")
    p.add_argument(
        "--values", required=True, metavar="LIST", help="comma-separated values; the swept flag is overridden"
    )
    _add_adapt_flags(p, ablate=True)
    _add_common(p)
    _add_training_flags(p, adapt_flags=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="merge run directories into one markdown table", formatter_class=_formatter)
    p.add_argument("--runs", required=True, nargs="+", metavar="DIR", help="run directories or report CSV files")
    p.add_argument("--out", metavar="FILE", help="also write the table to FILE")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        config = read_config(args.config) if getattr(args, "config", None) else {}
        return args.func(args, Settings(args, config))
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"loralign: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"loralign: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
