"""
Command-line entry point.

    python cli.py synth  --out data/ --seed 7
    python cli.py train  --manifest data/manifest.jsonl --out runs/a --epochs 30
    python cli.py eval   --manifest data/manifest.jsonl --checkpoint runs/a/checkpoint --grid anet
    python cli.py stream --checkpoint runs/a/checkpoint --frames data/vid0000.tgf --query data/vid0000_q0.tgf
    python cli.py bench  --preset bench --steps 64
    python cli.py sweep  --manifest data/manifest.jsonl --out runs/sweep --key lam --values 0,0.3,0.6

Every ModelConfig key is also a flag (--d 64, --disable_prophet true, ...).
Precedence: --preset < --config file < flags.
"""
import argparse
import logging
import sys
from dataclasses import dataclass, field, fields
from functools import wraps
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd

from app_config import PRESETS, ModelConfig, load_config, resolve_config
from data_io import SyntheticSpec, generate_synthetic_dataset, read_feature_file
from evaluation import GRIDS, evaluate_dataset
from plots import bench_figure, stream_figure, sweep_figure, write_figure
from streaming import benchmark, outputs_frame, stream_video
from training import train
from twinnet import TwinNet, load_checkpoint
from utils import GroundingError, ValidationError, parse_list, si

log = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
CONFIG_KEYS = [f.name for f in fields(ModelConfig)]


# ══════════════════════════════════════════════════════════════════════════════
# COMMAND SPEC
# ══════════════════════════════════════════════════════════════════════════════

@dataclass
class CommandSpec:
    name: str
    args: argparse.Namespace
    paths: Dict[str, Path] = field(default_factory=dict)
    config: Optional[ModelConfig] = None


# name → (must exist?, kind)
PATH_ARGS = {
    "manifest":      (True, "file"),
    "eval_manifest": (True, "file"),
    "checkpoint":    (True, "dir"),
    "frames":        (True, "file"),
    "query":         (True, "file"),
    "config":        (True, "file"),
    "out":           (False, "any"),
    "plot":          (False, "any"),
}


def _flag_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {k: getattr(args, k) for k in CONFIG_KEYS if hasattr(args, k)}


def resolve_spec(args: argparse.Namespace) -> CommandSpec:
    """Validate every path and load the config before any work starts."""
    spec = CommandSpec(args.command, args)
    for name, (must_exist, kind) in PATH_ARGS.items():
        raw = getattr(args, name, None)
        if raw is None:
            continue
        p = Path(raw)
        if must_exist and not p.exists():
            raise ValidationError(f"--{name.replace('_', '-')}: {p} does not exist")
        if must_exist and kind == "dir" and not p.is_dir():
            raise ValidationError(f"--{name.replace('_', '-')}: {p} is not a directory")
        if must_exist and kind == "file" and not p.is_file():
            raise ValidationError(f"--{name.replace('_', '-')}: {p} is not a file")
        spec.paths[name] = p
    if args.command == "synth":
        return spec
    flags = _flag_overrides(args)
    if "checkpoint" in spec.paths:
        base = load_config(spec.paths["checkpoint"] / "config.txt")
        spec.config = base.with_overrides(flags)
    else:
        spec.config = resolve_config(args.preset, spec.paths.get("config"), flags)
    return spec


# ══════════════════════════════════════════════════════════════════════════════
# HANDLERS
# ══════════════════════════════════════════════════════════════════════════════

def guard(fn):
    @wraps(fn)
    def w(*a, **kw):
        try:
            return fn(*a, **kw)
        except (GroundingError, OSError) as e:
            log.error(f"{fn.__name__}: {e}")
            return 1
    return w


def _grid(args) -> Tuple[List[int], List[float]]:
    ns, ms = GRIDS[args.grid] if args.grid else GRIDS["anet"]
    if args.top_n:
        ns = parse_list(args.top_n, cast=lambda x: si("top-n", x))
    if args.iou:
        ms = parse_list(args.iou)
    return ns, ms


def cmd_synth(spec: CommandSpec) -> int:
    a = spec.args
    syn = SyntheticSpec(num_videos=a.videos, frames_per_video=a.frames_per_video, raw_dim=a.raw_dim,
                        event_count_per_video=a.events, event_length_range=(a.min_len, a.max_len),
                        noise_scale=a.noise, seed=a.seed, query_tokens=a.tokens)
    manifest = generate_synthetic_dataset(syn, spec.paths["out"])
    print(manifest)
    return 0


def cmd_train(spec: CommandSpec) -> int:
    res = train(spec.paths["manifest"], spec.config, spec.paths["out"])
    last = res.history.iloc[-1]
    print(f"steps={len(res.history)} final_total={last['total']:.5f} checkpoint={res.checkpoint}")
    return 0


def cmd_eval(spec: CommandSpec) -> int:
    a = spec.args
    model = load_checkpoint(spec.paths["checkpoint"], spec.config)
    ns, ms = _grid(a)
    out = spec.paths.get("out")
    report = evaluate_dataset(spec.paths["manifest"], model, ns, ms, sparse=not a.full,
                              exclude_warmup=a.exclude_warmup, workers=spec.config.workers,
                              out_csv=out)
    if a.gates and report.gate_means is not None:
        for row in report.gate_means.itertuples(index=False):
            log.info(f"layer {row.layer}: mean g_V={row.g_V:.4f} g_L={row.g_L:.4f}")
    print(report.table().to_csv(index=False), end="")
    return 0


def cmd_stream(spec: CommandSpec) -> int:
    a = spec.args
    model = load_checkpoint(spec.paths["checkpoint"], spec.config)
    frames = read_feature_file(spec.paths["frames"])
    query = read_feature_file(spec.paths["query"])
    df = outputs_frame(stream_video(model, frames, query, reference=a.reference))
    df["warmup"] = df["warmup"].astype(int)
    if "out" in spec.paths:
        df.to_csv(spec.paths["out"], index=False)
        log.info(f"{len(df)} steps → {spec.paths['out']}")
    else:
        df.to_csv(sys.stdout, index=False)
    if "plot" in spec.paths:
        gt = tuple(parse_list(a.gt, cast=lambda x: si("gt", x))) if a.gt else None
        if gt is not None and len(gt) != 2:
            raise ValidationError(f"--gt expects t_s,t_e, got {a.gt!r}")
        write_figure(stream_figure(df, gt), spec.paths["plot"])
    return 0


def cmd_bench(spec: CommandSpec) -> int:
    a = spec.args
    model = load_checkpoint(spec.paths["checkpoint"], spec.config) if "checkpoint" in spec.paths \
        else TwinNet(spec.config)
    report = benchmark(model, steps=a.steps, seed=spec.config.seed)
    print(f"incremental_steps_per_s={report.incremental_fps:.3f}")
    print(f"reference_steps_per_s={report.reference_fps:.3f}")
    print(f"ratio={report.ratio:.3f}")
    print(f"rows_per_step incremental={report.incremental_rows} reference={report.reference_rows}")
    if "out" in spec.paths:
        report.as_frame().to_csv(spec.paths["out"], index=False)
    if "plot" in spec.paths:
        write_figure(bench_figure(report.as_frame()), spec.paths["plot"])
    return 0


def cmd_sweep(spec: CommandSpec) -> int:
    a = spec.args
    out = spec.paths["out"]
    out.mkdir(parents=True, exist_ok=True)
    ns, ms = _grid(a)
    metric_cols = [f"R@{n},IoU={m:g}" for n in ns for m in ms]
    rows = []
    for value in parse_list(a.values, cast=str):
        cfg = spec.config.with_overrides({a.key: value})
        run = train(spec.paths["manifest"], cfg, out / f"{a.key}={value}")
        report = evaluate_dataset(spec.paths.get("eval_manifest", spec.paths["manifest"]), run.model,
                                  ns, ms, workers=cfg.workers)
        rows.append({"key": a.key, "value": getattr(cfg, a.key),
                     **{f"R@{n},IoU={m:g}": report.recall(n, m) for n in ns for m in ms}})
        log.info(f"sweep {a.key}={value}: {report.summary()}")
    table = pd.DataFrame(rows, columns=["key", "value", *metric_cols])
    table.to_csv(out / "sweep.csv", index=False)
    write_figure(sweep_figure(table, a.key, metric_cols), out / "sweep.html")
    print(table.to_csv(index=False), end="")
    return 0


ROUTER = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "stream": cmd_stream,
    "bench": cmd_bench,
    "sweep": cmd_sweep,
}


# ══════════════════════════════════════════════════════════════════════════════
# PARSER
# ══════════════════════════════════════════════════════════════════════════════

def _add_config_flags(p: argparse.ArgumentParser, default_preset: str = "desk"):
    p.add_argument("--preset", default=default_preset, choices=sorted(PRESETS))
    p.add_argument("--config", help="key=value config file")
    g = p.add_argument_group("model config overrides")
    for k in CONFIG_KEYS:
        g.add_argument(f"--{k}", default=argparse.SUPPRESS, metavar="V")


def _add_grid_flags(p: argparse.ArgumentParser):
    p.add_argument("--grid", choices=sorted(GRIDS), help="named n/m grid (default anet)")
    p.add_argument("--top-n", help="comma-separated top-n values")
    p.add_argument("--iou", help="comma-separated IoU thresholds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsgsv", description="Streaming sentence grounding")
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="write a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--videos", type=int, default=10)
    p.add_argument("--frames-per-video", type=int, default=64)
    p.add_argument("--raw-dim", type=int, default=32)
    p.add_argument("--events", type=int, default=2)
    p.add_argument("--min-len", type=int, default=6)
    p.add_argument("--max-len", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--tokens", type=int, default=4)

    p = sub.add_parser("train", help="train ordinary + prophet networks")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("eval", help="R@n,IoU=m over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="report CSV")
    p.add_argument("--full", action="store_true", help="score all O(L²) candidates")
    p.add_argument("--exclude-warmup", action="store_true")
    p.add_argument("--gates", action="store_true", help="log mean router gates per layer")
    _add_grid_flags(p)
    _add_config_flags(p)

    p = sub.add_parser("stream", help="per-frame T,s,m,e,warmup CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--out")
    p.add_argument("--reference", action="store_true", help="use the full-recompute path")
    p.add_argument("--plot", help="HTML figure path")
    p.add_argument("--gt", help="t_s,t_e to shade on the plot")
    _add_config_flags(p)

    p = sub.add_parser("bench", help="incremental vs reference throughput")
    p.add_argument("--checkpoint")
    p.add_argument("--steps", type=int, default=64)
    p.add_argument("--out", help="CSV report")
    p.add_argument("--plot", help="HTML figure path")
    _add_config_flags(p, default_preset="bench")

    p = sub.add_parser("sweep", help="train + evaluate across values of one config key")
    p.add_argument("--manifest", required=True)
    p.add_argument("--eval-manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--key", required=True, choices=CONFIG_KEYS)
    p.add_argument("--values", required=True)
    _add_grid_flags(p)
    _add_config_flags(p)
    return parser


# ══════════════════════════════════════════════════════════════════════════════
# MAIN
# ══════════════════════════════════════════════════════════════════════════════

@guard
def _run(args: argparse.Namespace) -> int:
    spec = resolve_spec(args)
    log.debug(f"{spec.name}: paths={ {k: str(v) for k, v in spec.paths.items()} }")
    return ROUTER[spec.name](spec)


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    return _run(args)


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
