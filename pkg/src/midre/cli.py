"""Command-line entry point: ``midre <command> [--config PATH] [--set K=V ...]``.

Exit codes: 0 on success, 2 on a configuration error, 3 on a runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import synthdata
from .errors import ConfigError, MidreError
from .pipeline import Pipeline, compare_schemes, load_config, sweep_ae

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from e


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON experiment config")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                        help="override a config key, e.g. --set policy.a_hi=0.5")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="midre", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic face dataset")
    sub.add_parser("train", parents=[common], help="train evaluation, target and decoder models")
    sub.add_parser("attack", parents=[common], help="train (cached) and invert every private identity")
    sub.add_parser("eval", parents=[common], help="full pipeline with metrics.json")
    sub.add_parser("analyze", parents=[common], help="feature-space hull overlap analysis")
    sw = sub.add_parser("sweep", parents=[common], help="sweep the erased-area fraction")
    sw.add_argument("--values", default="0,0.2,0.5")
    sw.add_argument("--mode", choices=("point", "range"), default="point")
    sw.add_argument("--repeats", type=int)
    cs = sub.add_parser("compare-schemes", parents=[common], help="RE vs FE vs EE at matched concealment")
    cs.add_argument("--levels", default="0,0.4")
    cs.add_argument("--repeats", type=int)
    rp = sub.add_parser("report", parents=[common], help="render results in a directory as a text table")
    rp.add_argument("run_dir", nargs="?", help="directory holding metrics.json, summary.csv or schemes.csv")
    return parser


def _fmt(v) -> str:
    if v is None or v == "":
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    try:
        return f"{float(v):.4f}" if "." in str(v) else str(v)
    except ValueError:
        return str(v)


def render_table(rows: list[dict], columns: Sequence[str]) -> str:
    cells = [[str(c) for c in columns]] + [[_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def report(run_dir: Path) -> str:
    """Plain-text table of every result file in ``run_dir``; also writes ``report.csv``."""
    blocks, plot_rows = [], []
    metrics_path = run_dir / "metrics.json"
    if metrics_path.exists():
        m = json.loads(metrics_path.read_text(encoding="utf-8"))
        cols = ["acc", "att_acc", "att_acc_ci", "knn_dist", "ffd", "hull_iou_recon_priv",
                "hull_iou_recon_re", "hull_iou_re_priv"]
        blocks.append(render_table([m], cols))
        plot_rows += [{"source": "metrics", "key": c, "value": m.get(c)} for c in cols]
    for name in ("summary.csv", "schemes.csv"):
        path = run_dir / name
        if path.exists():
            with open(path, newline="") as f:
                rows = list(csv.DictReader(f))
            if rows:
                blocks.append(render_table(rows, list(rows[0])))
                for r in rows:
                    x = r.get("a_h", r.get("concealment"))
                    series = r.get("policy", r.get("scheme"))
                    for key in ("acc", "att_acc"):
                        plot_rows.append({"source": name, "key": f"{series}:{key}", "x": x, "seed": r.get("seed"),
                                          "value": r.get(key)})
    if not blocks:
        raise ConfigError(f"no metrics.json, summary.csv or schemes.csv in {run_dir}")
    with open(run_dir / "report.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["source", "key", "x", "seed", "value"])
        w.writeheader()
        w.writerows(plot_rows)
    return "\n\n".join(blocks)


def run(args: argparse.Namespace) -> int:
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    if args.command == "report":
        run_dir = Path(args.run_dir or args.out or ".")
        print(report(run_dir))
        return EXIT_OK
    cfg = load_config(args.config, args.overrides, seed=args.seed, output=args.out)
    cmd = args.command
    if cmd == "gen-data":
        ds = cfg.raw["dataset"]
        bundle = synthdata.generate_synthfaces(ds["num_identities"], ds["samples_per_identity"],
                                               (ds["width"], ds["height"], ds["channels"]), cfg.data_seed)
        synthdata.save_dataset(bundle, cfg.output / "data")
        print(f"wrote {cfg.output / 'data'}")
    elif cmd in ("train", "attack", "eval", "analyze"):
        until = {"train": "train", "attack": "attack"}.get(cmd, "eval")
        result = Pipeline(cfg).run(until=until, analysis_only=cmd == "analyze")
        shown = result.get("pooled", result) if cmd == "analyze" else result
        print(json.dumps({k: v for k, v in shown.items() if k != "provenance"}, indent=2, sort_keys=True))
    elif cmd == "sweep":
        s = sweep_ae(cfg, _floats(args.values), args.repeats, args.mode, args.jobs)
        print(render_table(s["rows"], ["policy", "a_h", "seed", "acc", "att_acc", "status"]))
        if "verdict" in s:
            print(json.dumps(s["verdict"], indent=2))
        if any(r["status"] != "ok" for r in s["rows"]):
            return EXIT_RUNTIME
    elif cmd == "compare-schemes":
        s = compare_schemes(cfg, _floats(args.levels), args.repeats, jobs=args.jobs)
        print(render_table(s["table"], ["scheme", "concealment", "median_acc", "median_att_acc"]))
        if any(r["status"] != "ok" for r in s["rows"]):
            return EXIT_RUNTIME
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (MidreError, OSError, ArithmeticError, ValueError, RuntimeError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
