"""Command-line entry point: ``mgvsim <command> ...``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import resilience as rs
from .runner import ScenarioError, bundled_scenario, load_scenario, read_csv_table, run


def _scenario(ref: str):
    path = Path(ref)
    if not path.exists() and not path.suffix:
        bundled = bundled_scenario(ref)
        if bundled.exists():
            path = bundled
    if not path.exists():
        raise ScenarioError(f"scenario not found: {ref}")
    return load_scenario(path)


def _execute(cfg, args, suffix: str) -> int:
    if args.seed is not None:
        cfg.raw["seed"] = args.seed
    artifacts = run(cfg, write=False)
    out = cfg.raw["outputs"]
    if args.out_dir is None and any(out.values()):
        artifacts.write(cfg.resolve(out["csv"]), cfg.resolve(out["canlog"]), cfg.resolve(out["summary"]))
        written = [str(cfg.resolve(p)) for p in out.values() if p]
    else:
        stem = (cfg.raw["name"] or "run") + suffix
        d = Path(args.out_dir or ".")
        paths = (d / f"{stem}.csv", d / f"{stem}.log", d / f"{stem}.summary.json")
        artifacts.write(*paths)
        written = [str(p) for p in paths]
    for p in written:
        print(p)
    return 0


def cmd_run(args) -> int:
    return _execute(_scenario(args.scenario), args, "")


def cmd_baseline(args) -> int:
    return _execute(_scenario(args.scenario).without_attacks(), args, ".baseline")


def _pair(args):
    base = rs.series_from_table(read_csv_table(args.baseline), args.metric)
    att = rs.series_from_table(read_csv_table(args.attack), args.metric)
    if len(base) != len(att):
        raise rs.AnalysisError(
            f"runs have different durations: baseline {len(base)} rows, attack {len(att)} rows"
        )
    return base, att


def _report(args):
    base, att = _pair(args)
    report, F, fit = rs.analyze(base, att, args.mode, args.interval, args.window)
    return report, F, fit


def cmd_analyze(args) -> int:
    report, _, _ = _report(args)
    print(json.dumps(report, indent=2))
    return 0


def cmd_fit(args) -> int:
    table = read_csv_table(args.functionality)
    col = args.column or next((c for c in ("F_observed", "F") if c in table), None)
    if col is None:
        raise rs.AnalysisError("functionality CSV needs an 'F' or 'F_observed' column (or --column)")
    series = rs.FunctionalitySeries(table["t"], table[col], F_N=args.fn)
    fit = rs.fit_model(series)
    out = fit.as_dict()
    out["R"] = rs.resilience_score(series)
    print(json.dumps(out, indent=2))
    return 0


def cmd_report(args) -> int:
    report, F, fit = _report(args)
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    (d / "analysis.json").write_text(json.dumps(report, indent=2) + "\n")
    rows = np.column_stack([F.t, F.v, fit.fitted.v])
    with open(d / "functionality.csv", "w") as fh:
        fh.write("t,F_observed,F_fitted\n")
        for t, fo, ff in rows:
            fh.write(f"{t:g},{fo:.6f},{ff:.6f}\n")
    print(json.dumps(report, indent=2))
    print(d / "analysis.json")
    print(d / "functionality.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgvsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, text in (
        ("run", cmd_run, "run a scenario"),
        ("baseline", cmd_baseline, "run a scenario with its attacks removed"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("scenario", help="scenario JSON path or bundled scenario name")
        p.add_argument("--out-dir", default=None, help="write <name>.csv/.log/.summary.json here")
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        p.set_defaults(func=fn)

    def pair_args(p):
        p.add_argument("--baseline", required=True, help="baseline run CSV")
        p.add_argument("--attack", required=True, help="attack run CSV")
        p.add_argument("--mode", choices=rs.MODES, default="noncompensatory")
        p.add_argument("--interval", choices=rs.INTERVALS, default="deviation")
        p.add_argument("--metric", default="fuel_eff_km_per_L", help="CSV column used as the KPP")
        p.add_argument("--window", type=float, default=rs.DEFAULT_WINDOW_S, help="smoothing window, s")

    p = sub.add_parser("analyze", help="AUC loss, model fit and resilience for a run pair")
    pair_args(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("fit", help="fit the functionality model to an F(t) CSV")
    p.add_argument("--functionality", required=True, help="CSV with columns t and F (or F_observed)")
    p.add_argument("--column", default=None)
    p.add_argument("--fn", type=float, default=1.0, help="nominal functionality F_N")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("report", help="write analysis.json and a plot-ready functionality.csv")
    pair_args(p)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, rs.AnalysisError, ValueError, OSError) as exc:
        print(f"mgvsim {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
