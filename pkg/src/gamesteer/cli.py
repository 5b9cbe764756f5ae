"""Command-line front end for the benchmark harness.

Subcommands:
  identify <cfg>             collect data and fit; writes the model dump and
                             held-out velocity MSE
  steer <cfg>                run the full three-phase scenario; writes the
                             trajectory CSV and the metrics CSV
  sweep-ic <cfg> --n N       sweep initial conditions
  sweep-payoffs <cfg> --n N --kind {stag_hunt,zero_sum}
  report <dir>               merge every *_metrics.csv under dir

All outputs are CSV; --out picks the directory (default '.'), --seed
overrides the config seed.  Exit status is nonzero on any hard failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import bench
from .game import StagHuntClass, ZeroSum2x2InteriorNE


def _out_path(args, name: str) -> str:
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _load(args) -> bench.Scenario:
    s = bench.load_config(args.config)
    if args.seed is not None:
        s.seed = args.seed
    return s


def cmd_identify(args) -> int:
    s = _load(args)
    game, true_field, ds, model, _ = bench.identify(s)
    mt = bench.mse_true_of(model, true_field, game,
                           rng=np.random.default_rng(s.seed + 1))
    dump = _out_path(args, f"{s.name}_model.txt")
    if hasattr(model, "dump"):
        model.dump(dump)
    path = _out_path(args, f"{s.name}_identify.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "method", "config_hash", "seed", "status",
                    "training_mse"]
                   + [f"mse_true_{j + 1}" for j in range(game.n_states)])
        w.writerow([s.name, s.method, s.config_hash(), s.seed, model.status,
                    repr(float(model.training_mse))] + [repr(float(v)) for v in mt])
    print(f"{s.name}: status {model.status} "
          f"max held-out mse {float(np.max(mt)):.3e}")
    return 0


def cmd_steer(args) -> int:
    s = _load(args)
    log, rec = bench.run_scenario(s)
    log.to_csv(_out_path(args, f"{s.name}_traj.csv"), s.build_game())
    bench.emit_report([(s, rec)], _out_path(args, f"{s.name}_metrics.csv"))
    err = float(np.max(rec.error_at_tfinal))
    print(f"{s.name}: error_at_tfinal {err:.3e} cost {rec.cost:.3e}")
    return 0


def cmd_sweep_ic(args) -> int:
    s = _load(args)
    result = bench.sweep_initial_conditions(s, args.n)
    bench.emit_report(list(zip(result.scenarios, result.records)),
                      _out_path(args, f"{s.name}_sweep_ic_metrics.csv"),
                      logs=result.logs)
    for name, msg in result.failures:
        print(f"failed: {name}: {msg}", file=sys.stderr)
    print(f"{s.name}: {len(result.records)} runs, {len(result.failures)} failed, "
          f"mean cost {result.mean.cost:.3e}")
    return 0 if result.records else 1


def cmd_sweep_payoffs(args) -> int:
    s = _load(args)
    kind = {"stag_hunt": StagHuntClass, "zero_sum": ZeroSum2x2InteriorNE}[args.kind]
    result = bench.sweep_payoffs(kind, args.n, s)
    bench.emit_report(list(zip(result.scenarios, result.records)),
                      _out_path(args, f"{s.name}_sweep_payoffs_metrics.csv"),
                      logs=result.logs)
    for name, msg in result.failures:
        print(f"failed: {name}: {msg}", file=sys.stderr)
    print(f"{s.name}: {len(result.records)} runs, {len(result.failures)} failed, "
          f"mean cost {result.mean.cost:.3e}")
    return 0 if result.records else 1


def cmd_report(args) -> int:
    rows = []
    cols: list = []
    for root, _, names in os.walk(args.dir):
        for name in sorted(names):
            if not name.endswith("_metrics.csv"):
                continue
            for row in bench.read_report(os.path.join(root, name)):
                rows.append(row)
                for k in row:
                    if k not in cols:
                        cols.append(k)
    path = _out_path(args, "report.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            w.writerow([row.get(k, "") for k in cols])
    print(f"report.csv: {len(rows)} rows")
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="gamesteer")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=".")

    p = sub.add_parser("identify")
    common(p)
    p.set_defaults(func=cmd_identify)
    p = sub.add_parser("steer")
    common(p)
    p.set_defaults(func=cmd_steer)
    p = sub.add_parser("sweep-ic")
    common(p)
    p.add_argument("--n", type=int, required=True)
    p.set_defaults(func=cmd_sweep_ic)
    p = sub.add_parser("sweep-payoffs")
    common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--kind", choices=("stag_hunt", "zero_sum"), required=True)
    p.set_defaults(func=cmd_sweep_payoffs)
    p = sub.add_parser("report")
    p.add_argument("dir")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_report)

    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
