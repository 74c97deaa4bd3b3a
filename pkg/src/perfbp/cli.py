"""Command-line front end: ``perfbp train|eval|ablate|inspect``.

Exit codes: 0 success, 1 config error, 2 data or checkpoint error,
3 numeric failure, 4 partial ablation failure.  The default run root is
``$PERFBP_RUNS`` (falling back to ``./runs``).
"""

import argparse
import concurrent.futures
import csv
import io
import json
import os
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from .config import ABLATION_MODES, apply_overrides, dump_config, from_dict, load_config
from .errors import CheckpointError, ConfigError, DataError, NonFiniteError
from .network import param_breakdown, param_count
from .orchestrator import load_splits, predict, quartiles_nearest_rank, run_experiment, score_outputs
from .store import epoch_curves, find_checkpoint, load_checkpoint, read_metrics

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_PARTIAL = 0, 1, 2, 3, 4
RUNS_ENV = "PERFBP_RUNS"
ABLATION_DEFAULT = ("full_pb", "only_head", "only_backbone", "cc_no_perforation", "gd_dendrites")


def runs_root(arg=None, config=None):
    if arg:
        return Path(arg)
    if config is not None and config.runs_dir:
        return Path(config.runs_dir)
    return Path(os.environ.get(RUNS_ENV, "runs"))


def _fail(code, msg):
    print(f"error: {msg}", file=sys.stderr)
    return code


def _guard(fn):
    """Translate library errors into exit codes."""
    def wrapped(args):
        try:
            return fn(args)
        except ConfigError as exc:
            return _fail(EXIT_CONFIG, f"config: {exc}")
        except (DataError, CheckpointError) as exc:
            return _fail(EXIT_DATA, str(exc))
        except NonFiniteError as exc:
            return _fail(EXIT_NUMERIC, f"numeric failure: {exc}")
    return wrapped


# -- train ------------------------------------------------------------

@_guard
def cmd_train(args):
    cfg = load_config(args.config, args.set)
    root = runs_root(args.runs_dir, cfg)
    exp_id = args.run_id or f"{cfg.name}-{cfg.ablation_mode}-s{cfg.seed}"
    log = (lambda *a, **k: None) if args.quiet else print
    report = run_experiment(cfg, run_dir=root / exp_id, experiment_id=exp_id, log=log)
    if args.quiet:
        print(report.summary())
    print(f"run directory: {root / exp_id}")
    print(f"final checkpoint: {report.final_checkpoint_id}")
    return EXIT_OK


# -- eval -------------------------------------------------------------

@_guard
def cmd_eval(args):
    root = runs_root(args.runs_dir)
    cid, ckpt_dir = find_checkpoint(args.checkpoint, [root])
    state = load_checkpoint(cid, ckpt_dir)
    config_path = args.config or ckpt_dir.parent / "config.yaml"
    if not Path(config_path).exists():
        raise ConfigError(f"no config found for checkpoint (looked for {config_path}); pass --config")
    cfg = load_config(config_path, args.set)
    splits, _ = load_splits(cfg)
    ds = getattr(splits, args.split)
    if ds is None:
        raise DataError(f"dataset has no {args.split} split")
    net = state.net
    predict(net, ds.inputs[:min(len(ds), args.batch_size)], args.batch_size)  # warm-up
    t0 = time.perf_counter()
    outputs = predict(net, ds.inputs, args.batch_size)
    elapsed = time.perf_counter() - t0
    score = score_outputs(outputs, ds.labels, cfg.score_metric)
    neuron, dendrite = param_count(net)
    meta = state.metadata
    print(f"checkpoint       : {cid}")
    print(f"split            : {args.split} ({len(ds)} samples)")
    print(f"{cfg.score_metric:<17}: {score!r}")
    if "val_score" in meta:
        print(f"recorded val     : {meta['val_score']!r}")
    print(f"neuron params    : {neuron}")
    print(f"dendrite params  : {dendrite}")
    print("breakdown        : " + json.dumps(param_breakdown(net), sort_keys=True))
    print(f"dendrite nodes   : {net.num_dendrites()}")
    print(f"throughput       : {len(ds) / max(elapsed, 1e-12):.1f} inputs/s at batch size {args.batch_size}")
    return EXIT_OK


# -- ablate -----------------------------------------------------------

def _ablation_job(config_dict, run_dir, exp_id):
    cfg = from_dict(config_dict)
    report = run_experiment(cfg, run_dir=run_dir, experiment_id=exp_id, log=None)
    return report.error_reduction_pct


def ablation_table(results, modes):
    """Rows of (mode, runs, min, q1, q3, max) over error-reduction percentages."""
    rows = []
    for mode in modes:
        vals = [v for (m, _), v in results.items() if m == mode and v is not None]
        if vals:
            rows.append((mode, len(vals), *quartiles_nearest_rank(vals)))
        else:
            rows.append((mode, 0, None, None, None, None))
    return rows


def format_table(rows):
    def f(v):
        return "-" if v is None else f"{v:.3f}"

    out = [f"{'mode':<20} {'runs':>4} {'min':>9} {'q1':>9} {'q3':>9} {'max':>9}"]
    for mode, n, lo, q1, q3, hi in rows:
        out.append(f"{mode:<20} {n:>4} {f(lo):>9} {f(q1):>9} {f(q3):>9} {f(hi):>9}")
    return "\n".join(out) + "\n"


@_guard
def cmd_ablate(args):
    modes = args.modes.split(",") if args.modes else list(ABLATION_DEFAULT)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [0]
    if not modes or not seeds:
        raise ConfigError("need at least one mode and one seed")
    for m in modes:
        if m not in ABLATION_MODES:
            raise ConfigError(f"unknown ablation mode {m!r}")
    import yaml

    base = {}
    if args.config:
        try:
            base = yaml.safe_load(Path(args.config).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    base = apply_overrides(base, args.set)
    base_cfg = from_dict(base)  # validate once before launching anything
    root = runs_root(args.runs_dir, base_cfg) / (args.name or f"{base_cfg.name}-ablation")
    root.mkdir(parents=True, exist_ok=True)
    jobs = []
    for mode in modes:
        for seed in seeds:
            cfg = from_dict(apply_overrides(base, [f"ablation_mode={mode}", f"seed={seed}"]))
            exp_id = f"{cfg.name}-{mode}-s{seed}"
            jobs.append(((mode, seed), dump_config(cfg), root / exp_id, exp_id))
    results, failures = {}, {}

    def done(key, value=None, exc=None):
        if exc is None:
            results[key] = value
            print(f"  {key[0]} seed {key[1]}: error reduction {value if value is None else round(value, 3)}%")
        else:
            failures[key] = f"{type(exc).__name__}: {exc}"
            print(f"  {key[0]} seed {key[1]}: FAILED ({failures[key]})", file=sys.stderr)

    print(f"ablation: {len(jobs)} runs ({len(modes)} modes x {len(seeds)} seeds) in {root}")
    if args.jobs <= 1:
        for key, text, run_dir, exp_id in jobs:
            try:
                done(key, _ablation_job(yaml.safe_load(text), run_dir, exp_id))
            except Exception as exc:  # a failed run must not stop the others
                traceback.print_exc()
                done(key, exc=exc)
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futs = {pool.submit(_ablation_job, yaml.safe_load(text), run_dir, exp_id): key
                    for key, text, run_dir, exp_id in jobs}
            for fut in concurrent.futures.as_completed(futs):
                try:
                    done(futs[fut], fut.result())
                except Exception as exc:
                    done(futs[fut], exc=exc)
    rows = ablation_table(results, modes)
    table = format_table(rows)
    (root / "summary.txt").write_text(table)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "runs", "min", "q1", "q3", "max"])
    w.writerows([[c if c is not None else "" for c in r] for r in rows])
    (root / "summary.csv").write_text(buf.getvalue())
    per_run = {f"{m}:{s}": results.get((m, s)) for m in modes for s in seeds}
    (root / "results.json").write_text(json.dumps(
        {"error_reduction_pct": per_run,
         "failures": {f"{m}:{s}": v for (m, s), v in failures.items()}},
        sort_keys=True, indent=1) + "\n")
    print("error reduction % (nearest-rank quartiles)")
    print(table, end="")
    if failures:
        return _fail(EXIT_PARTIAL, f"{len(failures)} of {len(jobs)} runs failed")
    return EXIT_OK


# -- inspect ----------------------------------------------------------

def cycle_summaries(records):
    cycles = {}
    for r in records:
        cycles.setdefault(r.cycle_index, []).append(r)
    out = []
    for c in sorted(cycles):
        rs = cycles[c]
        vals = [r.val_score for r in rs if r.val_score is not None]
        best = max(range(len(rs)), key=lambda k: (rs[k].val_score if rs[k].val_score is not None else -np.inf, -k))
        out.append({
            "cycle": c, "kind": rs[0].kind, "epochs": len(rs),
            "best_val": max(vals) if vals else None, "best_val_epoch": rs[best].epoch,
            "test_at_best": rs[best].test_score, "flat_val": len(set(vals)) <= 1,
            "seconds": sum(r.seconds for r in rs),
        })
    return out


@_guard
def cmd_inspect(args):
    run_dir = Path(args.run_dir)
    path = run_dir / "metrics.jsonl" if run_dir.is_dir() else run_dir
    records = read_metrics(path)
    print(f"{'cycle':>5} {'kind':<9} {'epochs':>6} {'best val':>9} {'at':>4} {'test@best':>9} {'flat':>5} {'sec':>8}")
    for s in cycle_summaries(records):
        bv = "-" if s["best_val"] is None else f"{s['best_val']:.4f}"
        tb = "-" if s["test_at_best"] is None else f"{s['test_at_best']:.4f}"
        print(f"{s['cycle']:>5} {s['kind']:<9} {s['epochs']:>6} {bv:>9} {s['best_val_epoch']:>4} "
              f"{tb:>9} {str(s['flat_val']).lower():>5} {s['seconds']:>8.1f}")
    report = run_dir / "report.json"
    if run_dir.is_dir() and report.exists():
        r = json.loads(report.read_text())
        print(f"first-cycle test {r['first_cycle_test']}, max-val test {r['max_val_test']}, "
              f"error reduction {r['error_reduction_pct']}%, dendrite rounds {r['dendrites_added']}")
    if args.csv:
        text = epoch_curves(records)
        if args.csv == "-":
            sys.stdout.write(text)
        else:
            Path(args.csv).write_text(text)
            print(f"wrote {len(records)} epoch rows to {args.csv}")
    return EXIT_OK


# -- entry point ------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="perfbp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required):
        sp.add_argument("--config", required=config_required, help="YAML experiment config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. --set candidates.pool_size=8 (repeatable)")
        sp.add_argument("--runs-dir", help=f"run root (default ${RUNS_ENV} or ./runs)")

    t = sub.add_parser("train", help="run one experiment")
    common(t, True)
    t.add_argument("--run-id", help="run directory name (default <name>-<mode>-s<seed>)")
    t.add_argument("--quiet", action="store_true", help="only print the final summary")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint and measure throughput")
    e.add_argument("checkpoint", help="checkpoint id (a unique prefix is enough)")
    common(e, False)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--batch-size", type=int, default=100)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run ablation modes x seeds and summarize")
    common(a, False)
    a.add_argument("--modes", help=f"comma-separated (default {','.join(ABLATION_DEFAULT)})")
    a.add_argument("--seeds", help="comma-separated integers (default 0)")
    a.add_argument("--jobs", type=int, default=1, help="concurrent sub-experiments")
    a.add_argument("--name", help="ablation directory name under the run root")
    a.set_defaults(func=cmd_ablate)

    i = sub.add_parser("inspect", help="summarize a run's metrics")
    i.add_argument("run_dir", help="run directory (or a metrics.jsonl file)")
    i.add_argument("--csv", help="write per-epoch curves as CSV to this path ('-' for stdout)")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
