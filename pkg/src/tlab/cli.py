"""Command-line entry points.

    tlab run <config.json>       train + attack per the config
    tlab sweep <config.json> --axis {n_B,n_A,epsilon} --values v1,v2,...
    tlab hist <model.ckpt> --data synth:noisy:500 [--eps E] [--bins N]

Shared flags: --out DIR, --seed-override N, --threads N.

Exit codes: 0 on success, 2 for an invalid config or argument (the
message names the offending field), 1 for a runtime failure.  Outputs
are delimited CSVs with a versioned ``# schema:`` comment line, a
report.json with the resolved config and timings, checkpoints, and
rendered figures.  results.csv and checkpoints are byte-identical
across reruns of the same config; wall-clock timings live only in
report.json so they cannot break that guarantee.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path

import numpy as np

from .attack import AttackSpec, attack_white_box
from .data import synth_domain
from .experiment import (
    ConfigError,
    parse_config,
    resolved_config,
    run_seed,
    save_run_checkpoints,
)
from .figures import (
    save_accuracy_vs_epsilon,
    save_gamma_vs_epsilon,
    save_gradnorm_hist,
    save_sweep_curves,
)
from .metrics import gradient_norm_histogram
from .model import CheckpointError, load_checkpoint

RESULTS_SCHEMA = "# schema: tlab-results-v1"
SWEEP_SCHEMA = "# schema: tlab-sweep-v1"
GRADNORM_SCHEMA = "# schema: tlab-gradnorm-v1"
REPORT_SCHEMA = "tlab-report-v1"

RESULT_COLUMNS = ("seed", "strategy", "epsilon", "clean_accuracy", "a_w",
                  "a_b", "gamma", "subset_size", "wall_clock_seconds")


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def report_to_row(report, seed):
    """Flatten an AttackReport into the results-row dict."""
    gamma = report.gamma
    if report.a_b is not None and report.a_w == 0:
        gamma = "undefined"
    return {
        "seed": seed,
        "strategy": report.strategy_tag,
        "epsilon": report.epsilon,
        "clean_accuracy": report.clean_accuracy,
        "a_w": report.a_w,
        "a_b": report.a_b,
        "gamma": gamma,
        "subset_size": report.subset_size,
        # fixed placeholder: the column exists for readers, real timings
        # are in report.json, keeping this file byte-stable across runs
        "wall_clock_seconds": "0.000",
        "target_model_id": report.target_model_id,
        "source_model_id": report.source_model_id,
    }


def write_results_csv(rows, path):
    with open(path, "w", newline="") as fh:
        fh.write(RESULTS_SCHEMA + "\n")
        fh.write(",".join(RESULT_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[c]) for c in RESULT_COLUMNS) + "\n")


def write_gradnorm_csv(hists, path):
    """``hists`` is a list of (seed_or_empty, GradNormHistogram)."""
    cols = ("seed", "bin_lo", "bin_hi", "count_all", "count_success",
            "count_fail", "cumulative_fraction")
    with open(path, "w", newline="") as fh:
        fh.write(GRADNORM_SCHEMA + "\n")
        fh.write(",".join(cols) + "\n")
        for seed, hist in hists:
            for i in range(len(hist.counts_all)):
                fh.write(",".join([
                    "" if seed is None else str(seed),
                    f"{hist.bin_edges[i]:.6f}",
                    f"{hist.bin_edges[i + 1]:.6f}",
                    str(int(hist.counts_all[i])),
                    str(int(hist.counts_success[i])),
                    str(int(hist.counts_fail[i])),
                    f"{hist.cumulative_fraction[i]:.6f}",
                ]) + "\n")


def _summary(rows):
    per_eps = {}
    for row in rows:
        per_eps.setdefault(row["epsilon"], []).append(row)
    out = []
    for eps in sorted(per_eps):
        block = per_eps[eps]

        def mean_of(key):
            vals = [r[key] for r in block
                    if isinstance(r.get(key), (int, float))]
            return float(np.mean(vals)) if vals else None

        out.append({"epsilon": eps, "a_w_mean": mean_of("a_w"),
                    "a_b_mean": mean_of("a_b"),
                    "gamma_mean": mean_of("gamma"),
                    "clean_accuracy_mean": mean_of("clean_accuracy")})
    return out


def _execute_run(cfg, seeds, out_dir, threads, make_figures=True):
    """Run all seeds, write the standard output set, return row dicts."""
    out_dir.mkdir(parents=True, exist_ok=True)
    if threads > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            runs = list(pool.map(partial(run_seed, cfg), seeds))
    else:
        runs = []
        for seed in seeds:
            print(f"[seed {seed}] training ({cfg.strategy}) ...", flush=True)
            runs.append(run_seed(cfg, seed))

    rows = []
    hists = []
    checkpoints = {}
    timings = {}
    for run in runs:
        checkpoints[str(run.seed)] = save_run_checkpoints(
            run, out_dir / "checkpoints")
        for report in run.reports:
            rows.append(report_to_row(report, run.seed))
        hists.append((run.seed, run.hist))
        timings[str(run.seed)] = {k: round(v, 3)
                                  for k, v in run.timings.items()}
        last = run.reports[-1]
        a_b = f" a_b={last.a_b:.3f}" if last.a_b is not None else ""
        print(f"[seed {run.seed}] clean={last.clean_accuracy:.3f} "
              f"a_w={last.a_w:.3f}{a_b} at eps={last.epsilon:.4f}",
              flush=True)

    write_results_csv(rows, out_dir / "results.csv")
    write_gradnorm_csv(hists, out_dir / "gradnorm_hist.csv")
    report = {
        "schema": REPORT_SCHEMA,
        "config": resolved_config(cfg),
        "seeds": list(seeds),
        "rows": rows,
        "summary": _summary(rows),
        "checkpoints": checkpoints,
        "timings_seconds": timings,
    }
    with open(out_dir / "report.json", "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    if make_figures:
        figdir = out_dir / "figures"
        figdir.mkdir(exist_ok=True)
        save_accuracy_vs_epsilon(rows, figdir / "accuracy_vs_epsilon.png")
        save_gamma_vs_epsilon(rows, figdir / "gamma_vs_epsilon.png")
        for seed, hist in hists:
            save_gradnorm_hist(hist, figdir / f"gradnorm_hist_seed{seed}.png")
    return rows


def _load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return parse_config(raw), raw


def cmd_run(args):
    cfg, _ = _load_config(args.config)
    seeds = [args.seed_override] if args.seed_override is not None \
        else list(cfg.seeds)
    _execute_run(cfg, seeds, Path(args.out), args.threads)
    print(f"wrote {Path(args.out) / 'results.csv'}")
    return 0


SWEEP_AXES = ("n_B", "n_A", "epsilon")


def _parse_values(axis, text):
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ConfigError("field '--values': no values given")
    out = []
    for p in parts:
        try:
            v = float(p) if axis == "epsilon" else int(p)
        except ValueError:
            raise ConfigError(
                f"field '--values': {p!r} is not a valid {axis} value"
            ) from None
        if (axis == "epsilon" and v < 0) or (axis != "epsilon" and v < 1):
            raise ConfigError(f"field '--values': {p!r} out of range")
        out.append(v)
    if len(set(out)) != len(out):
        raise ConfigError("field '--values': duplicate values")
    return out


def _cell_config(raw, axis, value):
    cell = json.loads(json.dumps(raw))  # deep copy
    if axis == "n_B":
        cell["domain_b"]["n"] = value
    elif axis == "n_A":
        if not cell.get("domain_a"):
            raise ConfigError("field 'domain_a': required to sweep n_A")
        cell["domain_a"]["n"] = value
    else:
        cell["eps_grid"] = [value]
    return parse_config(cell)


def cmd_sweep(args):
    _, raw = _load_config(args.config)
    values = _parse_values(args.axis, args.values)
    # validate every cell before spending compute on any of them
    for value in values:
        _cell_config(raw, args.axis, value)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cols = ("axis", "value", "seed", "strategy", "epsilon", "clean_accuracy",
            "a_w", "a_b", "gamma", "subset_size")
    sweep_rows = []
    sweep_path = out_dir / "sweep.csv"
    with open(sweep_path, "w", newline="") as fh:
        fh.write(SWEEP_SCHEMA + "\n")
        fh.write(",".join(cols) + "\n")
        fh.flush()
        for value in values:
            cfg = _cell_config(raw, args.axis, value)
            seeds = [args.seed_override] if args.seed_override is not None \
                else list(cfg.seeds)
            cell_dir = out_dir / "cells" / f"{args.axis}_{value:g}"
            print(f"--- sweep cell {args.axis}={value:g} ---", flush=True)
            rows = _execute_run(cfg, seeds, cell_dir, args.threads,
                                make_figures=False)
            for row in rows:
                srow = dict(row, axis=args.axis, value=value)
                sweep_rows.append(srow)
                fh.write(",".join(_fmt(srow[c]) for c in cols) + "\n")
            fh.flush()
    figdir = out_dir / "figures"
    figdir.mkdir(exist_ok=True)
    save_sweep_curves(sweep_rows, args.axis, figdir / f"sweep_{args.axis}.png")
    print(f"wrote {sweep_path}")
    return 0


def _parse_data_spec(spec, seed):
    parts = spec.split(":")
    if parts[0] == "synth":
        if len(parts) not in (3, 4):
            raise ConfigError(
                "field '--data': expected synth:<style>:<n>[:<classes>]")
        style = parts[1]
        try:
            n = int(parts[2])
            k = int(parts[3]) if len(parts) == 4 else 10
        except ValueError:
            raise ConfigError(
                f"field '--data': bad counts in {spec!r}") from None
        try:
            return synth_domain(style, n, k, seed)
        except ValueError as exc:
            raise ConfigError(f"field '--data': {exc}") from None
    if parts[0] == "idx":
        if len(parts) != 3:
            raise ConfigError(
                "field '--data': expected idx:<images-path>:<labels-path>")
        from .data import load_idx

        return load_idx(parts[1], parts[2])
    raise ConfigError(
        f"field '--data': unknown scheme {parts[0]!r} (use synth: or idx:)")


def cmd_hist(args):
    if args.bins < 2:
        raise ConfigError(f"field '--bins': must be >= 2, got {args.bins}")
    if args.eps is not None and args.eps < 0:
        raise ConfigError(f"field '--eps': must be >= 0, got {args.eps}")
    seed = args.seed_override if args.seed_override is not None else 0
    dataset = _parse_data_spec(args.data, seed)
    model = load_checkpoint(args.checkpoint)
    if model.num_classes != dataset.num_classes:
        raise ConfigError(
            f"field '--data': {dataset.num_classes} classes but checkpoint "
            f"head emits {model.num_classes}")
    adv = None
    if args.eps is not None:
        spec = AttackSpec(epsilon=args.eps, mode="white_box")
        adv = attack_white_box(model, dataset, spec)
    hist = gradient_norm_histogram(model, dataset, bins=args.bins,
                                   adv_batch=adv)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta_seed = model.metadata.get("seed")
    write_gradnorm_csv([(meta_seed, hist)], out_dir / "gradnorm_hist.csv")
    figdir = out_dir / "figures"
    figdir.mkdir(exist_ok=True)
    save_gradnorm_hist(hist, figdir / "gradnorm_hist.png")
    print(f"median input-gradient norm: {hist.median_norm:.6f}")
    print(f"wrote {out_dir / 'gradnorm_hist.csv'}")
    return 0


def build_parser():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--out", default="tlab_out",
                        help="output directory (default: tlab_out)")
    shared.add_argument("--seed-override", type=int, default=None,
                        metavar="N", help="run only this seed")
    shared.add_argument("--threads", type=int, default=1,
                        help="worker processes for independent seeds/cells")
    parser = argparse.ArgumentParser(
        prog="tlab",
        description="train, attack, and measure transfer-learned classifiers")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", parents=[shared],
                           help="train and attack per a JSON config")
    p_run.add_argument("config")
    p_run.set_defaults(fn=cmd_run)

    p_sweep = sub.add_parser("sweep", parents=[shared],
                             help="repeat a run while varying one axis")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated axis values")
    p_sweep.set_defaults(fn=cmd_sweep)

    p_hist = sub.add_parser("hist", parents=[shared],
                            help="input-gradient-norm histogram of a "
                                 "checkpoint")
    p_hist.add_argument("checkpoint")
    p_hist.add_argument("--data", required=True,
                        help="synth:<style>:<n>[:<classes>] or "
                             "idx:<images>:<labels>")
    p_hist.add_argument("--bins", type=int, default=50)
    p_hist.add_argument("--eps", type=float, default=None,
                        help="also attack at this budget and split the "
                             "histogram by attack success")
    p_hist.set_defaults(fn=cmd_hist)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        print("config error: field '--threads': must be >= 1",
              file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure, not a usage problem
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
