"""Command-line entry point: ``fedmgp run | verify | compare | report``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import tempfile
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import reporting, verify
from .config import ConfigError, format_config, parse_config, parse_config_text
from .federation import FederationConfig, RoundFailure, checkpoint, run_federation

OUTPUT_ROOT_ENV = "FEDMGP_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "fedmgp-runs"

log = logging.getLogger("fedmgp")


class CommandError(RuntimeError):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))


def _prepare_out(out: str | None, default_name: str) -> Path:
    path = Path(out) if out else output_root() / default_name
    try:
        path.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=path, prefix=".probe-"):
            pass
    except OSError as exc:
        raise CommandError(f"output directory {path} is not writable: {exc}") from None
    return path


def load_config(path: str | None, overrides: dict | None = None, sets=()) -> FederationConfig:
    """Config file (or defaults), then ``--set key=value`` pairs, then explicit overrides."""
    cfg = parse_config(path) if path else FederationConfig()
    if sets:
        cfg = parse_config_text("\n".join(sets), "--set", base=cfg.to_dict())
    changes = {k: v for k, v in (overrides or {}).items() if v is not None}
    if changes:
        cfg = FederationConfig(**{**cfg.to_dict(), **changes})
    try:
        return cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_strategy(spec: str, base: FederationConfig) -> tuple[str, FederationConfig]:
    """``name`` or ``name:key=value,key=value`` applied on top of ``base``."""
    name, _, opts = spec.partition(":")
    lines = [f"strategy = {name.strip()}"]
    lines += [item.strip() for item in opts.split(",") if item.strip()]
    return spec, parse_config_text("\n".join(lines), f"strategy {spec!r}", base=base.to_dict())


def parse_seeds(text: str) -> list[int]:
    """``"0-9"``, ``"1,4,7"`` or a mix such as ``"0-2,10"``."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ValueError("no seeds given")
    return seeds


# --- commands ------------------------------------------------------------------------


def run_outputs(config: FederationConfig, records, state) -> dict[str, str]:
    files = {
        "metrics.csv": reporting.metrics_csv(records, config.strategy),
        "selection_trace.csv": reporting.selection_csv(records),
        "checkpoint.json": reporting.json_text(checkpoint(state)),
        "config.cfg": format_config(config),
    }
    files["selection_frequency.csv"] = reporting.frequency_from_records(records, config.groups)[1]
    files.update(reporting.similarity_files(state.client_prompts))
    return files


def cmd_run(config_path=None, out=None, seed=None, strategy=None, rounds=None, threads=None, sets=()) -> int:
    config = load_config(config_path, {"seed": seed, "strategy": strategy, "rounds": rounds, "threads": threads}, sets)
    out_dir = _prepare_out(out, f"run-{config.strategy}-seed{config.seed}")
    started = _now()
    t0 = time.perf_counter()
    records, state = run_federation(config)
    files = run_outputs(config, records, state)
    digests = reporting.write_outputs(out_dir, files)
    reporting.write_manifest(out_dir, config.to_dict(), digests, started, _now(),
                             {"elapsed_seconds": round(time.perf_counter() - t0, 3)})
    last = records[-1].mean_metrics
    print(f"{config.strategy} seed={config.seed} rounds={config.rounds}: "
          f"local={last['local']:.4f} base={last['base']:.4f} novel={last['novel']:.4f} "
          f"hm={last['hm']:.4f} cm={last['cm']:.4f}")
    print(f"wrote {len(files) + 1} files to {out_dir} (metrics.csv sha256 {digests['metrics.csv'][:16]})")
    return 0


def cmd_verify(out=None, log_fn=print) -> int:
    out_dir = _prepare_out(out, "verify")
    results = verify.run_all(log=log_fn)
    rows = [(r.name, "mandatory" if r.mandatory else "informational", r.passed, r.value, r.threshold, r.detail,
             r.seconds) for r in results]
    text = reporting.csv_text(reporting.VERIFY_SCHEMA,
                              ("check", "kind", "passed", "value", "threshold", "detail", "seconds"), rows)
    reporting.write_outputs(out_dir, {"verify_report.csv": text})
    failing = [r.name for r in results if r.mandatory and not r.passed]
    if failing:
        print("failing checks: " + ", ".join(failing), file=sys.stderr)
        return 1
    print(f"all {sum(r.mandatory for r in results)} mandatory checks passed; report in {out_dir}")
    return 0


COMPARE_FIELDS = ("local", "base", "novel", "hm", "cm", "min_snr")


def compare_strategies(base: FederationConfig, strategies, seeds) -> dict:
    """Final-round metrics for every (strategy spec, seed); the same seeds for every strategy."""
    if len(strategies) < 2:
        raise ValueError("compare needs at least two strategies")
    results = {}
    for spec in strategies:
        label, cfg = parse_strategy(spec, base)
        per_seed = []
        for seed in seeds:
            records, _ = run_federation(FederationConfig(**{**cfg.to_dict(), "seed": seed}))
            last = records[-1]
            per_seed.append({**last.mean_metrics, "min_snr": last.snr["min"], "seed": seed})
        results[label] = per_seed
    return results


def compare_tables(results: dict) -> tuple[str, str]:
    summary, runs = [], []
    for label, per_seed in results.items():
        row = [label, len(per_seed)]
        for f in COMPARE_FIELDS:
            vals = np.array([r[f] for r in per_seed], dtype=float)
            row += [float(np.mean(vals)), float(np.std(vals))]
        summary.append(row)
        runs += [[label, r["seed"], *[r[f] for f in COMPARE_FIELDS]] for r in per_seed]
    cols = ["strategy", "n_seeds"] + [f"{f}_{s}" for f in COMPARE_FIELDS for s in ("mean", "std")]
    return (reporting.csv_text(reporting.COMPARE_SCHEMA, cols, summary),
            reporting.csv_text(reporting.COMPARE_SCHEMA, ["strategy", "seed", *COMPARE_FIELDS], runs))


def cmd_compare(config_path=None, strategies=("full", "fixed", "dynamic"), seeds=(0,), out=None, rounds=None,
                threads=None, sets=()) -> int:
    base = load_config(config_path, {"rounds": rounds, "threads": threads}, sets)
    strategies = list(strategies)
    if len(strategies) < 2:
        raise CommandError("compare needs at least two strategies")
    out_dir = _prepare_out(out, "compare")
    started = _now()
    results = compare_strategies(base, strategies, list(seeds))
    summary, runs = compare_tables(results)
    digests = reporting.write_outputs(out_dir, {"comparison.csv": summary, "comparison_runs.csv": runs})
    reporting.write_manifest(out_dir, base.to_dict(), digests, started, _now(),
                             {"strategies": strategies, "seeds": list(seeds)})
    width = max(len(s) for s in results)
    print(f"{'strategy':<{width}}  " + "  ".join(f"{f:>15}" for f in COMPARE_FIELDS))
    for label, per_seed in results.items():
        cells = []
        for f in COMPARE_FIELDS:
            vals = np.array([r[f] for r in per_seed], dtype=float)
            cells.append(f"{np.mean(vals):7.4f}±{np.std(vals):6.4f}")
        print(f"{label:<{width}}  " + "  ".join(f"{c:>15}" for c in cells))
    return 0


def cmd_report(run_dir) -> int:
    """Summaries of a finished run: final metrics per round and selection frequencies."""
    run_dir = Path(run_dir)
    schema, rows = reporting.read_csv(run_dir / "metrics.csv")
    if schema != reporting.METRICS_SCHEMA:
        raise CommandError(f"unexpected metrics schema {schema!r}")
    means = [r for r in rows if r["client"] == "mean"]
    if not means:
        raise CommandError("metrics.csv has no mean rows")
    cols = ("round", "acc_local", "acc_base", "acc_novel", "hm", "cm", "min_snr", "alpha_g")
    files = {"summary.csv": reporting.csv_text(reporting.SUMMARY_SCHEMA, cols,
                                               ([r[c] for c in cols] for r in means))}
    print("  ".join(f"{c:>10}" for c in cols))
    for r in means:
        print("  ".join(f"{r[c]:>10.10}" for c in cols))
    trace = run_dir / "selection_trace.csv"
    if trace.exists():
        _, trace_rows = reporting.read_csv(trace)
        if trace_rows:
            table, text = reporting.frequency_from_trace(trace_rows)
            files["selection_frequency.csv"] = text
            never = table["never_selected"]
            print("groups never selected: " + (", ".join(f"{m}[{j}]" for m, j in never) if never else "none"))
    reporting.write_outputs(run_dir, files)
    return 0


# --- argument parsing ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedmgp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--out", help=f"output directory (default under ${OUTPUT_ROOT_ENV} or ./{DEFAULT_OUTPUT_ROOT})")
        p.add_argument("--rounds", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    run = sub.add_parser("run", help="run one federation and write its outputs")
    common(run)
    run.add_argument("--seed", type=int)
    run.add_argument("--strategy", choices=("full", "fixed", "dynamic"))

    ver = sub.add_parser("verify", help="run the numerical property checks")
    ver.add_argument("--out")

    cmp_ = sub.add_parser("compare", help="matched-seed comparison of aggregation strategies")
    common(cmp_)
    cmp_.add_argument("--strategies", default="full,fixed,dynamic",
                      help="comma-separated; options per strategy as name:key=value;key=value")
    cmp_.add_argument("--seeds", default="0-9", help="e.g. 0-9 or 1,3,5")
    cmp_.add_argument("--seed", type=int, help="single seed (overrides --seeds)")

    rep = sub.add_parser("report", help="summarize a finished run directory")
    rep.add_argument("run_dir")
    return parser


def _split_strategies(text: str) -> list[str]:
    # commas separate strategies; options inside one strategy use ';'
    return [s.strip().replace(";", ",") for s in text.split(",") if s.strip()]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out, args.seed, args.strategy, args.rounds, args.threads, args.set)
        if args.command == "verify":
            return cmd_verify(args.out)
        if args.command == "compare":
            seeds = [args.seed] if args.seed is not None else parse_seeds(args.seeds)
            return cmd_compare(args.config, _split_strategies(args.strategies), seeds, args.out, args.rounds,
                               args.threads, args.set)
        if args.command == "report":
            return cmd_report(args.run_dir)
    except (ConfigError, CommandError, ValueError, OSError) as exc:
        print(f"fedmgp {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except RoundFailure as exc:
        print(f"fedmgp {args.command}: {exc}", file=sys.stderr)
        return 3
    return 2


if __name__ == "__main__":
    sys.exit(main())
