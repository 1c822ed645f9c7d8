"""Command-line entry point: ``fedmr run | compare | validate``.

Exit codes: 0 success, 1 failure during a run, 2 invalid config or
arguments, 3 output directory already exists.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import os
import shutil
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, input_files, load_config, parse_override, prepare_data, to_toml
from .orchestrator import run_experiment, write_metrics_csv, write_rounds_jsonl
from .structure import save_checkpoint

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_EXISTS = 0, 1, 2, 3
SEED_FLAGS = ("init", "data", "sampling", "recombine")


class OutputExistsError(RuntimeError):
    pass


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _overrides(args) -> list:
    items = [parse_override(s) for s in args.set or []]
    for name in SEED_FLAGS:
        value = getattr(args, f"seed_{name}", None)
        if value is not None:
            items.append((f"seeds.{name}", value))
    return items


def _report(exc: ConfigError, stream=None) -> None:
    stream = stream or sys.stderr
    for field, msg in exc.problems:
        print(f"error: {field}: {msg}", file=stream)


def execute(cfg: RunConfig, out_root: Path, force: bool = False, workers: int = 1):
    """Run ``cfg`` into ``out_root/<label>-<hash>`` and return (run_dir, result).

    Outputs are written to a staging directory that is renamed into place
    only after every file has been written.
    """
    run_dir = out_root / f"{cfg.label}-{cfg.config_hash()[:12]}"
    if run_dir.exists():
        if not force:
            raise OutputExistsError(f"{run_dir} already exists (use --force to replace it)")
        shutil.rmtree(run_dir)
    staging = run_dir.with_name(run_dir.name + ".partial")
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)
    started = _now()
    try:
        shards, test = prepare_data(cfg)
        result = run_experiment(cfg.experiment, shards, test, workers=workers)
        write_metrics_csv(result.records, staging / "metrics.csv")
        write_rounds_jsonl(result.records, staging / "rounds.jsonl")
        save_checkpoint(result.global_model, staging / "model.ckpt")
        manifest = {
            "fedmr_version": __version__,
            "config": cfg.resolved,
            "seeds": cfg.resolved["seeds"],
            "content_hash": cfg.config_hash(),
            "input_files": input_files(cfg),
            "partition": {
                "scheme": cfg.experiment.partition.scheme,
                "proportions": "per-class over clients" if cfg.experiment.partition.scheme == "dirichlet" else None,
                "client_sizes": [len(s) for s in shards],
            },
            "outputs": {
                "metrics": "metrics.csv",
                "rounds": "rounds.jsonl",
                "model": "model.ckpt",
            },
            "run_dir": str(run_dir),
            "started_at": started,
            "finished_at": _now(),
        }
        with open(staging / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    os.replace(staging, run_dir)
    return run_dir, result


def cmd_validate(args) -> int:
    try:
        cfg = load_config(args.config, _overrides(args))
    except ConfigError as exc:
        _report(exc)
        return EXIT_CONFIG
    sys.stdout.write(to_toml(cfg.resolved))
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config, _overrides(args))
    except ConfigError as exc:
        _report(exc)
        return EXIT_CONFIG
    try:
        run_dir, result = execute(cfg, Path(args.out), force=args.force, workers=args.workers)
    except OutputExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EXISTS
    except Exception as exc:  # noqa: BLE001 - surfaced to the user as exit 1
        print(f"error: run failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    last = result.records[-1] if result.records else None
    summary = f"accuracy={last.accuracy:.4f}" if last and last.accuracy is not None else "no rounds"
    print(f"{run_dir} ({len(result.records)} rounds, {summary})")
    return EXIT_OK


# settings that must agree for a comparison to be unconfounded
_SHARED = (
    ("data", None),
    ("partition", None),
    ("seeds", "data"),
    ("experiment", "num_clients"),
)


def _comparison_mismatches(configs: list[RunConfig]) -> list[tuple[str, str]]:
    problems = []
    base = configs[0].resolved
    for cfg in configs[1:]:
        for section, key in _SHARED:
            a = base[section] if key is None else base[section][key]
            b = cfg.resolved[section] if key is None else cfg.resolved[section][key]
            if a != b:
                name = section if key is None else f"{section}.{key}"
                problems.append((name, f"{configs[0].label} and {cfg.label} differ; comparison would be confounded"))
    return problems


def cmd_compare(args) -> int:
    if len(args.configs) < 2:
        print("error: compare needs at least two configs", file=sys.stderr)
        return EXIT_CONFIG
    overrides = _overrides(args)
    configs = []
    try:
        for path in args.configs:
            configs.append(load_config(path, overrides))
    except ConfigError as exc:
        _report(exc)
        return EXIT_CONFIG
    mismatches = _comparison_mismatches(configs)
    if mismatches:
        _report(ConfigError(mismatches))
        return EXIT_CONFIG

    labels, seen = [], {}
    for cfg in configs:
        seen[cfg.label] = seen.get(cfg.label, 0) + 1
        labels.append(cfg.label if seen[cfg.label] == 1 else f"{cfg.label}-{seen[cfg.label]}")

    out = Path(args.out)
    curves = {}
    try:
        for label, cfg in zip(labels, configs):
            run_dir, result = execute(cfg, out, force=args.force, workers=args.workers)
            curves[label] = {r.round: r.accuracy for r in result.records}
            print(f"{label}: {run_dir}")
    except OutputExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EXISTS
    except Exception as exc:  # noqa: BLE001
        print(f"error: run failed: {exc}", file=sys.stderr)
        return EXIT_FAILED

    rounds = sorted({r for c in curves.values() for r in c})
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", *labels])
        for r in rounds:
            w.writerow([r, *("" if curves[m].get(r) is None else repr(curves[m][r]) for m in labels)])

    rows = []
    for label in labels:
        scored = [(acc, r) for r, acc in curves[label].items() if acc is not None]
        final = curves[label][max(curves[label])] if curves[label] else None
        best_acc, best_round = max(scored, key=lambda t: (t[0], -t[1])) if scored else (None, None)
        rows.append((label, final, best_acc, best_round))
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "final_accuracy", "best_accuracy", "best_round"])
        for label, final, best, best_round in rows:
            w.writerow([label, "" if final is None else repr(final), "" if best is None else repr(best), best_round or ""])

    width = max(6, *(len(r[0]) for r in rows))
    print(f"{'method':<{width}}  final    best   (round)")
    for label, final, best, best_round in rows:
        f = "   -  " if final is None else f"{final:.4f}"
        b = "   -  " if best is None else f"{best:.4f}"
        print(f"{label:<{width}}  {f}  {b}  ({best_round})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedmr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_output=True):
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a setting (repeatable)")
        for name in SEED_FLAGS:
            p.add_argument(f"--seed-{name}", type=int, metavar="N", help=f"override seeds.{name}")
        if with_output:
            p.add_argument("--out", default="runs", help="output root (default: runs)")
            p.add_argument("--force", action="store_true", help="replace an existing run directory")
            p.add_argument("--workers", type=int, default=1, help="threads for client training")

    p = sub.add_parser("run", help="run one experiment")
    p.add_argument("--config", required=True, help="TOML config or a manifest.json to replay")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run several configs on the same data and merge their curves")
    p.add_argument("configs", nargs="+", metavar="CONFIG")
    common(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("validate", help="print the resolved config without running")
    p.add_argument("config", nargs="?", default=None, help="TOML config (omit for pure defaults)")
    common(p, with_output=False)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", "") is None:
        args.config = os.devnull
    try:
        return args.func(args)
    except ConfigError as exc:
        _report(exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
