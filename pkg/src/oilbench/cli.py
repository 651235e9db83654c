"""Command-line front end: ``oilbench run``, ``oilbench tune`` and ``oilbench verify``.

Exit codes: 0 success, 1 a verify assertion failed, 2 usage or configuration
error, 3 at least one run ended incomplete.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import harness, suites
from .harness import ConfigError, ExperimentConfig, ROW_FIELDS

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_INCOMPLETE = 3
DEFAULT_OUT = "oilbench_out"
OUT_ENV = "OILBENCH_OUT"


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def format_value(v) -> str:
    """Shortest decimal that parses back to the same value."""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if hasattr(v, "item"):
        return format_value(v.item())
    return repr(float(v))


def json_safe(obj):
    """Replace non-finite floats (not valid JSON) by their string names."""
    if isinstance(obj, dict):
        return {str(k): json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(json_safe(obj), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_synced(path: Path, text: str) -> None:
    """Write ``text`` so that the file is complete on disk before returning."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(rec: harness.RunRecord) -> str:
    lines = [",".join(ROW_FIELDS)]
    for row in rec.rows:
        lines.append(",".join(format_value(row[f]) for f in ROW_FIELDS))
    return "\n".join(lines) + "\n"


def run_stem(cfg: ExperimentConfig, seed: int) -> str:
    return f"{cfg.name}_{cfg.algo.lower()}_seed{seed}"


def write_bundle(out: Path, cfg: ExperimentConfig, records: Sequence[harness.RunRecord]) -> Path:
    """Per-run CSV, metadata JSON and timings JSON, then the manifest.

    Timings live in their own file so that repeated invocations produce
    byte-identical CSV and metadata files.
    """
    entries = []
    for rec in records:
        stem = run_stem(cfg, rec.seed)
        files = {"csv": f"{stem}.csv", "metadata": f"{stem}.json", "timings": f"{stem}.timings.json"}
        write_synced(out / files["csv"], csv_text(rec))
        write_synced(out / files["metadata"], dumps(rec.metadata()))
        write_synced(out / files["timings"], dumps({"seed": rec.seed, "wall_clock_per_round": rec.wall_clock,
                                                    "wall_clock_total": float(sum(rec.wall_clock))}))
        entries.append({"seed": rec.seed, "rounds": rec.rounds, "complete": rec.complete, "files": files})
    manifest = out / f"{cfg.name}_{cfg.algo.lower()}_manifest.json"
    write_synced(manifest, dumps({"config_hash": cfg.config_hash(), "runs": entries}))
    return manifest


def output_dir(arg: Optional[str]) -> Path:
    return Path(arg or os.environ.get(OUT_ENV) or DEFAULT_OUT)


# ---------------------------------------------------------------------------
# configuration from flags
# ---------------------------------------------------------------------------


def parse_seeds(text: str) -> tuple:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("--seeds is empty")
    return seeds


def load_config(args) -> ExperimentConfig:
    if bool(args.preset) == bool(args.config):
        raise ConfigError("give exactly one of --preset or --config")
    if args.preset:
        cfg = harness.preset(args.preset, algo=args.algo, loss_kind=args.loss, rounds=args.rounds)
    else:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = harness.config_from_dict(data)
        if args.algo:
            cfg = replace(cfg, algo=args.algo)
        if args.loss:
            cfg = replace(cfg, loss_kind=args.loss)
        if args.rounds:
            cfg = cfg.with_rounds(args.rounds)
    if getattr(args, "behavior", None):
        cfg = replace(cfg, behavior=args.behavior)
    if args.seeds:
        cfg = replace(cfg, seeds=parse_seeds(args.seeds))
    step = [v for v in (getattr(args, "eta", None), getattr(args, "alpha", None)) if v is not None]
    if len(step) == 2:
        raise ConfigError("give at most one of --eta and --alpha")
    if step:
        if not step[0] > 0:
            raise ConfigError("step sizes must be positive")
        cfg = cfg.with_step(step[0])
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_run(args) -> int:
    cfg = load_config(args)
    if args.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    records = harness.run_many(cfg, cfg.seeds, jobs=args.jobs)
    manifest = write_bundle(output_dir(args.out), cfg, records)
    bad = [r for r in records if not r.complete]
    for r in records:
        status = "complete" if r.complete else f"INCOMPLETE ({r.error})"
        final = r.rows[-1]["cumulative_regret"] if r.rows else math.nan
        print(f"seed {r.seed}: {r.rounds} rounds, final regret {final:.6g}, {status}")
    print(f"manifest: {manifest}")
    return EXIT_INCOMPLETE if bad else EXIT_OK


def cmd_tune(args) -> int:
    cfg = load_config(args)
    sched = cfg.resolved_schedule()
    if sched.kind == "constant" and math.isinf(sched.eta):
        raise ConfigError(f"{cfg.algo} has no step size to tune")
    if args.pilot_interactions < 1 or args.pilot_batch < 1:
        raise ConfigError("pilot budget and batch must be positive")
    try:
        result = harness.tune(cfg, pilot_interactions=args.pilot_interactions, pilot_M=args.pilot_batch)
    except RuntimeError as exc:
        print(f"tuning failed: {exc}", file=sys.stderr)
        return EXIT_INCOMPLETE
    report = result.to_dict()
    report.update(algo=cfg.algo, preset=cfg.name, seed=cfg.seeds[0],
                  pilot_interactions=args.pilot_interactions, pilot_batch=args.pilot_batch)
    path = output_dir(args.out) / f"tune_{cfg.name}_{cfg.algo.lower()}.json"
    write_synced(path, dumps(report))
    print(f"best step {result.best_eta:g} (finalists: "
          + ", ".join(f"{e:g}->{v:.6g}" for e, v in result.finalists) + f"); ranking: {path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    out = output_dir(args.out)
    if args.replay:
        try:
            cases = json.loads(Path(args.replay).read_text(encoding="utf-8"))["failures"]
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read reproducer {args.replay}: {exc}") from None
        results = [suites.replay(c) for c in cases]
        label = "replay"
    else:
        seeds = parse_seeds(args.seeds) if args.seeds else suites.DEFAULT_SEEDS
        names = suites.SUITES if args.suite == "all" else (args.suite,)
        results = []
        for name in names:
            results.extend(suites.run_suite(name, seeds, fault=args.inject_fault))
        label = args.suite
    failures = [r for r in results if not r["passed"]]
    write_synced(out / f"verify_{label}.json", dumps({"suite": label, "cases": results,
                                                       "passed": not failures}))
    by_suite: dict = {}
    for r in results:
        ok, total = by_suite.get(r["suite"], (0, 0))
        by_suite[r["suite"]] = (ok + bool(r["passed"]), total + 1)
    for name, (ok, total) in by_suite.items():
        print(f"{'PASS' if ok == total else 'FAIL'} {name}: {ok}/{total}")
    if failures:
        repro = out / f"verify_{label}_reproducer.json"
        write_synced(repro, dumps({"failures": failures,
                                   "replay": f"oilbench verify --replay {repro}"}))
        print(f"{len(failures)} failing case(s); reproducer: {repro}")
        return EXIT_VERIFY_FAILED
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=harness.PRESETS)
    p.add_argument("--config", help="JSON experiment config (unknown keys are errors)")
    p.add_argument("--algo", help="ftl, ftrl, adaftrl, altftrl, ogd, adagrad, bc, ...")
    p.add_argument("--seeds", help="comma-separated integers, e.g. 1,2,3")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    p.add_argument("--rounds", type=int)
    p.add_argument("--loss", help="squared|l2, absolute|l1, logistic|ce, huber")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oilbench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a preset or config for each seed")
    _config_flags(run_p)
    run_p.add_argument("--eta", type=float)
    run_p.add_argument("--alpha", type=float)
    run_p.add_argument("--behavior", choices=("agent", "expert"))
    run_p.add_argument("--jobs", type=int, default=1)
    run_p.set_defaults(func=cmd_run)

    tune_p = sub.add_parser("tune", help="grid-search the outer step size")
    _config_flags(tune_p)
    tune_p.add_argument("--behavior", choices=("agent", "expert"))
    tune_p.add_argument("--pilot-interactions", type=int, default=2000)
    tune_p.add_argument("--pilot-batch", type=int, default=100)
    tune_p.set_defaults(func=cmd_tune)

    ver_p = sub.add_parser("verify", help="run the property suites")
    ver_p.add_argument("--suite", choices=suites.SUITES + ("all",), default="all")
    ver_p.add_argument("--seeds")
    ver_p.add_argument("--out")
    ver_p.add_argument("--inject-fault", choices=("sigma",), help="deliberately wrong update (negative test)")
    ver_p.add_argument("--replay", help="reproducer JSON written by a failed verify")
    ver_p.set_defaults(func=cmd_verify)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors this way
        return int(exc.code or 0) and EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"oilbench: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
