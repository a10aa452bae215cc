"""``profuse`` command-line runner.

Usage: ``profuse <subcommand> [--config PATH] [--seed N] [--jobs N] [--out DIR]``.
Each run writes ``results.csv``, ``summary.txt`` and ``manifest.txt`` into
the output directory, chosen as ``--out``, else ``$PROFUSE_OUT``, else the
config's ``output_dir``, else ``runs/<subcommand>``.

Exit codes: 0 when every hard check passes, 1 when one fails, 2 on a
configuration error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import KINDS, ConfigError, ExperimentConfig, config_hash, default_config, load_config
from .experiments import RunResult, run

log = logging.getLogger("profuse")

ENV_OUT = "PROFUSE_OUT"
EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


@dataclass
class RunManifest:
    config_hash: str
    version: str
    seeds: list[int]
    started: str
    finished: str
    files: list[str]

    def render(self) -> str:
        lines = [
            f"config_hash = {self.config_hash}",
            f"version = {self.version}",
            f"seeds = {', '.join(str(s) for s in self.seeds)}",
            f"started = {self.started}",
            f"finished = {self.finished}",
            f"files = {', '.join(self.files)}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "RunManifest":
        kv = dict(line.split(" = ", 1) for line in text.splitlines() if " = " in line)
        split = lambda s: [x for x in s.split(", ") if x]  # noqa: E731
        return cls(kv["config_hash"], kv["version"], [int(s) for s in split(kv["seeds"])],
                   kv["started"], kv["finished"], split(kv["files"]))


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))  # shortest round-trip form, also for numpy scalars
    return str(v)


def write_results_csv(path: Path, result: RunResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
        w.writerow(result.columns)
        for row in result.rows:
            w.writerow([_fmt(row.get(c, "")) for c in result.columns])


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def output_dir(cfg: ExperimentConfig, flag: str | None) -> Path:
    for cand in (flag, os.environ.get(ENV_OUT), cfg.output_dir):
        if cand:
            return Path(cand)
    return Path("runs") / cfg.kind


def execute(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> tuple[RunResult, RunManifest]:
    """Run one experiment and write its three output files."""
    started = _now()
    result = run(cfg, jobs)
    out.mkdir(parents=True, exist_ok=True)
    write_results_csv(out / "results.csv", result)
    lines = [f"profuse {cfg.kind} (seed {cfg.seed}, config {config_hash(cfg)[:12]})", ""]
    lines += result.summary
    if result.checks:
        lines += ["", "checks:"] + [c.line() for c in result.checks]
    lines += ["", f"overall: {'PASS' if result.ok else 'FAIL'}"]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    manifest = RunManifest(config_hash(cfg), __version__, result.seeds, started, _now(),
                           ["results.csv", "summary.txt", "manifest.txt"])
    (out / "manifest.txt").write_text(manifest.render())
    return result, manifest


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="profuse", description="Progressive fusion experiments on synthetic tasks.")
    sub = p.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        s = sub.add_parser(kind, help=f"run the {kind} experiment")
        s.add_argument("--config", help="INI config; omitted keys take the built-in defaults")
        s.add_argument("--seed", type=int, help="override the run seed")
        s.add_argument("--jobs", type=int, default=1, help="worker threads for independent trials")
        s.add_argument("--out", help=f"output directory (overrides ${ENV_OUT})")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
        cfg = load_config(args.config, args.command) if args.config else default_config(args.command)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
    except ConfigError as exc:
        print(f"profuse: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = output_dir(cfg, args.out)
    log.info("running %s into %s", cfg.kind, out)
    result, _ = execute(cfg, out, args.jobs)
    print((out / "summary.txt").read_text(), end="")
    return EXIT_OK if result.ok else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
