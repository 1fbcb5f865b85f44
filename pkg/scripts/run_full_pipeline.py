#!/usr/bin/env python3
"""Run every pipeline step for one config, timing each, and print the report.

Equivalent to invoking the CLI steps by hand in order:

    ctexperts synth -> prep -> train --stage all -> predict -> fuse
              -> evaluate -> report

Usage:
    python scripts/run_full_pipeline.py --config runs/demo.yaml
    python scripts/run_full_pipeline.py --workdir runs/demo   # default config
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import yaml

from ctexperts.cli import main as cli_main

STEPS = (
    ["synth"],
    ["prep"],
    ["train", "--stage", "all"],
    ["predict", "--split", "test"],
    ["fuse", "--split", "test"],
    ["evaluate", "--split", "test"],
    ["report"],
)


def default_config(workdir: Path) -> Path:
    """Write a config whose data and outputs live under ``workdir``."""
    workdir.mkdir(parents=True, exist_ok=True)
    path = workdir / "config.yaml"
    path.write_text(yaml.safe_dump({
        "paths": {
            "data_root": str(workdir / "data"),
            "output_root": str(workdir / "out"),
        },
    }))
    return path


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument("--config", type=Path, help="run config (YAML)")
    group.add_argument("--workdir", type=Path,
                       help="directory for a fresh default-config run")
    args = parser.parse_args(argv)

    config = args.config if args.config else default_config(args.workdir)
    print(f"config: {config}")

    t_total = time.perf_counter()
    for step in STEPS:
        t0 = time.perf_counter()
        rc = cli_main([step[0], "--config", str(config), *step[1:]])
        if rc != 0:
            print(f"step {' '.join(step)} failed (exit {rc})", file=sys.stderr)
            return rc
        print(f"[{time.perf_counter() - t0:7.1f}s] {' '.join(step)}")
    print(f"[{time.perf_counter() - t_total:7.1f}s] total")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
