"""Command-line runner: ``ftlab <experiment> --config FILE [--set k=v]...``.

Exit codes: 0 all checks pass, 1 a check failed, 2 configuration error,
3 numerical failure.  Every run writes ``manifest.json`` (also on failure)
and the experiment's CSV files into ``<out>/<experiment>-<timestamp>/``.
Wall-clock data goes to a separate ``timing.json`` so that the manifest and
CSVs are bit-identical across repeated runs.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .config import EXPERIMENTS, ExperimentConfig, load_config
from .errors import ConfigError, FtlabError
from .experiments import RUNNERS, ExperimentResult
from .fields import list_presets
from .io import atomic_write, build_id, dumps

EXIT_PASS, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("ftlab")


def _run_dir(out: Path, experiment: str) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    base = out / f"{experiment}-{stamp}"
    path, k = base, 1
    while path.exists():
        path = Path(f"{base}-{k}")
        k += 1
    path.mkdir(parents=True)
    return path


def run(cfg: ExperimentConfig, out: Path, threads: int | None = None):
    """Run one experiment and write its artifacts; returns ``(exit_code, run_dir, manifest)``."""
    run_dir = _run_dir(Path(out), cfg.experiment)
    manifest = {"config": cfg.echo(), "build": build_id()}
    threads = threads or os.cpu_count() or 1
    t0 = time.perf_counter()
    started = datetime.now(timezone.utc).isoformat()
    code = EXIT_NUMERIC
    try:
        with np.errstate(invalid="raise", divide="raise", over="raise"):
            if threads > 1:
                with ThreadPoolExecutor(max_workers=threads) as pool:
                    result: ExperimentResult = RUNNERS[cfg.experiment](cfg, pool)
            else:
                result = RUNNERS[cfg.experiment](cfg, None)
        for name, text in sorted(result.artifacts.items()):
            atomic_write(run_dir / name, text)
        manifest["checks"] = [c.to_dict() for c in result.checks]
        manifest["tolerances"] = {c.name: c.tolerance for c in result.checks}
        manifest["info"] = result.info
        manifest["artifacts"] = sorted(result.artifacts)
        manifest["status"] = "pass" if result.passed else "fail"
        code = EXIT_PASS if result.passed else EXIT_CHECK
    except (FtlabError, ArithmeticError, FloatingPointError, np.linalg.LinAlgError) as exc:
        manifest["status"] = "error"
        manifest["error"] = {"type": type(exc).__name__, "message": str(exc),
                             "traceback": traceback.format_exc(limit=4)}
        code = EXIT_NUMERIC
    finally:
        manifest.setdefault("status", "error")
        atomic_write(run_dir / "manifest.json", dumps(manifest))
        atomic_write(run_dir / "timing.json",
                     dumps({"started_utc": started, "wall_seconds": time.perf_counter() - t0,
                            "threads": threads}))
    return code, run_dir, manifest


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ftlab", description=__doc__.splitlines()[0])
    p.add_argument("experiment", choices=sorted(EXPERIMENTS) + ["list-presets"])
    p.add_argument("--config", type=Path, default=None, help="TOML file with dotted keys")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--threads", type=int, default=None, help="worker threads")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output root directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.experiment == "list-presets":
        sys.stdout.write(dumps(list_presets()))
        return EXIT_PASS
    if args.threads is not None and args.threads < 1:
        print("error: --threads: must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.experiment, args.config, args.overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    code, run_dir, manifest = run(cfg, args.out, args.threads)
    for c in manifest.get("checks", []):
        mark = "PASS" if c["passed"] else "FAIL"
        print(f"{mark} {c['name']}: {c['value']:.6g} {c['comparison']} {c['tolerance']:.6g}")
    if manifest.get("status") == "error":
        print(f"numeric failure: {manifest['error']['message']}", file=sys.stderr)
    print(f"artifacts: {run_dir}")
    return code


if __name__ == "__main__":
    sys.exit(main())
