"""Command line entry point: ``sglab run <config>`` and ``sglab verify <manifest>``.

Exit codes: 0 success, 1 verification mismatch, 2 invalid configuration,
3 numerical abort, 4 I/O failure.  Errors are printed to stderr as one JSON
object.  ``SGLAB_OUTPUT_DIR`` overrides the configured output directory.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, build, load, parse_text
from .experiments import RUNNERS, Output
from .sinegordon import NumericalError

OUTPUT_ENV = "SGLAB_OUTPUT_DIR"

EXIT_OK, EXIT_MISMATCH, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3, 4


def _clean(o):
    """Replace non-finite floats by None and numpy scalars by Python ones."""
    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, np.ndarray):
        return _clean(o.tolist())
    if isinstance(o, np.generic):
        return _clean(o.item())
    if isinstance(o, float) and not math.isfinite(o):
        return None
    return o


def dumps(o) -> str:
    return json.dumps(_clean(o), indent=2, sort_keys=True, allow_nan=False) + "\n"


def output_dir(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or cfg["output"])


def execute(cfg: ExperimentConfig, outdir=None) -> dict:
    """Run one experiment, write its files and manifest, return the manifest."""
    root = Path(outdir) if outdir is not None else output_dir(cfg)
    out = Output(root)
    out.write("config.txt", cfg.to_text())
    start = time.perf_counter()
    report = RUNNERS[cfg.kind](cfg, out)
    report["kind"] = cfg.kind
    out.write("report.json", dumps(report))
    manifest = {
        "artifact_version": __version__,
        "config": cfg.echo(),
        "files": dict(sorted(out.files.items())),
        "rng_streams": {"root_seed": cfg["seed"], "generator": "philox", "streams": dict(sorted(out.streams.items()))},
        "wall_clock_seconds": time.perf_counter() - start,
    }
    (root / "manifest.json").write_text(dumps(manifest), encoding="utf-8")
    return manifest


def verify(manifest_path, rerun: bool = False) -> list[str]:
    """Problems found: missing or altered files, or (with ``rerun``) checksums
    that differ when the echoed config is executed again."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    root = manifest_path.parent
    problems = []
    for rel, digest in manifest["files"].items():
        p = root / rel
        if not p.exists():
            problems.append(f"missing: {rel}")
        elif hashlib.sha256(p.read_bytes()).hexdigest() != digest:
            problems.append(f"checksum mismatch: {rel}")
    if rerun:
        cfg = build(parse_text((root / "config.txt").read_text(encoding="utf-8")))
        with tempfile.TemporaryDirectory() as tmp:
            fresh = execute(cfg, tmp)
        for rel, digest in manifest["files"].items():
            if fresh["files"].get(rel) != digest:
                problems.append(f"not reproduced: {rel}")
    return problems


def _fail(code: int, kind: str, msg: str) -> int:
    print(json.dumps({"error": kind, "message": msg, "exit_code": code}, ensure_ascii=False), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sglab", description="Lattice GFF and sine-Gordon simulation experiments.")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run the experiment described by a config file")
    p_run.add_argument("config")
    p_run.add_argument("--override", nargs="*", default=[], metavar="KEY=VALUE")
    p_ver = sub.add_parser("verify", help="check the files listed in a run manifest")
    p_ver.add_argument("manifest")
    p_ver.add_argument("--rerun", action="store_true", help="also re-execute the config and compare checksums")
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")

    try:
        if args.command == "run":
            cfg = load(args.config, args.override)
            manifest = execute(cfg)
            print(json.dumps({"output": str(output_dir(cfg)), "files": len(manifest["files"])}))
            return EXIT_OK
        problems = verify(args.manifest, args.rerun)
        for p in problems:
            print(p)
        return EXIT_MISMATCH if problems else EXIT_OK
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "invalid_config", str(exc))
    except NumericalError as exc:
        return _fail(EXIT_NUMERICAL, "numerical_abort", str(exc))
    except (OSError, json.JSONDecodeError) as exc:
        return _fail(EXIT_IO, "io_failure", str(exc))


if __name__ == "__main__":
    sys.exit(main())
