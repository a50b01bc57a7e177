"""Command-line driver.

    upscale <subcommand> --config <path> [--out <dir>] [--seed <n>] [--layers <list>] [--beta <list>]

Subcommands ``fine``, ``baseline``, ``nlmc``, ``nlmc-nonlinear``, ``two-phase``
and ``sweep`` write ``errors.csv`` and ``manifest.txt`` into ``--out``;
``compare`` prints baseline/candidate error ratios of two errors.csv files.
Exit codes: 0 ok, 2 configuration error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from upscale import __version__
from upscale.fields import ConfigurationError, FieldFormatError, load_config, parse_layers, write_snapshot
from upscale.fine import CFLError, SolverError
from upscale.local import LocalSolveError, NewtonError
from upscale.report import ReportFormatError, compare, format_comparison, write_errors_csv

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3
RUN_COMMANDS = ("fine", "baseline", "nlmc", "nlmc-nonlinear", "two-phase", "sweep")

log = logging.getLogger("upscale")


def _list(text: str) -> list[str]:
    return [t for t in text.replace(",", " ").split() if t]


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="upscale", description="Nonlocal multicontinuum upscaling experiments.")
    ap.add_argument("--version", action="version", version=f"upscale {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in RUN_COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} scheme" if name != "sweep" else "sweep layers and beta")
        p.add_argument("--config", required=True, help="key = value configuration file")
        p.add_argument("--out", default=".", help="output directory (default: current)")
        p.add_argument("--seed", type=int, help="override kappa.seed")
        p.add_argument("--layers", help="comma separated oversampling layers, 'inf' for global")
        p.add_argument("--beta", help="comma separated flux exponents")
        p.add_argument("--snapshots", action="store_true", help="write coarse states as fine cell fields")
        p.add_argument("--no-timing", action="store_true", help="write runtime_s = 0 for reproducible output")
        p.add_argument("-v", "--verbose", action="store_true")
    p = sub.add_parser("compare", help="ratio of baseline to candidate errors")
    p.add_argument("baseline")
    p.add_argument("candidate")
    p.add_argument("--threshold", type=float, help="minimum ratio for a pass verdict")
    return ap


def _resolve(args):
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["kappa_seed"] = args.seed
    if args.command == "two-phase":
        changes["problem"] = "two-phase"
    try:
        layers = tuple(parse_layers(t) for t in _list(args.layers)) if args.layers else None
        betas = tuple(float(t) for t in _list(args.beta)) if args.beta else None
    except ValueError as exc:
        raise ConfigurationError(f"bad --layers/--beta value: {exc}") from None
    if args.command == "sweep":
        if layers:
            changes["sweep_layers"] = layers
        if betas:
            changes["sweep_beta"] = betas
    if args.command in ("fine", "baseline", "nlmc", "nlmc-nonlinear", "two-phase"):
        changes["scheme"] = args.command
    cfg = cfg.with_(**changes)
    if args.command != "sweep":
        layers = layers or (cfg.layers,)
        betas = betas or (cfg.beta,)
    return cfg, layers, betas


def write_manifest(path: Path, cfg, command: str, extra: dict | None = None) -> None:
    lines = [f"# upscale {__version__}", f"command = {command}"]
    lines += [f"{k} = {v}" for k, v in cfg.as_items()]
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    path.write_text("\n".join(lines) + "\n")


def _run(args) -> int:
    from upscale import experiments as ex

    cfg, layers, betas = _resolve(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.command == "sweep":
        reports = ex.sweep(cfg)
    else:
        setup = ex.build_setup(cfg)
        reports = []
        for beta in betas:
            ref = ex.fine_reference(ex._with_beta(setup, beta))
            for lay in layers if args.command not in ("fine", "baseline") else layers[:1]:
                states, rep = ex.run_scheme(setup, args.command, ref, layers=lay, beta=beta)
                reports.append(rep)
                if args.snapshots:
                    tag = f"{args.command}_b{beta:g}_l{rep.layers if rep.layers is not None else 'na'}"
                    for t, U in states.items():
                        field = U if np.ndim(U) == 2 else setup.partition.prolong(U)
                        write_snapshot(np.asarray(field), out / f"{tag}_t{t:g}.txt")
    write_errors_csv(out / "errors.csv", reports, timing=not args.no_timing)
    extra = {}
    for k, rep in enumerate(reports):
        for key, val in rep.extra.items():
            extra[f"diagnostic.{k}.{rep.scheme}.{key}"] = f"{val:.3e}"
    write_manifest(out / "manifest.txt", cfg, args.command, extra)
    for rep in reports:
        errs = ", ".join(f"t={t:g}: {e:.4%}" for t, e in sorted(rep.errors.items()))
        lay = "" if rep.layers is None else f" layers={rep.layers:g}"
        beta = "" if rep.beta is None else f" beta={rep.beta:g}"
        print(f"{rep.scheme}{lay}{beta}: {errs} ({rep.runtime_s:.1f} s)")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "compare":
            rows = compare(args.baseline, args.candidate, args.threshold)
            print(format_comparison(rows))
            return EXIT_OK if all(r.passed is not False for r in rows) else 1
        return _run(args)
    except (ConfigurationError, FieldFormatError, ReportFormatError, FileNotFoundError) as exc:
        print(f"upscale: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, LocalSolveError, NewtonError, CFLError, np.linalg.LinAlgError) as exc:
        print(f"upscale: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
