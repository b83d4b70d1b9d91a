"""Command line entry point: stokesdarcy {coeffs,macro,porescale,compare,pipeline,mms}."""
from __future__ import annotations

import argparse
import logging
import os
import sys

from . import harness
from .harness import Check, ComparisonReport, RunConfig


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI-style run configuration")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides [output] dir)")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                        dest="overrides", help="override a config entry, e.g. ensemble.n_samples=8")
    common.add_argument("-v", "--verbose", action="store_true")
    ap = argparse.ArgumentParser(prog="stokesdarcy",
                                 description="Effective interface coefficients, macroscale "
                                             "Stokes-Darcy solves and pore-scale validation.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, text in (("coeffs", "compute the effective coefficients"),
                       ("macro", "solve the macroscale cavity for each condition set"),
                       ("porescale", "run the pore-scale ensemble"),
                       ("compare", "compare written macro profiles with the ensemble profiles"),
                       ("pipeline", "run every stage and write report.txt"),
                       ("mms", "manufactured-solution convergence study")):
        sub.add_parser(name, parents=[common], help=text)
    return ap


def _finish(report: ComparisonReport, cfg):
    path = os.path.join(cfg.out, "report.txt")
    report.write(path)
    sys.stdout.write(report.to_text())
    return 0 if report.passed else 1


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config, args.overrides, args.out)
    except harness.ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(cfg.out, exist_ok=True)
    cmd = args.command
    try:
        if cmd == "pipeline":
            report = harness.run_pipeline(cfg)
            sys.stdout.write(report.to_text())
            return 0 if report.passed else 1
        if cmd == "mms":
            report = harness.run_mms(cfg)
            sys.stdout.write(report.to_text())
            return 0 if report.passed else 1
        report = ComparisonReport()
        if cmd == "coeffs":
            report.coefficients = harness.stage_coefficients(cfg)
            harness.coefficient_checks(cfg, report.coefficients, report)
        elif cmd == "macro":
            coeffs = harness.stage_coefficients(cfg)
            report.coefficients = coeffs
            _, notes = harness.stage_macro(cfg, coeffs)
            report.notes += notes
        elif cmd == "porescale":
            ens = harness.stage_porescale(cfg)
            bad = [r.shift for r in ens.runs if not r.info["residual"] <= 1e-10]
            report.checks.append(Check("member residuals", not bad,
                                       f"{ens.n_samples} members, residual > 1e-10 at {bad}"))
        elif cmd == "compare":
            harness.stage_compare(cfg, report)
        return _finish(report, cfg)
    except harness.PipelineError as exc:
        print(f"error: {exc} (partial artifacts kept in {cfg.out})", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error in {cmd}: {exc} (partial artifacts kept in {cfg.out})", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
