"""Command-line entry point: ``adampnp <subcommand> [options]``.

Every subcommand prints a JSON summary on stdout and exits 0. Failures
print ``{"error": ..., "message": ...}`` on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import experiments as ex
from .config import ExperimentConfig, config_schema
from .validation import invariant_suite

EXIT_FAILED_CHECKS = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("UsageError", message)
        sys.exit(2)


def _emit_error(kind: str, message: str):
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


def _common(p):
    p.add_argument("--config", help="JSON experiment configuration (defaults when omitted)")
    p.add_argument("--seed", type=int, help="seed (sweeps: replaces the configured seed list)")
    p.add_argument("--out", help="output directory (default: config output_dir)")
    p.add_argument("--threads", type=int, help="worker processes for sweeps")
    p.add_argument("--trace", action="store_true", help="write per-step trace CSV files")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adampnp", description="Multimodal plug-and-play backbone reconstruction.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "reconstruct": "single reconstruction from simulated or saved measurements",
        "sweep-combos": "RMSD for each modality combination, noise level and seed",
        "sweep-sparsity": "RMSD across the paired observation-count grid",
        "noise-report": "estimated versus true distance noise",
        "sample-prior": "unconditional draw from the prior",
        "validate": "run the invariant suite",
        "schema": "print the configuration schema with defaults",
    }
    for name, h in helps.items():
        p = sub.add_parser(name, help=h, description=h)
        _common(p)
        if name == "sample-prior":
            p.add_argument("--psi", type=float, default=0.0, help="Langevin correction weight")
            p.add_argument("--lambda0", type=float, default=1.0, help="Langevin temperature")
        if name == "validate":
            p.add_argument("--quick", action="store_true", help="fewer Kabsch instances")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.threads is not None:
        changes["threads"] = args.threads
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    if args.out is not None:
        changes["output_dir"] = args.out
    if changes:
        cfg = dataclasses.replace(cfg, **changes)
    return cfg


def _sweep_summary(records, out_dir):
    failed = [r for r in records if r.status != "ok"]
    return {
        "runs": len(records),
        "failed": len(failed),
        "out": str(out_dir),
        "rmsd": {f"{r.combo}/{r.sigma:g}/{r.seed}/{r.n_distances}x{r.n_partial}": r.rmsd for r in records},
    }


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "schema":
        print(json.dumps(config_schema(), indent=1))
        return 0
    cfg = load_config(args)
    out = Path(cfg.output_dir)
    seed = args.seed if args.seed is not None else cfg.seeds[0]

    if args.command == "validate":
        results = invariant_suite(seed=seed, quick=args.quick)
        report = {"passed": all(r.passed for r in results), "checks": [r.to_dict() for r in results]}
        print(json.dumps(report, indent=1))
        if args.out:
            out.mkdir(parents=True, exist_ok=True)
            (out / "validate.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
        return 0 if report["passed"] else EXIT_FAILED_CHECKS
    if args.command == "reconstruct":
        summary = ex.reconstruct(cfg, seed, out, trace=args.trace)
    elif args.command == "sample-prior":
        summary = ex.sample_prior(cfg, seed, out, psi=args.psi, lambda0=args.lambda0)
    else:
        fn = {
            "sweep-combos": ex.run_combo_sweep,
            "sweep-sparsity": ex.run_sparsity_sweep,
            "noise-report": ex.run_noise_estimation_report,
        }[args.command]
        summary = _sweep_summary(fn(cfg, out, trace=args.trace), out)
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


def main(argv=None):
    try:
        code = run(argv)
    except SystemExit:
        raise
    except Exception as exc:
        _emit_error(type(exc).__name__, str(exc))
        code = 1
    sys.exit(code)


if __name__ == "__main__":
    main()
