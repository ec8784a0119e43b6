"""Command-line entry point.

Subcommands: simulate-stage1, simulate-stage2, simulate-trial (Monte Carlo
campaigns), prior-report (induced prior median TTP table), calibrate-prior
(stage-1 hyperparameter search), serve (trial-conduct HTTP service).

Exit codes: 0 success, 2 usage error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from .model import DomainError, ToxParams, ToxPriorConfig, TTPPriorConfig
from .scenarios import (
    CALIBRATED_PRIOR_033,
    Scenario,
    TABLE1_PRIOR,
    shipped_scenarios,
)
from .simulate import default_parallelism, run_campaign
from .reports import emit_reports, prior_predictive_report
from .stage1 import Stage1Config, calibrate_prior
from .stage2 import Stage2Config

SCHEMA_VERSION = 1


class UsageError(Exception):
    pass


def load_scenario(ref: str, overrides: dict) -> Scenario:
    """Resolve a scenario reference: a JSON file path or a built-in name."""
    builtin = shipped_scenarios()
    if ref in builtin:
        sc = builtin[ref]
    elif os.path.exists(ref):
        with open(ref) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as e:
                raise UsageError(f"scenario file {ref}: invalid JSON ({e})")
        sc = scenario_from_dict(doc, ref)
    else:
        raise UsageError(f"scenario {ref!r}: no such file or built-in scenario "
                         f"(built-ins: {', '.join(sorted(builtin))})")
    return sc.with_overrides(**overrides)


def scenario_from_dict(doc: dict, origin: str) -> Scenario:
    if not isinstance(doc, dict):
        raise UsageError(f"{origin}: scenario document must be a JSON object")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise UsageError(f"{origin}: schema_version must be {SCHEMA_VERSION}")
    try:
        tox = ToxParams(**doc["true_tox"])
        stage1 = Stage1Config(prior=ToxPriorConfig(**doc.get("stage1_prior", {})))
        s2_kw = doc.get("stage2", {})
        prior2 = TTPPriorConfig(**{k: tuple(v) if isinstance(v, list) else v
                                   for k, v in doc.get("stage2_prior", {}).items()})
        stage2 = Stage2Config(prior=prior2, **s2_kw)
        return Scenario(
            name=doc["name"], true_tox=tox,
            ttp_shape=doc.get("ttp_shape", "flat_null"),
            effect_size=float(doc.get("effect_size", 0.0)),
            accrual_rate=float(doc.get("accrual_rate", 1.0)),
            med0=float(doc.get("med0", 4.0)),
            replicates=int(doc.get("replicates", 200)),
            stage1=stage1, stage2=stage2,
            stage2_dlt_rate=doc.get("stage2_dlt_rate"))
    except KeyError as e:
        raise UsageError(f"{origin}: missing required field {e}")
    except (TypeError, DomainError, ValueError) as e:
        raise UsageError(f"{origin}: invalid scenario ({e})")


def _check_range(name: str, value, lo, hi):
    if value is not None and not lo < value < hi:
        raise UsageError(f"--{name} must lie in ({lo}, {hi}); got {value}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="combidose",
                                description="Two-stage Bayesian combination "
                                            "dose-finding: simulation and conduct")
    sub = p.add_subparsers(dest="command", required=True)

    def add_campaign(name, help_text):
        c = sub.add_parser(name, help=help_text)
        c.add_argument("--scenario", required=True,
                       help="scenario JSON file or built-in name")
        c.add_argument("--out", default="reports", help="output directory")
        c.add_argument("--seed", type=int, default=0, help="master seed")
        c.add_argument("--parallelism", type=int, default=None)
        c.add_argument("--m", type=int, default=None, help="override replicates")
        c.add_argument("--delta-u", type=float, default=None, dest="delta_u")
        c.add_argument("--delta-0", type=float, default=None, dest="delta_0")
        c.add_argument("--accrual-rate", type=float, default=None,
                       dest="accrual_rate")
        return c

    add_campaign("simulate-stage1", "stage-1 escalation operating characteristics")
    add_campaign("simulate-stage2", "stage-2 randomization along the true curve")
    add_campaign("simulate-trial", "full two-stage trials")

    pr = sub.add_parser("prior-report", help="induced prior median TTP quantiles")
    pr.add_argument("--n-draws", type=int, default=100_000)
    pr.add_argument("--seed", type=int, default=1)
    pr.add_argument("--sigma2", type=float, default=TABLE1_PRIOR.sigma2)
    pr.add_argument("--out", default=None, help="optional CSV path")

    cp = sub.add_parser("calibrate-prior", help="stage-1 prior calibration")
    cp.add_argument("--theta", type=float, default=0.33)
    cp.add_argument("--x", type=float, default=1.0 / 3.0)
    cp.add_argument("--y", type=float, default=0.5)
    cp.add_argument("--n-draws", type=int, default=20000)
    cp.add_argument("--seed", type=int, default=2026)

    sv = sub.add_parser("serve", help="run the trial-conduct HTTP service")
    sv.add_argument("--data-dir", default="trials")
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=8321)
    return p


def run_command(args) -> int:
    if args.command in ("simulate-stage1", "simulate-stage2", "simulate-trial"):
        _check_range("delta-u", args.delta_u, 0.0, 1.0)
        _check_range("delta-0", args.delta_0, 0.0, 1.0)
        if args.m is not None and args.m < 1:
            raise UsageError("--m must be positive")
        if args.accrual_rate is not None and args.accrual_rate <= 0:
            raise UsageError("--accrual-rate must be positive")
        overrides = {"m": args.m, "delta_u": args.delta_u,
                     "delta_0": args.delta_0, "accrual_rate": args.accrual_rate}
        scenario = load_scenario(args.scenario, overrides)
        mode = {"simulate-stage1": "stage1", "simulate-stage2": "stage2",
                "simulate-trial": "trial"}[args.command]
        workers = args.parallelism or default_parallelism()
        oc = run_campaign(scenario, parallelism=workers,
                          master_seed=args.seed, mode=mode)
        paths = emit_reports(oc, args.out, effect=scenario.effect_size,
                             accrual=scenario.accrual_rate)
        for path in paths:
            print(path)
        return 0

    if args.command == "prior-report":
        prior = replace(TABLE1_PRIOR, sigma2=args.sigma2)
        rows = prior_predictive_report(prior, n_draws=args.n_draws,
                                       seed=args.seed)
        header = f"{'z':>4} {'5%':>12} {'50%':>8} {'95%':>12}"
        print(header)
        for r in rows:
            print(f"{r['z']:>4.1f} {r['q05']:>12.3g} {r['q50']:>8.3f} "
                  f"{r['q95']:>12.3g}")
        if args.out:
            with open(args.out, "w") as fh:
                fh.write("z,q05,q50,q95\n")
                for r in rows:
                    fh.write(f"{r['z']!r},{r['q05']!r},{r['q50']!r},{r['q95']!r}\n")
        return 0

    if args.command == "calibrate-prior":
        _check_range("theta", args.theta, 0.0, 1.0)
        cal = calibrate_prior(args.theta, args.x, args.y,
                              n_draws=args.n_draws, seed=args.seed)
        print(json.dumps({"a1": cal.a1, "b1": cal.b1, "a2": cal.a2,
                          "b2": cal.b2, "a3": cal.a3, "b3": cal.b3,
                          "a": cal.a, "b": cal.b}, indent=2))
        return 0

    if args.command == "serve":
        import uvicorn

        from .service import create_app
        uvicorn.run(create_app(args.data_dir), host=args.host, port=args.port)
        return 0

    raise UsageError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        return run_command(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure contract
        print(f"runtime failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
