"""Command line: ``fakd verify | distill | sweep | report``.

Exit codes: 0 success, 1 failed check or run, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

from . import campaign
from .config import ConfigError, ExperimentConfig, load_config, to_dict, to_plan, validate
from .errors import FakdError
from .harness import (
    NO_DISTILL,
    format_report,
    per_class_improvement_report,
    read_results_csv,
    results_csv,
    run_experiment,
    summary_table,
)
from .oracle import write_bound_csv

SWEEP_PARAMETERS = ("lambda0", "tau", "weight")


def _err(msg: str) -> None:
    print(f"fakd: {msg}", file=sys.stderr)


def _prepare(config_path, out=None, seed_override=None, jobs=None) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(config_path)
    if seed_override is not None:
        cfg.seeds = [seed_override]
    if jobs is not None:
        cfg.jobs = jobs
    validate(cfg)
    return cfg, Path(out if out is not None else cfg.output_dir)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ---------------------------------------------------------------- verify

def cmd_verify(config_path, out=None, seed_override=None) -> int:
    try:
        cfg, out_dir = _prepare(config_path, out, seed_override)
    except FakdError as exc:
        _err(str(exc))
        return 2
    v = cfg.verify
    seed = v.seed
    checks = []
    if v.reduction_instances:
        checks.append(campaign.reduction_check(v.reduction_instances, seed, v.M, v.A, v.C, v.taus))
    bound, rows = campaign.bound_check(v.instances, seed, v.M, v.A, v.C, v.lambdas, v.taus,
                                       v.diagonal_modes, v.variance_denominator, v.n_samples,
                                       v.instance_kind)
    checks.append(bound)
    if v.mgf_instances:
        checks.append(campaign.mgf_check(v.mgf_instances, seed, v.A, v.mgf_samples))
    if v.grad_instances:
        checks.append(campaign.gradient_check(v.grad_instances, seed, v.M, v.A, v.C))
    if v.stream_partitions:
        checks.append(campaign.streaming_check(v.stream_partitions, seed, v.C, v.A))
    if v.monotone_instances:
        checks.append(campaign.monotone_check(v.monotone_instances, seed, v.M, v.A, v.C, v.taus))

    out_dir.mkdir(parents=True, exist_ok=True)
    write_bound_csv(out_dir / "bounds.csv", rows)
    summary = "\n".join(c.line() for c in checks)
    _write(out_dir / "verify_summary.txt", summary + "\n")
    print(summary)
    failures = [f for c in checks for f in c.failures]
    dump = out_dir / "failures.json"
    if failures:
        _write(dump, json.dumps(failures, indent=1) + "\n")
        print(f"{len(failures)} failing cases written to {dump}")
        return 1
    if dump.exists():
        dump.unlink()
    return 0


# ---------------------------------------------------------------- distill

def _plan_text(cfg: ExperimentConfig) -> str:
    n = len(cfg.seeds) * len(cfg.variants)
    lines = [json.dumps(to_dict(cfg), indent=1),
             f"cells: {len(cfg.seeds)} seeds x {len(cfg.variants)} variants = {n} student runs"]
    return "\n".join(lines)


def _run_and_write(cfg: ExperimentConfig, out_dir: Path, name: str) -> list:
    rows = run_experiment(to_plan(cfg))
    _write(out_dir / name, results_csv(rows))
    return rows


def _report_text(rows) -> str:
    parts = [summary_table(rows)]
    if any(r.variant == NO_DISTILL for r in rows):
        parts.append(format_report(*per_class_improvement_report(rows)))
    return "\n\n".join(parts) + "\n"


def cmd_distill(config_path, out=None, dry_run=False, jobs=None, seed_override=None) -> int:
    try:
        cfg, out_dir = _prepare(config_path, out, seed_override, jobs)
    except FakdError as exc:
        _err(str(exc))
        return 2
    if dry_run:
        print(_plan_text(cfg))
        return 0
    try:
        rows = _run_and_write(cfg, out_dir, "results.csv")
    except FakdError as exc:
        _err(str(exc))
        return 1
    text = _report_text(rows)
    _write(out_dir / "summary.txt", text)
    print(text, end="")
    return 0


# ---------------------------------------------------------------- sweep

def _parse_values(values) -> list[float]:
    if isinstance(values, str):
        values = [v for v in values.split(",") if v.strip()]
    try:
        out = [float(v) for v in values]
    except (TypeError, ValueError) as exc:
        raise ConfigError("--values", f"not a list of numbers: {values!r}") from exc
    if not out:
        raise ConfigError("--values", "empty value list")
    return out


def sweep_config(cfg: ExperimentConfig, parameter: str, value: float) -> ExperimentConfig:
    """Copy of ``cfg`` with ``parameter`` set on every variant it applies to.

    ``lambda0`` touches augmented variants only; ``tau`` and ``weight`` touch
    every distilled variant. For ``tau`` and ``weight`` the touched variants are
    renamed ``name@parameter=value`` so blocks stay distinguishable.
    """
    new = copy.deepcopy(cfg)
    for v in new.variants:
        if v.variant is None:
            continue
        if parameter == "lambda0":
            if v.variant.startswith("AUG_"):
                v.lambda0 = value
        else:
            setattr(v, parameter, value)
            v.name = f"{v.name}@{parameter}={value:g}"
    validate(new)
    return new


def cmd_sweep(config_path, parameter, values, out=None, dry_run=False, jobs=None,
              seed_override=None) -> int:
    try:
        if parameter not in SWEEP_PARAMETERS:
            raise ConfigError("--param", f"expected one of {', '.join(SWEEP_PARAMETERS)}")
        vals = _parse_values(values)
        cfg, out_dir = _prepare(config_path, out, seed_override, jobs)
        blocks = [(val, sweep_config(cfg, parameter, val)) for val in vals]
    except FakdError as exc:
        _err(str(exc))
        return 2
    if dry_run:
        for val, c in blocks:
            print(f"block {parameter}={val:g}: {len(c.seeds)} seeds x {len(c.variants)} variants")
        return 0
    merged = []
    try:
        for val, c in blocks:
            rows = _run_and_write(c, out_dir, f"blocks/{parameter}={val:g}.csv")
            merged.extend(rows)
            print(f"block {parameter}={val:g} done ({len(rows)} rows)")
    except FakdError as exc:
        _err(str(exc))
        return 1
    _write(out_dir / "sweep_results.csv", results_csv(merged))
    text = _report_text(merged)
    _write(out_dir / "sweep_summary.txt", text)
    print(text, end="")
    return 0


# ---------------------------------------------------------------- report

def cmd_report(results_path, out=None, baseline=NO_DISTILL) -> int:
    try:
        rows = read_results_csv(results_path)
    except OSError as exc:
        _err(f"cannot read {results_path}: {exc}")
        return 2
    try:
        text = summary_table(rows) + "\n\n" + format_report(
            *per_class_improvement_report(rows, baseline)) + "\n"
    except (FakdError, KeyError, ValueError) as exc:
        _err(f"bad results file: {exc}")
        return 1
    if out is not None:
        _write(Path(out) / "report.txt", text)
    print(text, end="")
    return 0


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fakd", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, runs=True):
        sp.add_argument("--config", required=True, metavar="PATH")
        sp.add_argument("--out", metavar="DIR", help="output directory (default: config output_dir)")
        sp.add_argument("--seed-override", type=int, metavar="K", help="run seed K only")
        if runs:
            sp.add_argument("--dry-run", action="store_true", help="validate and print the plan")
            sp.add_argument("--jobs", type=int, metavar="N", help="parallel seeds")

    common(sub.add_parser("verify", help="bound, gradient and reduction campaign"), runs=False)
    common(sub.add_parser("distill", help="train every variant on every seed"))
    sp = sub.add_parser("sweep", help="one experiment per parameter value")
    common(sp)
    sp.add_argument("--param", required=True, metavar="NAME", help="lambda0, tau or weight")
    sp.add_argument("--values", required=True, metavar="V1,V2,...")
    rp = sub.add_parser("report", help="per-class improvement report from a results CSV")
    rp.add_argument("--results", required=True, metavar="CSV")
    rp.add_argument("--out", metavar="DIR")
    rp.add_argument("--baseline", default=NO_DISTILL)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "verify":
        return cmd_verify(args.config, args.out, args.seed_override)
    if args.command == "distill":
        return cmd_distill(args.config, args.out, args.dry_run, args.jobs, args.seed_override)
    if args.command == "sweep":
        return cmd_sweep(args.config, args.param, args.values, args.out, args.dry_run, args.jobs,
                         args.seed_override)
    return cmd_report(args.results, args.out, args.baseline)


if __name__ == "__main__":
    sys.exit(main())
