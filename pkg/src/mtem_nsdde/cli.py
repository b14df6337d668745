"""Config-driven command line: condition checks, single runs, sweeps, moments.

Subcommands: check, simulate, converge, moments. Sweep-style commands read an
optional JSON config file; explicitly passed flags override file values. Every
artifact embeds the scientific config (runtime knobs like worker count and
output directory are excluded, so a run's bytes do not depend on them) and
lands in a directory named by a content hash of that config.

Exit codes: 0 success, 2 usage error (unknown names, bad flags), 3 config
validation error, 4 probe violation, 5 simulation divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import model, montecarlo, truncation
from .model import get_problem, problem_names
from .montecarlo import (
    ConfigError,
    SweepConfig,
    coupled_error_sweep,
    error_report_csv,
    error_report_json,
    moment_report_csv,
    moment_sweep,
    validate_config,
)
from .paths import MeshSpec, generate
from .scheme import SimulationDivergedError, simulate_em, simulate_mtem
from .truncation import PolicyDomainError, check_admissibility, make_policy, policy_names

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_VIOLATION = 4
EXIT_DIVERGED = 5

_DEFAULT_POLICY = {"example1": "ex1-inverse", "example2": "ex2-closed-form"}

_SWEEP_DEFAULTS = {
    "problem": "example2",
    "policy": "ex2-closed-form",
    "epsilon": None,
    "q_list": [4.0],
    "coarse_m_list": [8, 16, 32, 64, 128],
    "m_ref": 1024,
    "horizon": 2.0,
    "paths": 2000,
    "seed": 0,
    "x0": 1.0,
    "moment_exponent": None,
    "workers": 1,
}


def _csv_floats(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok.strip()]


def _csv_ints(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtem",
        description="Truncated explicit integrator for neutral stochastic delay "
        "equations: condition probes, single paths, convergence and moment sweeps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    check = sub.add_parser("check", help="probe the declared structural conditions")
    check.add_argument("--problem", required=True)
    check.add_argument("--policy", default=None, help="default: the problem's own policy")
    check.add_argument("--radius", type=float, default=5.0)
    check.add_argument("--samples", type=int, default=10000)
    check.add_argument("--seed", type=int, default=0)
    check.add_argument("--epsilon", type=float, default=None)
    check.add_argument("--q", type=float, default=4.0, help="moment exponent for the rate condition")
    check.add_argument("--khat", type=float, default=1.0, help="initial-segment modulus constant")
    check.add_argument("--modulus-steps", type=int, default=16,
                       help="steps per delay for the initial-segment modulus probe")
    check.add_argument("--a-grid", type=_csv_floats, default=[0.01, 0.1, 0.5, 1.0])
    check.add_argument("--deltas", type=_csv_floats, default=None,
                       help="admissibility step sizes (default: policy-derived grid)")
    check.add_argument("--probe-deltas", type=_csv_floats, default=None,
                       help="step sizes for the truncated-coefficient probes")
    check.add_argument("--growth-radius", type=float, default=None,
                       help="opt-in: probe the declared diffusion growth bound at this "
                            "radius (example2's declaration is known to fail beyond "
                            "|x| ~ 2.6; see README)")
    check.add_argument("--output-dir", default="runs")

    simulate = sub.add_parser("simulate", help="run one path and dump its trace")
    simulate.add_argument("--problem", required=True)
    simulate.add_argument("--policy", default=None)
    simulate.add_argument("--scheme", choices=["mtem", "em"], default="mtem")
    simulate.add_argument("--m", type=int, required=True, help="steps per delay")
    # four delay windows by default: long enough for the coarse plain-scheme
    # blow-up demo to actually overflow rather than stall at ~1e248
    simulate.add_argument("--horizon", type=float, default=4.0)
    simulate.add_argument("--x0", type=float, default=1.0)
    simulate.add_argument("--seed", type=int, default=0)
    simulate.add_argument("--path-index", type=int, default=0)
    simulate.add_argument("--epsilon", type=float, default=None)
    simulate.add_argument("--output-dir", default="runs")

    for name, helptext in (
        ("converge", "coupled-path strong-error sweep and order fit"),
        ("moments", "moment boundedness sweep across step sizes"),
    ):
        cmd = sub.add_parser(name, help=helptext)
        cmd.add_argument("--config", default=None, help="JSON config file; flags override")
        cmd.add_argument("--problem", default=None)
        cmd.add_argument("--policy", default=None)
        cmd.add_argument("--epsilon", type=float, default=None)
        cmd.add_argument("--q", type=_csv_floats, default=None, dest="q_list",
                         help="comma-separated moment exponents")
        cmd.add_argument("--m-list", type=_csv_ints, default=None, dest="coarse_m_list")
        cmd.add_argument("--m-ref", type=int, default=None, dest="m_ref")
        cmd.add_argument("--horizon", type=float, default=None)
        cmd.add_argument("--paths", type=int, default=None)
        cmd.add_argument("--seed", type=int, default=None)
        cmd.add_argument("--x0", type=float, default=None)
        cmd.add_argument("--workers", type=int, default=None)
        cmd.add_argument("--output-dir", default="runs")
        if name == "moments":
            cmd.add_argument("--moment-exponent", type=float, default=None,
                             dest="moment_exponent")
            cmd.add_argument("--scheme", choices=["mtem", "em"], default="mtem")
    return parser


def _merged_sweep_config(ns: argparse.Namespace) -> SweepConfig:
    merged = dict(_SWEEP_DEFAULTS)
    if ns.config is not None:
        with open(ns.config) as fh:
            file_cfg = json.load(fh)
        unknown = sorted(set(file_cfg) - set(merged))
        if unknown:
            raise ConfigError([f"{k}: unknown config key" for k in unknown])
        merged.update(file_cfg)
    for key in (
        "problem", "policy", "epsilon", "q_list", "coarse_m_list", "m_ref",
        "horizon", "paths", "seed", "x0", "workers", "moment_exponent",
    ):
        value = getattr(ns, key, None)
        if value is not None:
            merged[key] = value
    return SweepConfig(
        problem=merged["problem"],
        policy=merged["policy"],
        epsilon=merged["epsilon"],
        q_list=tuple(float(q) for q in merged["q_list"]),
        coarse_m_list=tuple(int(m) for m in merged["coarse_m_list"]),
        m_ref=int(merged["m_ref"]),
        horizon=float(merged["horizon"]),
        paths=int(merged["paths"]),
        seed=int(merged["seed"]),
        x0=float(merged["x0"]),
        moment_exponent=(None if merged["moment_exponent"] is None
                         else float(merged["moment_exponent"])),
        workers=int(merged["workers"]),
    )


def _write(path: Path, content: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(content)


def _resolve_problem_policy(ns):
    if ns.problem not in problem_names():
        raise KeyError(f"unknown problem {ns.problem!r}; available: {', '.join(problem_names())}")
    policy_name = ns.policy if ns.policy is not None else _DEFAULT_POLICY[ns.problem]
    if policy_name not in policy_names():
        raise KeyError(f"unknown policy {policy_name!r}; available: {', '.join(policy_names())}")
    return policy_name


def cmd_check(ns: argparse.Namespace) -> int:
    try:
        policy_name = _resolve_problem_policy(ns)
    except KeyError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    problem = get_problem(ns.problem)
    policy = make_policy(policy_name, ns.epsilon)
    if not 2.0 < ns.q < problem.khasminskii_p:
        print(f"config error: q: must lie in (2, {problem.khasminskii_p}), got {ns.q}",
              file=sys.stderr)
        return EXIT_VALIDATION

    base = min(policy.delta_star, 1e-2)
    probe_deltas = ns.probe_deltas or [base, base / 10.0, base / 100.0]
    if ns.deltas:
        adm_deltas = ns.deltas
    else:
        hi = min(policy.delta_star, 1e-2)
        lo = min(1e-6, hi * 1e-3)
        adm_deltas = list(np.logspace(np.log10(lo), np.log10(hi), 7))

    seed = ns.seed
    reports = {}
    reports["local_lipschitz"] = model.probe_local_lipschitz(
        problem, ns.radius, ns.samples, seed)
    reports["contractivity"] = model.probe_contractivity(
        problem, ns.radius, ns.samples, seed + 1)
    reports["khasminskii"] = model.probe_khasminskii(
        problem, ns.radius, ns.a_grid, ns.samples, seed + 2)
    reports["initial_modulus"] = model.probe_initial_modulus(
        problem, problem.delay / ns.modulus_steps, ns.q, ns.khat, ns.samples)
    for j, delta in enumerate(probe_deltas):
        reports[f"trunc_lipschitz@{delta:g}"] = truncation.probe_trunc_lipschitz(
            problem, policy, delta, ns.samples, seed + 10 + j)
        reports[f"trunc_khasminskii@{delta:g}"] = truncation.probe_trunc_khasminskii(
            problem, policy, delta, ns.samples, seed + 20 + j)
    if ns.growth_radius is not None:
        if problem.growth_r is None:
            print(f"usage error: problem {ns.problem!r} declares no diffusion growth "
                  "constants", file=sys.stderr)
            return EXIT_USAGE
        reports["diffusion_growth"] = model.probe_growth_g(
            problem, ns.growth_radius, ns.samples, seed + 3)

    admissibility = check_admissibility(
        policy, problem.lipschitz_of_radius, problem.khasminskii_p, ns.q, adm_deltas)

    config_echo = {
        "command": "check", "problem": ns.problem, "policy": policy_name,
        "epsilon": policy.epsilon, "radius": ns.radius, "samples": ns.samples,
        "seed": ns.seed, "q": ns.q, "khat": ns.khat, "a_grid": ns.a_grid,
        "modulus_steps": ns.modulus_steps, "probe_deltas": probe_deltas,
        "admissibility_deltas": [float(d) for d in adm_deltas],
        "growth_radius": ns.growth_radius,
    }
    run_id = hashlib.sha256(json.dumps(config_echo, sort_keys=True).encode()).hexdigest()[:12]
    outdir = Path(ns.output_dir) / f"check-{run_id}"
    violations = {}
    for key, rep in reports.items():
        _write(outdir / f"probe_{key.replace('@', '_at_')}.json",
               json.dumps(rep.to_dict(), sort_keys=True, indent=2) + "\n")
        violations[key] = rep.violations
    _write(outdir / "admissibility.json",
           json.dumps(admissibility.to_dict(), sort_keys=True, indent=2) + "\n")
    ok = all(v == 0 for v in violations.values()) and admissibility.passes
    summary = {
        "run_id": run_id, "config": config_echo, "violations": violations,
        "admissibility_passes": admissibility.passes, "exit_status": 0 if ok else EXIT_VIOLATION,
    }
    _write(outdir / "summary.json", json.dumps(summary, sort_keys=True, indent=2) + "\n")
    for key, count in violations.items():
        print(f"{key}: {'ok' if count == 0 else f'{count} violation(s)'}")
    print(f"admissibility: {'ok' if admissibility.passes else 'FAILED'}")
    print(f"reports written to {outdir}")
    return EXIT_OK if ok else EXIT_VIOLATION


def cmd_simulate(ns: argparse.Namespace) -> int:
    try:
        policy_name = _resolve_problem_policy(ns)
    except KeyError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    problem = get_problem(ns.problem, x0=ns.x0)
    mesh = MeshSpec(problem.delay, ns.m, ns.horizon)
    grid = generate(ns.seed, ns.path_index, mesh, problem.dim_w)
    config_echo = {
        "command": "simulate", "problem": ns.problem, "scheme": ns.scheme,
        "policy": policy_name if ns.scheme == "mtem" else None,
        "epsilon": ns.epsilon, "m": ns.m, "horizon": ns.horizon, "x0": ns.x0,
        "seed": ns.seed, "path_index": ns.path_index,
    }
    run_id = hashlib.sha256(json.dumps(config_echo, sort_keys=True).encode()).hexdigest()[:12]
    try:
        if ns.scheme == "mtem":
            policy = make_policy(policy_name, ns.epsilon)
            config_echo["epsilon"] = policy.epsilon
            sol = simulate_mtem(problem, policy, mesh, grid)
        else:
            sol = simulate_em(problem, mesh, grid)
    except PolicyDomainError as exc:
        print(f"config error: m: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SimulationDivergedError as exc:
        print(f"divergence: {exc.scheme} state became non-finite at step {exc.step} "
              f"(t = {exc.step * mesh.dt:g})", file=sys.stderr)
        return EXIT_DIVERGED

    lines = ["# config " + json.dumps(config_echo, sort_keys=True)]
    lines.append("k,t," + ",".join(f"x{i}" for i in range(problem.dim_x)) + ",truncation_flag")
    m = mesh.steps_per_delay
    for k in range(-m, mesh.total_steps + 1):
        xs = ",".join(repr(float(v)) for v in sol.state(k))
        flag = int(sol.truncation_flags[k]) if 0 <= k < mesh.total_steps else 0
        lines.append(f"{k},{repr(k * mesh.dt)},{xs},{flag}")
    outdir = Path(ns.output_dir) / f"simulate-{run_id}"
    _write(outdir / "trace.csv", "\n".join(lines) + "\n")
    print(f"truncation_activations: {sol.truncation_activations}")
    print(f"trace written to {outdir / 'trace.csv'}")
    return EXIT_OK


def cmd_converge(ns: argparse.Namespace) -> int:
    try:
        config = _merged_sweep_config(ns)
    except ConfigError as exc:
        for line in exc.problems:
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_VALIDATION
    errors = validate_config(config)
    if errors:
        for line in errors:
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        report = coupled_error_sweep(config)
    except SimulationDivergedError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    problem = get_problem(config.problem, x0=config.x0)
    if problem.growth_r is None:
        # without declared diffusion growth the uniform-in-time bounds do not
        # apply; report the fixed-horizon estimators only
        report = montecarlo._filter_report(
            report, ("fixed_t_interpolant", "fixed_t_piecewise"))
    outdir = Path(ns.output_dir) / f"converge-{report.metadata['run_id']}"
    _write(outdir / "config.json",
           json.dumps(report.metadata["config"], sort_keys=True, indent=2) + "\n")
    _write(outdir / "errors.csv", error_report_csv(report))
    _write(outdir / "summary.json", error_report_json(report))
    for fit in report.fitted_orders:
        print(f"q={fit.q:g} {fit.estimator}: order {fit.slope:.4f} +/- {fit.slope_se:.4f}")
    for note in report.metadata["warnings"]:
        print(f"note: {note}")
    print(f"artifacts written to {outdir}")
    return EXIT_OK


def cmd_moments(ns: argparse.Namespace) -> int:
    try:
        config = _merged_sweep_config(ns)
    except ConfigError as exc:
        for line in exc.problems:
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_VALIDATION
    errors = validate_config(
        config, need_moment_exponent=True, check_policy_domain=(ns.scheme == "mtem")
    )
    if errors:
        for line in errors:
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        report = moment_sweep(config, scheme=ns.scheme)
    except SimulationDivergedError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    outdir = Path(ns.output_dir) / f"moments-{report.metadata['run_id']}"
    _write(outdir / "config.json",
           json.dumps(report.metadata["config"], sort_keys=True, indent=2) + "\n")
    _write(outdir / "moments.csv", moment_report_csv(report))
    summary = {
        "run_id": report.metadata["run_id"],
        "config": report.metadata["config"],
        "sup_at_horizon": {str(k): v for k, v in report.sup_at_horizon.items()},
        "ratio_max_min": report.ratio_max_min,
        "divergent_paths": {str(k): v for k, v in report.divergent_paths.items()},
        "warnings": report.metadata["warnings"],
    }
    _write(outdir / "summary.json", json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(f"across-step max/min ratio of the running-sup moment: {report.ratio_max_min:.4f}")
    total_div = sum(report.divergent_paths.values())
    if total_div:
        print(f"divergent paths: {total_div}")
    print(f"artifacts written to {outdir}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    handler = {
        "check": cmd_check,
        "simulate": cmd_simulate,
        "converge": cmd_converge,
        "moments": cmd_moments,
    }[ns.command]
    return handler(ns)


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
