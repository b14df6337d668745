"""Coupled-path strong-error estimation, moment sweeps, and order fitting.

Every path index owns a Brownian grid on the fine reference mesh; the
reference run integrates on that mesh and each coarse run on exact block sums
of the same increments, so per-path differences measure discretisation error
rather than statistical noise. The reference is itself the truncated scheme
at the finest mesh (the exact solution has no closed form); its bias is
ordered like the finest coarse error.

Aggregation is deterministic and independent of the worker count: per-path
samples land in a preallocated buffer indexed by path, then a single
fixed-order compensated reduction produces the estimates.
"""

from __future__ import annotations

import hashlib
import json
import math
import multiprocessing
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import get_problem, problem_names
from .paths import BrownianGrid, MeshSpec, coarsen, generate
from .scheme import (
    SimulationDivergedError,
    interpolant_on_fine_mesh,
    piecewise_on_fine_mesh,
    simulate_em,
    simulate_mtem,
)
from .truncation import make_policy, policy_names

ESTIMATORS = (
    "fixed_t_interpolant",
    "fixed_t_piecewise",
    "sup_interpolant",
    "sup_piecewise",
)

_CHUNK = 32


class ConfigError(ValueError):
    """Sweep configuration invalid; message lists every offending field."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(problems))


class InsufficientDataError(ValueError):
    """Order fit needs at least three distinct step sizes with positive error."""


def kahan_sum(values) -> float:
    """Neumaier-compensated sum in the given (fixed) order."""
    total = 0.0
    comp = 0.0
    for v in values:
        v = float(v)
        t = total + v
        if abs(total) >= abs(v):
            comp += (total - t) + v
        else:
            comp += (v - t) + total
        total = t
    return total + comp


def _mean_and_se(values: np.ndarray) -> tuple[float, float]:
    n = len(values)
    mean = kahan_sum(values) / n
    if n < 2:
        return mean, 0.0
    var = kahan_sum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var / n)


@dataclass(frozen=True)
class SweepConfig:
    """Inputs of one sweep; `workers` is a runtime knob excluded from the echo."""

    problem: str
    policy: str
    epsilon: float | None
    q_list: tuple[float, ...]
    coarse_m_list: tuple[int, ...]
    m_ref: int
    horizon: float
    paths: int
    seed: int
    x0: float = 1.0
    moment_exponent: float | None = None
    workers: int = 1

    def scientific_dict(self) -> dict:
        return {
            "problem": self.problem,
            "policy": self.policy,
            "epsilon": self.epsilon,
            "q_list": list(self.q_list),
            "coarse_m_list": list(self.coarse_m_list),
            "m_ref": self.m_ref,
            "horizon": self.horizon,
            "paths": self.paths,
            "seed": self.seed,
            "x0": self.x0,
            "moment_exponent": self.moment_exponent,
        }

    def run_id(self) -> str:
        payload = json.dumps(self.scientific_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


def validate_config(
    config: SweepConfig,
    need_moment_exponent: bool = False,
    check_policy_domain: bool = True,
) -> list[str]:
    """All validation failures, each prefixed with the offending field.

    `check_policy_domain=False` skips the per-step-size policy domain check
    (the plain baseline scheme needs no truncation level).
    """
    errors: list[str] = []
    problem = policy = None
    if config.problem not in problem_names():
        errors.append(f"problem: unknown name {config.problem!r}")
    else:
        problem = get_problem(config.problem, x0=config.x0)
    if config.policy not in policy_names():
        errors.append(f"policy: unknown name {config.policy!r}")
    elif config.epsilon is not None and not 0.0 < config.epsilon < 1.0:
        errors.append(f"epsilon: must lie in (0, 1), got {config.epsilon}")
    else:
        try:
            policy = make_policy(config.policy, config.epsilon)
        except Exception as exc:  # policy construction encodes its own domain
            errors.append(f"policy: {exc}")
    if config.paths < 1:
        errors.append(f"paths: must be >= 1, got {config.paths}")
    if config.m_ref < 1:
        errors.append(f"m_ref: must be >= 1, got {config.m_ref}")
    if not config.coarse_m_list:
        errors.append("coarse_m_list: must be nonempty")
    for m in config.coarse_m_list:
        if m < 1:
            errors.append(f"coarse_m_list: entries must be >= 1, got {m}")
        elif config.m_ref >= 1 and config.m_ref % m:
            errors.append(f"coarse_m_list: {m} does not divide m_ref={config.m_ref}")
    if config.horizon <= 0:
        errors.append(f"horizon: must be positive, got {config.horizon}")
    if problem is not None and config.horizon > 0 and config.m_ref >= 1:
        try:
            MeshSpec(problem.delay, config.m_ref, config.horizon)
        except Exception as exc:
            errors.append(f"horizon: {exc}")
    if problem is not None:
        for q in config.q_list:
            if not 2.0 < q < problem.khasminskii_p:
                errors.append(
                    f"q_list: q must lie in (2, {problem.khasminskii_p}), got {q}"
                )
        if policy is not None and check_policy_domain:
            for m in config.coarse_m_list:
                if config.m_ref % m == 0 and not policy.valid_at(problem.delay / m):
                    errors.append(
                        f"coarse_m_list: step {problem.delay / m:.6g} (m={m}) outside "
                        f"policy {config.policy!r} domain"
                    )
    if need_moment_exponent and config.moment_exponent is None:
        errors.append("moment_exponent: required for a moment sweep")
    if config.moment_exponent is not None and problem is not None:
        pbar = config.moment_exponent
        limit = problem.khasminskii_p
        label = "declared moment exponent bound p"
        if problem.growth_r is not None:
            limit = problem.khasminskii_p + 2.0 - problem.growth_r
            label = "p + 2 - r from the declared diffusion growth exponent"
        if not 0.0 < pbar <= limit:
            errors.append(
                f"moment_exponent: must lie in (0, {limit}] ({label}), got {pbar}"
            )
    if config.workers < 1:
        errors.append(f"workers: must be >= 1, got {config.workers}")
    return errors


def regime_warnings(config: SweepConfig) -> list[str]:
    """Sup-norm theorem-regime advisories recorded in report metadata."""
    notes: list[str] = []
    if config.problem not in problem_names():
        return notes
    problem = get_problem(config.problem, x0=config.x0)
    if problem.growth_r is not None:
        q_cap = problem.khasminskii_p - problem.growth_r
        for q in config.q_list:
            if q > q_cap:
                notes.append(
                    f"q={q:g} exceeds p - r = {q_cap:g}: sup-norm estimates are "
                    "measured outside the proven regime"
                )
    delay = problem.delay
    policy = make_policy(config.policy, config.epsilon)
    for m in config.coarse_m_list:
        if delay / m > policy.delta_star:
            notes.append(
                f"step {delay / m:.6g} (m={m}) exceeds the policy's advertised "
                f"delta_star={policy.delta_star:.6g}"
            )
    return notes


# --- per-path engine ----------------------------------------------------------

def _row_norms(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("jd,jd->j", a, a))


def _coupling_spot_check(grid: BrownianGrid, factor: int) -> None:
    coarse = coarsen(grid, factor)
    blocks = grid.increments.reshape(-1, factor, grid.dim_w)
    expect = blocks[:, 0].copy()
    for i in range(1, factor):
        expect += blocks[:, i]
    if not np.array_equal(coarse.increments, expect):
        raise AssertionError("coarsened increments are not exact block sums")


def _coupled_chunk(args) -> tuple[int, np.ndarray, np.ndarray, np.ndarray]:
    (problem, policy, fine_mesh, m_list, seed), indices = args
    n_m = len(m_list)
    fixed = np.empty((len(indices), n_m))
    sup_interp = np.empty((len(indices), n_m))
    sup_piece = np.empty((len(indices), n_m))
    m_ref = fine_mesh.steps_per_delay
    for row, idx in enumerate(indices):
        grid = generate(seed, idx, fine_mesh, problem.dim_w)
        ref = simulate_mtem(problem, policy, fine_mesh, grid)
        ref_nodes = ref.states[m_ref:]
        for col, m in enumerate(m_list):
            cg = coarsen(grid, m_ref // m)
            sol = simulate_mtem(problem, policy, cg.mesh, cg)
            fixed[row, col] = float(np.linalg.norm(ref.states[-1] - sol.states[-1]))
            sup_interp[row, col] = float(
                _row_norms(ref_nodes - interpolant_on_fine_mesh(sol, grid)).max()
            )
            sup_piece[row, col] = float(
                _row_norms(ref_nodes - piecewise_on_fine_mesh(sol, grid)).max()
            )
    return indices[0], fixed, sup_interp, sup_piece


def _map_chunks(worker, payload, n_paths: int, workers: int) -> list:
    chunks = [list(range(a, min(a + _CHUNK, n_paths))) for a in range(0, n_paths, _CHUNK)]
    jobs = [(payload, chunk) for chunk in chunks]
    if workers <= 1:
        return [worker(job) for job in jobs]
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        return list(pool.map(worker, jobs))


# --- reports -------------------------------------------------------------------

@dataclass(frozen=True)
class ErrorRow:
    q: float
    estimator: str
    m: int
    delta: float
    error_q: float
    std_error: float
    divergent_paths: int


@dataclass(frozen=True)
class FittedOrder:
    q: float
    estimator: str
    slope: float
    slope_se: float


@dataclass(frozen=True)
class ErrorReport:
    rows: tuple[ErrorRow, ...]
    fitted_orders: tuple[FittedOrder, ...]
    metadata: dict = field(compare=False)

    def row(self, q: float, estimator: str, m: int) -> ErrorRow:
        for r in self.rows:
            if r.q == q and r.estimator == estimator and r.m == m:
                return r
        raise KeyError((q, estimator, m))

    def order(self, q: float, estimator: str) -> FittedOrder:
        for f in self.fitted_orders:
            if f.q == q and f.estimator == estimator:
                return f
        raise KeyError((q, estimator))


def fit_loglog(deltas, errors) -> tuple[float, float]:
    """OLS slope of log(error) on log(delta) with its standard error.

    Zero-error points are excluded with a warning; fewer than three distinct
    surviving step sizes is an error.
    """
    deltas = np.asarray(deltas, dtype=float)
    errors = np.asarray(errors, dtype=float)
    keep = errors > 0.0
    if not keep.all():
        warnings.warn(
            f"excluding {int((~keep).sum())} zero-error point(s) from the order fit",
            stacklevel=2,
        )
    deltas, errors = deltas[keep], errors[keep]
    if len(np.unique(deltas)) < 3:
        raise InsufficientDataError(
            "order fit needs >= 3 distinct step sizes with positive error"
        )
    x = np.log(deltas)
    y = np.log(errors)
    xc = x - x.mean()
    sxx = float(xc @ xc)
    slope = float(xc @ y) / sxx
    resid = y - (y.mean() + slope * xc)
    dof = len(x) - 2
    se = math.sqrt(float(resid @ resid) / dof / sxx) if dof > 0 else 0.0
    return slope, se


def fit_order(rows: tuple[ErrorRow, ...]) -> tuple[FittedOrder, ...]:
    """Fit one slope per (q, estimator) group present in the rows."""
    groups: dict[tuple[float, str], list[ErrorRow]] = {}
    for r in rows:
        groups.setdefault((r.q, r.estimator), []).append(r)
    fits = []
    for (q, estimator), grp in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        try:
            slope, se = fit_loglog([r.delta for r in grp], [r.error_q for r in grp])
        except InsufficientDataError:
            warnings.warn(
                f"skipping order fit for q={q:g} {estimator}: not enough positive points",
                stacklevel=2,
            )
            continue
        fits.append(FittedOrder(q=q, estimator=estimator, slope=slope, slope_se=se))
    return tuple(fits)


def _build_rows(
    diffs_by_estimator: dict[str, np.ndarray],
    q_list,
    m_list,
    deltas,
) -> tuple[ErrorRow, ...]:
    rows = []
    for estimator in ESTIMATORS:
        if estimator not in diffs_by_estimator:
            continue
        diffs = diffs_by_estimator[estimator]
        for q in sorted(q_list):
            for col, m in enumerate(m_list):
                powers = diffs[:, col] ** q
                mean, se = _mean_and_se(powers)
                rows.append(
                    ErrorRow(
                        q=q,
                        estimator=estimator,
                        m=m,
                        delta=deltas[col],
                        error_q=mean ** (1.0 / q),
                        std_error=se,
                        divergent_paths=0,
                    )
                )
    _assert_power_mean(rows)
    return tuple(rows)


def _assert_power_mean(rows) -> None:
    # q-norms of the same samples must be nondecreasing in q
    by_em: dict[tuple[str, int], list[ErrorRow]] = {}
    for r in rows:
        by_em.setdefault((r.estimator, r.m), []).append(r)
    for grp in by_em.values():
        grp.sort(key=lambda r: r.q)
        for a, b in zip(grp, grp[1:]):
            if a.error_q > b.error_q * (1.0 + 1e-12) + 1e-300:
                raise AssertionError(
                    f"power-mean ordering violated: q={a.q} gives {a.error_q} > "
                    f"q={b.q} gives {b.error_q} ({a.estimator}, m={a.m})"
                )


def coupled_error_sweep(config: SweepConfig) -> ErrorReport:
    """Run the coupled reference/coarse simulations and build the full report."""
    errors = validate_config(config)
    if errors:
        raise ConfigError(errors)
    problem = get_problem(config.problem, x0=config.x0)
    policy = make_policy(config.policy, config.epsilon)
    fine_mesh = MeshSpec(problem.delay, config.m_ref, config.horizon)
    m_list = tuple(sorted(config.coarse_m_list))
    deltas = [problem.delay / m for m in m_list]

    _coupling_spot_check(
        generate(config.seed, 0, fine_mesh, problem.dim_w), config.m_ref // m_list[0]
    )

    payload = (problem, policy, fine_mesh, m_list, config.seed)
    n_m = len(m_list)
    fixed = np.empty((config.paths, n_m))
    sup_interp = np.empty((config.paths, n_m))
    sup_piece = np.empty((config.paths, n_m))
    for start, fx, si, sp in _map_chunks(_coupled_chunk, payload, config.paths, config.workers):
        stop = start + fx.shape[0]
        fixed[start:stop] = fx
        sup_interp[start:stop] = si
        sup_piece[start:stop] = sp

    diffs = {
        "fixed_t_interpolant": fixed,
        "fixed_t_piecewise": fixed,
        "sup_interpolant": sup_interp,
        "sup_piecewise": sup_piece,
    }
    rows = _build_rows(diffs, config.q_list, m_list, deltas)
    metadata = {
        "run_id": config.run_id(),
        "config": config.scientific_dict(),
        "warnings": regime_warnings(config),
    }
    return ErrorReport(rows=rows, fitted_orders=fit_order(rows), metadata=metadata)


def strong_error_at_T(config: SweepConfig) -> ErrorReport:
    """Fixed-horizon estimators only (both continuous-time versions coincide there)."""
    return _filter_report(coupled_error_sweep(config), ("fixed_t_interpolant", "fixed_t_piecewise"))


def strong_error_sup(config: SweepConfig) -> ErrorReport:
    """Uniform-in-time estimators; requires declared diffusion growth constants."""
    problem = get_problem(config.problem, x0=config.x0) if config.problem in problem_names() else None
    if problem is not None and problem.growth_r is None:
        raise ConfigError(
            [f"problem: {config.problem!r} declares no diffusion growth constants, "
             "required for uniform-in-time error bounds"]
        )
    return _filter_report(coupled_error_sweep(config), ("sup_interpolant", "sup_piecewise"))


def _filter_report(report: ErrorReport, estimators) -> ErrorReport:
    rows = tuple(r for r in report.rows if r.estimator in estimators)
    fits = tuple(f for f in report.fitted_orders if f.estimator in estimators)
    return ErrorReport(rows=rows, fitted_orders=fits, metadata=report.metadata)


# --- moment sweep ---------------------------------------------------------------

@dataclass(frozen=True)
class MomentRow:
    m: int
    delta: float
    t: float
    running_sup_moment: float
    fixed_time_moment: float


@dataclass(frozen=True)
class MomentReport:
    rows: tuple[MomentRow, ...]
    sup_at_horizon: dict
    ratio_max_min: float
    divergent_paths: dict
    metadata: dict = field(compare=False)


def _moment_chunk(args):
    (problem, policy, m_list, horizon, seed, pbar, scheme), indices = args
    n_m = len(m_list)
    m_min = min(m_list)
    mesh_min = MeshSpec(problem.delay, m_min, horizon)
    n_grid = mesh_min.total_steps + 1
    running = np.full((len(indices), n_m, n_grid), np.nan)
    fixed = np.full((len(indices), n_m, n_grid), np.nan)
    diverged = np.zeros((len(indices), n_m), dtype=bool)
    for row, idx in enumerate(indices):
        for col, m in enumerate(m_list):
            mesh = MeshSpec(problem.delay, m, horizon)
            grid = generate(seed, idx, mesh, problem.dim_w)
            try:
                if scheme == "mtem":
                    sol = simulate_mtem(problem, policy, mesh, grid)
                else:
                    sol = simulate_em(problem, mesh, grid)
            except SimulationDivergedError:
                if scheme == "mtem":
                    raise
                diverged[row, col] = True
                continue
            norms = _row_norms(sol.states[mesh.steps_per_delay:])
            runmax = np.maximum.accumulate(norms)
            node_of = (np.arange(n_grid) * m) // m_min
            running[row, col] = runmax[node_of] ** pbar
            fixed[row, col] = norms[node_of] ** pbar
    return indices[0], running, fixed, diverged


def moment_sweep(config: SweepConfig, scheme: str = "mtem") -> MomentReport:
    """Estimate running-sup and fixed-time moments of the states across the grid.

    Each step size draws its increments from the same per-path counter stream
    (common random numbers across the grid). The truncated scheme must not
    diverge (divergence raises); the plain baseline counts divergent paths
    per step size and excludes them from the averages.
    """
    if scheme not in ("mtem", "em"):
        raise ValueError(f"scheme must be 'mtem' or 'em', got {scheme!r}")
    errors = validate_config(
        config, need_moment_exponent=True, check_policy_domain=(scheme == "mtem")
    )
    if errors:
        raise ConfigError(errors)
    problem = get_problem(config.problem, x0=config.x0)
    policy = make_policy(config.policy, config.epsilon)
    pbar = float(config.moment_exponent)
    m_list = tuple(sorted(config.coarse_m_list))
    m_min = m_list[0]
    mesh_min = MeshSpec(problem.delay, m_min, config.horizon)
    t_grid = [r * mesh_min.dt for r in range(mesh_min.total_steps + 1)]

    payload = (problem, policy, m_list, config.horizon, config.seed, pbar, scheme)
    n_m = len(m_list)
    n_grid = len(t_grid)
    running = np.empty((config.paths, n_m, n_grid))
    fixed = np.empty((config.paths, n_m, n_grid))
    diverged = np.empty((config.paths, n_m), dtype=bool)
    for start, rn, fx, dv in _map_chunks(_moment_chunk, payload, config.paths, config.workers):
        stop = start + rn.shape[0]
        running[start:stop] = rn
        fixed[start:stop] = fx
        diverged[start:stop] = dv

    rows = []
    sup_at_horizon = {}
    divergent = {}
    for col, m in enumerate(m_list):
        alive = ~diverged[:, col]
        divergent[m] = int(diverged[:, col].sum())
        for tg, t in enumerate(t_grid):
            if alive.any():
                run_mean = kahan_sum(running[alive, col, tg]) / alive.sum()
                fix_mean = kahan_sum(fixed[alive, col, tg]) / alive.sum()
            else:
                # every path diverged at this step size: the count is the
                # result, the moments are undefined
                run_mean = fix_mean = math.nan
            rows.append(
                MomentRow(
                    m=m,
                    delta=problem.delay / m,
                    t=t,
                    running_sup_moment=run_mean,
                    fixed_time_moment=fix_mean,
                )
            )
        sup_at_horizon[m] = rows[-1].running_sup_moment
    values = [v for v in sup_at_horizon.values() if not math.isnan(v)]
    if not values:
        ratio = math.nan
    elif min(values) > 0:
        ratio = max(values) / min(values)
    else:
        ratio = math.inf
    metadata = {
        "run_id": config.run_id(),
        "config": {**config.scientific_dict(), "scheme": scheme},
        "warnings": regime_warnings(config),
    }
    return MomentReport(
        rows=tuple(rows),
        sup_at_horizon=sup_at_horizon,
        ratio_max_min=ratio,
        divergent_paths=divergent,
        metadata=metadata,
    )


# --- serialisation ----------------------------------------------------------------

def error_report_csv(report: ErrorReport) -> str:
    """CSV with a config-echo comment line; floats via repr for byte stability."""
    cfg = report.metadata["config"]
    lines = [
        "# config " + json.dumps(cfg, sort_keys=True),
        "problem,policy,epsilon,q,estimator,m,delta,error_q,std_error,divergent_paths",
    ]
    for r in report.rows:
        lines.append(
            f"{cfg['problem']},{cfg['policy']},{_fmt(cfg['epsilon'])},{_fmt(r.q)},"
            f"{r.estimator},{r.m},{_fmt(r.delta)},{_fmt(r.error_q)},"
            f"{_fmt(r.std_error)},{r.divergent_paths}"
        )
    return "\n".join(lines) + "\n"


def error_report_json(report: ErrorReport) -> str:
    payload = {
        "run_id": report.metadata["run_id"],
        "config": report.metadata["config"],
        "fitted_orders": [
            {"q": f.q, "estimator": f.estimator, "slope": f.slope, "slope_se": f.slope_se}
            for f in report.fitted_orders
        ],
        "divergent_paths_total": int(sum(r.divergent_paths for r in report.rows)),
        "warnings": report.metadata["warnings"],
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def moment_report_csv(report: MomentReport) -> str:
    cfg = report.metadata["config"]
    lines = [
        "# config " + json.dumps(cfg, sort_keys=True),
        "problem,policy,epsilon,m,delta,t,running_sup_moment,fixed_time_moment,divergent_paths",
    ]
    for r in report.rows:
        lines.append(
            f"{cfg['problem']},{cfg['policy']},{_fmt(cfg['epsilon'])},{r.m},{_fmt(r.delta)},"
            f"{_fmt(r.t)},{_fmt(r.running_sup_moment)},{_fmt(r.fixed_time_moment)},"
            f"{report.divergent_paths[r.m]}"
        )
    return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value))
