"""Explicit one-step recursion for neutral stochastic delay problems.

States advance by

    X_{k+1} = D(X_{k+1-m}) + X_k - D(X_{k-m}) + f_h(X_k, X_{k-m}) dt
              + g_h(X_k, X_{k-m}) dB_k

with the delay an exact whole number m of steps, so the delayed index is
always a stored node and the recursion is explicit. With a truncation level h
the coefficients are the radially truncated ones; the plain Euler-Maruyama
baseline is the same recursion with the gate disabled, so on any path where
the gate never fires the two schemes are bit-identical.

Two continuous-time readings of a solution are evaluated on a finer reference
mesh: the piecewise-constant version (left-closed, right-open steps) and the
interpolant that follows the driving Brownian path within each step. Both
coincide with the node states at the nodes, exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import NSDDEProblem
from .paths import BrownianGrid, MeshSpec
from .truncation import TruncationPolicy


class SimulationDivergedError(RuntimeError):
    """A step produced a non-finite state; carries the offending step index."""

    def __init__(self, step: int, scheme: str):
        self.step = step
        self.scheme = scheme
        super().__init__(f"{scheme} state became non-finite at step {step}")


@dataclass(frozen=True)
class PathSolution:
    """States of one run, with per-step coefficient values for interpolation.

    `states[k + m]` is the state at node k for k in [-m, N]; the first m+1
    rows are the initial segment. `drift_values`/`diffusion_values` hold the
    (possibly truncated) coefficients used at each step, which is exactly the
    data needed to evaluate both continuous-time versions on a finer mesh.
    """

    mesh: MeshSpec
    states: np.ndarray
    h_value: float | None
    truncation_flags: np.ndarray
    drift_values: np.ndarray
    diffusion_values: np.ndarray

    @property
    def truncation_activations(self) -> int:
        return int(np.count_nonzero(self.truncation_flags))

    def state(self, k: int) -> np.ndarray:
        """State at node k, k in [-steps_per_delay, total_steps]."""
        m = self.mesh.steps_per_delay
        if not -m <= k <= self.mesh.total_steps:
            raise IndexError(f"node {k} outside [-{m}, {self.mesh.total_steps}]")
        return self.states[k + m]


def mtem_step(x_k, x_km, x_k1m, f_delta, g_delta, neutral, dt, db):
    """One explicit step given already-truncated coefficient callables."""
    x_k = np.asarray(x_k, dtype=float)
    fv = np.asarray(f_delta(x_k, x_km), dtype=float)
    gv = np.asarray(g_delta(x_k, x_km), dtype=float)
    return (
        np.asarray(neutral(x_k1m), dtype=float)
        + x_k
        - np.asarray(neutral(x_km), dtype=float)
        + fv * dt
        + gv @ np.asarray(db, dtype=float)
    )


def _increments_for(mesh: MeshSpec, grid) -> np.ndarray:
    if isinstance(grid, BrownianGrid):
        if grid.mesh != mesh:
            raise ValueError("grid mesh does not match the requested mesh")
        return grid.increments
    inc = np.asarray(grid, dtype=float)
    if inc.ndim != 2 or inc.shape[0] != mesh.total_steps:
        raise ValueError(
            f"increments must have shape ({mesh.total_steps}, dim_w), got {inc.shape}"
        )
    return inc


def _run(problem: NSDDEProblem, mesh: MeshSpec, increments: np.ndarray, h_value, scheme: str) -> PathSolution:
    m = mesh.steps_per_delay
    n_steps = mesh.total_steps
    dt = mesh.dt
    d = problem.dim_x
    if increments.shape[1] != problem.dim_w:
        raise ValueError(
            f"increments have {increments.shape[1]} components, problem has dim_w={problem.dim_w}"
        )
    states = np.empty((m + n_steps + 1, d))
    xi = problem.initial_path
    for k in range(-m, 1):
        theta = -mesh.delay if k == -m else k * dt
        states[k + m] = np.asarray(xi(theta), dtype=float)
    drift_values = np.empty((n_steps, d))
    diffusion_values = np.empty((n_steps, d, problem.dim_w))
    flags = np.zeros(n_steps, dtype=bool)
    f = problem.drift
    g = problem.diffusion
    neutral = problem.neutral
    gate_sq = None if h_value is None else h_value * h_value
    # overflow in a coefficient or state is the divergence signal, not a bug
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_steps):
            x = states[k + m]
            y = states[k]
            if gate_sq is not None:
                s_sq = max(float(x @ x), float(y @ y))
                if s_sq > gate_sq:
                    flags[k] = True
                    s = math.sqrt(s_sq)
                    back = h_value / s
                    up = s / h_value
                    fv = up * np.asarray(f(back * x, back * y), dtype=float)
                    gv = up * np.asarray(g(back * x, back * y), dtype=float)
                else:
                    fv = np.asarray(f(x, y), dtype=float)
                    gv = np.asarray(g(x, y), dtype=float)
            else:
                fv = np.asarray(f(x, y), dtype=float)
                gv = np.asarray(g(x, y), dtype=float)
            x_next = (
                np.asarray(neutral(states[k + 1]), dtype=float)
                + x
                - np.asarray(neutral(y), dtype=float)
                + fv * dt
                + gv @ increments[k]
            )
            if not np.isfinite(x_next).all():
                raise SimulationDivergedError(step=k, scheme=scheme)
            states[k + 1 + m] = x_next
            drift_values[k] = fv
            diffusion_values[k] = gv
    return PathSolution(
        mesh=mesh,
        states=states,
        h_value=h_value,
        truncation_flags=flags,
        drift_values=drift_values,
        diffusion_values=diffusion_values,
    )


def simulate_mtem(
    problem: NSDDEProblem,
    policy: TruncationPolicy,
    mesh: MeshSpec,
    grid,
) -> PathSolution:
    """Run the truncated recursion over the whole mesh.

    `grid` is a BrownianGrid on the same mesh or a raw (total_steps, dim_w)
    increment array. The step size must lie in the policy's domain; steps
    above the policy's advertised delta_star are allowed (the level simply
    sits below 1 there) as long as the level is defined.
    """
    increments = _increments_for(mesh, grid)
    h_value = policy.level(mesh.dt)
    return _run(problem, mesh, increments, h_value, scheme="mtem")


def simulate_em(problem: NSDDEProblem, mesh: MeshSpec, grid) -> PathSolution:
    """Plain Euler-Maruyama baseline: the same recursion with no truncation."""
    increments = _increments_for(mesh, grid)
    return _run(problem, mesh, increments, None, scheme="em")


def eval_piecewise(solution: PathSolution, fine_index: int, mesh_ratio: int) -> np.ndarray:
    """Piecewise-constant version at fine node `fine_index` (right-open steps)."""
    n_fine = solution.mesh.total_steps * mesh_ratio
    if not 0 <= fine_index <= n_fine:
        raise IndexError(f"fine index {fine_index} outside [0, {n_fine}]")
    return solution.state(fine_index // mesh_ratio)


def eval_interpolant(
    solution: PathSolution,
    fine_index: int,
    mesh_ratio: int,
    grid: BrownianGrid,
) -> np.ndarray:
    """Interpolant at fine node `fine_index`, driven by the fine grid's path.

    Within step k the value is D(piecewise at t - delay) + X_k - D(X_{k-m})
    plus the frozen drift times the elapsed fraction of the step plus the
    frozen diffusion times the Brownian displacement since the step start.
    The delayed piecewise value over the whole step IS the stored node
    X_{k-m}, so the two neutral-map terms cancel identically and are not
    evaluated numerically; at the nodes the stored state is returned exactly
    (the interpolant is the right-continuous version, jumping with the
    delayed piecewise argument).
    """
    n_fine = solution.mesh.total_steps * mesh_ratio
    if not 0 <= fine_index <= n_fine:
        raise IndexError(f"fine index {fine_index} outside [0, {n_fine}]")
    if grid.mesh.total_steps != n_fine:
        raise ValueError("grid is not the fine mesh of this solution")
    k = fine_index // mesh_ratio
    if fine_index == k * mesh_ratio:
        return solution.state(k).copy()
    frac = (fine_index - k * mesh_ratio) * grid.mesh.dt
    db = grid.value_at(fine_index) - grid.value_at(k * mesh_ratio)
    return (
        solution.state(k)
        + solution.drift_values[k] * frac
        + solution.diffusion_values[k] @ db
    )


def _fine_ratio(solution: PathSolution, grid: BrownianGrid) -> int:
    n_coarse = solution.mesh.total_steps
    n_fine = grid.mesh.total_steps
    if n_fine % n_coarse:
        raise ValueError(f"fine mesh ({n_fine} steps) does not refine {n_coarse} steps")
    ratio = n_fine // n_coarse
    if grid.mesh.steps_per_delay != solution.mesh.steps_per_delay * ratio:
        raise ValueError("fine and coarse meshes disagree about the delay")
    return ratio


def interpolant_on_fine_mesh(solution: PathSolution, grid: BrownianGrid) -> np.ndarray:
    """Interpolant at every fine node at once, shape (fine_steps+1, dim_x).

    Same values as eval_interpolant node by node; the elapsed fraction is
    built from integer offsets so it vanishes exactly at the coarse nodes.
    """
    ratio = _fine_ratio(solution, grid)
    n_coarse = solution.mesh.total_steps
    m = solution.mesh.steps_per_delay
    j = np.arange(grid.mesh.total_steps + 1)
    k_idx = j // ratio
    step_idx = np.minimum(k_idx, n_coarse - 1)  # only exact nodes reach k_idx == n_coarse
    frac = ((j - k_idx * ratio) * grid.mesh.dt)[:, None]
    values = grid.values()
    db = values - values[k_idx * ratio]
    out = (
        solution.states[m + k_idx]
        + solution.drift_values[step_idx] * frac
        + np.einsum("jdn,jn->jd", solution.diffusion_values[step_idx], db)
    )
    return out


def piecewise_on_fine_mesh(solution: PathSolution, grid: BrownianGrid) -> np.ndarray:
    """Piecewise-constant version at every fine node, shape (fine_steps+1, dim_x)."""
    ratio = _fine_ratio(solution, grid)
    m = solution.mesh.steps_per_delay
    j = np.arange(grid.mesh.total_steps + 1)
    return solution.states[m + j // ratio]
