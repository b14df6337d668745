"""Radial coefficient truncation and step-size-indexed truncation levels.

Outside the ball max(|x|, |y|) <= h both arguments are pulled back onto the
ball and the coefficient value is scaled back up by the same ratio, which
keeps the truncated coefficients globally Lipschitz (with constant 5 times
the radius-h local constant) while leaving them untouched inside the ball.

A policy maps step size to truncation level h(Delta). Each built-in policy
also carries a `rate_factor` decay functional used by the admissibility
checks; see the checker's docstring for how the two built-in constructions
define it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial
from typing import Callable

import numpy as np

from .model import (
    Condition,
    ConditionProbeReport,
    NSDDEProblem,
    _norm,
    _reduce_report,
)


class PolicyDomainError(ValueError):
    """Step size outside the domain where the truncation level is defined."""


class BracketError(RuntimeError):
    """Monotone bisection could not bracket the root."""


def truncate(coeff: Callable, h_value: float, x: np.ndarray, y: np.ndarray):
    """Radially truncated coefficient value at (x, y) for level h_value.

    With s = max(|x|, |y|) (Euclidean norms per argument): inside the ball
    (s <= h) the coefficient is returned unchanged; outside, both arguments
    are scaled onto the ball and the value is scaled back by s/h. s = 0 falls
    in the inside branch.
    """
    if h_value <= 0:
        raise ValueError(f"h_value must be positive, got {h_value}")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    s = max(_norm(x), _norm(y))
    if s <= h_value:
        return np.asarray(coeff(x, y), dtype=float)
    scale = h_value / s
    return (s / h_value) * np.asarray(coeff(scale * x, scale * y), dtype=float)


@dataclass(frozen=True)
class TruncatedCoefficients:
    """Drift/diffusion of a problem frozen at one truncation level."""

    base: NSDDEProblem
    h_value: float
    f_trunc: Callable[[np.ndarray, np.ndarray], np.ndarray]
    g_trunc: Callable[[np.ndarray, np.ndarray], np.ndarray]


def truncated_coefficients(problem: NSDDEProblem, h_value: float) -> TruncatedCoefficients:
    return TruncatedCoefficients(
        base=problem,
        h_value=h_value,
        f_trunc=partial(truncate, problem.drift, h_value),
        g_trunc=partial(truncate, problem.diffusion, h_value),
    )


@dataclass(frozen=True)
class TruncationPolicy:
    """Step-size-to-truncation-level schedule.

    `h` must be strictly decreasing and blow up as the step shrinks;
    `delta_star` is the advertised upper endpoint of the step range on which
    h >= 1 and the decay factor stays <= 1. `rate_factor` is the decay
    functional driving the admissibility bounds; when absent the checker
    falls back to the generic fourth-power form.
    """

    h: Callable[[float], float]
    delta_star: float
    label: str
    epsilon: float | None = None
    rate_factor: Callable[[float], float] | None = None

    def level(self, delta: float) -> float:
        """h(delta); raises PolicyDomainError outside the policy's domain."""
        return float(self.h(delta))

    def valid_at(self, delta: float) -> bool:
        try:
            self.level(delta)
            return True
        except PolicyDomainError:
            return False


# --- built-in level schedules ---------------------------------------------

def h_example2(delta: float, epsilon: float) -> float:
    """Closed-form level ((delta^-eps - 4)/5)^{1/4}; needs delta < 4^{-1/eps}."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    if delta <= 0:
        raise PolicyDomainError(f"step size must be positive, got {delta}")
    radicand = (delta**-epsilon - 4.0) / 5.0
    if radicand <= 0.0:
        raise PolicyDomainError(
            f"step size {delta} >= 4^(-1/epsilon) = {4.0 ** (-1.0 / epsilon):.6g}; "
            "closed-form level undefined"
        )
    return radicand**0.25


def _example1_lipschitz(radius: float) -> float:
    # kept in sync with model.example1's declared constant
    return 3.0 * (1.0 + radius + radius * radius) * math.exp(3.0 * radius)


def _inverse_decay_value(x: float, epsilon: float, lipschitz: Callable[[float], float]) -> float:
    return x ** (1.0 - epsilon) * lipschitz(x) ** 4


def h_example1(
    delta: float,
    epsilon: float,
    lipschitz: Callable[[float], float] | None = None,
) -> float:
    """Inverse-constructed level: the unique x >= 1 with x^{1-eps} L_x^4 delta = 1.

    Solved by monotone bisection to relative tolerance 1e-12, bracket [1, 2]
    with the upper end doubled until it straddles the root (at most 200
    doublings). The map x -> x^{1-eps} L_x^4 is strictly increasing, so the
    level is strictly decreasing in the step size.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    if delta <= 0:
        raise PolicyDomainError(f"step size must be positive, got {delta}")
    ell = lipschitz if lipschitz is not None else _example1_lipschitz
    target = 1.0 / delta
    if _inverse_decay_value(1.0, epsilon, ell) >= target:
        raise PolicyDomainError(
            f"step size {delta} >= 1/L_1^4 = {1.0 / _inverse_decay_value(1.0, epsilon, ell):.6g}; "
            "inverse level would drop below 1"
        )
    lo, hi = 1.0, 2.0
    doublings = 0
    while _inverse_decay_value(hi, epsilon, ell) < target:
        lo, hi = hi, 2.0 * hi
        doublings += 1
        if doublings > 200:
            raise BracketError(f"no bracket after 200 doublings (delta={delta})")
    while (hi - lo) > 1e-12 * hi:
        mid = 0.5 * (lo + hi)
        if _inverse_decay_value(mid, epsilon, ell) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _ex2_rate_factor(delta: float, epsilon: float) -> float:
    # the closed-form level is built so that (5 h^4 + 4) * delta collapses to
    # this power of the step size exactly
    return delta ** (1.0 - epsilon)


def _ex1_rate_factor(delta: float, epsilon: float) -> float:
    return _example1_lipschitz(h_example1(delta, epsilon)) ** 4 * delta


_DEFAULT_EPSILON = {"ex1-inverse": 0.5, "ex2-closed-form": 0.9}


def policy_names() -> list[str]:
    return sorted(_DEFAULT_EPSILON)


def _dyadic_delta_star(
    h_func: Callable[[float], float],
    rate: Callable[[float], float],
    max_halvings: int = 200,
) -> float:
    """Largest dyadic step 2^-k with the level defined, >= 1, and decay <= 1."""
    for k in range(0, max_halvings + 1):
        delta = 2.0**-k
        try:
            if h_func(delta) >= 1.0 and rate(delta) <= 1.0:
                return delta
        except PolicyDomainError:
            continue
    raise PolicyDomainError("no admissible dyadic step size found")


def make_policy(name: str, epsilon: float | None = None) -> TruncationPolicy:
    """Build a built-in policy ('ex1-inverse' or 'ex2-closed-form') by name."""
    if name not in _DEFAULT_EPSILON:
        raise KeyError(f"unknown policy {name!r}; available: {', '.join(policy_names())}")
    eps = _DEFAULT_EPSILON[name] if epsilon is None else float(epsilon)
    if not 0.0 < eps < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {eps}")
    if name == "ex2-closed-form":
        h = partial(h_example2, epsilon=eps)
        rate = partial(_ex2_rate_factor, epsilon=eps)
    else:
        h = partial(h_example1, epsilon=eps)
        rate = partial(_ex1_rate_factor, epsilon=eps)
    return TruncationPolicy(
        h=h,
        delta_star=_dyadic_delta_star(h, rate),
        label=name,
        epsilon=eps,
        rate_factor=rate,
    )


# --- admissibility ----------------------------------------------------------

@dataclass(frozen=True)
class AdmissibilityRow:
    delta: float
    h_value: float
    rate_factor: float
    threshold: float
    rate_condition_ok: bool
    h_at_least_one: bool


@dataclass(frozen=True)
class AdmissibilityReport:
    """Per-step-size admissibility table plus the asymptotic gate verdict.

    The rate condition compares the level against rate_factor^(-q/(2(p-q)));
    it is required to hold only for sufficiently small steps, so the gate is
    its status (and h >= 1) at the smallest step checked, together with the
    decay factor decreasing as the step shrinks. Larger steps that fail stay
    visible in the rows.
    """

    rows: tuple[AdmissibilityRow, ...]
    rate_decreasing: bool
    ok_at_smallest: bool

    @property
    def passes(self) -> bool:
        return self.rate_decreasing and self.ok_at_smallest

    def to_dict(self) -> dict:
        return {
            "rows": [vars(r) for r in self.rows],
            "rate_decreasing": self.rate_decreasing,
            "ok_at_smallest": self.ok_at_smallest,
            "passes": self.passes,
        }


def check_admissibility(
    policy: TruncationPolicy,
    lipschitz: Callable[[float], float],
    p: float,
    q: float,
    deltas: list[float],
) -> AdmissibilityReport:
    """Evaluate the decay factor and the level-vs-rate condition per step size.

    The decay factor is `policy.rate_factor` when the policy declares one
    (the built-in schedules do, matching their defining identities),
    otherwise lipschitz(h(delta))^4 * delta. The rate condition requires
    h(delta) >= rate_factor(delta)^(-q/(2(p-q))).
    """
    if not 2.0 < q < p:
        raise ValueError(f"need 2 < q < p, got q={q}, p={p}")
    if not deltas:
        raise ValueError("deltas must be nonempty")
    rate = policy.rate_factor
    if rate is None:
        def rate(delta, _pol=policy, _ell=lipschitz):
            return _ell(_pol.level(delta)) ** 4 * delta
    exponent = -q / (2.0 * (p - q))
    rows = []
    for delta in sorted(deltas, reverse=True):
        h_value = policy.level(delta)
        factor = float(rate(delta))
        threshold = factor**exponent
        rows.append(
            AdmissibilityRow(
                delta=delta,
                h_value=h_value,
                rate_factor=factor,
                threshold=threshold,
                rate_condition_ok=h_value >= threshold,
                h_at_least_one=h_value >= 1.0,
            )
        )
    factors = [r.rate_factor for r in rows]
    decreasing = all(b <= a for a, b in zip(factors, factors[1:]))
    smallest = rows[-1]
    return AdmissibilityReport(
        rows=tuple(rows),
        rate_decreasing=decreasing,
        ok_at_smallest=smallest.rate_condition_ok and smallest.h_at_least_one,
    )


# --- probes of the truncated coefficients -----------------------------------

def _heavy_tailed_point(rng: np.random.Generator, h_value: float, dim: int) -> np.ndarray:
    # half uniform inside the ball, half log-uniform radius up to 10h so the
    # outside branch is exercised
    if rng.random() < 0.5:
        return rng.uniform(-h_value, h_value, dim)
    radius = math.exp(rng.uniform(math.log(1e-2 * h_value), math.log(10.0 * h_value)))
    direction = rng.normal(size=dim)
    scale = _norm(direction)
    if scale == 0.0:
        direction = np.ones(dim)
        scale = math.sqrt(dim)
    return (radius / scale) * direction


def probe_trunc_lipschitz(
    problem: NSDDEProblem,
    policy: TruncationPolicy,
    delta: float,
    samples: int,
    rng_seed: int,
) -> ConditionProbeReport:
    """Check the global Lipschitz bound 5 L(h) (|x-xb| + |y-yb|) on truncated f, g."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    h_value = policy.level(delta)
    bound = 5.0 * problem.lipschitz_of_radius(h_value)
    tc = truncated_coefficients(problem, h_value)
    rng = np.random.default_rng(rng_seed)
    d = problem.dim_x
    margins = np.empty(samples)
    witnesses: list[tuple] = []
    for i in range(samples):
        x = _heavy_tailed_point(rng, h_value, d)
        y = _heavy_tailed_point(rng, h_value, d)
        if i % 2:
            xb = x + rng.normal(0.0, 0.1 * (1.0 + _norm(x)), d)
            yb = y + rng.normal(0.0, 0.1 * (1.0 + _norm(y)), d)
        else:
            xb = _heavy_tailed_point(rng, h_value, d)
            yb = _heavy_tailed_point(rng, h_value, d)
        df = _norm(tc.f_trunc(x, y) - tc.f_trunc(xb, yb))
        dg = _norm(tc.g_trunc(x, y) - tc.g_trunc(xb, yb))
        margins[i] = bound * (_norm(x - xb) + _norm(y - yb)) - max(df, dg)
        witnesses.append((x, y, xb, yb))
    return _reduce_report(Condition.TRUNC_LIPSCHITZ, margins, witnesses)


def trunc_khasminskii_margin(
    problem: NSDDEProblem, tc: TruncatedCoefficients, x: np.ndarray, y: np.ndarray
) -> float:
    fv = tc.f_trunc(x, y)
    gv = tc.g_trunc(x, y)
    shifted = x - np.asarray(problem.neutral(y), dtype=float)
    lhs = 2.0 * float(shifted @ fv) + (problem.khasminskii_p - 1.0) * float(np.sum(gv * gv))
    return 2.0 * problem.khasminskii_K * (1.0 + float(x @ x) + float(y @ y)) - lhs


def probe_trunc_khasminskii(
    problem: NSDDEProblem,
    policy: TruncationPolicy,
    delta: float,
    samples: int,
    rng_seed: int,
) -> ConditionProbeReport:
    """Check the doubled one-sided bound on the truncated coefficients.

    Requires h(delta) >= 1 (hypothesis of the bound); samples land both
    inside and outside the truncation ball.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    h_value = policy.level(delta)
    if h_value < 1.0:
        raise ValueError(
            f"truncation level {h_value:.6g} < 1 at delta={delta}; the doubled "
            "one-sided bound requires h >= 1"
        )
    tc = truncated_coefficients(problem, h_value)
    rng = np.random.default_rng(rng_seed)
    d = problem.dim_x
    margins = np.empty(samples)
    witnesses: list[tuple] = []
    for i in range(samples):
        x = _heavy_tailed_point(rng, h_value, d)
        y = _heavy_tailed_point(rng, h_value, d)
        margins[i] = trunc_khasminskii_margin(problem, tc, x, y)
        witnesses.append((x, y))
    return _reduce_report(Condition.TRUNC_KHASMINSKII, margins, witnesses)
