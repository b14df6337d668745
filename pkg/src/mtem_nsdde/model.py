"""Neutral stochastic delay problems and numerical probes of their structure.

A problem bundles the coefficient triple (drift f(x,y), diffusion g(x,y),
neutral map D(y)), the constant delay, the initial segment, and the constants
it declares for its structural conditions: a contractivity constant for D, a
radius-indexed Lipschitz bound for f and g, a one-sided (Khasminskii-type)
growth bound coupling drift, neutral map and diffusion, and optionally a
polynomial growth bound on the diffusion alone.

Probes draw random points and report the worst slack of a declared condition;
a violated condition is a report, not an exception. Matrix norms are
Frobenius throughout.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import partial
from typing import Callable

import numpy as np

Vector = np.ndarray
Matrix = np.ndarray


class Condition(enum.Enum):
    """Which structural condition a probe examined."""

    LOCAL_LIPSCHITZ = "local_lipschitz"
    CONTRACTIVITY = "contractivity"
    KHASMINSKII = "khasminskii"
    DIFFUSION_GROWTH = "diffusion_growth"
    INITIAL_MODULUS = "initial_modulus"
    TRUNC_LIPSCHITZ = "trunc_lipschitz"
    TRUNC_KHASMINSKII = "trunc_khasminskii"


class GrowthNotDeclaredError(ValueError):
    """Probe requires the diffusion growth constants, which the problem lacks."""


@dataclass(frozen=True)
class ConditionProbeReport:
    """Outcome of sampling one condition: worst slack and where it occurred.

    `worst_margin` is the most negative slack seen (negative means violated);
    `witness` holds the sample achieving it, in a form the corresponding
    margin function re-accepts, so every report can be re-checked directly
    against the coefficient functions.
    """

    condition: Condition
    samples_tested: int
    violations: int
    worst_margin: float
    witness: tuple

    def __post_init__(self) -> None:
        if (self.violations == 0) != (self.worst_margin >= 0.0):
            raise ValueError(
                f"inconsistent report: violations={self.violations} "
                f"worst_margin={self.worst_margin}"
            )

    def to_dict(self) -> dict:
        return {
            "condition": self.condition.value,
            "samples_tested": self.samples_tested,
            "violations": self.violations,
            "worst_margin": self.worst_margin,
            "witness": [np.asarray(w).tolist() for w in self.witness],
        }


@dataclass(frozen=True)
class NSDDEProblem:
    """A neutral stochastic delay problem with declared structural constants.

    Coefficients map (d,)-vectors to a (d,) vector (drift, neutral) or a
    (d, n) matrix (diffusion). `initial_path` maps theta in [-delay, 0] to the
    starting segment. Instances are immutable and safe to share across
    workers.
    """

    dim_x: int
    dim_w: int
    delay: float
    drift: Callable[[Vector, Vector], Vector]
    diffusion: Callable[[Vector, Vector], Matrix]
    neutral: Callable[[Vector], Vector]
    initial_path: Callable[[float], Vector]
    contractivity_u: float
    lipschitz_of_radius: Callable[[float], float]
    khasminskii_p: float
    khasminskii_K: float
    growth_r: float | None = None
    growth_Kbar: float | None = None
    label: str = ""

    def __post_init__(self) -> None:
        if self.dim_x < 1 or self.dim_w < 1:
            raise ValueError("dimensions must be >= 1")
        if self.delay <= 0:
            raise ValueError(f"delay must be positive, got {self.delay}")
        if not 0.0 < self.contractivity_u < 1.0:
            raise ValueError(f"contractivity_u must lie in (0, 1), got {self.contractivity_u}")
        if self.khasminskii_p <= 2.0:
            raise ValueError(f"khasminskii_p must exceed 2, got {self.khasminskii_p}")
        if self.khasminskii_K <= 0.0:
            raise ValueError(f"khasminskii_K must be positive, got {self.khasminskii_K}")
        if (self.growth_r is None) != (self.growth_Kbar is None):
            raise ValueError("growth_r and growth_Kbar must be declared together")
        if self.growth_r is not None:
            if not 2.0 <= self.growth_r < self.khasminskii_p:
                raise ValueError(
                    f"growth_r must lie in [2, khasminskii_p), got {self.growth_r}"
                )
            if self.growth_Kbar <= 0.0:
                raise ValueError(f"growth_Kbar must be positive, got {self.growth_Kbar}")
        radii = [0.5, 1.0, 2.0, 4.0, 8.0]
        values = [self.lipschitz_of_radius(r) for r in radii]
        if any(v <= 0 for v in values):
            raise ValueError("lipschitz_of_radius must be positive")
        if any(b < a for a, b in zip(values, values[1:])):
            raise ValueError("lipschitz_of_radius must be nondecreasing in the radius")


def _norm(v: np.ndarray) -> float:
    # Euclidean for vectors, Frobenius for matrices
    return math.sqrt(float(np.sum(np.asarray(v) * np.asarray(v))))


# --- built-in scalar problems -------------------------------------------------

def _half_sine(y):
    return 0.5 * np.sin(y)


def _example1_drift(x, y):
    return 2.0 * x - x * np.exp(3.0 * x) + 0.5 * np.sin(y)


def _example1_diffusion(x, y):
    return np.sqrt(0.2 * x * x * np.exp(3.0 * x) + y * y + 1.0).reshape(1, 1)


def _example1_lipschitz(radius):
    # slope of x*exp(3x) on [-R, R] is (1+3R)e^{3R}; 3(1+R+R^2)e^{3R} dominates
    # it together with the diffusion's partials
    return 3.0 * (1.0 + radius + radius * radius) * math.exp(3.0 * radius)


def _example2_drift(x, y):
    return 2.0 * x - x**5 + 0.5 * np.sin(y)


def _example2_diffusion(x, y):
    return (x * x * x * y / (2.0 * (1.0 + y * y))).reshape(1, 1)


def _example2_lipschitz(radius):
    return 5.0 * radius**4 + 4.0


def _constant_path(theta, value):
    return np.array([value], dtype=float)


def example1(x0: float = 1.0) -> NSDDEProblem:
    """Scalar problem with exponentially growing drift and diffusion.

    f(x,y) = 2x - x e^{3x} + sin(y)/2, g(x,y) = sqrt(x^2 e^{3x}/5 + y^2 + 1),
    D(y) = sin(y)/2, delay 1. Neither coefficient grows polynomially, so no
    diffusion growth constants are declared. Initial segment is constant x0.
    """
    return NSDDEProblem(
        dim_x=1,
        dim_w=1,
        delay=1.0,
        drift=_example1_drift,
        diffusion=_example1_diffusion,
        neutral=_half_sine,
        initial_path=partial(_constant_path, value=x0),
        contractivity_u=0.5,
        lipschitz_of_radius=_example1_lipschitz,
        khasminskii_p=6.0,
        khasminskii_K=7.0 + math.e**2,
        label="example1",
    )


def example2(x0: float = 1.0) -> NSDDEProblem:
    """Scalar problem with quintic drift and bounded-in-y cubic diffusion.

    f(x,y) = 2x - x^5 + sin(y)/2, g(x,y) = x^3 y / (2(1+y^2)), D(y) = sin(y)/2,
    delay 1. Declares diffusion growth exponent 3 with constant 1; note that
    declaration is honest only for |x| below ~2.6 (|g|^2 reaches x^6/16), and
    the growth probe will report violations beyond that radius.
    """
    return NSDDEProblem(
        dim_x=1,
        dim_w=1,
        delay=1.0,
        drift=_example2_drift,
        diffusion=_example2_diffusion,
        neutral=_half_sine,
        initial_path=partial(_constant_path, value=x0),
        contractivity_u=0.5,
        lipschitz_of_radius=_example2_lipschitz,
        khasminskii_p=6.0,
        khasminskii_K=5.5,
        growth_r=3.0,
        growth_Kbar=1.0,
        label="example2",
    )


_REGISTRY: dict[str, Callable[..., NSDDEProblem]] = {
    "example1": example1,
    "example2": example2,
}


def problem_names() -> list[str]:
    return sorted(_REGISTRY)


def get_problem(name: str, x0: float = 1.0) -> NSDDEProblem:
    """Look up a built-in problem by registry name."""
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise KeyError(
            f"unknown problem {name!r}; available: {', '.join(problem_names())}"
        ) from None
    return factory(x0=x0)


# --- margins ------------------------------------------------------------------
#
# Each margin is (declared bound) - (measured quantity); negative means the
# declared condition failed at that sample. Kept as standalone functions so a
# report's witness can be re-evaluated directly.

def contractivity_margin(problem: NSDDEProblem, x: Vector, y: Vector) -> float:
    d = problem.neutral
    return problem.contractivity_u * _norm(x - y) - _norm(np.asarray(d(x)) - np.asarray(d(y)))


def diffusion_norm_sq(problem: NSDDEProblem, x: Vector, y: Vector) -> float:
    """Squared Frobenius norm of the diffusion at (x, y)."""
    g = np.asarray(problem.diffusion(x, y), dtype=float)
    return float(np.sum(g * g))


def khasminskii_margin(problem: NSDDEProblem, x: Vector, y: Vector, a: float) -> float:
    f = np.asarray(problem.drift(x, y), dtype=float)
    gsq = diffusion_norm_sq(problem, x, y)
    shifted = x - a * np.asarray(problem.neutral(y / a), dtype=float)
    lhs = 2.0 * float(shifted @ f) + (problem.khasminskii_p - 1.0) * gsq
    bound = problem.khasminskii_K * (1.0 + float(x @ x) + float(y @ y))
    return bound - lhs


def growth_margin(problem: NSDDEProblem, x: Vector, y: Vector) -> float:
    if problem.growth_r is None:
        raise GrowthNotDeclaredError(
            f"problem {problem.label or '<anonymous>'} declares no diffusion growth constants"
        )
    gsq = diffusion_norm_sq(problem, x, y)
    bound = problem.growth_Kbar * (
        1.0 + _norm(x) ** problem.growth_r + _norm(y) ** problem.growth_r
    )
    return bound - gsq


def local_lipschitz_margin(
    problem: NSDDEProblem,
    radius: float,
    x: Vector,
    y: Vector,
    xb: Vector,
    yb: Vector,
) -> float:
    ell = problem.lipschitz_of_radius(radius)
    df = _norm(np.asarray(problem.drift(x, y)) - np.asarray(problem.drift(xb, yb)))
    dg = _norm(np.asarray(problem.diffusion(x, y)) - np.asarray(problem.diffusion(xb, yb)))
    return ell * (_norm(x - xb) + _norm(y - yb)) - max(df, dg)


# --- probes -------------------------------------------------------------------

def _reduce_report(
    condition: Condition, margins: np.ndarray, witnesses: list[tuple]
) -> ConditionProbeReport:
    # argmin takes the first minimiser, i.e. the (margin, sample index)
    # lexicographic minimum; the report is then independent of evaluation order
    worst = int(np.argmin(margins))
    return ConditionProbeReport(
        condition=condition,
        samples_tested=len(margins),
        violations=int(np.count_nonzero(margins < 0.0)),
        worst_margin=float(margins[worst]),
        witness=witnesses[worst],
    )


def _uniform_box(rng: np.random.Generator, radius: float, dim: int) -> Vector:
    return rng.uniform(-radius, radius, dim)


def probe_contractivity(
    problem: NSDDEProblem,
    domain_radius: float,
    samples: int,
    rng_seed: int,
) -> ConditionProbeReport:
    """Check |D(x)-D(y)| <= u|x-y| on random pairs in the box of given radius."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(rng_seed)
    margins = np.empty(samples)
    witnesses: list[tuple] = []
    for i in range(samples):
        x = _uniform_box(rng, domain_radius, problem.dim_x)
        y = _uniform_box(rng, domain_radius, problem.dim_x)
        margins[i] = contractivity_margin(problem, x, y)
        witnesses.append((x, y))
    return _reduce_report(Condition.CONTRACTIVITY, margins, witnesses)


def probe_khasminskii(
    problem: NSDDEProblem,
    domain_radius: float,
    a_grid: list[float],
    samples: int,
    rng_seed: int,
) -> ConditionProbeReport:
    """Check the declared one-sided growth bound over (x, y) pairs and the a-grid."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if not a_grid or any(not 0.0 < a <= 1.0 for a in a_grid):
        raise ValueError(f"a_grid values must lie in (0, 1], got {a_grid}")
    rng = np.random.default_rng(rng_seed)
    margins = np.empty(samples * len(a_grid))
    witnesses: list[tuple] = []
    pos = 0
    for _ in range(samples):
        x = _uniform_box(rng, domain_radius, problem.dim_x)
        y = _uniform_box(rng, domain_radius, problem.dim_x)
        for a in a_grid:
            margins[pos] = khasminskii_margin(problem, x, y, a)
            witnesses.append((x, y, a))
            pos += 1
    return _reduce_report(Condition.KHASMINSKII, margins, witnesses)


def probe_growth_g(
    problem: NSDDEProblem,
    domain_radius: float,
    samples: int,
    rng_seed: int,
) -> ConditionProbeReport:
    """Check |g(x,y)|^2 against the declared polynomial growth bound."""
    if problem.growth_r is None:
        raise GrowthNotDeclaredError(
            f"problem {problem.label or '<anonymous>'} declares no diffusion growth constants"
        )
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(rng_seed)
    margins = np.empty(samples)
    witnesses: list[tuple] = []
    for i in range(samples):
        x = _uniform_box(rng, domain_radius, problem.dim_x)
        y = _uniform_box(rng, domain_radius, problem.dim_x)
        margins[i] = growth_margin(problem, x, y)
        witnesses.append((x, y))
    return _reduce_report(Condition.DIFFUSION_GROWTH, margins, witnesses)


def probe_initial_modulus(
    problem: NSDDEProblem,
    delta: float,
    q: float,
    khat: float,
    samples: int,
    rng_seed: int = 0,
) -> ConditionProbeReport:
    """Check the q-th modulus of the initial segment against khat * delta^{q/2}.

    For each step [k*delta, (k+1)*delta) of the initial interval the segment's
    deviation from its left-node value is evaluated on a sub-grid (endpoints
    included) of roughly `samples` points overall. The initial segment is a
    deterministic callable, so rng_seed is accepted only for interface
    uniformity.
    """
    m = round(problem.delay / delta)
    if m < 1 or abs(m * delta - problem.delay) > 1e-12 * max(1.0, problem.delay):
        raise ValueError(f"delay {problem.delay} is not a whole multiple of delta {delta}")
    if not 2.0 < q < problem.khasminskii_p:
        raise ValueError(f"q must lie in (2, {problem.khasminskii_p}), got {q}")
    if khat <= 0:
        raise ValueError(f"khat must be positive, got {khat}")
    sub = max(3, samples // m)
    bound = khat * delta ** (q / 2.0)
    margins = np.empty(m * sub)
    witnesses: list[tuple] = []
    pos = 0
    xi = problem.initial_path
    for k in range(-m, 0):
        left = -problem.delay if k == -m else k * delta
        right = (k + 1) * delta
        anchor = np.asarray(xi(left), dtype=float)
        for s in np.linspace(left, right, sub):
            dev = _norm(np.asarray(xi(float(s)), dtype=float) - anchor) ** q
            margins[pos] = bound - dev
            witnesses.append((k, float(s)))
            pos += 1
    return _reduce_report(Condition.INITIAL_MODULUS, margins, witnesses)


def probe_local_lipschitz(
    problem: NSDDEProblem,
    radius: float,
    samples: int,
    rng_seed: int,
    lipschitz: Callable[[float], float] | None = None,
) -> ConditionProbeReport:
    """Check the declared radius-R Lipschitz bound on random point pairs.

    Pairs mix independent draws with small perturbations of one draw, so both
    far-apart and near-coincident difference quotients are exercised.
    `lipschitz` overrides the problem's declared constant (used in tests to
    show that an under-declared constant is caught).
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    ell = lipschitz if lipschitz is not None else problem.lipschitz_of_radius
    value = ell(radius)
    rng = np.random.default_rng(rng_seed)
    d = problem.dim_x
    margins = np.empty(samples)
    witnesses: list[tuple] = []
    for i in range(samples):
        x = _uniform_box(rng, radius, d)
        y = _uniform_box(rng, radius, d)
        if i % 2:
            xb = np.clip(x + rng.normal(0.0, 0.05 * radius, d), -radius, radius)
            yb = np.clip(y + rng.normal(0.0, 0.05 * radius, d), -radius, radius)
        else:
            xb = _uniform_box(rng, radius, d)
            yb = _uniform_box(rng, radius, d)
        df = _norm(np.asarray(problem.drift(x, y)) - np.asarray(problem.drift(xb, yb)))
        dg = _norm(np.asarray(problem.diffusion(x, y)) - np.asarray(problem.diffusion(xb, yb)))
        margins[i] = value * (_norm(x - xb) + _norm(y - yb)) - max(df, dg)
        witnesses.append((x, y, xb, yb))
    return _reduce_report(Condition.LOCAL_LIPSCHITZ, margins, witnesses)
