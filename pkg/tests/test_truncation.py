"""Truncation mapping, level schedules, admissibility, truncated-bound probes."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtem_nsdde.model import example1, example2
from mtem_nsdde.truncation import (
    AdmissibilityReport,
    PolicyDomainError,
    TruncationPolicy,
    check_admissibility,
    h_example1,
    h_example2,
    make_policy,
    policy_names,
    probe_trunc_khasminskii,
    probe_trunc_lipschitz,
    truncate,
    truncated_coefficients,
    trunc_khasminskii_margin,
)

V = lambda *xs: np.array(xs, dtype=float)


def cubic(x, y):
    return x**3


def linear(x, y):
    return x


class TestTruncate:
    def test_outside_ball_cubic(self):
        # s=4, h=2: value is (4/2) * f(2, 0) = 2 * 8
        out = truncate(cubic, 2.0, V(4.0), V(0.0))
        assert out[0] == pytest.approx(16.0, rel=1e-15)

    def test_inside_ball_unchanged(self):
        x, y = V(0.3, 0.1), V(-0.2, 0.05)
        out = truncate(lambda a, b: a * b, 1.0, x, y)
        assert np.array_equal(out, x * y)

    def test_degree_one_homogeneous_fixed_point(self):
        for xv in (0.5, 3.0, 250.0):
            out = truncate(linear, 1.0, V(xv), V(0.0))
            assert out[0] == pytest.approx(xv, rel=1e-14)

    def test_zero_point_takes_inside_branch(self):
        out = truncate(cubic, 1.0, V(0.0), V(0.0))
        assert out[0] == 0.0

    def test_gate_uses_max_of_argument_norms(self):
        # |y| alone pushes the pair outside the ball
        big_y = truncate(cubic, 1.0, V(0.5), V(2.0))
        assert big_y[0] != pytest.approx(0.125)

    def test_nonpositive_level_rejected(self):
        with pytest.raises(ValueError):
            truncate(cubic, 0.0, V(1.0), V(0.0))

    @settings(max_examples=50, deadline=None)
    @given(
        x=st.floats(-0.9, 0.9),
        y=st.floats(-0.9, 0.9),
        h1=st.floats(1.0, 3.0),
        extra=st.floats(0.0, 5.0),
    )
    def test_idempotent_inside_ball(self, x, y, h1, extra):
        h2 = h1 + extra
        first = truncate(cubic, h1, V(x), V(y))
        second = truncate(cubic, h2, V(x), V(y))
        assert np.array_equal(first, second)
        assert np.array_equal(first, cubic(V(x), V(y)))

    def test_branch_continuity_at_boundary(self):
        # points straddling |x| = h at distance eps differ by O(eps) with
        # the global-Lipschitz constant of the truncated coefficient
        p = example2()
        h = 1.5
        ell5 = 5.0 * p.lipschitz_of_radius(h)
        for eps in (1e-6, 1e-9):
            lo = truncate(p.drift, h, V(h - eps), V(0.5))
            hi = truncate(p.drift, h, V(h + eps), V(0.5))
            assert abs(hi[0] - lo[0]) <= ell5 * 2 * eps + 1e-12


class TestTruncatedCoefficients:
    def test_matches_plain_inside(self):
        p = example2()
        tc = truncated_coefficients(p, 2.0)
        x, y = V(0.5), V(-1.0)
        assert np.array_equal(tc.f_trunc(x, y), p.drift(x, y))
        assert np.array_equal(tc.g_trunc(x, y), p.diffusion(x, y))

    def test_matrix_shape_preserved_outside(self):
        p = example2()
        tc = truncated_coefficients(p, 1.0)
        out = tc.g_trunc(V(3.0), V(0.0))
        assert out.shape == (1, 1)


class TestClosedFormLevel:
    def test_frozen_value(self):
        # direct evaluation of ((10^3.6 - 4)/5)^(1/4)
        assert h_example2(1e-4, 0.9) == pytest.approx(5.310658244038947, rel=1e-12)

    def test_domain_error(self):
        eps = 0.9
        edge = 4.0 ** (-1.0 / eps)
        with pytest.raises(PolicyDomainError):
            h_example2(edge, eps)
        with pytest.raises(PolicyDomainError):
            h_example2(edge * 1.01, eps)
        assert h_example2(edge * 0.99, eps) > 0

    def test_decay_identity_exact(self):
        # (5 h^4 + 4) * delta collapses to delta^(1-eps) by construction
        eps = 0.9
        for delta in np.logspace(-6, -2, 20):
            h = h_example2(delta, eps)
            lhs = (5.0 * h**4 + 4.0) * delta
            assert lhs == pytest.approx(delta ** (1.0 - eps), rel=1e-9)

    def test_strictly_decreasing(self):
        eps = 0.9
        grid = np.logspace(-8, -2, 25)
        values = [h_example2(d, eps) for d in grid]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_epsilon_validated(self):
        with pytest.raises(ValueError):
            h_example2(1e-4, 1.5)


class TestInverseLevel:
    def test_defining_equation_residual(self):
        eps = 0.5
        ell = lambda x: 3.0 * (1.0 + x + x * x) * math.exp(3.0 * x)
        for delta in np.logspace(-14, -9.1, 20):
            h = h_example1(delta, eps)
            residual = h ** (1.0 - eps) * ell(h) ** 4 * delta - 1.0
            assert abs(residual) <= 1e-9

    def test_strictly_decreasing(self):
        eps = 0.5
        grid = np.logspace(-14, -9.1, 20)
        values = [h_example1(d, eps) for d in grid]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_rate_identity(self):
        # L_h^4 * delta equals h^(eps-1) along the schedule
        eps = 0.5
        ell = lambda x: 3.0 * (1.0 + x + x * x) * math.exp(3.0 * x)
        for delta in np.logspace(-13, -10, 8):
            h = h_example1(delta, eps)
            assert ell(h) ** 4 * delta == pytest.approx(h ** (eps - 1.0), rel=1e-9)

    def test_domain_error_above_unit_level(self):
        eps = 0.5
        ell = lambda x: 3.0 * (1.0 + x + x * x) * math.exp(3.0 * x)
        edge = 1.0 / ell(1.0) ** 4
        with pytest.raises(PolicyDomainError):
            h_example1(edge * 1.01, eps)
        assert h_example1(edge * 0.5, eps) >= 1.0


class TestPolicies:
    def test_names(self):
        assert policy_names() == ["ex1-inverse", "ex2-closed-form"]
        with pytest.raises(KeyError):
            make_policy("nope")

    def test_closed_form_delta_star(self):
        pol = make_policy("ex2-closed-form", 0.9)
        assert pol.delta_star == 0.0625
        assert pol.level(pol.delta_star) >= 1.0
        assert pol.rate_factor(pol.delta_star) <= 1.0
        # one dyadic step coarser must break a constraint
        assert pol.level(2 * pol.delta_star) < 1.0

    def test_inverse_delta_star(self):
        pol = make_policy("ex1-inverse", 0.5)
        assert pol.level(pol.delta_star) >= 1.0
        assert not pol.valid_at(2 * pol.delta_star) or pol.level(2 * pol.delta_star) < 1.0

    def test_level_blows_up_towards_zero(self):
        for name, decades in (("ex2-closed-form", 4), ("ex1-inverse", 4)):
            pol = make_policy(name)
            top = pol.delta_star
            lo, hi = pol.level(top * 10.0**-decades), pol.level(top)
            assert lo > 1.2 * hi  # configured growth factor over the grid

    def test_strictly_decreasing_below_delta_star(self):
        for name in policy_names():
            pol = make_policy(name)
            grid = pol.delta_star * np.logspace(-4, 0, 9)
            values = [pol.level(d) for d in grid]
            assert all(a > b for a, b in zip(values, values[1:]))
            assert all(v >= 1.0 for v in values)

    def test_default_epsilons(self):
        assert make_policy("ex1-inverse").epsilon == 0.5
        assert make_policy("ex2-closed-form").epsilon == 0.9


class TestAdmissibility:
    def grid(self):
        return [1e-2, 1e-3, 1e-4, 1e-5, 1e-6]

    def test_example2_policy_passes_at_09(self):
        pol = make_policy("ex2-closed-form", 0.9)
        rep = check_admissibility(pol, example2().lipschitz_of_radius, 6.0, 4.0, self.grid())
        assert isinstance(rep, AdmissibilityReport)
        assert rep.passes
        assert all(r.rate_condition_ok for r in rep.rows)

    def test_example2_policy_fails_at_05(self):
        pol = make_policy("ex2-closed-form", 0.5)
        rep = check_admissibility(pol, example2().lipschitz_of_radius, 6.0, 4.0, self.grid())
        assert not rep.passes
        smallest = rep.rows[-1]
        assert smallest.delta == 1e-6
        assert not smallest.rate_condition_ok

    def test_example1_policy_passes_on_its_domain(self):
        pol = make_policy("ex1-inverse", 0.5)
        grid = list(pol.delta_star * np.logspace(-3, 0, 5))
        rep = check_admissibility(pol, example1().lipschitz_of_radius, 6.0, 4.0, grid)
        assert rep.passes

    def test_rows_sorted_and_rate_monotone(self):
        pol = make_policy("ex2-closed-form", 0.9)
        rep = check_admissibility(
            pol, example2().lipschitz_of_radius, 6.0, 4.0, [1e-4, 1e-2, 1e-3])
        deltas = [r.delta for r in rep.rows]
        assert deltas == sorted(deltas, reverse=True)
        assert rep.rate_decreasing

    def test_q_range_enforced(self):
        pol = make_policy("ex2-closed-form", 0.9)
        with pytest.raises(ValueError):
            check_admissibility(pol, example2().lipschitz_of_radius, 6.0, 6.5, [1e-3])

    def test_generic_fallback_uses_fourth_power(self):
        # a policy without a declared decay functional gets L(h)^4 * delta
        pol = TruncationPolicy(h=lambda d: d**-0.25, delta_star=1.0, label="power")
        rep = check_admissibility(pol, lambda r: 1.0, 6.0, 4.0, [1e-2, 1e-4, 1e-6])
        for row in rep.rows:
            assert row.rate_factor == pytest.approx(row.delta)


class TestTruncProbes:
    def test_lipschitz_example2_criterion_slice(self):
        pol = make_policy("ex2-closed-form", 0.9)
        rep = probe_trunc_lipschitz(example2(), pol, 1e-3, 10**4, rng_seed=1)
        assert rep.violations == 0

    def test_lipschitz_coincident_pair_margin_zero(self):
        p = example2()
        tc = truncated_coefficients(p, 1.5)
        x, y = V(2.0), V(0.3)
        df = np.linalg.norm(tc.f_trunc(x, y) - tc.f_trunc(x, y))
        assert 5.0 * p.lipschitz_of_radius(1.5) * 0.0 - df == 0.0

    def test_lipschitz_inside_ball_reduces_to_plain_bound(self):
        # inside the ball the truncated coefficients equal the plain ones, so
        # the 5L constant has a factor-5 slack over the declared constant
        p = example2()
        pol = make_policy("ex2-closed-form", 0.9)
        h = pol.level(1e-3)
        tc = truncated_coefficients(p, h)
        rng = np.random.default_rng(0)
        for _ in range(200):
            x, y, xb, yb = (rng.uniform(-h, h, 1) for _ in range(4))
            dist = np.linalg.norm(x - xb) + np.linalg.norm(y - yb)
            df = np.linalg.norm(tc.f_trunc(x, y) - tc.f_trunc(xb, yb))
            assert 5.0 * p.lipschitz_of_radius(h) * dist - df >= (
                4.0 * p.lipschitz_of_radius(h) * dist - 1e-12
            )

    def test_khasminskii_example1_small_step(self):
        pol = make_policy("ex2-closed-form", 0.9)
        rep = probe_trunc_khasminskii(example1(), pol, 1e-3, 10**4, rng_seed=2)
        assert rep.violations == 0

    def test_khasminskii_margin_at_origin(self):
        p = example1()
        tc = truncated_coefficients(p, 2.0)
        margin = trunc_khasminskii_margin(p, tc, V(0.0), V(0.0))
        assert margin == pytest.approx(2.0 * (7.0 + math.e**2) - 5.0, rel=1e-12)

    def test_khasminskii_inside_ball_has_extra_slack(self):
        # inside the ball the plain one-sided bound holds, leaving at least
        # K(1 + |x|^2 + |y|^2) of slack against the doubled constant
        p = example1()
        pol = make_policy("ex2-closed-form", 0.9)
        h = pol.level(1e-2)
        tc = truncated_coefficients(p, h)
        rng = np.random.default_rng(3)
        for _ in range(200):
            x, y = rng.uniform(-h, h, 1), rng.uniform(-h, h, 1)
            margin = trunc_khasminskii_margin(p, tc, x, y)
            assert margin >= p.khasminskii_K - 1e-9

    def test_khasminskii_requires_unit_level(self):
        pol = make_policy("ex2-closed-form", 0.9)
        with pytest.raises(ValueError):
            probe_trunc_khasminskii(example2(), pol, 0.1, 100, rng_seed=0)

    def test_probe_determinism(self):
        pol = make_policy("ex2-closed-form", 0.9)
        a = probe_trunc_lipschitz(example2(), pol, 1e-3, 500, rng_seed=7)
        b = probe_trunc_lipschitz(example2(), pol, 1e-3, 500, rng_seed=7)
        assert a.worst_margin == b.worst_margin
        for wa, wb in zip(a.witness, b.witness):
            assert np.array_equal(wa, wb)
