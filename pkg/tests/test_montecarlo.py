"""Error sweep engine, reductions, order fitting, moment sweeps."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtem_nsdde.model import NSDDEProblem
from mtem_nsdde.montecarlo import (
    ConfigError,
    ErrorRow,
    InsufficientDataError,
    SweepConfig,
    _assert_power_mean,
    _coupled_chunk,
    _moment_chunk,
    coupled_error_sweep,
    error_report_csv,
    error_report_json,
    fit_loglog,
    fit_order,
    kahan_sum,
    moment_report_csv,
    moment_sweep,
    strong_error_at_T,
    strong_error_sup,
    validate_config,
)
from mtem_nsdde.paths import MeshSpec
from mtem_nsdde.truncation import TruncationPolicy, make_policy


def _zero_vec(x, y):
    return np.zeros(1)


def _zero_mat(x, y):
    return np.zeros((1, 1))


def _zero_neutral(y):
    return np.zeros(1)


def _neg_drift(x, y):
    return -x


def _one_path(theta):
    return np.array([1.0])


def make_problem(**overrides):
    base = dict(
        dim_x=1,
        dim_w=1,
        delay=1.0,
        drift=_zero_vec,
        diffusion=_zero_mat,
        neutral=_zero_neutral,
        initial_path=_one_path,
        contractivity_u=0.5,
        lipschitz_of_radius=lambda r: 1.0,
        khasminskii_p=6.0,
        khasminskii_K=1.0,
    )
    base.update(overrides)
    return NSDDEProblem(**base)


def wide_policy():
    return TruncationPolicy(h=lambda d: 4.0 * d**-0.25, delta_star=1.0, label="test-power")


def small_config(**overrides):
    base = dict(
        problem="example2",
        policy="ex2-closed-form",
        epsilon=0.9,
        q_list=(3.0, 4.0),
        coarse_m_list=(32, 64),
        m_ref=256,
        horizon=1.0,
        paths=12,
        seed=99,
        x0=1.0,
        workers=1,
    )
    base.update(overrides)
    return SweepConfig(**base)


class TestKahan:
    def test_classic_cancellation(self):
        assert kahan_sum([1e100, 1.0, -1e100, 1.0]) == 2.0

    def test_matches_fsum_on_random_data(self):
        rng = np.random.default_rng(0)
        for scale in (1.0, 1e8):
            vals = rng.normal(0, scale, 5000)
            assert kahan_sum(vals) == pytest.approx(math.fsum(vals), rel=1e-15, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=100))
    def test_close_to_exact_sum(self, vals):
        assert kahan_sum(vals) == pytest.approx(math.fsum(vals), rel=1e-13, abs=1e-9)


class TestFit:
    def test_exact_half_order(self):
        deltas = [2.0**-k for k in range(3, 9)]
        errs = [d**0.5 for d in deltas]
        slope, se = fit_loglog(deltas, errs)
        assert slope == pytest.approx(0.5, abs=1e-12)
        assert se == pytest.approx(0.0, abs=1e-10)

    def test_scaling_constant_absorbed(self):
        deltas = [2.0**-k for k in range(3, 9)]
        errs = [7.3 * d for d in deltas]
        slope, _ = fit_loglog(deltas, errs)
        assert slope == pytest.approx(1.0, abs=1e-12)

    def test_zero_rows_excluded_with_warning(self):
        deltas = [0.1, 0.05, 0.025, 0.0125]
        errs = [0.0, 0.05**0.5, 0.025**0.5, 0.0125**0.5]
        with pytest.warns(UserWarning, match="zero-error"):
            slope, _ = fit_loglog(deltas, errs)
        assert slope == pytest.approx(0.5, abs=1e-12)

    def test_insufficient_points(self):
        with pytest.raises(InsufficientDataError):
            fit_loglog([0.1, 0.05], [0.3, 0.2])

    def test_grouped_fit(self):
        rows = tuple(
            ErrorRow(q=q, estimator="fixed_t_interpolant", m=2**k, delta=2.0**-k,
                     error_q=(2.0**-k) ** 0.5, std_error=0.0, divergent_paths=0)
            for q in (3.0, 4.0)
            for k in range(3, 7)
        )
        fits = fit_order(rows)
        assert len(fits) == 2
        for f in fits:
            assert f.slope == pytest.approx(0.5, abs=1e-12)


class TestValidation:
    def test_valid_config_is_clean(self):
        assert validate_config(small_config()) == []

    def test_non_divisor_m(self):
        errs = validate_config(small_config(coarse_m_list=(48,)))
        assert any("does not divide" in e for e in errs)

    def test_zero_paths(self):
        errs = validate_config(small_config(paths=0))
        assert any(e.startswith("paths:") for e in errs)

    def test_unknown_names(self):
        errs = validate_config(small_config(problem="nope", policy="nah"))
        assert any(e.startswith("problem:") for e in errs)
        assert any(e.startswith("policy:") for e in errs)

    def test_q_outside_moment_range(self):
        errs = validate_config(small_config(q_list=(6.5,)))
        assert any(e.startswith("q_list:") for e in errs)

    def test_moment_exponent_bound_cites_growth_constraint(self):
        errs = validate_config(
            small_config(moment_exponent=5.5), need_moment_exponent=True)
        assert any("p + 2 - r" in e for e in errs)

    def test_policy_domain_checked_unless_waived(self):
        cfg = small_config(coarse_m_list=(4,), m_ref=256)
        assert any("domain" in e for e in validate_config(cfg))
        assert validate_config(cfg, check_policy_domain=False) == []

    def test_horizon_must_fit_mesh(self):
        errs = validate_config(small_config(horizon=1.0 + 1e-7))
        assert any(e.startswith("horizon:") for e in errs)


class TestSweep:
    def test_identical_meshes_give_zero_error(self):
        # at m == m_ref the runs are coupled copies and the evaluation grid
        # is the coarse mesh itself, so every estimator vanishes exactly
        # (within-step wiggle is invisible: the driving path is only
        # realised at the nodes)
        cfg = small_config(coarse_m_list=(64, 256), paths=6)
        report = coupled_error_sweep(cfg)
        for q in (3.0, 4.0):
            assert report.row(q, "fixed_t_interpolant", 256).error_q == 0.0
            assert report.row(q, "sup_interpolant", 256).error_q == 0.0
            assert report.row(q, "sup_piecewise", 256).error_q == 0.0
            # a strictly coarser run does see the piecewise wiggle
            assert report.row(q, "sup_piecewise", 64).error_q > 0.0

    def test_fixed_horizon_estimators_coincide(self):
        report = coupled_error_sweep(small_config(paths=8))
        for row in report.rows:
            if row.estimator == "fixed_t_interpolant":
                twin = report.row(row.q, "fixed_t_piecewise", row.m)
                assert twin.error_q == row.error_q
                assert twin.std_error == row.std_error

    def test_zero_coefficient_problem_all_zero(self):
        problem = make_problem()
        mesh = MeshSpec(1.0, 64, 1.0)
        payload = (problem, wide_policy(), mesh, (16, 32), 5)
        _, fixed, sup_i, sup_p = _coupled_chunk((payload, [0, 1, 2]))
        assert np.all(fixed == 0.0)
        assert np.all(sup_i == 0.0)
        assert np.all(sup_p == 0.0)

    def test_errors_decrease_with_step(self):
        cfg = small_config(coarse_m_list=(16, 32, 64), paths=40)
        report = coupled_error_sweep(cfg)
        errs = [report.row(4.0, "fixed_t_interpolant", m).error_q for m in (16, 32, 64)]
        assert errs[0] > errs[1] > errs[2]

    def test_worker_count_does_not_change_bytes(self):
        cfg = small_config(paths=10)
        serial = coupled_error_sweep(cfg)
        parallel = coupled_error_sweep(small_config(paths=10, workers=2))
        assert serial.rows == parallel.rows
        assert error_report_csv(serial) == error_report_csv(parallel)
        assert error_report_json(serial) == error_report_json(parallel)

    def test_q_norm_monotone_in_q(self):
        report = coupled_error_sweep(small_config(paths=15))
        for m in (32, 64):
            for est in ("fixed_t_interpolant", "sup_interpolant", "sup_piecewise"):
                assert report.row(3.0, est, m).error_q <= report.row(4.0, est, m).error_q * (1 + 1e-12)

    def test_power_mean_guard_trips_on_bad_rows(self):
        rows = (
            ErrorRow(3.0, "sup_interpolant", 8, 0.125, 2.0, 0.0, 0),
            ErrorRow(4.0, "sup_interpolant", 8, 0.125, 1.0, 0.0, 0),
        )
        with pytest.raises(AssertionError):
            _assert_power_mean(list(rows))

    def test_metadata_and_run_id(self):
        cfg = small_config(paths=4)
        report = coupled_error_sweep(cfg)
        assert report.metadata["run_id"] == cfg.run_id()
        assert report.metadata["config"]["paths"] == 4
        assert "workers" not in report.metadata["config"]
        # q=4 exceeds p - r = 3 for this problem: recorded as a warning
        assert any("outside the proven regime" in w for w in report.metadata["warnings"])

    def test_invalid_config_raises_config_error(self):
        with pytest.raises(ConfigError):
            coupled_error_sweep(small_config(paths=0))

    def test_run_id_ignores_workers(self):
        assert small_config(workers=1).run_id() == small_config(workers=8).run_id()


class TestSpecialisedOps:
    def test_fixed_horizon_only(self):
        report = strong_error_at_T(small_config(paths=5))
        assert {r.estimator for r in report.rows} == {
            "fixed_t_interpolant", "fixed_t_piecewise"}

    def test_sup_requires_growth_declaration(self):
        with pytest.raises(ConfigError, match="growth"):
            strong_error_sup(small_config(problem="example1", paths=5))

    def test_sup_rows_present_for_example2(self):
        report = strong_error_sup(small_config(paths=5))
        assert {r.estimator for r in report.rows} == {"sup_interpolant", "sup_piecewise"}


class TestMoments:
    def test_deterministic_linear_closed_form(self):
        # f = -x, no noise, no neutral term: |X_k| = (1 - dt)^k exactly, so
        # the running sup stays at 1 and the fixed-time moment matches the
        # closed form at every grid time
        problem = make_problem(drift=_neg_drift)
        pbar = 5.0
        m_list = (4, 8)
        payload = (problem, wide_policy(), m_list, 1.0, 3, pbar, "mtem")
        _, running, fixed, diverged = _moment_chunk((payload, [0, 1]))
        assert not diverged.any()
        assert np.all(running == 1.0)
        t_grid = np.arange(5) * 0.25
        for col, m in enumerate(m_list):
            dt = 1.0 / m
            for tg, t in enumerate(t_grid):
                k = int(t * m)  # node index floor(t / dt)
                expected = (1.0 - dt) ** (pbar * k)
                assert fixed[0, col, tg] == pytest.approx(expected, rel=1e-12)

    def test_moment_sweep_end_to_end(self):
        cfg = small_config(
            coarse_m_list=(16, 32, 64), paths=30, moment_exponent=5.0)
        report = moment_sweep(cfg)
        assert set(report.sup_at_horizon) == {16, 32, 64}
        assert all(v > 0 for v in report.sup_at_horizon.values())
        assert report.ratio_max_min >= 1.0
        assert report.divergent_paths == {16: 0, 32: 0, 64: 0}
        assert len(report.rows) == 3 * 17  # coarsest mesh has 16 steps + t=0

    def test_moment_requires_exponent(self):
        with pytest.raises(ConfigError, match="moment_exponent"):
            moment_sweep(small_config(paths=3))

    def test_em_scheme_counts_divergence(self):
        cfg = small_config(
            coarse_m_list=(2,), m_ref=2, horizon=4.0, paths=4,
            moment_exponent=5.0, x0=3.0)
        report = moment_sweep(cfg, scheme="em")
        assert report.divergent_paths[2] == 4

    def test_moment_csv_contains_config(self):
        cfg = small_config(coarse_m_list=(16,), paths=5, moment_exponent=4.0)
        text = moment_report_csv(moment_sweep(cfg))
        header = text.splitlines()[0]
        assert header.startswith("# config ")
        echo = json.loads(header[len("# config "):])
        assert echo["scheme"] == "mtem"


class TestSerialisation:
    def test_csv_layout(self):
        report = coupled_error_sweep(small_config(paths=4))
        lines = error_report_csv(report).splitlines()
        assert lines[1] == (
            "problem,policy,epsilon,q,estimator,m,delta,error_q,std_error,divergent_paths"
        )
        assert len(lines) == 2 + len(report.rows)
        assert all(line.endswith(",0") for line in lines[2:])

    def test_config_echo_round_trip(self):
        cfg = small_config(paths=4)
        report = coupled_error_sweep(cfg)
        echo = json.loads(error_report_csv(report).splitlines()[0][len("# config "):])
        rebuilt = SweepConfig(
            problem=echo["problem"],
            policy=echo["policy"],
            epsilon=echo["epsilon"],
            q_list=tuple(echo["q_list"]),
            coarse_m_list=tuple(echo["coarse_m_list"]),
            m_ref=echo["m_ref"],
            horizon=echo["horizon"],
            paths=echo["paths"],
            seed=echo["seed"],
            x0=echo["x0"],
            moment_exponent=echo["moment_exponent"],
        )
        assert rebuilt.run_id() == cfg.run_id()

    def test_json_summary_schema(self):
        report = coupled_error_sweep(small_config(paths=4))
        payload = json.loads(error_report_json(report))
        assert set(payload) == {
            "run_id", "config", "fitted_orders", "divergent_paths_total", "warnings"}
        assert payload["divergent_paths_total"] == 0
        for fit in payload["fitted_orders"]:
            assert set(fit) == {"q", "estimator", "slope", "slope_se"}
