"""Problem model: grids, domains, standing assumptions, benchmark catalog."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exitbsde import (
    CatalogError,
    DomainError,
    DomainSpec,
    GridSpec,
    InvalidInput,
    analytic_value,
    catalog_benchmark,
    lipschitz_warnings,
    make_tapered_problem,
    pde_residual,
    probe_lipschitz,
    sample_interior,
    taper_factor,
    validate_moment_budget,
    validate_stepsize,
)
from exitbsde.problems import TAPER_INNER, TAPER_OUTER


class TestGridSpec:
    def test_basic(self):
        g = GridSpec(h=0.25, t_max=2.0)
        assert g.n_steps == 8
        assert g.node(3) == 0.75
        np.testing.assert_allclose(g.nodes(), np.arange(9) * 0.25)

    def test_rejects_bad_steps(self):
        with pytest.raises(InvalidInput):
            GridSpec(h=0.0, t_max=1.0)
        with pytest.raises(InvalidInput):
            GridSpec(h=-0.1, t_max=1.0)
        with pytest.raises(InvalidInput):
            GridSpec(h=0.5, t_max=0.25)
        with pytest.raises(InvalidInput):
            GridSpec(h=0.3, t_max=1.0)  # not an integer multiple

    def test_ceil_node(self):
        g = GridSpec(h=0.1, t_max=10.0)
        assert g.ceil_node(0.25) == pytest.approx(0.3)
        assert g.ceil_node(0.3) == pytest.approx(0.3)
        # never below one step
        assert g.ceil_node(0.0) == pytest.approx(0.1)


class TestDomainSpec:
    def test_interval_open_membership(self):
        dom = DomainSpec.interval(-1.0, 1.0)
        pts = np.array([[0.0], [0.999], [1.0], [-1.0], [1.5]])
        np.testing.assert_array_equal(
            dom.contains(pts), [True, True, False, False, False]
        )

    def test_ball_open_membership(self):
        dom = DomainSpec.ball([0.0, 0.0], 1.0)
        pts = np.array([[0.0, 0.0], [0.8, 0.8], [1.0, 0.0], [0.6, 0.6]])
        np.testing.assert_array_equal(
            dom.contains(pts), [True, False, False, True]
        )

    def test_bounding_box(self):
        lo, hi = DomainSpec.ball([1.0, -1.0], 2.0).bounding_box()
        np.testing.assert_allclose(lo, [-1.0, -3.0])
        np.testing.assert_allclose(hi, [3.0, 1.0])

    def test_rejects_empty(self):
        with pytest.raises(InvalidInput):
            DomainSpec.interval(1.0, 1.0)
        with pytest.raises(InvalidInput):
            DomainSpec.ball([0.0], 0.0)
        with pytest.raises(InvalidInput):
            DomainSpec.box([0.0, 0.0], [1.0])


class TestTaper:
    def test_plateau_and_support(self):
        lo = np.array([-1.0])
        hi = np.array([1.0])
        x = np.array([[0.0], [1.0], [1.0 + TAPER_INNER], [1.0 + TAPER_OUTER], [5.0]])
        s = taper_factor(x, lo, hi)
        np.testing.assert_allclose(s, [1.0, 1.0, 1.0, 0.0, 0.0])

    def test_smoothstep_midpoint(self):
        # halfway across the taper band the C^1 smoothstep equals 1/2
        lo = np.array([-1.0])
        hi = np.array([1.0])
        mid = 1.0 + 0.5 * (TAPER_INNER + TAPER_OUTER)
        assert taper_factor(np.array([[mid]]), lo, hi)[0] == pytest.approx(0.5)

    @given(st.floats(-10.0, 10.0))
    @settings(max_examples=100, deadline=None)
    def test_range_and_monotone(self, x):
        lo = np.array([-1.0])
        hi = np.array([1.0])
        s = taper_factor(np.array([[x]]), lo, hi)[0]
        assert 0.0 <= s <= 1.0
        # farther out never increases the factor
        s2 = taper_factor(np.array([[x * 1.5]]), lo, hi)[0]
        if abs(x) > 1.0:
            assert s2 <= s + 1e-12


class TestStepsize:
    def test_ok_case(self):
        v = validate_stepsize(0.02, 1.0)
        assert v.ok
        assert v.bound == pytest.approx(1.0 / 12.0)

    def test_upper_branch(self):
        v = validate_stepsize(0.1, 1.0)
        assert not v.ok
        assert "1/(12" in v.reason

    def test_lipschitz_branch(self):
        v = validate_stepsize(0.05, 0.04)
        assert not v.ok
        assert v.reason == "h >= L_f"

    def test_accepts_grid(self):
        assert validate_stepsize(GridSpec(h=0.02, t_max=1.0), 1.0).ok

    def test_invalid_inputs(self):
        with pytest.raises(InvalidInput):
            validate_stepsize(0.0, 1.0)
        with pytest.raises(InvalidInput):
            validate_stepsize(0.1, 0.0)

    @given(
        st.floats(1e-4, 10.0),
        st.floats(1e-3, 10.0),
        st.floats(0.01, 0.99),
    )
    @settings(max_examples=200, deadline=None)
    def test_monotone_in_h(self, h, L_f, shrink):
        # if (h, L_f) passes then any smaller stepsize passes too
        if validate_stepsize(h, L_f).ok:
            assert validate_stepsize(h * shrink, L_f).ok


class TestMomentBudget:
    def test_near_miss(self):
        b = validate_moment_budget(
            d=1, L_mu=0.01, L_sigma=0.01, L_f=0.01, q1=64, q2=8, rho=5.0
        )
        assert b.threshold_forward == pytest.approx(5.0688)
        assert b.threshold_backward == pytest.approx(0.32)
        assert not b.feasible

    def test_zero_coefficients(self):
        b = validate_moment_budget(
            d=1, L_mu=0.0, L_sigma=0.0, L_f=0.01, q1=64, q2=8, rho=0.5
        )
        assert b.threshold_forward == 0.0
        assert b.threshold_backward == pytest.approx(0.32)
        assert b.feasible

    def test_forward_dominates(self):
        b = validate_moment_budget(
            d=2, L_mu=0.5, L_sigma=0.5, L_f=1.0, q1=64, q2=8, rho=100.0
        )
        assert b.threshold_forward == pytest.approx(6528.0)
        assert not b.feasible

    def test_input_validation(self):
        with pytest.raises(InvalidInput):
            validate_moment_budget(1, 0.1, 0.1, 0.1, q1=1, q2=8, rho=1.0)
        with pytest.raises(InvalidInput):
            validate_moment_budget(1, 0.1, 0.1, 0.1, q1=8, q2=8, rho=0.0)

    @given(
        st.floats(0.1, 50.0),
        st.floats(1.0, 3.0),
        st.floats(1.0, 3.0),
    )
    @settings(max_examples=200, deadline=None)
    def test_monotone_in_rho_antitone_in_orders(self, rho, grow, grow2):
        base = validate_moment_budget(
            d=2, L_mu=0.2, L_sigma=0.3, L_f=0.5, q1=4, q2=4, rho=rho
        )
        if base.feasible:
            assert validate_moment_budget(
                d=2, L_mu=0.2, L_sigma=0.3, L_f=0.5, q1=4, q2=4, rho=rho * grow
            ).feasible
        bigger_orders = validate_moment_budget(
            d=2, L_mu=0.2, L_sigma=0.3, L_f=0.5,
            q1=4 * grow, q2=4 * grow2, rho=rho,
        )
        if bigger_orders.feasible:
            assert base.feasible


class TestCatalog:
    def test_unknown_id(self):
        with pytest.raises(CatalogError):
            catalog_benchmark("B99")

    @pytest.mark.parametrize("bid", ["B1", "B2", "B3", "B4"])
    def test_pde_residual_oracle(self, bid):
        """u must satisfy the elliptic equation at 100 random interior points."""
        bench = catalog_benchmark(bid)
        rng = np.random.default_rng(2024)
        pts = sample_interior(bench.spec.domain, 100, rng)
        res = pde_residual(bench, pts, step=1e-4)
        assert np.max(np.abs(res)) < 1e-6

    @pytest.mark.parametrize("bid", ["B1", "B2", "B4"])
    def test_boundary_data(self, bid):
        bench = catalog_benchmark(bid)
        if bench.spec.domain.kind == "box":
            boundary = np.array([[bench.spec.domain.hi[0]], [bench.spec.domain.lo[0]]])
        else:
            d = bench.spec.d
            e = np.zeros(d)
            e[0] = bench.spec.domain.radius
            boundary = np.stack([e, -e])
        np.testing.assert_allclose(bench.u(boundary), bench.spec.g(boundary), atol=1e-12)

    def test_analytic_values(self):
        assert analytic_value(catalog_benchmark("B3"), [0.37]) == pytest.approx(0.37)
        assert analytic_value(catalog_benchmark("B1"), [0.0]) == pytest.approx(0.1)
        assert analytic_value(catalog_benchmark("B4"), [1.0, 0.0]) == pytest.approx(0.0)

    def test_analytic_value_outside(self):
        with pytest.raises(DomainError):
            analytic_value(catalog_benchmark("B1"), [1.5])
        with pytest.raises(DomainError):
            analytic_value(catalog_benchmark("B4"), [1.0, 1.0])

    def test_b2_closed_form(self):
        # u solves 1/2 u'' + c u + a = 0 with u(+-D)=0; check the center value
        bench = catalog_benchmark("B2")
        c, a, D = -0.5, 1.0, 1.0
        k = np.sqrt(-2 * c)
        expect = (a / c) * (1.0 / np.cosh(k * D) - 1.0)
        assert analytic_value(bench, [0.0]) == pytest.approx(expect)
        assert expect > 0

    def test_u_range_from_obs(self):
        b1 = catalog_benchmark("B1")
        # radius^2 range [0.04, 0.25] maps through the decreasing psi
        lo, hi = b1.u_range_from_obs(np.array(0.04), np.array(0.25))
        assert lo == pytest.approx(0.1 * (1 - 0.25))
        assert hi == pytest.approx(0.1 * (1 - 0.04))
        b3 = catalog_benchmark("B3")
        lo, hi = b3.u_range_from_obs(np.array(-0.3), np.array(0.5))
        assert (lo, hi) == (-0.3, 0.5)

    def test_overrides(self):
        bench = catalog_benchmark("B1", lam=0.2, D=2.0)
        assert analytic_value(bench, [0.0]) == pytest.approx(0.8)


class TestProblemSpecValidation:
    def test_start_point_must_be_interior(self):
        dom = DomainSpec.interval(-1.0, 1.0)

        def f(x, y):
            return np.zeros(np.shape(y))

        def g(x):
            return np.zeros(x.shape[:-1])

        with pytest.raises(InvalidInput):
            make_tapered_problem("bad", dom, [1.0], [0.0], [[1.0]], f, g,
                                 L_f=0.1, sup_f0=0.0)

    def test_positive_lipschitz_f(self):
        dom = DomainSpec.interval(-1.0, 1.0)

        def f(x, y):
            return np.zeros(np.shape(y))

        def g(x):
            return np.zeros(x.shape[:-1])

        with pytest.raises(InvalidInput):
            make_tapered_problem("bad", dom, [0.0], [0.0], [[1.0]], f, g,
                                 L_f=0.0, sup_f0=0.0)


class TestLipschitzProbe:
    def test_catalog_declarations_hold(self):
        for bid in ("B1", "B2", "B3", "B4"):
            assert lipschitz_warnings(catalog_benchmark(bid).spec) == []

    def test_understated_constant_warns(self):
        dom = DomainSpec.interval(-1.0, 1.0)

        def f(x, y):
            return 5.0 * np.asarray(y, dtype=float)  # true slope 5

        def g(x):
            return np.zeros(x.shape[:-1])

        spec = make_tapered_problem("liar", dom, [0.0], [0.0], [[1.0]], f, g,
                                    L_f=0.1, sup_f0=0.0)
        warns = lipschitz_warnings(spec)
        assert any("L_f" in w for w in warns)

    def test_probe_reports_positive_slopes(self):
        spec = catalog_benchmark("B2").spec
        obs = probe_lipschitz(spec, seed=3)
        assert obs["L_f"] == pytest.approx(0.5, rel=1e-6)
        assert obs["L_mu"] <= spec.L_mu + 1e-9
