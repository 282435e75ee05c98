"""Gronwall enumeration, path-scaling fits, and stopped-gap checks."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exitbsde import (
    EstimationError,
    FiniteChain,
    FitError,
    InvalidInput,
    catalog_benchmark,
    chain_from_text,
    coupled_fine_reference,
    discrete_gronwall_verify,
    em_strong_error_slope,
    kolmogorov_ratio_fit,
    random_hypothesis_chain,
    two_stopping_gap_check,
)
from exitbsde.problems import DomainSpec, GridSpec, make_tapered_problem


def martingale_chain(seed=0, n_steps=4):
    """Two-state chain whose a-sequence is an exact martingale."""
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(2), size=(n_steps, 2))
    a = np.empty((n_steps + 1, 2))
    a[n_steps] = [0.3, 0.9]
    for t in range(n_steps - 1, -1, -1):
        a[t] = P[t] @ a[t + 1]
    return FiniteChain(h=0.5, transitions=P, absorbing=np.zeros(2, bool),
                       a=a, b=np.zeros((n_steps + 1, 2)), xi=np.zeros(2))


class TestFiniteChainValidation:
    def test_valid_chain_passes(self):
        martingale_chain().validate()

    def test_rows_must_sum_to_one(self):
        ch = martingale_chain()
        P = ch.transitions.copy()
        P[0, 0, 0] += 0.05
        bad = FiniteChain(h=ch.h, transitions=P, absorbing=ch.absorbing,
                          a=ch.a, b=ch.b, xi=ch.xi)
        with pytest.raises(InvalidInput, match="sum to one"):
            bad.validate()

    def test_absorption_must_be_permanent(self):
        ch = martingale_chain()
        xi = np.array([0.3, 0.0])
        a = ch.a.copy()
        a[:, 0] = xi[0]
        bad = FiniteChain(h=ch.h, transitions=ch.transitions,
                          absorbing=np.array([True, False]),
                          a=a, b=ch.b, xi=xi)
        with pytest.raises(InvalidInput, match="map to itself"):
            bad.validate()

    def test_negative_a_rejected(self):
        ch = martingale_chain()
        a = ch.a.copy()
        a[1, 1] = -0.2
        bad = FiniteChain(h=ch.h, transitions=ch.transitions,
                          absorbing=ch.absorbing, a=a, b=ch.b, xi=ch.xi)
        with pytest.raises(InvalidInput, match="nonnegative"):
            bad.validate()

    def test_a_must_track_xi_after_absorption(self):
        n = 3
        P = np.tile(np.eye(n), (2, 1, 1))
        a = np.full((3, n), 0.5)
        a[2, 0] = 0.9  # drifts away from xi at an absorbing state
        bad = FiniteChain(h=1.0, transitions=P, absorbing=np.ones(n, bool),
                          a=a, b=np.zeros((3, n)), xi=np.full(n, 0.5))
        with pytest.raises(InvalidInput, match="equal to xi"):
            bad.validate()


class TestGronwallVerify:
    def test_martingale_equality(self):
        # C=1, K=0, a an exact conditional martingale: the bound is an
        # equality at every node, so both slack extremes vanish.
        rep = discrete_gronwall_verify(martingale_chain(), 1.0, 0.0)
        assert rep.hypothesis_ok and rep.holds
        assert rep.min_slack == pytest.approx(0.0, abs=1e-12)
        assert rep.max_slack == pytest.approx(0.0, abs=1e-12)

    def test_geometric_single_state_equality(self):
        rho, n_steps = 0.8, 6
        a = (rho ** np.arange(n_steps + 1))[:, None]
        ch = FiniteChain(h=1.0, transitions=np.ones((n_steps, 1, 1)),
                         absorbing=np.zeros(1, bool), a=a,
                         b=np.zeros((n_steps + 1, 1)), xi=np.zeros(1))
        rep = discrete_gronwall_verify(ch, 1.0 / rho, 0.0)
        assert rep.hypothesis_ok and rep.holds
        assert abs(rep.min_slack) < 1e-12 and abs(rep.max_slack) < 1e-12

    def test_forcing_term_enters_the_bound(self):
        # a == K*h*b at every node with zero terminal: hypothesis tight
        # when C*E[a] is dropped, strict slack in the conclusion.
        n_steps = 3
        b = np.ones((n_steps + 1, 1))
        a = 0.4 * 0.5 * b
        a[n_steps] = 0.0
        ch = FiniteChain(h=0.5, transitions=np.ones((n_steps, 1, 1)),
                         absorbing=np.zeros(1, bool), a=a, b=b,
                         xi=np.zeros(1))
        rep = discrete_gronwall_verify(ch, 1.0, 0.4)
        assert rep.hypothesis_ok and rep.holds
        assert rep.min_slack >= -1e-12
        assert rep.max_slack > 0.1

    def test_hypothesis_violation_is_a_precondition_report(self):
        ch = martingale_chain()
        a = ch.a.copy()
        a[0, 0] += 5.0
        bad = FiniteChain(h=ch.h, transitions=ch.transitions,
                          absorbing=ch.absorbing, a=a, b=ch.b, xi=ch.xi)
        rep = discrete_gronwall_verify(bad, 1.0, 0.0)
        assert not rep.hypothesis_ok
        assert rep.holds is None
        assert rep.witness is None
        assert rep.hypothesis_witness["node"] == 0
        assert rep.hypothesis_witness["state"] == 0
        assert rep.hypothesis_witness["lhs"] > rep.hypothesis_witness["rhs"]

    def test_report_serializes_to_json(self):
        rep = discrete_gronwall_verify(martingale_chain(), 1.0, 0.0)
        doc = json.loads(rep.to_json())
        assert doc["hypothesis_ok"] is True
        assert doc["holds"] is True
        assert doc["c"] == 1.0

    def test_bad_constants_rejected(self):
        ch = martingale_chain()
        with pytest.raises(InvalidInput):
            discrete_gronwall_verify(ch, 0.0, 0.0)
        with pytest.raises(InvalidInput):
            discrete_gronwall_verify(ch, 1.0, -0.5)

    def test_random_chains_never_violate(self):
        # The comparison lemma made executable: any chain satisfying the
        # one-step hypothesis satisfies the stopped bound.
        for i in range(40):
            rng = np.random.default_rng(9000 + i)
            C = float(rng.uniform(0.7, 1.6))
            K = float(rng.uniform(0.0, 2.0))
            steps = int(rng.integers(2, 12))
            chain = random_hypothesis_chain(3, steps, 9000 + i, C=C, K=K,
                                            h=float(rng.uniform(0.1, 1.0)))
            rep = discrete_gronwall_verify(chain, C, K)
            assert rep.hypothesis_ok, (i, C, K)
            assert rep.holds, (i, C, K)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), c_scaled=st.integers(70, 160),
           k_scaled=st.integers(0, 200))
    def test_generator_output_always_satisfies_hypothesis(
            self, seed, c_scaled, k_scaled):
        C, K = c_scaled / 100.0, k_scaled / 100.0
        chain = random_hypothesis_chain(3, 6, seed, C=C, K=K)
        rep = discrete_gronwall_verify(chain, C, K)
        assert rep.hypothesis_ok and rep.holds


class TestChainSerialization:
    def test_round_trip_is_exact(self):
        chain = random_hypothesis_chain(3, 7, 42, C=1.2, K=0.7, h=0.25)
        back = chain_from_text(chain.to_text())
        assert back.h == chain.h
        assert np.array_equal(back.transitions, chain.transitions)
        assert np.array_equal(back.a, chain.a)
        assert np.array_equal(back.b, chain.b)
        assert np.array_equal(back.xi, chain.xi)
        assert np.array_equal(back.absorbing, chain.absorbing)

    def test_round_trip_preserves_verification(self):
        chain = random_hypothesis_chain(3, 5, 7, C=0.9, K=1.1)
        rep = discrete_gronwall_verify(chain, 0.9, 1.1)
        rep2 = discrete_gronwall_verify(chain_from_text(chain.to_text()),
                                        0.9, 1.1)
        assert rep2.min_slack == rep.min_slack
        assert rep2.max_slack == rep.max_slack

    def test_garbage_text_rejected(self):
        with pytest.raises(InvalidInput, match="unparseable"):
            chain_from_text("[chain]\nh = nope\n")
        with pytest.raises(InvalidInput):
            chain_from_text("just words")


def brownian_paths(n, n_steps, dt, seed=11, d=None):
    g = np.random.Generator(np.random.Philox(key=seed))
    shape = (n, n_steps) if d is None else (n, n_steps, d)
    incr = g.standard_normal(shape) * math.sqrt(dt)
    W = np.cumsum(incr, axis=1)
    zero = np.zeros_like(W[:, :1])
    return np.concatenate([zero, W], axis=1)


class TestKolmogorovRatioFit:
    def test_brownian_half_for_p2(self):
        W = brownian_paths(20_000, 64, 1 / 64)
        alpha = kolmogorov_ratio_fit(W, 2, [1, 2, 4, 8, 16, 32], 1 / 64)
        assert alpha == pytest.approx(0.5, abs=0.03)

    def test_brownian_half_for_p4(self):
        W = brownian_paths(20_000, 64, 1 / 64)
        alpha = kolmogorov_ratio_fit(W, 4, [1, 2, 4, 8, 16, 32], 1 / 64)
        assert alpha == pytest.approx(0.5, abs=0.05)

    def test_multidimensional_paths(self):
        W = brownian_paths(5_000, 32, 1 / 32, seed=3, d=2)
        alpha = kolmogorov_ratio_fit(W, 2, [1, 2, 4, 8], 1 / 32)
        assert alpha == pytest.approx(0.5, abs=0.05)

    def test_linear_drift_scales_like_one(self):
        # deterministic smooth path: increments ~ lag, so alpha ~ 1
        t = np.linspace(0.0, 1.0, 65)
        paths = np.tile(3.0 * t, (4, 1))
        alpha = kolmogorov_ratio_fit(paths, 2, [1, 2, 4, 8], 1 / 64)
        assert alpha == pytest.approx(1.0, abs=1e-9)

    def test_too_few_lags(self):
        W = brownian_paths(100, 16, 1 / 16)
        with pytest.raises(FitError, match="3 lags"):
            kolmogorov_ratio_fit(W, 2, [1, 2], 1 / 16)

    def test_input_guards(self):
        W = brownian_paths(50, 16, 1 / 16)
        with pytest.raises(InvalidInput, match="p must be >= 2"):
            kolmogorov_ratio_fit(W, 1, [1, 2, 4], 1 / 16)
        with pytest.raises(InvalidInput, match="outside"):
            kolmogorov_ratio_fit(W, 2, [1, 2, 40], 1 / 16)
        with pytest.raises(InvalidInput, match="distinct"):
            kolmogorov_ratio_fit(W, 2, [1, 2, 2], 1 / 16)
        with pytest.raises(InvalidInput, match="time"):
            kolmogorov_ratio_fit(W, 2, [1, 2, 4], 0.5)

    def test_frozen_paths_degenerate(self):
        paths = np.ones((10, 17))
        with pytest.raises(EstimationError, match="degenerate"):
            kolmogorov_ratio_fit(paths, 2, [1, 2, 4], 1 / 16)


class TestEmStrongErrorSlope:
    def test_zero_noise_is_degenerate(self):
        quiet = make_tapered_problem(
            "drift-only", DomainSpec.interval(-1.0, 1.0), (0.0,), (0.3,),
            ((0.0,),), f=lambda x, y: 0.0 * y, g=lambda x: x[..., 0],
            L_f=0.01, sup_f0=0.0)
        rep = em_strong_error_slope(quiet, [0.04, 0.02, 0.01], 1.0, 4,
                                    n_paths=500, seed=1)
        assert rep.verdict == "degenerate"
        assert math.isnan(rep.order)
        assert max(rep.errors) < 1e-24

    def test_fixed_horizon_near_half(self):
        b1 = catalog_benchmark("B1")
        rep = em_strong_error_slope(b1.spec, [0.04, 0.02, 0.01, 0.005], 1.0,
                                    8, n_paths=20_000, seed=5)
        assert rep.verdict == "ok"
        assert 0.3 <= rep.order <= 0.7
        assert rep.raw_slope == pytest.approx(2 * rep.order)

    def test_stopped_horizon_near_half(self):
        b3 = catalog_benchmark("B3")
        rep = em_strong_error_slope(b3.spec, [0.04, 0.02, 0.01], 8.0, 8,
                                    n_paths=10_000, seed=5, stopped=True)
        assert rep.verdict == "ok"
        assert 0.35 <= rep.order <= 0.65

    def test_errors_monotone_in_h_within_ci(self):
        b3 = catalog_benchmark("B3")
        rep = em_strong_error_slope(b3.spec, [0.04, 0.02, 0.01], 8.0, 4,
                                    n_paths=4_000, seed=9, stopped=True)
        for i in range(len(rep.errors) - 1):
            assert (rep.errors[i] - rep.ci_halfwidths[i]
                    <= rep.errors[i + 1] + rep.ci_halfwidths[i + 1])

    def test_needs_three_stepsizes(self):
        b3 = catalog_benchmark("B3")
        with pytest.raises(InvalidInput, match="3 stepsizes"):
            em_strong_error_slope(b3.spec, [0.04, 0.02], 1.0, 4)

    def test_report_json(self):
        b3 = catalog_benchmark("B3")
        rep = em_strong_error_slope(b3.spec, [0.08, 0.04, 0.02], 4.0, 4,
                                    n_paths=2_000, seed=2, stopped=True)
        doc = json.loads(rep.to_json())
        assert len(doc["errors"]) == 3
        assert doc["verdict"] in {"ok", "inconclusive"}


class TestTwoStoppingGap:
    def test_identical_times_degenerate(self):
        W = brownian_paths(500, 64, 1 / 64, seed=21)
        tau = np.full(500, 32)
        rep = two_stopping_gap_check(W, 1 / 64, [(tau, tau)], 2.0, 0.05)
        assert rep.verdict == "degenerate"
        assert rep.lhs == (0.0,)
        assert rep.ratios == ()

    def test_deterministic_shift_family_bounded(self):
        W = brownian_paths(20_000, 512, 1 / 256, seed=11)
        base = np.full(20_000, 128)
        pairs = [(base, base + delta) for delta in (4, 8, 16, 32, 64)]
        rep = two_stopping_gap_check(W, 1 / 256, pairs, 2.0, 0.05)
        assert rep.verdict == "bounded"
        # LHS ~ delta^{p/2}, RHS ~ delta^{p(alpha-eps)}: ratios drift
        # only through the epsilon mismatch
        spread = max(rep.ratios) / min(rep.ratios)
        assert spread < 3.0

    def test_grid_rounding_family_bounded(self):
        g = np.random.Generator(np.random.Philox(key=13))
        W = brownian_paths(10_000, 512, 1 / 256, seed=13)
        tau1 = g.integers(30, 300, size=10_000)
        pairs = [(tau1, ((tau1 + m - 1) // m) * m) for m in (2, 4, 8, 16)]
        rep = two_stopping_gap_check(W, 1 / 256, pairs, 2.0, 0.05)
        assert rep.verdict == "bounded"
        assert len(rep.ratios) == 4

    def test_euler_exit_pair_family_bounded(self):
        b3 = catalog_benchmark("B3")
        bundle = coupled_fine_reference(b3.spec, GridSpec(0.01, 8.0), 4,
                                        4_000, 17, stop_at_exit=False,
                                        store_states=True)
        N = bundle.grid.n_steps
        fine_node = np.where(bundle.fine.exit_index >= 0,
                             bundle.fine.exit_index // 4, N)
        coarse_node = np.where(bundle.exit_index >= 0, bundle.exit_index, N)
        pairs = [(fine_node, coarse_node)]
        for m in (4, 16):
            pairs.append((fine_node,
                          np.minimum(((fine_node + m - 1) // m) * m, N)))
        rep = two_stopping_gap_check(bundle.states, 0.01, pairs, 2.0, 0.05)
        assert rep.verdict == "bounded"

    def test_input_guards(self):
        W = brownian_paths(50, 16, 1 / 16)
        tau = np.full(50, 8)
        with pytest.raises(InvalidInput, match="epsilon"):
            two_stopping_gap_check(W, 1 / 16, [(tau, tau)], 2.0, 0.9)
        with pytest.raises(InvalidInput, match="one node per path"):
            two_stopping_gap_check(W, 1 / 16, [(tau[:10], tau)], 2.0, 0.05)
        with pytest.raises(InvalidInput, match="outside"):
            two_stopping_gap_check(W, 1 / 16, [(tau, tau + 100)], 2.0, 0.05)
        with pytest.raises(InvalidInput, match="at least one"):
            two_stopping_gap_check(W, 1 / 16, [], 2.0, 0.05)

    def test_report_json(self):
        W = brownian_paths(2_000, 128, 1 / 64, seed=29)
        base = np.full(2_000, 32)
        pairs = [(base, base + d) for d in (8, 16, 32)]
        rep = two_stopping_gap_check(W, 1 / 64, pairs, 2.0, 0.05)
        doc = json.loads(rep.to_json())
        assert doc["verdict"] == "bounded"
        assert len(doc["lhs"]) == 3
