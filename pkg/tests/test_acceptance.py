"""Desk-scale acceptance gate.

Each test prints one bracketed pass/fail line straight to the terminal
(bypassing capture) so a full run reads as a checklist.  Seeds are
frozen; every quantity below is deterministic.
"""

import dataclasses
import math
import time
from pathlib import Path

import numpy as np
import pytest

from exitbsde import (
    GridSpec,
    backward_induction,
    catalog_benchmark,
    coupled_fine_reference,
    discrete_gronwall_verify,
    em_strong_error_slope,
    exit_gap_moments,
    exp_moment_scan,
    fit_rate,
    freidlin_check,
    kolmogorov_ratio_fit,
    parse_config,
    random_hypothesis_chain,
    run_experiment,
    simulate_paths,
    solve_picard,
)
from exitbsde.rng import derive_seed


@pytest.fixture
def report(capsys):
    def _report(name: str, passed: bool, detail: str) -> None:
        with capsys.disabled():
            flag = "PASS" if passed else "FAIL"
            print(f"[{flag}] acceptance: {name} ({detail})")
    return _report


@pytest.fixture(scope="module")
def b1():
    return catalog_benchmark("B1")


@pytest.fixture(scope="module")
def b3():
    return catalog_benchmark("B3")


def test_picard_contraction_margin(b1, report):
    # implicit sweeps on a common ensemble must contract strictly
    # faster than 1 - 1.5*L_f*h at every iteration
    grid = GridSpec(0.05, 12.0)
    start = time.monotonic()
    bundle = simulate_paths(b1.spec, grid, 100_000, seed=11,
                            store_states=True)
    _, diag = solve_picard(bundle, b1.spec)
    elapsed = time.monotonic() - start
    bound = 1.0 - 1.5 * b1.spec.L_f * grid.h
    passed = bool(diag.ratios.size) and diag.max_ratio <= bound \
        and elapsed < 600.0
    report("picard contraction margin",
           passed, f"max ratio {diag.max_ratio:.4f} <= {bound:.5f}, "
           f"{diag.iterations} iterations, {elapsed:.0f}s")
    assert passed
    assert diag.max_ratio <= diag.contraction_bound


def test_benchmark_values_b1_b3(b1, b3, report):
    grid = GridSpec(0.01, 40.0)
    v1 = float(backward_induction(b1.spec, grid, mesh=401)
               .evaluate(0.0, np.array([[0.0]]))[0])
    v3 = float(backward_induction(b3.spec, grid, mesh=401)
               .evaluate(0.0, np.array([[0.3]]))[0])
    err1, err3 = abs(v1 - 0.1), abs(v3 - 0.3)
    passed = err1 <= 0.02 and err3 <= 5e-3
    report("benchmark values B1 and B3", passed,
           f"|{v1:.4f} - 0.1| = {err1:.4f} <= 0.02, "
           f"|{v3:.4f} - 0.3| = {err3:.1e} <= 5e-3")
    assert passed


@pytest.mark.xfail(
    strict=True,
    reason="the constant-in-time reading of the stopped chain carries an "
    "exit-time overshoot of order sqrt(h); at h = 0.01 in d = 2 that bias "
    "is near 0.09 and no unbiased correction is part of the scheme")
def test_benchmark_value_b4(report):
    b4 = catalog_benchmark("B4")
    v = float(backward_induction(b4.spec, GridSpec(0.01, 12.0), mesh=61)
              .evaluate(0.0, np.zeros((1, 2)))[0])
    err = abs(v - 1.0)
    passed = err <= 0.05
    report("benchmark value B4", passed,
           f"|{v:.4f} - 1| = {err:.4f} vs 0.05")
    assert passed


def test_e1_convergence(report, tmp_path):
    config = parse_config(f"""
[experiment]
name = acceptance-e1
problem = B1
h = 0.2, 0.1, 0.05, 0.025
n_paths = 100000
refine_k = 16
seed = 101
t_trunc = 12.0
mesh = 201
[output]
dir = {tmp_path}
""")
    table = run_experiment(config)
    fit = next(f for f in table.fits if f.column == "e1")
    rows = table.rows
    monotone = all(
        rows[i + 1]["e1"] <= rows[i]["e1"] + rows[i]["e1_ci"]
        + rows[i + 1]["e1_ci"] for i in range(len(rows) - 1))
    dominated = all(r["e2"] >= r["e1"] for r in rows)
    passed = fit.slope >= 0.3 and monotone and dominated
    report("E1 convergence on B1", passed,
           f"slope {fit.slope:.3f} >= 0.3, monotone within CI: {monotone}, "
           f"E2 >= E1 on all rows: {dominated}")
    assert passed
    assert fit.passed is True


def test_exit_gap_rate(b3, report):
    pairs = []
    for h in (0.04, 0.02, 0.01, 0.005):
        bundle = coupled_fine_reference(
            b3.spec, GridSpec(h, 8.0), 16, 20_000,
            seed=derive_seed(7, f"gap-{h!r}"))
        stats = exit_gap_moments(bundle, 1.0)
        pairs.append((h, stats.estimate, stats.ci_halfwidth))
        del bundle
    fit = fit_rate(pairs)
    passed = 0.35 <= fit.slope <= 0.65
    report("exit-time gap rate", passed,
           f"slope {fit.slope:.3f} in [0.35, 0.65]")
    assert passed


def test_exponential_moment_thresholds(b3, report):
    critical = math.pi**2 / 8  # sharp rate for Brownian exit from (-1, 1)
    tau = simulate_paths(b3.spec, GridSpec(0.01, 40.0), 100_000,
                         seed=2026).exit_times
    scan = exp_moment_scan(tau, [0.5 * critical, 1.5 * critical],
                           batches=(1_000, 10_000, 100_000), t_max=40.0)
    below, above = scan.verdicts

    bundle = coupled_fine_reference(b3.spec, GridSpec(0.02, 20.0), 4,
                                    100_000, seed=77)
    coarse = np.where(np.isfinite(bundle.exit_times),
                      bundle.exit_times, 20.0)
    fine = np.where(np.isfinite(bundle.fine.exit_times),
                    bundle.fine.exit_times, 20.0)
    # the discrete mean exit overshoots by c*sqrt(h); halving sqrt(h)
    # via a 4x refinement makes 2*fine - coarse first order unbiased
    extrapolated = 2.0 * fine - coarse
    se = float(extrapolated.std(ddof=1)) / math.sqrt(extrapolated.size)
    mean_err = abs(float(extrapolated.mean()) - 1.0)

    passed = below == "stable" and above != "stable" and mean_err <= 3 * se
    report("exponential moment thresholds", passed,
           f"below critical: {below}, above critical: {above}, "
           f"mean exit |{float(extrapolated.mean()):.4f} - 1| <= 3se = "
           f"{3 * se:.4f}")
    assert passed


def test_overshoot_moment_bounds(b3, report):
    details = []
    passed = True
    for h in (0.04, 0.01):
        bundle = coupled_fine_reference(
            b3.spec, GridSpec(h, 12.0), 64, 20_000,
            seed=derive_seed(19, f"fr-{h!r}"), cutoff=(1.0, 0.25))
        for p in (1, 2, 3):
            rep = freidlin_check(bundle.fine.exit_times,
                                 bundle.cutoff_times, p, 1.0, 1,
                                 h0=h, alpha=0.25)
            passed &= rep.verdict == "pass"
            details.append(f"h={h} p={p}: {rep.verdict}")
        del bundle
    report("overshoot moment bounds", passed, ", ".join(details))
    assert passed


def test_gronwall_random_chains(report):
    rng = np.random.default_rng(20260815)
    start = time.monotonic()
    violations = 0
    for _ in range(100):
        c = float(rng.uniform(0.7, 1.6))
        k = float(rng.uniform(0.0, 2.0))
        steps = int(rng.integers(2, 12))
        chain = random_hypothesis_chain(3, steps,
                                        int(rng.integers(0, 2**31)),
                                        C=c, K=k)
        rep = discrete_gronwall_verify(chain, c, k)
        if not (rep.hypothesis_ok and rep.holds):
            violations += 1
    elapsed = time.monotonic() - start
    passed = violations == 0 and elapsed < 10.0
    report("discrete Gronwall enumeration", passed,
           f"100 chains, {violations} violations, {elapsed:.1f}s")
    assert passed


def test_strong_euler_slopes(b1, b3, report):
    fixed = em_strong_error_slope(b1.spec, [0.04, 0.02, 0.01, 0.005],
                                  1.0, 8, n_paths=20_000, seed=5)
    stopped = em_strong_error_slope(b3.spec, [0.04, 0.02, 0.01], 8.0, 8,
                                    n_paths=10_000, seed=5, stopped=True)
    passed = (fixed.verdict == "ok" and 0.4 <= fixed.order <= 0.6
              and stopped.verdict == "ok"
              and 0.35 <= stopped.order <= 0.65)
    report("strong Euler orders", passed,
           f"fixed horizon {fixed.order:.3f} in [0.4, 0.6], "
           f"stopped {stopped.order:.3f} in [0.35, 0.65]")
    assert passed


def test_kolmogorov_exponent(report):
    g = np.random.Generator(np.random.Philox(key=2026))
    dt = 1.0 / 64
    increments = g.standard_normal((100_000, 64)) * math.sqrt(dt)
    paths = np.concatenate([np.zeros((100_000, 1)),
                            np.cumsum(increments, axis=1)], axis=1)
    lags = [1, 2, 4, 8, 16, 32]
    a2 = kolmogorov_ratio_fit(paths, 2, lags, dt)
    a4 = kolmogorov_ratio_fit(paths, 4, lags, dt)
    passed = abs(a2 - 0.5) <= 0.05 and abs(a4 - 0.5) <= 0.05
    report("Kolmogorov exponent", passed,
           f"alpha(p=2) = {a2:.4f}, alpha(p=4) = {a4:.4f}, both in "
           f"0.5 +- 0.05")
    assert passed


def test_deterministic_rerun(report, tmp_path):
    config = parse_config("""
[experiment]
name = determinism
problem = B3
h = 0.2, 0.1, 0.05
n_paths = 2000
refine_k = 4
seed = 31
t_trunc = 8.0
mesh = 81
[checks]
enabled = true
gronwall_chains = 4
kolmogorov_paths = 2000
""")
    # worker counts are execution detail; artifacts may not depend on them
    first = run_experiment(config, out_root=tmp_path / "a")
    second = run_experiment(dataclasses.replace(config, workers=3),
                            out_root=tmp_path / "b")
    dir_a, dir_b = Path(first.out_dir), Path(second.out_dir)
    names_a = sorted(p.name for p in dir_a.iterdir())
    names_b = sorted(p.name for p in dir_b.iterdir())
    same_names = names_a == names_b
    diffs = [n for n in names_a
             if (dir_a / n).read_bytes() != (dir_b / n).read_bytes()]
    passed = same_names and not diffs
    report("deterministic rerun", passed,
           f"{len(names_a)} artifacts byte-identical across worker "
           f"counts 1 and 3" if passed else f"differing files: {diffs}")
    assert passed
