"""Exit-time moment estimation and threshold checks.

Exponential moments of exit times decide whether the backward scheme's
weighted norms are finite, so the thresholds here gate everything else.
Divergence of E[exp(m*tau)] cannot be certified from finite samples;
the scan reports operational verdicts from batch growth, not proofs.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, EstimationError, InvalidInput

DEFAULT_BATCHES = (1_000, 10_000, 100_000)
_STABLE_SPREAD = 0.10  # last three batch estimates within 10%
_DIVERGE_GROWTH = 3.0  # monotone growth beyond 3x across the schedule
_CENSOR_POISON = 1e-3  # censored mass that poisons a stable verdict


def one_d_threshold(a: float, b: float) -> float:
    """Exponential-rate threshold for Brownian exit from (-a, b).

    E[exp(mu * tau)] is finite exactly for mu below ``(pi/(a+b))^2 / 2``.
    """
    if not (a > 0 and b > 0):
        raise InvalidInput(f"interval arms must be positive, got {a}, {b}")
    return 0.5 * (math.pi / (a + b)) ** 2


def ball_cutoff_threshold(d: int, D: float) -> float:
    """Uniform-in-h exponential threshold for the Brownian cut-off exit.

    Conservative: rates below ``d / (8 D^2)`` keep E[exp(m * cutoff
    exit)] bounded for every admissible stepsize.
    """
    if d < 1:
        raise InvalidInput(f"dimension must be >= 1, got {d}")
    if not D > 0:
        raise InvalidInput(f"radius must be positive, got {D}")
    return d / (8.0 * D**2)


def power_from_exp(exp_moment: float, m: float, p: int) -> float:
    """Certified power-moment bound ``p! * M / m^p`` from E[exp(m*A)] = M.

    Pointwise ``(m*A)^p / p! <= exp(m*A)``, so the bound also dominates
    the empirical p-th moment of any sample set whose empirical
    exponential moment is M.
    """
    if not exp_moment >= 1.0:
        raise InvalidInput(f"exp moment must be >= 1, got {exp_moment}")
    if not m > 0:
        raise InvalidInput(f"rate must be positive, got {m}")
    if int(p) != p or p < 1:
        raise InvalidInput(f"order must be a positive integer, got {p}")
    return math.factorial(int(p)) * exp_moment / m ** int(p)


def gaussian_tail_ok(h0: float, alpha: float, D: float,
                     d: int) -> tuple[bool, float, float]:
    """Stepsize precondition for the cut-off exit bound.

    Requires ``h0 < D^2 / (2d)`` and a standard normal d-vector to stay
    inside the sup-norm ball of radius ``h0^(alpha - 1/2)`` with
    probability at least 3/5.  Returns ``(ok, tail_prob, h_bound)``.
    """
    if not (0.0 <= alpha < 0.5):
        raise InvalidInput(f"alpha must lie in [0, 1/2), got {alpha}")
    if not (h0 > 0 and D > 0 and d >= 1):
        raise InvalidInput("need h0 > 0, D > 0, d >= 1")
    h_bound = 0.5 * D**2 / d
    radius = h0 ** (alpha - 0.5)
    tail = 1.0 - math.erf(radius / math.sqrt(2.0)) ** d
    return (h0 < h_bound and tail <= 0.4), tail, h_bound


@dataclass(frozen=True)
class ExpMomentScan:
    """Batch-wise running estimates of E[exp(m * tau)] per rate m.

    ``estimates[i, j]`` is the prefix mean over the first
    ``batch_sizes[j]`` samples at rate ``m_values[i]``.  Censored
    samples enter with their known lower bound ``exp(m * t_max)``, so
    every estimate is a lower bound when censoring is present.
    """

    m_values: np.ndarray
    batch_sizes: tuple
    estimates: np.ndarray
    verdicts: tuple
    censor_fraction: float
    n_samples: int

    def verdict_for(self, m: float) -> str:
        i = int(np.argmin(np.abs(self.m_values - m)))
        if not math.isclose(self.m_values[i], m, rel_tol=1e-12):
            raise InvalidInput(f"rate {m} was not scanned")
        return self.verdicts[i]

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write("m,batch,estimate,verdict\n")
            for i, m in enumerate(self.m_values):
                for j, b in enumerate(self.batch_sizes):
                    fh.write(f"{float(m)!r},{b},"
                             f"{float(self.estimates[i, j])!r},"
                             f"{self.verdicts[i]}\n")


def _verdict(row: np.ndarray, censor_fraction: float) -> str:
    last = row[-3:]
    finite = np.isfinite(last)
    stable = bool(finite.all()
                  and (last.max() - last.min()) < _STABLE_SPREAD * last.min())
    if stable:
        return "inconclusive" if censor_fraction > _CENSOR_POISON else "stable"
    growing = bool(np.all(np.diff(row) > 0))
    blown = (not np.isfinite(row[-1])
             or (row[0] > 0 and row[-1] / row[0] > _DIVERGE_GROWTH))
    if growing and blown:
        return "diverging"
    return "inconclusive"


def exp_moment_scan(samples: np.ndarray, m_values,
                    batches=DEFAULT_BATCHES, *,
                    t_max: float | None = None) -> ExpMomentScan:
    """Probe finiteness of E[exp(m * tau)] across a batch schedule.

    Verdict per rate: "stable" when the last three prefix estimates
    agree within 10% (poisoned to "inconclusive" by censored mass above
    0.1%), "diverging" when estimates grow monotonically by more than a
    factor 3 over the schedule, else "inconclusive".

    Censored samples are the non-finite entries; they contribute
    ``exp(m * t_max)`` and require ``t_max``.
    """
    samples = np.asarray(samples, dtype=float)
    batches = tuple(int(b) for b in batches)
    if len(batches) < 3 or any(b2 <= b1 for b1, b2 in zip(batches,
                                                          batches[1:])):
        raise InvalidInput("batch schedule must be >= 3 increasing sizes")
    if samples.size < 10_000:
        raise InvalidInput(
            f"scan needs at least 10^4 samples, got {samples.size}")
    if batches[-1] > samples.size:
        raise InvalidInput("batch schedule exceeds the sample count")
    censored = ~np.isfinite(samples)
    if censored.all():
        raise EstimationError("all samples are censored")
    if censored.any():
        if t_max is None:
            raise InvalidInput("censored samples need t_max for their bound")
        samples = np.where(censored, t_max, samples)

    m_arr = np.atleast_1d(np.asarray(m_values, dtype=float))
    if not (m_arr > 0).all():
        raise InvalidInput("rates must be positive")
    censor_fraction = float(censored.mean())
    estimates = np.empty((m_arr.size, len(batches)))
    with np.errstate(over="ignore"):
        for i, m in enumerate(m_arr):
            weights = np.exp(m * samples)
            for j, b in enumerate(batches):
                estimates[i, j] = weights[:b].mean()
    verdicts = tuple(_verdict(estimates[i], censor_fraction)
                     for i in range(m_arr.size))
    return ExpMomentScan(m_values=m_arr, batch_sizes=batches,
                         estimates=estimates, verdicts=verdicts,
                         censor_fraction=censor_fraction,
                         n_samples=int(samples.size))


@dataclass(frozen=True)
class FreidlinReport:
    """Monte Carlo check of the factorial-geometric overshoot bound.

    ``estimate`` is the mean of ``max(tau_cut - tau_ref, 0)^p`` over
    pairs with both members observed; ``bound`` is ``p! (8 D^2/d)^p``.
    """

    p: int
    d: int
    D: float
    estimate: float
    ci_halfwidth: float
    bound: float
    verdict: str
    censor_fraction: float
    n_pairs: int
    tail_prob: float | None = None

    def to_json(self, path=None) -> str:
        payload = json.dumps(dataclasses.asdict(self), indent=2,
                             sort_keys=True)
        if path is not None:
            with open(path, "w", encoding="ascii") as fh:
                fh.write(payload + "\n")
        return payload


def freidlin_check(tau_ref: np.ndarray, tau_cut: np.ndarray, p: int,
                   D: float, d: int, *, h0: float | None = None,
                   alpha: float | None = None) -> FreidlinReport:
    """Check E[((tau_cut v tau_ref) - tau_ref)^p] against its bound.

    ``tau_ref`` is the fine-grid reference exit, ``tau_cut`` the
    cut-off exit on the coarse grid, coupled per path.  Pairs with a
    censored member (non-finite) are excluded and counted; censored
    mass above 1% downgrades the verdict to "inconclusive".

    When ``h0`` and ``alpha`` are given, the stepsize precondition
    (Gaussian tail and h0 bound, see :func:`gaussian_tail_ok`) is
    enforced before any estimation.
    """
    if p not in (1, 2, 3):
        raise InvalidInput(f"overshoot order must be 1, 2 or 3, got {p}")
    if not (D > 0 and d >= 1):
        raise InvalidInput("need D > 0 and d >= 1")
    tail = None
    if h0 is not None or alpha is not None:
        if h0 is None or alpha is None:
            raise InvalidInput("pass both h0 and alpha or neither")
        ok, tail, h_bound = gaussian_tail_ok(h0, alpha, D, d)
        if not ok:
            raise ConfigurationError(
                f"stepsize precondition violated: h0={h0} vs bound "
                f"{h_bound}, gaussian tail {tail:.3f} vs 0.4")

    tr = np.asarray(tau_ref, dtype=float)
    tc = np.asarray(tau_cut, dtype=float)
    if tr.shape != tc.shape:
        raise InvalidInput("coupled samples must have matching shapes")
    observed = np.isfinite(tr) & np.isfinite(tc)
    censor_fraction = float(1.0 - observed.mean())
    if not observed.any():
        raise EstimationError("no uncensored pairs")
    gap = np.maximum(tc[observed] - tr[observed], 0.0) ** p
    estimate = float(gap.mean())
    n = int(observed.sum())
    ci = 1.96 * float(gap.std(ddof=1)) / math.sqrt(n) if n > 1 else math.inf
    bound = math.factorial(p) * (8.0 * D**2 / d) ** p
    if censor_fraction > 0.01:
        verdict = "inconclusive"
    else:
        verdict = "pass" if estimate + ci <= bound else "fail"
    return FreidlinReport(p=p, d=d, D=D, estimate=estimate,
                          ci_halfwidth=ci, bound=bound, verdict=verdict,
                          censor_fraction=censor_fraction, n_pairs=n,
                          tail_prob=tail)
