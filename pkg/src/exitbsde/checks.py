"""Structural verification of the inequalities the solver leans on.

The backward scheme's error analysis rests on a handful of discrete
inequalities: a Gronwall-type comparison along stopped chains, the
Kolmogorov continuity scaling of path increments, the strong Euler
error rate, and a modulus bound for paths stopped at two nearby times.
Each gets an independent check here, exercised on objects small enough
to enumerate exactly or cheap enough to estimate tightly.

The Gronwall comparison is checked on finite-state chains where every
conditional expectation is a finite sum, so "holds" means holds, not
"holds up to sampling noise".  The path-based checks report verdicts
with confidence information instead.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from .exceptions import EstimationError, FitError, InvalidInput
from .forward import GridSpec, coupled_fine_reference
from .rng import derive_seed

_ATOL = 1e-12  # absolute slack for exact enumeration in float64


# ---------------------------------------------------------------------------
# finite-state chains and the discrete Gronwall comparison


@dataclass(frozen=True)
class FiniteChain:
    """Finite-state Markov chain with absorption and two running sequences.

    ``transitions[t]`` is the one-step matrix from node t to t+1 (rows
    sum to one).  The chain stops at the first node whose state is
    absorbing, or at the final node regardless; ``a`` and ``b`` hold
    the compared sequence and the forcing term per (node, state), and
    ``xi`` the terminal value at each absorbing state.  ``a`` must stay
    pinned to ``xi`` at absorbing states so stopping freezes it.
    """

    h: float
    transitions: np.ndarray  # (n_steps, n_states, n_states)
    absorbing: np.ndarray    # (n_states,) bool
    a: np.ndarray            # (n_steps + 1, n_states), nonnegative
    b: np.ndarray            # (n_steps + 1, n_states), nonnegative
    xi: np.ndarray           # (n_states,)

    @property
    def n_states(self) -> int:
        return int(self.transitions.shape[1])

    @property
    def n_steps(self) -> int:
        return int(self.transitions.shape[0])

    def validate(self) -> None:
        """Raise InvalidInput on any structural defect."""
        P = np.asarray(self.transitions, dtype=float)
        if P.ndim != 3 or P.shape[1] != P.shape[2]:
            raise InvalidInput(f"transitions must be (steps, n, n), got {P.shape}")
        n = P.shape[1]
        if self.h <= 0:
            raise InvalidInput(f"step h must be positive, got {self.h}")
        absorbing = np.asarray(self.absorbing, dtype=bool)
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float)
        xi = np.asarray(self.xi, dtype=float)
        if absorbing.shape != (n,) or xi.shape != (n,):
            raise InvalidInput("absorbing and xi must have one entry per state")
        want = (P.shape[0] + 1, n)
        if a.shape != want or b.shape != want:
            raise InvalidInput(f"a and b must have shape {want}")
        if np.any(P < -_ATOL):
            raise InvalidInput("transition probabilities must be nonnegative")
        if np.max(np.abs(P.sum(axis=2) - 1.0)) > 1e-9:
            raise InvalidInput("transition rows must sum to one")
        for s in np.flatnonzero(absorbing):
            if np.max(np.abs(P[:, s, :] - np.eye(n)[s])) > 1e-9:
                raise InvalidInput(f"absorbing state {s} must map to itself")
        if np.any(a < -_ATOL) or np.any(b < -_ATOL):
            raise InvalidInput("a and b must be nonnegative")
        if np.any(xi < -_ATOL):
            raise InvalidInput("xi must be nonnegative")
        for s in np.flatnonzero(absorbing):
            if np.max(np.abs(a[:, s] - xi[s])) > 1e-9:
                raise InvalidInput(
                    f"a must stay equal to xi at absorbing state {s}")

    def to_text(self) -> str:
        """Serialize to the plain config text format (exact round trip)."""
        cp = configparser.ConfigParser()
        cp["chain"] = {
            "h": repr(float(self.h)),
            "n_states": str(self.n_states),
            "n_steps": str(self.n_steps),
            "absorbing": ",".join(str(int(v)) for v in self.absorbing),
            "xi": _row(self.xi),
        }
        cp["transitions"] = {
            f"t{t}": "; ".join(_row(r) for r in self.transitions[t])
            for t in range(self.n_steps)
        }
        cp["a"] = {f"n{t}": _row(self.a[t]) for t in range(self.n_steps + 1)}
        cp["b"] = {f"n{t}": _row(self.b[t]) for t in range(self.n_steps + 1)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _row(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def _parse_row(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",")], dtype=float)


def chain_from_text(text: str) -> FiniteChain:
    """Parse a chain serialized by :meth:`FiniteChain.to_text`."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
        head = cp["chain"]
        n_states = int(head["n_states"])
        n_steps = int(head["n_steps"])
        transitions = np.empty((n_steps, n_states, n_states))
        for t in range(n_steps):
            rows = cp["transitions"][f"t{t}"].split(";")
            transitions[t] = [_parse_row(r) for r in rows]
        a = np.array([_parse_row(cp["a"][f"n{t}"]) for t in range(n_steps + 1)])
        b = np.array([_parse_row(cp["b"][f"n{t}"]) for t in range(n_steps + 1)])
        chain = FiniteChain(
            h=float(head["h"]),
            transitions=transitions,
            absorbing=np.array(
                [bool(int(v)) for v in head["absorbing"].split(",")]),
            a=a, b=b, xi=_parse_row(head["xi"]),
        )
    except (KeyError, ValueError, configparser.Error) as exc:
        raise InvalidInput(f"unparseable chain text: {exc}") from exc
    chain.validate()
    return chain


@dataclass(frozen=True)
class GronwallReport:
    """Outcome of the discrete Gronwall comparison on one chain.

    ``hypothesis_ok`` records whether the one-step inequality
    ``a_t <= C E_t[a_{t+h}] + K h b_t`` held at every live (node, state);
    when it fails the conclusion is not evaluated (``holds`` is None)
    and ``hypothesis_witness`` points at the first offending pair.
    ``min_slack``/``max_slack`` are the extremes of (bound - a) over the
    conclusion check, so exact-equality constructions can be pinned.
    """

    c: float
    k: float
    hypothesis_ok: bool
    hypothesis_witness: dict | None
    holds: bool | None
    witness: dict | None
    min_slack: float
    max_slack: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


def discrete_gronwall_verify(chain: FiniteChain, C: float, K: float,
                             *, rtol: float = 1e-9) -> GronwallReport:
    """Check the stopped comparison bound on a finite chain by enumeration.

    Hypothesis, checked at every node t before the horizon and every
    non-absorbing state: ``a_t <= C E_t[a_{t+h}] + K h b_t``.  When it
    holds everywhere the implied bound

        ``a_t <= E_t[ C^{(tau-t)/h} a_tau + K h sum_{l in [t,tau)}
        C^{(l-t)/h} b_l ]``

    is evaluated exactly by backward recursion over (node, state) and
    compared against ``a``, with tau the first absorbing visit (the
    final node at the latest).  A hypothesis failure yields a
    precondition report, not a bound failure.
    """
    chain.validate()
    if C <= 0:
        raise InvalidInput(f"comparison constant C must be positive, got {C}")
    if K < 0:
        raise InvalidInput(f"forcing constant K must be nonnegative, got {K}")
    P, a, b = chain.transitions, chain.a, chain.b
    h = chain.h
    live = ~np.asarray(chain.absorbing, dtype=bool)
    scale = max(1.0, float(np.max(a)))
    tol = _ATOL + rtol * scale

    hyp_witness = None
    for t in range(chain.n_steps):
        rhs = C * (P[t] @ a[t + 1]) + K * h * b[t]
        bad = np.flatnonzero(live & (a[t] > rhs + tol))
        if bad.size:
            s = int(bad[0])
            hyp_witness = {"node": t, "state": s,
                           "lhs": float(a[t, s]), "rhs": float(rhs[s])}
            break
    if hyp_witness is not None:
        return GronwallReport(c=float(C), k=float(K), hypothesis_ok=False,
                              hypothesis_witness=hyp_witness, holds=None,
                              witness=None, min_slack=math.nan,
                              max_slack=math.nan)

    # G[t, s] = E[ C^{steps to tau} a_tau + K h sum C^{steps} b | t, s ]
    # for live states; stopping freezes the value at xi = a.
    G = a[chain.n_steps].copy()
    min_slack, max_slack = math.inf, -math.inf
    witness = None
    for t in range(chain.n_steps, -1, -1):
        if t < chain.n_steps:
            nxt = C * (P[t] @ G) + K * h * b[t]
            G = np.where(live, nxt, a[t])
        slack = G - a[t]
        min_slack = min(min_slack, float(slack.min()))
        max_slack = max(max_slack, float(slack.max()))
        bad = np.flatnonzero(slack < -tol)
        if bad.size:
            s = int(bad[-1])
            witness = {"node": t, "state": s,
                       "lhs": float(a[t, s]), "rhs": float(G[s])}
    return GronwallReport(c=float(C), k=float(K), hypothesis_ok=True,
                          hypothesis_witness=None, holds=witness is None,
                          witness=witness, min_slack=min_slack,
                          max_slack=max_slack)


def random_hypothesis_chain(n_states: int, n_steps: int, seed: int, *,
                            C: float, K: float, h: float = 0.25,
                            absorb_prob: float = 0.3) -> FiniteChain:
    """Random chain built to satisfy the one-step hypothesis.

    Transitions are Dirichlet rows; ``a`` is constructed backward with
    equality against ``C E[a] + K h b`` and then shrunk by a per-entry
    slack factor in [0.2, 1], which preserves the hypothesis because
    the right side uses the already shrunk next slice.
    """
    if n_states < 1 or n_steps < 1:
        raise InvalidInput("need at least one state and one step")
    if C <= 0 or K < 0 or h <= 0:
        raise InvalidInput("need C > 0, K >= 0, h > 0")
    rng = np.random.default_rng(seed)
    absorbing = rng.random(n_states) < absorb_prob
    P = rng.dirichlet(np.ones(n_states), size=(n_steps, n_states))
    eye = np.eye(n_states)
    for s in np.flatnonzero(absorbing):
        P[:, s, :] = eye[s]
    b = rng.uniform(0.0, 1.0, size=(n_steps + 1, n_states))
    xi = rng.uniform(0.0, 1.0, size=n_states)
    a = np.empty((n_steps + 1, n_states))
    a[n_steps] = np.where(absorbing, xi, rng.uniform(0.0, 1.0, n_states))
    for t in range(n_steps - 1, -1, -1):
        bound = C * (P[t] @ a[t + 1]) + K * h * b[t]
        slack = rng.uniform(0.2, 1.0, size=n_states)
        a[t] = np.where(absorbing, xi, slack * bound)
    chain = FiniteChain(h=h, transitions=P, absorbing=absorbing,
                        a=a, b=b, xi=xi)
    chain.validate()
    return chain


# ---------------------------------------------------------------------------
# path-scaling checks


def kolmogorov_ratio_fit(paths: np.ndarray, p: float, lags,
                         dt: float) -> float:
    """Continuity exponent fitted from increment moments.

    Fits the least-squares slope of ``log E |P_{t+l} - P_t|^p`` against
    ``log l`` over the given lags (node counts, averaged over all start
    nodes and paths) and returns slope / p, the Kolmogorov-criterion
    exponent alpha.  Fewer than three lags cannot pin a slope.
    """
    paths = np.asarray(paths, dtype=float)
    if paths.ndim == 2:
        paths = paths[:, :, None]
    if paths.ndim != 3 or paths.shape[0] < 1 or paths.shape[1] < 2:
        raise InvalidInput(f"paths must be (n, nodes[, d]), got {paths.shape}")
    if p < 2:
        raise InvalidInput(f"moment order p must be >= 2, got {p}")
    if dt <= 0:
        raise InvalidInput(f"node spacing dt must be positive, got {dt}")
    lags = [int(l) for l in lags]
    if len(lags) < 3:
        raise FitError(f"need at least 3 lags for a slope, got {len(lags)}")
    if len(set(lags)) != len(lags):
        raise InvalidInput("lags must be distinct")
    n_nodes = paths.shape[1]
    for lag in lags:
        if lag < 1 or lag >= n_nodes:
            raise InvalidInput(f"lag {lag} outside [1, {n_nodes - 1}]")
        if lag * dt > 1.0 + 1e-12:
            raise InvalidInput(f"lag {lag} corresponds to time {lag * dt} > 1")
    moments = []
    for lag in lags:
        diff = paths[:, lag:, :] - paths[:, :-lag, :]
        dist = np.sqrt((diff * diff).sum(axis=2))
        moments.append(float(np.mean(dist ** p)))
    moments = np.asarray(moments)
    if np.any(moments <= 0.0):
        raise EstimationError("degenerate increments: zero moment at some lag")
    slope = np.polyfit(np.log(np.asarray(lags, dtype=float) * dt),
                       np.log(moments), 1)[0]
    return float(slope / p)


@dataclass(frozen=True)
class EmSlopeReport:
    """Strong-error decay of the Euler chain against its fine reference.

    ``errors[i]`` is the Monte Carlo mean of the squared deviation at
    stepsize ``h_values[i]``; ``raw_slope`` fits log error against
    log h, and ``order`` = raw_slope / 2 is the strong convergence
    order in the usual E||X - Xbar|| ~ h^order normalization.
    """

    h_values: tuple
    errors: tuple
    ci_halfwidths: tuple
    raw_slope: float
    order: float
    verdict: str  # "ok" | "degenerate" | "inconclusive"

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


def em_strong_error_slope(problem, h_values, t_max: float, refine_K: int, *,
                          n_paths: int = 20_000, seed: int = 0,
                          stopped: bool = False,
                          backend: str | None = None) -> EmSlopeReport:
    """Fit the strong-error decay rate of the Euler chain.

    For each stepsize the coarse chain is coupled to a fine reference
    (stepsize h / refine_K, same Brownian increments) and the squared
    gap between the two is averaged at a common evaluation time: the
    fixed horizon ``t_max`` when ``stopped`` is false, the fine chain's
    exit time when true.  In the stopped mode both chains run to the
    horizon and the coarse chain is read at the last node at or before
    the fine exit (its piecewise-constant interpolation at that time),
    so the comparison matches the deviation-at-a-stopping-time bound
    and the order stays near 1/2.

    Zero noise (or any coupling making the chains equal) gives zero
    errors at every h: verdict "degenerate", no slope.  When every
    adjacent pair of error estimates has overlapping confidence
    intervals the decay is unresolved: verdict "inconclusive".
    """
    h_values = sorted(float(h) for h in h_values)
    if len(h_values) < 3:
        raise InvalidInput(f"need at least 3 stepsizes, got {len(h_values)}")
    errors, cis = [], []
    for h in h_values:
        bundle = coupled_fine_reference(
            problem, GridSpec(h, t_max), refine_K, n_paths,
            derive_seed(seed, f"em-slope-{h!r}"), stop_at_exit=False,
            store_states=stopped, backend=backend)
        ok = ~bundle.fault
        if not np.any(ok):
            raise EstimationError("all paths faulted")
        if stopped:
            fi = bundle.fine.exit_index
            node = np.where(fi >= 0, fi // refine_K, bundle.grid.n_steps)
            coarse = np.take_along_axis(bundle.states, node[:, None, None],
                                        axis=1)[:, 0, :]
            fine = np.where((fi >= 0)[:, None], bundle.fine.exit_state,
                            bundle.fine.final_state)
            gap = coarse - fine
        else:
            gap = bundle.final_state - bundle.fine.final_state
        sq = (gap[ok] ** 2).sum(axis=1)
        errors.append(float(sq.mean()))
        cis.append(float(1.96 * sq.std(ddof=1) / math.sqrt(sq.size)))
    # squared gaps at the accumulation-order noise floor (~ulp of O(1)
    # states, squared) carry no rate information
    floor = 1e-24
    if max(errors) <= floor:
        return EmSlopeReport(tuple(h_values), tuple(errors), tuple(cis),
                             math.nan, math.nan, "degenerate")
    if min(errors) <= floor:
        raise EstimationError("zero error at some stepsizes but not all")
    verdict = "ok"
    if all(max(errors[i] - cis[i], errors[i + 1] - cis[i + 1])
           <= min(errors[i] + cis[i], errors[i + 1] + cis[i + 1])
           for i in range(len(errors) - 1)):
        verdict = "inconclusive"
    raw_slope = float(np.polyfit(np.log(h_values), np.log(errors), 1)[0])
    return EmSlopeReport(tuple(h_values), tuple(errors), tuple(cis),
                         raw_slope, raw_slope / 2.0, verdict)


@dataclass(frozen=True)
class TwoStoppingReport:
    """Modulus bound for paths stopped at two nearby times.

    For each stopping pair the left side is E[sup_s |P_{s ^ tau1} -
    P_{s ^ tau2}|^p] and the right side sqrt(E[|tau1 - tau2|^{2 p
    (alpha - eps)}]).  No universal constant is claimed; the verdict
    says whether the observed ratios stay bounded across the family.
    """

    p: float
    alpha: float
    epsilon: float
    lhs: tuple
    rhs: tuple
    ratios: tuple
    log_slope: float
    verdict: str  # "bounded" | "unbounded" | "degenerate"

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


def two_stopping_gap_check(paths: np.ndarray, dt: float, pairs, p: float,
                           epsilon: float, *,
                           alpha: float = 0.5) -> TwoStoppingReport:
    """Compare stopped-path gaps against powers of the stopping gap.

    ``pairs`` is a family of (tau1, tau2) node-index arrays, one pair
    rule per entry.  Ratios are computed per rule; the family verdict
    is "bounded" when the ratios stay within a constant band or the
    fitted slope of log LHS against log RHS is at least one (so the
    ratio does not blow up as the right side vanishes).  Pairs with
    identical stopping times contribute zero on both sides and are
    degenerate for a ratio.
    """
    paths = np.asarray(paths, dtype=float)
    if paths.ndim == 2:
        paths = paths[:, :, None]
    if paths.ndim != 3:
        raise InvalidInput(f"paths must be (n, nodes[, d]), got {paths.shape}")
    if dt <= 0:
        raise InvalidInput(f"node spacing dt must be positive, got {dt}")
    if p < 1:
        raise InvalidInput(f"moment order p must be >= 1, got {p}")
    if not (0 < epsilon < alpha):
        raise InvalidInput(f"need 0 < epsilon < alpha, got {epsilon}, {alpha}")
    if len(pairs) == 0:
        raise InvalidInput("need at least one stopping pair")
    n, n_nodes = paths.shape[0], paths.shape[1]
    nodes = np.arange(n_nodes)
    lhs_all, rhs_all = [], []
    for tau1, tau2 in pairs:
        tau1 = np.asarray(tau1, dtype=np.int64)
        tau2 = np.asarray(tau2, dtype=np.int64)
        if tau1.shape != (n,) or tau2.shape != (n,):
            raise InvalidInput("each stopping rule needs one node per path")
        if (tau1.min() < 0 or tau2.min() < 0
                or tau1.max() >= n_nodes or tau2.max() >= n_nodes):
            raise InvalidInput("stopping nodes outside the path range")
        p1 = np.take_along_axis(
            paths, np.minimum(nodes[None, :], tau1[:, None])[:, :, None],
            axis=1)
        p2 = np.take_along_axis(
            paths, np.minimum(nodes[None, :], tau2[:, None])[:, :, None],
            axis=1)
        dist = np.sqrt(((p1 - p2) ** 2).sum(axis=2))
        lhs_all.append(float(np.mean(dist.max(axis=1) ** p)))
        gap_t = np.abs(tau1 - tau2) * dt
        rhs_all.append(float(math.sqrt(
            np.mean(gap_t ** (2.0 * p * (alpha - epsilon))))))
    lhs = np.asarray(lhs_all)
    rhs = np.asarray(rhs_all)
    usable = (lhs > 0) & (rhs > 0)
    if not np.any(usable):
        return TwoStoppingReport(float(p), float(alpha), float(epsilon),
                                 tuple(lhs_all), tuple(rhs_all), (), math.nan,
                                 "degenerate")
    ratios = lhs[usable] / rhs[usable]
    if usable.sum() >= 2 and np.ptp(np.log(rhs[usable])) > 0:
        log_slope = float(np.polyfit(np.log(rhs[usable]),
                                     np.log(lhs[usable]), 1)[0])
    else:
        log_slope = math.nan
    bounded = bool(ratios.max() <= 5.0 * ratios.min()
                   or (not math.isnan(log_slope) and log_slope >= 0.8))
    return TwoStoppingReport(float(p), float(alpha), float(epsilon),
                             tuple(lhs_all), tuple(rhs_all),
                             tuple(float(r) for r in ratios), log_slope,
                             "bounded" if bounded else "unbounded")
