"""Problem instances, standing-assumption checks, and closed-form benchmarks.

A problem couples a forward diffusion (drift ``mu``, diffusion ``sigma``,
bounded open domain, start point) with backward data (generator ``f``
Lipschitz in the value argument, boundary function ``g``).  The catalog
problems additionally carry the analytic solution ``u`` of the associated
semilinear elliptic Dirichlet problem

    1/2 tr(sigma sigma^T Hess u) + mu . grad u + f(x, u(x)) = 0,  u = g on
    the boundary,

which is verified numerically by the finite-difference residual oracle in
:func:`pde_residual`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .exceptions import CatalogError, DomainError, InvalidInput

# Coefficients are constant on the domain inflated by TAPER_INNER and fall
# smoothly (C^1 smoothstep) to zero beyond TAPER_OUTER, giving the compact
# support the theory assumes.  Paths are never advanced after exit, so the
# taper cannot influence any statistic of a stopped simulation.
TAPER_INNER = 1.0
TAPER_OUTER = 2.0


# ---------------------------------------------------------------------------
# grids and domains


@dataclass(frozen=True)
class GridSpec:
    """Equidistant time grid with nodes n*h up to the censoring horizon."""

    h: float
    t_max: float

    def __post_init__(self):
        if not (np.isfinite(self.h) and self.h > 0):
            raise InvalidInput(f"stepsize must be positive, got {self.h}")
        if not (np.isfinite(self.t_max) and self.t_max >= self.h):
            raise InvalidInput(f"t_max must be at least h, got {self.t_max}")
        ratio = self.t_max / self.h
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise InvalidInput(
                f"t_max={self.t_max} is not an integer multiple of h={self.h}"
            )

    @property
    def n_steps(self) -> int:
        return int(round(self.t_max / self.h))

    def node(self, n: int) -> float:
        return n * self.h

    def nodes(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.h

    def ceil_node(self, t: float) -> float:
        """Smallest grid node >= t (at least one step)."""
        n = max(1, math.ceil(t / self.h - 1e-12))
        return n * self.h


@dataclass(frozen=True)
class DomainSpec:
    """Open bounded domain: an interval, an axis-aligned box, or a ball."""

    kind: str
    lo: tuple = ()
    hi: tuple = ()
    center: tuple = ()
    radius: float = 0.0

    @staticmethod
    def interval(a: float, b: float) -> "DomainSpec":
        if not (a < b):
            raise InvalidInput(f"empty interval ({a}, {b})")
        return DomainSpec(kind="box", lo=(float(a),), hi=(float(b),))

    @staticmethod
    def box(lo, hi) -> "DomainSpec":
        lo = tuple(float(v) for v in lo)
        hi = tuple(float(v) for v in hi)
        if len(lo) != len(hi) or not lo:
            raise InvalidInput("box bounds must be same nonzero length")
        if not all(a < b for a, b in zip(lo, hi)):
            raise InvalidInput(f"empty box {lo}..{hi}")
        return DomainSpec(kind="box", lo=lo, hi=hi)

    @staticmethod
    def ball(center, radius: float) -> "DomainSpec":
        center = tuple(float(v) for v in center)
        if not (radius > 0):
            raise InvalidInput(f"ball radius must be positive, got {radius}")
        return DomainSpec(kind="ball", center=center, radius=float(radius))

    @property
    def dim(self) -> int:
        return len(self.lo) if self.kind == "box" else len(self.center)

    def contains(self, x: np.ndarray) -> np.ndarray:
        """Strict (open) membership for points of shape (..., d)."""
        x = np.asarray(x, dtype=float)
        if self.kind == "box":
            lo = np.array(self.lo)
            hi = np.array(self.hi)
            return np.all((x > lo) & (x < hi), axis=-1)
        c = np.array(self.center)
        return np.sum((x - c) ** 2, axis=-1) < self.radius**2

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "box":
            return np.array(self.lo), np.array(self.hi)
        c = np.array(self.center)
        return c - self.radius, c + self.radius


def taper_factor(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """C^1 cut-off: 1 within TAPER_INNER of the box, 0 beyond TAPER_OUTER.

    Distance is the sup-norm distance to the box [lo, hi].  Must stay in
    sync with the scalar copy inside ``_kernels``.
    """
    x = np.asarray(x, dtype=float)
    d = np.maximum(lo - x, x - hi)
    dist = np.maximum(np.max(d, axis=-1), 0.0)
    u = np.clip((TAPER_OUTER - dist) / (TAPER_OUTER - TAPER_INNER), 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


@dataclass(frozen=True)
class TaperedConstantCoeffs:
    """Drift/diffusion of the form s(x)*mu0, s(x)*sigma0 with taper s.

    This form covers every catalog benchmark exactly (s == 1 on the whole
    domain) and is what the compiled forward kernels understand.
    """

    mu0: tuple
    sigma0: tuple  # row-major d x d
    box_lo: tuple
    box_hi: tuple

    def mu_array(self) -> np.ndarray:
        return np.array(self.mu0, dtype=float)

    def sigma_array(self) -> np.ndarray:
        d = len(self.mu0)
        return np.array(self.sigma0, dtype=float).reshape(d, d)


# ---------------------------------------------------------------------------
# problem definitions


@dataclass(frozen=True)
class ProblemSpec:
    """Forward-backward problem instance with declared Lipschitz constants.

    ``mu``: (n, d) -> (n, d); ``sigma``: (n, d) -> (n, d, d);
    ``f``: ((n, d), (n,)) -> (n,); ``g``: (n, d) -> (n,).
    The declared constants are trusted but can be probed with
    :func:`probe_lipschitz`.
    """

    name: str
    d: int
    domain: DomainSpec
    x0: tuple
    mu: Callable[[np.ndarray], np.ndarray]
    sigma: Callable[[np.ndarray], np.ndarray]
    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    L_mu: float
    L_sigma: float
    L_f: float
    L_g: float
    sup_f0: float
    coeffs: TaperedConstantCoeffs | None = None

    def __post_init__(self):
        if self.domain.dim != self.d:
            raise InvalidInput("domain dimension does not match d")
        x0 = np.asarray(self.x0, dtype=float)
        if x0.shape != (self.d,):
            raise InvalidInput("x0 must have shape (d,)")
        if not self.domain.contains(x0[None, :])[0]:
            raise InvalidInput("start point must lie strictly inside the domain")
        if not (self.L_f > 0):
            raise InvalidInput("L_f must be strictly positive")
        for name in ("L_mu", "L_sigma", "L_g", "sup_f0"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise InvalidInput(f"{name} must be finite and nonnegative")
        # coefficients must evaluate finitely on the inflated bounding box
        lo, hi = self.domain.bounding_box()
        probe = _box_probe_points(lo - TAPER_OUTER, hi + TAPER_OUTER, self.d)
        if not (
            np.all(np.isfinite(self.mu(probe)))
            and np.all(np.isfinite(self.sigma(probe)))
        ):
            raise InvalidInput("mu/sigma do not evaluate finitely near the domain")

    def x0_array(self) -> np.ndarray:
        return np.asarray(self.x0, dtype=float)


def _box_probe_points(lo: np.ndarray, hi: np.ndarray, d: int) -> np.ndarray:
    axes = [np.linspace(lo[i], hi[i], 5) for i in range(d)]
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


def make_tapered_problem(
    name: str,
    domain: DomainSpec,
    x0,
    mu0,
    sigma0,
    f: Callable,
    g: Callable,
    L_f: float,
    sup_f0: float,
    L_g: float = 1.0,
) -> ProblemSpec:
    """Problem with tapered-constant coefficients (kernel fast path)."""
    d = domain.dim
    mu0 = np.asarray(mu0, dtype=float).reshape(d)
    sigma0 = np.asarray(sigma0, dtype=float).reshape(d, d)
    lo, hi = domain.bounding_box()
    coeffs = TaperedConstantCoeffs(
        mu0=tuple(mu0),
        sigma0=tuple(sigma0.ravel()),
        box_lo=tuple(lo),
        box_hi=tuple(hi),
    )

    def mu(x, _mu0=mu0, _lo=lo, _hi=hi):
        s = taper_factor(x, _lo, _hi)
        return s[..., None] * _mu0

    def sigma(x, _s0=sigma0, _lo=lo, _hi=hi):
        s = taper_factor(x, _lo, _hi)
        return s[..., None, None] * _s0

    # taper slope bounds the Lipschitz constants of the tapered fields:
    # |d/dx smoothstep| <= 1.5 / (TAPER_OUTER - TAPER_INNER)
    slope = 1.5 / (TAPER_OUTER - TAPER_INNER)
    L_mu = slope * float(np.linalg.norm(mu0))
    L_sigma = slope * float(np.linalg.norm(sigma0))
    return ProblemSpec(
        name=name,
        d=d,
        domain=domain,
        x0=tuple(np.asarray(x0, dtype=float)),
        mu=mu,
        sigma=sigma,
        f=f,
        g=g,
        L_mu=L_mu,
        L_sigma=L_sigma,
        L_f=L_f,
        L_g=L_g,
        sup_f0=sup_f0,
        coeffs=coeffs,
    )


# ---------------------------------------------------------------------------
# standing assumptions


@dataclass(frozen=True)
class StepsizeVerdict:
    ok: bool
    bound: float
    reason: str | None = None


def validate_stepsize(grid: GridSpec | float, L_f: float) -> StepsizeVerdict:
    """Check h < min{L_f, 1/(12 L_f)}.

    On violation the verdict names the binding branch.
    """
    h = grid.h if isinstance(grid, GridSpec) else float(grid)
    if not (np.isfinite(h) and h > 0):
        raise InvalidInput(f"stepsize must be positive, got {h}")
    if not (np.isfinite(L_f) and L_f > 0):
        raise InvalidInput(f"L_f must be positive, got {L_f}")
    b1 = L_f
    b2 = 1.0 / (12.0 * L_f)
    bound = min(b1, b2)
    if h < bound:
        return StepsizeVerdict(ok=True, bound=bound)
    reason = "h >= L_f" if b1 <= b2 else "h >= 1/(12*L_f)"
    return StepsizeVerdict(ok=False, bound=bound, reason=reason)


@dataclass(frozen=True)
class MomentBudget:
    """Feasibility of the exponential-moment budget.

    Feasible iff rho > max{q1*d*(6*L_mu + 3*q1*L_sigma^2), 4*q2*L_f}.
    """

    rho: float
    q1: float
    q2: float
    threshold_forward: float
    threshold_backward: float
    feasible: bool


def validate_moment_budget(
    d: int,
    L_mu: float,
    L_sigma: float,
    L_f: float,
    q1: float,
    q2: float,
    rho: float,
) -> MomentBudget:
    for name, v in (("L_mu", L_mu), ("L_sigma", L_sigma), ("L_f", L_f)):
        if not (np.isfinite(v) and v >= 0):
            raise InvalidInput(f"{name} must be finite and nonnegative")
    if not (q1 >= 2 and q2 >= 2):
        raise InvalidInput("moment orders q1, q2 must be at least 2")
    if not (np.isfinite(rho) and rho > 0):
        raise InvalidInput("rho must be positive")
    if d < 1:
        raise InvalidInput("dimension must be at least 1")
    thr_forward = q1 * d * (6.0 * L_mu + 3.0 * q1 * L_sigma**2)
    thr_backward = 4.0 * q2 * L_f
    return MomentBudget(
        rho=rho,
        q1=q1,
        q2=q2,
        threshold_forward=thr_forward,
        threshold_backward=thr_backward,
        feasible=rho > max(thr_forward, thr_backward),
    )


# ---------------------------------------------------------------------------
# benchmark catalog


@dataclass(frozen=True)
class BenchmarkProblem:
    """Catalog problem with the analytic value function ``u``.

    ``obs_kind``/``psi`` factor u through a scalar observable that is
    monotone along paths' visited values ("coord0": first coordinate,
    "radius2": squared euclidean norm), which lets the forward kernels
    track exact per-cell ranges of u without storing fine paths.
    """

    id: str
    spec: ProblemSpec
    u: Callable[[np.ndarray], np.ndarray]
    obs_kind: str
    psi: Callable[[np.ndarray], np.ndarray]
    psi_increasing: bool

    def u_range_from_obs(self, obs_min: np.ndarray, obs_max: np.ndarray):
        """Exact range of u over visited points from the observable range."""
        a = self.psi(obs_min)
        b = self.psi(obs_max)
        if self.psi_increasing:
            return a, b
        return b, a


def catalog_benchmark(benchmark_id: str, **overrides) -> BenchmarkProblem:
    """Closed-form benchmarks.

    B1: constant generator f = lam on (-D, D), u = lam*(D^2 - x^2).
    B2: linear generator f(y) = c*y + a (c < 0) on (-D, D),
        u = (a/c)*(cosh(k x)/cosh(k D) - 1) with k = sqrt(-2 c).
    B3: harmonic identity, f = 0, g(x) = x, u(x) = x.
    B4: d-dimensional ball(0, D), f = d, g = 0, u = D^2 - |x|^2.
    """
    builders = {"B1": _build_b1, "B2": _build_b2, "B3": _build_b3, "B4": _build_b4}
    try:
        builder = builders[benchmark_id]
    except KeyError:
        raise CatalogError(f"unknown benchmark id {benchmark_id!r}") from None
    return builder(**overrides)


def _build_b1(lam: float = 0.1, D: float = 1.0, L_f: float = 0.01) -> BenchmarkProblem:
    domain = DomainSpec.interval(-D, D)

    def f(x, y, _lam=lam):
        return np.full(np.shape(y), _lam, dtype=float)

    def g(x):
        return np.zeros(x.shape[:-1])

    spec = make_tapered_problem(
        "B1", domain, [0.0], [0.0], [[1.0]], f, g, L_f=L_f, sup_f0=abs(lam), L_g=0.0
    )

    def u(x, _lam=lam, _D=D):
        x = np.asarray(x, dtype=float)
        return _lam * (_D**2 - x[..., 0] ** 2)

    def psi(r2, _lam=lam, _D=D):
        return _lam * (_D**2 - np.asarray(r2, dtype=float))

    return BenchmarkProblem(
        id="B1", spec=spec, u=u, obs_kind="radius2", psi=psi, psi_increasing=False
    )


def _build_b2(c: float = -0.5, a: float = 1.0, D: float = 1.0) -> BenchmarkProblem:
    if not (c < 0):
        raise InvalidInput("B2 uses a negative linear coefficient c")
    k = math.sqrt(-2.0 * c)
    domain = DomainSpec.interval(-D, D)

    def f(x, y, _c=c, _a=a):
        return _c * np.asarray(y, dtype=float) + _a

    def g(x):
        return np.zeros(x.shape[:-1])

    spec = make_tapered_problem(
        "B2", domain, [0.0], [0.0], [[1.0]], f, g, L_f=abs(c), sup_f0=abs(a), L_g=0.0
    )

    scale = a / c
    ckd = math.cosh(k * D)

    def u(x, _s=scale, _k=k, _c=ckd):
        x = np.asarray(x, dtype=float)
        return _s * (np.cosh(_k * x[..., 0]) / _c - 1.0)

    def psi(r2, _s=scale, _k=k, _c=ckd):
        r = np.sqrt(np.maximum(np.asarray(r2, dtype=float), 0.0))
        return _s * (np.cosh(_k * r) / _c - 1.0)

    return BenchmarkProblem(
        id="B2", spec=spec, u=u, obs_kind="radius2", psi=psi, psi_increasing=False
    )


def _build_b3(D: float = 1.0, L_f: float = 0.01) -> BenchmarkProblem:
    domain = DomainSpec.interval(-D, D)

    def f(x, y):
        return np.zeros(np.shape(y))

    def g(x):
        return np.asarray(x, dtype=float)[..., 0]

    spec = make_tapered_problem(
        "B3", domain, [0.0], [0.0], [[1.0]], f, g, L_f=L_f, sup_f0=0.0, L_g=1.0
    )

    def u(x):
        return np.asarray(x, dtype=float)[..., 0]

    def psi(v):
        return np.asarray(v, dtype=float)

    return BenchmarkProblem(
        id="B3", spec=spec, u=u, obs_kind="coord0", psi=psi, psi_increasing=True
    )


def _build_b4(d: int = 2, D: float = 1.0, L_f: float = 0.01) -> BenchmarkProblem:
    if d < 1:
        raise InvalidInput("B4 needs d >= 1")
    domain = DomainSpec.ball([0.0] * d, D)

    def f(x, y, _d=d):
        return np.full(np.shape(y), float(_d), dtype=float)

    def g(x):
        return np.zeros(x.shape[:-1])

    spec = make_tapered_problem(
        "B4",
        domain,
        [0.0] * d,
        [0.0] * d,
        np.eye(d),
        f,
        g,
        L_f=L_f,
        sup_f0=float(d),
        L_g=0.0,
    )

    def u(x, _D=D):
        x = np.asarray(x, dtype=float)
        return _D**2 - np.sum(x**2, axis=-1)

    def psi(r2, _D=D):
        return _D**2 - np.asarray(r2, dtype=float)

    return BenchmarkProblem(
        id="B4", spec=spec, u=u, obs_kind="radius2", psi=psi, psi_increasing=False
    )


def analytic_value(benchmark: BenchmarkProblem, x) -> float:
    """u(x) for x in the closed domain; equals g(x) on the boundary."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (benchmark.spec.d,):
        raise InvalidInput(f"point must have shape ({benchmark.spec.d},)")
    dom = benchmark.spec.domain
    if dom.kind == "box":
        inside_closed = np.all((x >= np.array(dom.lo)) & (x <= np.array(dom.hi)))
    else:
        inside_closed = np.sum((x - np.array(dom.center)) ** 2) <= dom.radius**2 + 1e-12
    if not inside_closed:
        raise DomainError(f"point {x} outside the closed domain")
    return float(benchmark.u(x[None, :])[0])


# ---------------------------------------------------------------------------
# oracles


def pde_residual(benchmark: BenchmarkProblem, points: np.ndarray, step: float = 1e-4):
    """Finite-difference residual of the elliptic equation at interior points.

    Central differences with the given step; the catalog solutions are
    polynomial/cosh so the residual is dominated by rounding error.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    spec = benchmark.spec
    d = spec.d
    n = pts.shape[0]
    u0 = benchmark.u(pts)
    grad = np.empty((n, d))
    hess = np.empty((n, d, d))
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = step
        up = benchmark.u(pts + ei)
        um = benchmark.u(pts - ei)
        grad[:, i] = (up - um) / (2 * step)
        hess[:, i, i] = (up - 2 * u0 + um) / step**2
        for j in range(i + 1, d):
            ej = np.zeros(d)
            ej[j] = step
            upp = benchmark.u(pts + ei + ej)
            upm = benchmark.u(pts + ei - ej)
            ump = benchmark.u(pts - ei + ej)
            umm = benchmark.u(pts - ei - ej)
            hess[:, i, j] = hess[:, j, i] = (upp - upm - ump + umm) / (4 * step**2)
    mu = spec.mu(pts)
    sig = spec.sigma(pts)
    diff = np.einsum("nik,njk->nij", sig, sig)
    lap = 0.5 * np.einsum("nij,nij->n", diff, hess)
    drift = np.einsum("ni,ni->n", mu, grad)
    return lap + drift + spec.f(pts, u0)


def sample_interior(domain: DomainSpec, n: int, rng: np.random.Generator, margin=0.05):
    """Uniform interior points, kept `margin` (relative) away from the boundary."""
    lo, hi = domain.bounding_box()
    pts = np.empty((n, domain.dim))
    have = 0
    shrink = 1.0 - margin
    while have < n:
        cand = rng.uniform(lo, hi, size=(2 * (n - have) + 8, domain.dim))
        if domain.kind == "ball":
            c = np.array(domain.center)
            ok = np.sum((cand - c) ** 2, axis=-1) < (shrink * domain.radius) ** 2
        else:
            llo = np.array(domain.lo)
            lhi = np.array(domain.hi)
            mid = 0.5 * (llo + lhi)
            half = 0.5 * (lhi - llo) * shrink
            ok = np.all(np.abs(cand - mid) < half, axis=-1)
        cand = cand[ok]
        take = min(n - have, cand.shape[0])
        pts[have : have + take] = cand[:take]
        have += take
    return pts


def probe_lipschitz(
    problem: ProblemSpec, seed: int = 0, n_pairs: int = 256
) -> dict[str, float]:
    """Random secant probe of the declared Lipschitz constants.

    Returns observed constants; callers compare against declarations (the
    probe warns, it never overrides).
    """
    rng = np.random.default_rng(seed)
    lo, hi = problem.domain.bounding_box()
    lo = lo - TAPER_OUTER
    hi = hi + TAPER_OUTER
    x = rng.uniform(lo, hi, size=(n_pairs, problem.d))
    y = rng.uniform(lo, hi, size=(n_pairs, problem.d))
    dx = np.linalg.norm(x - y, axis=-1)
    keep = dx > 1e-9
    x, y, dx = x[keep], y[keep], dx[keep]
    out = {}
    dmu = np.linalg.norm(problem.mu(x) - problem.mu(y), axis=-1)
    out["L_mu"] = float(np.max(dmu / dx, initial=0.0))
    ds = problem.sigma(x) - problem.sigma(y)
    out["L_sigma"] = float(np.max(np.linalg.norm(ds, axis=(-2, -1)) / dx, initial=0.0))
    v1 = rng.uniform(-2.0, 2.0, size=x.shape[0])
    v2 = rng.uniform(-2.0, 2.0, size=x.shape[0])
    dv = np.abs(v1 - v2)
    keepv = dv > 1e-9
    df = np.abs(problem.f(x[keepv], v1[keepv]) - problem.f(x[keepv], v2[keepv]))
    out["L_f"] = float(np.max(df / dv[keepv], initial=0.0))
    dg = np.abs(problem.g(x) - problem.g(y))
    out["L_g"] = float(np.max(dg / dx, initial=0.0))
    return out


def lipschitz_warnings(problem: ProblemSpec, seed: int = 0) -> list[str]:
    observed = probe_lipschitz(problem, seed=seed)
    warnings = []
    for key in ("L_mu", "L_sigma", "L_f", "L_g"):
        declared = getattr(problem, key)
        if observed[key] > declared * 1.01 + 1e-12:
            warnings.append(
                f"declared {key}={declared:g} exceeded by probe ({observed[key]:g})"
            )
    return warnings
