"""Forward Euler-Maruyama simulation with exit and cut-off detection.

The engine advances paths chunk by chunk (``CHUNK_STEPS`` coarse steps
per chunk).  Each path owns a counter-based RNG stream keyed by
``(seed, path_offset + index)`` and draws a fixed number of normals per
chunk while it is active, so results are bit-identical across reruns,
worker counts, and process boundaries.  The fixed chunk length is part
of that determinism contract: changing it changes the draw pattern.

A coupled fine chain (refinement factor K) consumes the same normal
draws: the fine chain uses them directly, the coarse chain uses the sum
of each group of K increments (``np.sum`` over the group axis), so each
coarse Brownian increment equals the sum of its K fine increments
exactly.  The fine chain is the reference proxy for the continuous
diffusion and its exit time.

Problems carrying the tapered-constant coefficient fast path run inside
the compiled kernels (or their bit-identical numpy twins); problems with
general coefficient callables fall back to a stepwise numpy engine
regardless of the requested backend.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from ._accel import resolve_backend
from .exceptions import ConfigurationError, EstimationError, InvalidInput
from .problems import DomainSpec, GridSpec, ProblemSpec
from .rng import path_generators

CHUNK_STEPS = 512
_BLOCK_NORMALS = 1 << 24  # per-block draw budget in doubles

_OBS_CODES = {None: _kernels.OBS_NONE, "coord0": _kernels.OBS_COORD0,
              "radius2": _kernels.OBS_RADIUS2}


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FineBundle:
    """Coupled fine-grid companion of a PathBundle.

    ``exit_index`` counts fine nodes (stepsize ``grid.h``), -1 when
    censored.  ``obs_min`` / ``obs_max`` hold, per coarse cell, the range
    of the tracked observable over fine nodes strictly before the fine
    exit that fall in the closed cell window; cells with no such node
    carry +inf/-inf sentinels and consumers merge the exit value.
    ``states_at_coarse`` holds fine states sampled at coarse nodes 1..N,
    frozen at the fine exit state once the fine chain has left.
    """

    grid: GridSpec
    refine_K: int
    exit_index: np.ndarray
    exit_state: np.ndarray
    final_state: np.ndarray
    obs_kind: str | None = None
    obs_min: np.ndarray | None = None
    obs_max: np.ndarray | None = None
    states_at_coarse: np.ndarray | None = None

    @property
    def censored(self) -> np.ndarray:
        return self.exit_index < 0

    @property
    def exit_times(self) -> np.ndarray:
        """Fine exit times, +inf where censored."""
        return np.where(self.exit_index >= 0,
                        self.exit_index * self.grid.h, np.inf)


@dataclass(frozen=True)
class PathBundle:
    """Result of a forward simulation run.

    ``exit_index`` is the first node (1-based in grid steps) whose state
    lies outside the open domain, -1 when censored at the horizon.
    ``exit_state`` holds the state at that node (the state at t_max for
    censored paths), ``final_state`` the state at the end of the run.
    ``states`` / ``brownian``, when retained, cover nodes 0..N; in
    stopped runs states are frozen at the exit value from the exit node
    on, while the Brownian driver keeps running to the horizon.
    """

    n_paths: int
    grid: GridSpec
    seed: int
    path_offset: int
    stop_at_exit: bool
    exit_index: np.ndarray
    exit_state: np.ndarray
    final_state: np.ndarray
    fault: np.ndarray
    cutoff_index: np.ndarray | None = None
    cutoff_params: tuple[float, float] | None = None
    states: np.ndarray | None = None
    brownian: np.ndarray | None = None
    fine: FineBundle | None = None

    @property
    def censored(self) -> np.ndarray:
        return self.exit_index < 0

    @property
    def censor_fraction(self) -> float:
        return float(np.mean(self.censored))

    @property
    def exit_times(self) -> np.ndarray:
        """Discrete exit times h*exit_index, +inf where censored."""
        return np.where(self.exit_index >= 0,
                        self.exit_index * self.grid.h, np.inf)

    @property
    def cutoff_times(self) -> np.ndarray:
        if self.cutoff_index is None:
            raise InvalidInput("bundle was simulated without cut-off tracking")
        return np.where(self.cutoff_index >= 0,
                        self.cutoff_index * self.grid.h, np.inf)

    @property
    def brownian_increments(self) -> tuple[tuple[int, int], ...]:
        """Stream identifiers (seed, counter key) for each path."""
        return tuple((self.seed, self.path_offset + i)
                     for i in range(self.n_paths))


@dataclass(frozen=True)
class ExitGapStats:
    """Moment of the horizon-truncated gap between two exit times."""

    p: float
    estimate: float
    ci_halfwidth: float
    n_effective: int
    censor_fraction: float


# ---------------------------------------------------------------------------
# engine


def _normalize_cutoff(grid: GridSpec, cutoff) -> tuple[float, float, float] | None:
    if cutoff is None:
        return None
    d_cut, alpha = float(cutoff[0]), float(cutoff[1])
    if not (0.0 <= alpha < 0.5):
        raise InvalidInput(f"cut-off exponent alpha={alpha} outside [0, 1/2)")
    radius = d_cut - grid.h ** alpha
    if radius <= 0.0:
        raise ConfigurationError(
            f"cut-off radius {d_cut} - h^{alpha} = {radius:.6g} is not positive")
    return d_cut, alpha, radius


def _domain_params(domain: DomainSpec, d: int):
    if domain.kind == "box":
        kind = _kernels.DOM_BOX
        lo = np.asarray(domain.lo, dtype=float)
        hi = np.asarray(domain.hi, dtype=float)
        center = np.zeros(d)
        rad2 = 0.0
    else:
        kind = _kernels.DOM_BALL
        lo, hi = domain.bounding_box()
        center = np.asarray(domain.center, dtype=float)
        rad2 = float(domain.radius) ** 2
    return kind, lo, hi, center, rad2


def _block_paths(n_steps_per_chunk: int, K: int, d: int) -> int:
    per_path = max(1, n_steps_per_chunk * K * d)
    return int(np.clip(_BLOCK_NORMALS // per_path, 64, 65536))


def simulate_paths(problem: ProblemSpec, grid: GridSpec, n_paths: int,
                   seed: int, *, stop_at_exit: bool = True, cutoff=None,
                   store_states: bool = False, store_brownian: bool = False,
                   backend: str | None = None, path_offset: int = 0) -> PathBundle:
    """Simulate Euler-Maruyama chains on the coarse grid.

    Each path follows ``X_{t+h} = X_t + mu(X_t) h + sigma(X_t) dW`` until
    its first node outside the open domain (or t_max when
    ``stop_at_exit`` is false, in which case exits are still recorded but
    the chain keeps evolving).  ``cutoff=(D_cut, alpha)`` additionally
    records the first node where the driving Brownian motion leaves the
    sup-norm ball of radius ``D_cut - h**alpha``.

    Numeric faults (non-finite states) are flagged per path and the path
    is stopped; faulted paths are never silently averaged downstream.
    """
    return _run(problem, grid, 1, n_paths, seed, path_offset, stop_at_exit,
                cutoff, None, store_states, store_brownian, False, backend)


def coupled_fine_reference(problem: ProblemSpec, grid: GridSpec, refine_K: int,
                           n_paths: int, seed: int, *,
                           stop_at_exit: bool = True, cutoff=None,
                           obs_kind: str | None = None,
                           store_states: bool = False,
                           store_brownian: bool = False,
                           store_fine_at_coarse: bool = False,
                           backend: str | None = None,
                           path_offset: int = 0) -> PathBundle:
    """Simulate coarse chains together with a coupled fine reference.

    The fine chain runs on stepsize h/refine_K and consumes the identical
    Brownian draws (each coarse increment is the exact sum of its K fine
    increments).  Its exit time and exit state stand in for the
    continuous diffusion wherever a "continuous vs discrete" comparison
    is needed.  ``obs_kind`` ("coord0" or "radius2") turns on per-cell
    range tracking of that observable along the fine chain.
    """
    if int(refine_K) != refine_K or refine_K < 2:
        raise InvalidInput(f"refine_K must be an integer >= 2, got {refine_K}")
    if obs_kind not in _OBS_CODES:
        raise InvalidInput(f"unknown observable kind {obs_kind!r}")
    return _run(problem, grid, int(refine_K), n_paths, seed, path_offset,
                stop_at_exit, cutoff, obs_kind, store_states, store_brownian,
                store_fine_at_coarse, backend)


def _run(problem, grid, K, n_paths, seed, path_offset, stop_at_exit, cutoff,
         obs_kind, store_states, store_brownian, store_fine, backend):
    if int(n_paths) != n_paths or n_paths < 1:
        raise InvalidInput(f"n_paths must be a positive integer, got {n_paths}")
    n_paths = int(n_paths)
    backend = resolve_backend(backend)

    d = problem.d
    N = grid.n_steps
    h = grid.h
    hf = h / K
    has_fine = 1 if K > 1 else 0
    cut = _normalize_cutoff(grid, cutoff)
    cut_active = 1 if cut is not None else 0
    cut_r = cut[2] if cut is not None else 0.0
    obs_code = _OBS_CODES[obs_kind]
    store_w = 1 if store_brownian else 0
    store_c = 1 if store_states else 0
    store_f = 1 if (store_fine and has_fine) else 0
    track_w = 1 if (cut_active or store_w) else 0
    any_store = store_c or store_w or store_f
    stop_flag = 1 if stop_at_exit else 0

    dom_kind, lo, hi, center, rad2 = _domain_params(problem.domain, d)
    tlo, thi = problem.domain.bounding_box()
    x0 = np.asarray(problem.x0, dtype=float)

    fast = problem.coeffs is not None
    if fast:
        mu0 = problem.coeffs.mu_array()
        sigma0T = np.ascontiguousarray(problem.coeffs.sigma_array().T)

    # global per-path outputs
    g_exit = np.full(n_paths, -1, dtype=np.int64)
    g_exit_state = np.tile(x0, (n_paths, 1))
    g_final = np.tile(x0, (n_paths, 1))
    g_fault = np.zeros(n_paths, dtype=bool)
    g_cut = np.full(n_paths, -1, dtype=np.int64) if cut_active else None
    g_fexit = np.full(n_paths, -1, dtype=np.int64) if has_fine else None
    g_fexit_state = np.tile(x0, (n_paths, 1)) if has_fine else None
    g_ffinal = np.tile(x0, (n_paths, 1)) if has_fine else None
    g_states = np.empty((n_paths, N, d)) if store_c else None
    g_brownian = np.empty((n_paths, N, d)) if store_w else None
    g_fstates = np.empty((n_paths, N, d)) if store_f else None
    g_obs_min = np.full((n_paths, N), np.inf) if obs_code >= 0 else None
    g_obs_max = np.full((n_paths, N), -np.inf) if obs_code >= 0 else None

    n_chunks = (N + CHUNK_STEPS - 1) // CHUNK_STEPS
    block = _block_paths(min(N, CHUNK_STEPS), K, d)
    dummy3 = np.empty((0, 0, 0))
    dummy2 = np.empty((0, 0))

    if backend == "numba" and fast:
        kernel = _kernels.forward_chunk_numba
    else:
        kernel = _kernels.forward_chunk_numpy

    for b0 in range(0, n_paths, block):
        b1 = min(b0 + block, n_paths)
        nb = b1 - b0
        gens = np.array(path_generators(seed, path_offset + b0, nb),
                        dtype=object)
        xc = np.tile(x0, (nb, 1))
        xf = np.tile(x0, (nb, 1)) if has_fine else np.zeros((nb, d))
        w = np.zeros((nb, d))
        cfound = np.zeros(nb, dtype=np.uint8)
        ffound = np.zeros(nb, dtype=np.uint8)
        cutfound = np.zeros(nb, dtype=np.uint8)
        loc = np.arange(nb)  # compacted row -> block-local path id

        for ci in range(n_chunks):
            na = loc.size
            if na == 0:
                break
            base = ci * CHUNK_STEPS
            C_t = min(CHUNK_STEPS, N - base)
            nf = C_t * K

            z = np.empty((na, nf, d))
            for i in range(na):
                gens[i].standard_normal(out=z[i])
            z *= np.sqrt(hf)
            dw_c = z.reshape(na, C_t, K, d).sum(axis=2)

            if fast:
                if has_fine:
                    inc_f = z @ sigma0T
                    inc_f += mu0 * hf
                else:
                    inc_f = dummy3
                inc_c = dw_c @ sigma0T
                inc_c += mu0 * h
            crel = np.full(na, -1, dtype=np.int64)
            frel = np.full(na, -1, dtype=np.int64)
            krel = np.full(na, -1, dtype=np.int64)
            cstate = np.empty((na, d))
            fstate = np.empty((na, d))
            ob_min = np.full((na, C_t), np.inf) if obs_code >= 0 else dummy2
            ob_max = np.full((na, C_t), -np.inf) if obs_code >= 0 else dummy2
            st_c = np.empty((na, C_t, d)) if store_c else dummy3
            st_w = np.empty((na, C_t, d)) if store_w else dummy3
            st_f = np.empty((na, C_t, d)) if store_f else dummy3

            if fast:
                kernel(xc, xf, w, cfound, ffound, cutfound,
                       crel, frel, krel, cstate, fstate,
                       inc_c, inc_f, dw_c if track_w else dummy3,
                       K, has_fine, stop_flag,
                       dom_kind, lo, hi, center, rad2, tlo, thi,
                       track_w, cut_active, cut_r,
                       obs_code, ob_min, ob_max,
                       st_c, st_w, st_f, store_c, store_w, store_f)
            else:
                _generic_chunk(problem, hf, h, K, has_fine, stop_flag,
                               xc, xf, w, cfound, ffound, cutfound,
                               crel, frel, krel, cstate, fstate,
                               z, dw_c,
                               dom_kind, lo, hi, center, rad2,
                               track_w, cut_active, cut_r,
                               obs_code, ob_min, ob_max,
                               st_c, st_w, st_f, store_c, store_w, store_f)

            rows = b0 + loc
            bad = ~np.isfinite(xc).all(axis=1)
            if has_fine:
                bad |= ~np.isfinite(xf).all(axis=1)
            m = crel > 0
            if np.any(m):
                g_exit[rows[m]] = base + crel[m]
                g_exit_state[rows[m]] = cstate[m]
            if has_fine:
                m = frel > 0
                if np.any(m):
                    g_fexit[rows[m]] = base * K + frel[m]
                    g_fexit_state[rows[m]] = fstate[m]
            if cut_active:
                m = krel > 0
                if np.any(m):
                    g_cut[rows[m]] = base + krel[m]
            if np.any(bad):
                g_fault[rows[bad]] = True
                cfound[bad] = 1
                ffound[bad] = 1
                cutfound[bad] = 1
            if store_c:
                g_states[rows, base:base + C_t] = st_c
            if store_w:
                g_brownian[rows, base:base + C_t] = st_w
            if store_f:
                g_fstates[rows, base:base + C_t] = st_f
            if obs_code >= 0:
                g_obs_min[rows, base:base + C_t] = ob_min
                g_obs_max[rows, base:base + C_t] = ob_max

            if stop_flag and not any_store:
                done = cfound.astype(bool)
                if has_fine:
                    done &= ffound.astype(bool)
                if cut_active:
                    done &= cutfound.astype(bool)
                if np.any(done):
                    drop_rows = b0 + loc[done]
                    g_final[drop_rows] = xc[done]
                    if has_fine:
                        g_ffinal[drop_rows] = xf[done]
                    keep = ~done
                    xc = xc[keep]
                    xf = xf[keep]
                    w = w[keep]
                    cfound = cfound[keep]
                    ffound = ffound[keep]
                    cutfound = cutfound[keep]
                    gens = gens[keep]
                    loc = loc[keep]

        if loc.size:
            rows = b0 + loc
            g_final[rows] = xc
            if has_fine:
                g_ffinal[rows] = xf

    # censored paths report the horizon state as their exit state
    cens = g_exit < 0
    g_exit_state[cens] = g_final[cens]

    def _with_node0(arr, fill):
        head = np.tile(np.asarray(fill, dtype=float), (n_paths, 1, 1))
        return np.concatenate([head, arr], axis=1)

    fine = None
    if has_fine:
        fcens = g_fexit < 0
        g_fexit_state[fcens] = g_ffinal[fcens]
        fine = FineBundle(
            grid=GridSpec(h=hf, t_max=grid.t_max),
            refine_K=K,
            exit_index=_frozen(g_fexit),
            exit_state=_frozen(g_fexit_state),
            final_state=_frozen(g_ffinal),
            obs_kind=obs_kind,
            obs_min=_frozen(g_obs_min) if obs_code >= 0 else None,
            obs_max=_frozen(g_obs_max) if obs_code >= 0 else None,
            states_at_coarse=_frozen(_with_node0(g_fstates, x0))
            if store_f else None,
        )

    return PathBundle(
        n_paths=n_paths,
        grid=grid,
        seed=int(seed),
        path_offset=int(path_offset),
        stop_at_exit=bool(stop_at_exit),
        exit_index=_frozen(g_exit),
        exit_state=_frozen(g_exit_state),
        final_state=_frozen(g_final),
        fault=_frozen(g_fault),
        cutoff_index=_frozen(g_cut) if cut_active else None,
        cutoff_params=(cut[0], cut[1]) if cut_active else None,
        states=_frozen(_with_node0(g_states, x0)) if store_c else None,
        brownian=_frozen(_with_node0(g_brownian, np.zeros(d)))
        if store_w else None,
        fine=fine,
    )


def _generic_chunk(problem, hf, h, K, has_fine, stop_flag,
                   xc, xf, w, cfound, ffound, cutfound,
                   crel, frel, krel, cstate, fstate,
                   dw_f, dw_c,
                   dom_kind, lo, hi, center, rad2,
                   track_w, cut_active, cut_r,
                   obs_code, ob_min, ob_max,
                   st_c, st_w, st_f, store_c, store_w, store_f):
    """Stepwise chunk for general coefficient callables (numpy only)."""
    na, C_t, d = dw_c.shape
    cf = cfound != 0
    ff = ffound != 0
    kf = cutfound != 0
    out_np = _kernels._outside_np
    obs_np = _kernels._observe_np

    def _step(x, dw, dt, active):
        drift = problem.mu(x)
        diff = problem.sigma(x)
        inc = drift * dt + np.einsum("pij,pj->pi", diff, dw)
        x[active] += inc[active]

    for c in range(C_t):
        if has_fine:
            if obs_code >= 0:
                pre = ~ff
                if np.any(pre):
                    o = obs_np(xf[pre], obs_code)
                    ob_min[pre, c] = np.minimum(ob_min[pre, c], o)
                    ob_max[pre, c] = np.maximum(ob_max[pre, c], o)
            for k in range(K):
                active = ~(ff & (stop_flag != 0))
                _step(xf, dw_f[:, c * K + k, :], hf, active)
                newly = ~ff & out_np(xf, dom_kind, lo, hi, center, rad2)
                if np.any(newly):
                    ff |= newly
                    frel[newly] = c * K + k + 1
                    fstate[newly] = xf[newly]
                if obs_code >= 0:
                    pre = ~ff
                    if np.any(pre):
                        o = obs_np(xf[pre], obs_code)
                        ob_min[pre, c] = np.minimum(ob_min[pre, c], o)
                        ob_max[pre, c] = np.maximum(ob_max[pre, c], o)
            if store_f:
                st_f[:, c, :] = xf
        active = ~(cf & (stop_flag != 0))
        _step(xc, dw_c[:, c, :], h, active)
        newly = ~cf & out_np(xc, dom_kind, lo, hi, center, rad2)
        if np.any(newly):
            cf |= newly
            crel[newly] = c + 1
            cstate[newly] = xc[newly]
        if store_c:
            st_c[:, c, :] = xc
        if track_w:
            w += dw_c[:, c, :]
            if cut_active:
                m = np.abs(w[:, 0])
                for j in range(1, d):
                    m = np.maximum(m, np.abs(w[:, j]))
                newk = ~kf & (m >= cut_r)
                if np.any(newk):
                    kf |= newk
                    krel[newk] = c + 1
            if store_w:
                st_w[:, c, :] = w
    cfound[:] = cf
    ffound[:] = ff
    cutfound[:] = kf


# ---------------------------------------------------------------------------
# exit detection on retained data


def detect_discrete_exit(bundle: PathBundle, domain: DomainSpec) -> np.ndarray:
    """First positive node time with the state outside the open domain.

    Returns per-path times (+inf where no node up to t_max is outside).
    Requires the bundle to retain its states.
    """
    if bundle.states is None:
        raise InvalidInput(
            "bundle retains no states; simulate with store_states=True")
    d = bundle.states.shape[2]
    kind, lo, hi, center, rad2 = _domain_params(domain, d)
    out = _kernels._outside_np(bundle.states[:, 1:, :], kind, lo, hi,
                               center, rad2)
    idx = _kernels._first_true(out)
    return np.where(idx >= 0, (idx + 1) * bundle.grid.h, np.inf)


def detect_cutoff_exit(bundle: PathBundle, D_cut: float,
                       alpha: float) -> np.ndarray:
    """First node where the driving Brownian leaves B(D_cut - h^alpha).

    The ball is in the sup norm.  Works from retained Brownian states,
    or reuses the online cut-off indices when the bundle was simulated
    with the same ``cutoff=(D_cut, alpha)``.  Returns per-path node
    times, +inf where censored.
    """
    cut = _normalize_cutoff(bundle.grid, (D_cut, alpha))
    if bundle.brownian is not None:
        wn = bundle.brownian[:, 1:, :]
        m = np.abs(wn[..., 0])
        for j in range(1, wn.shape[2]):
            m = np.maximum(m, np.abs(wn[..., j]))
        idx = _kernels._first_true(m >= cut[2])
        return np.where(idx >= 0, (idx + 1) * bundle.grid.h, np.inf)
    if (bundle.cutoff_index is not None
            and bundle.cutoff_params == (cut[0], cut[1])):
        return bundle.cutoff_times
    raise InvalidInput(
        "bundle retains no Brownian states and no matching online cut-off; "
        "simulate with store_brownian=True or cutoff=(D_cut, alpha)")


def exit_gap_moments(bundle: PathBundle, p: float) -> ExitGapStats:
    """Moment E|min(tau_ref,T) - min(tau_bar,T)|^p between fine and coarse exits.

    Exit times are truncated at the horizon: a censored path contributes
    its horizon time, so a pair censored on both grids contributes a gap
    of zero.  ``censor_fraction`` reports the fraction of pairs where at
    least one side was censored, so horizon effects are never hidden.
    Faulted paths are excluded.
    """
    if bundle.fine is None:
        raise InvalidInput("bundle has no coupled fine reference")
    if p < 1:
        raise InvalidInput(f"moment order p must be >= 1, got {p}")
    ok = ~bundle.fault
    n_ok = int(ok.sum())
    if n_ok == 0:
        raise EstimationError("all paths faulted; no usable exit pairs")
    t_max = bundle.grid.t_max
    tc = np.minimum(bundle.exit_times[ok], t_max)
    tf = np.minimum(bundle.fine.exit_times[ok], t_max)
    gaps = np.abs(tf - tc) ** p
    est = float(gaps.mean())
    sd = float(gaps.std(ddof=1)) if n_ok > 1 else 0.0
    ci = 1.96 * sd / np.sqrt(n_ok)
    either_cens = bundle.censored[ok] | bundle.fine.censored[ok]
    return ExitGapStats(p=float(p), estimate=est, ci_halfwidth=float(ci),
                        n_effective=n_ok,
                        censor_fraction=float(either_cens.mean()))


# ---------------------------------------------------------------------------
# external interfaces: binary dump / load and CSV export

_MAGIC = b"XBSDLE01"
_F_STATES, _F_BROWNIAN, _F_CUTOFF, _F_FINE, _F_FSTATES, _F_OBS, _F_STOP = (
    1, 2, 4, 8, 16, 32, 64)
_OBS_DUMP = {None: 0, "coord0": 1, "radius2": 2}
_OBS_LOAD = {v: k for k, v in _OBS_DUMP.items()}
_HEADER = struct.Struct("<8sQQQIIddQII")


def dump_bundle(bundle: PathBundle, path) -> None:
    """Write a bundle to a little-endian binary file.

    Layout: header ``<8sQQQIIddQII`` holding magic, seed, path_offset,
    n_paths, d, refine_K (0 = no fine companion), h, t_max, flag bits,
    observable code, reserved; two f64 cut-off parameters when the
    cut-off bit is set; then raw arrays in fixed order (exit_index i8,
    fault u1, exit_state f8, final_state f8, optional cutoff_index i8,
    optional states f8, optional brownian f8, optional fine block:
    exit_index i8, exit_state f8, final_state f8, optional fine states
    f8, optional obs_min/obs_max f8).  Array shapes follow from the
    header, so no per-array metadata is stored.
    """
    flags = 0
    if bundle.states is not None:
        flags |= _F_STATES
    if bundle.brownian is not None:
        flags |= _F_BROWNIAN
    if bundle.cutoff_index is not None:
        flags |= _F_CUTOFF
    fine = bundle.fine
    obs_code = 0
    if fine is not None:
        flags |= _F_FINE
        if fine.states_at_coarse is not None:
            flags |= _F_FSTATES
        if fine.obs_min is not None:
            flags |= _F_OBS
            obs_code = _OBS_DUMP[fine.obs_kind]
    if bundle.stop_at_exit:
        flags |= _F_STOP
    d = bundle.exit_state.shape[1]
    refine_K = fine.refine_K if fine is not None else 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, bundle.seed, bundle.path_offset,
                              bundle.n_paths, d, refine_K, bundle.grid.h,
                              bundle.grid.t_max, flags, obs_code, 0))
        if flags & _F_CUTOFF:
            fh.write(struct.pack("<dd", *bundle.cutoff_params))
        def put(arr, dtype):
            fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())
        put(bundle.exit_index, "<i8")
        put(bundle.fault, "u1")
        put(bundle.exit_state, "<f8")
        put(bundle.final_state, "<f8")
        if flags & _F_CUTOFF:
            put(bundle.cutoff_index, "<i8")
        if flags & _F_STATES:
            put(bundle.states, "<f8")
        if flags & _F_BROWNIAN:
            put(bundle.brownian, "<f8")
        if fine is not None:
            put(fine.exit_index, "<i8")
            put(fine.exit_state, "<f8")
            put(fine.final_state, "<f8")
            if flags & _F_FSTATES:
                put(fine.states_at_coarse, "<f8")
            if flags & _F_OBS:
                put(fine.obs_min, "<f8")
                put(fine.obs_max, "<f8")


def load_bundle(path) -> PathBundle:
    """Read a bundle written by :func:`dump_bundle`."""
    with open(path, "rb") as fh:
        buf = fh.read()
    (magic, seed, path_offset, n, d, refine_K, h, t_max, flags,
     obs_code, _pad) = _HEADER.unpack_from(buf, 0)
    if magic != _MAGIC:
        raise InvalidInput(f"not a bundle file: bad magic {magic!r}")
    off = _HEADER.size
    cut_params = None
    if flags & _F_CUTOFF:
        cut_params = struct.unpack_from("<dd", buf, off)
        off += 16

    def take(dtype, shape):
        nonlocal off
        count = int(np.prod(shape))
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return _frozen(arr.reshape(shape).copy())

    grid = GridSpec(h=h, t_max=t_max)
    N = grid.n_steps
    exit_index = take("<i8", (n,))
    fault = take("u1", (n,)).astype(bool)
    exit_state = take("<f8", (n, d))
    final_state = take("<f8", (n, d))
    cutoff_index = take("<i8", (n,)) if flags & _F_CUTOFF else None
    states = take("<f8", (n, N + 1, d)) if flags & _F_STATES else None
    brownian = take("<f8", (n, N + 1, d)) if flags & _F_BROWNIAN else None
    fine = None
    if flags & _F_FINE:
        f_exit = take("<i8", (n,))
        f_exit_state = take("<f8", (n, d))
        f_final = take("<f8", (n, d))
        f_states = take("<f8", (n, N + 1, d)) if flags & _F_FSTATES else None
        obs_min = obs_max = None
        if flags & _F_OBS:
            obs_min = take("<f8", (n, N))
            obs_max = take("<f8", (n, N))
        fine = FineBundle(grid=GridSpec(h=h / refine_K, t_max=t_max),
                          refine_K=int(refine_K), exit_index=f_exit,
                          exit_state=f_exit_state, final_state=f_final,
                          obs_kind=_OBS_LOAD[obs_code],
                          obs_min=obs_min, obs_max=obs_max,
                          states_at_coarse=f_states)
    return PathBundle(n_paths=int(n), grid=grid, seed=int(seed),
                      path_offset=int(path_offset),
                      stop_at_exit=bool(flags & _F_STOP),
                      exit_index=exit_index, exit_state=_frozen(exit_state),
                      final_state=_frozen(final_state), fault=_frozen(fault),
                      cutoff_index=cutoff_index, cutoff_params=cut_params,
                      states=states, brownian=brownian, fine=fine)


def export_exit_times(bundle: PathBundle, path) -> None:
    """Write per-path exit-time samples as CSV."""
    have_cut = bundle.cutoff_index is not None
    have_fine = bundle.fine is not None
    header = ["path", "exit_time", "censored", "fault"]
    if have_cut:
        header.append("cutoff_time")
    if have_fine:
        header.append("fine_exit_time")
    tc = bundle.exit_times
    tk = bundle.cutoff_times if have_cut else None
    tf = bundle.fine.exit_times if have_fine else None
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for i in range(bundle.n_paths):
            row = [bundle.path_offset + i, repr(float(tc[i])),
                   int(bundle.censored[i]), int(bundle.fault[i])]
            if have_cut:
                row.append(repr(float(tk[i])))
            if have_fine:
                row.append(repr(float(tf[i])))
            wr.writerow(row)
