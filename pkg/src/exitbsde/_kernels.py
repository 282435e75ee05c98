"""Hot numeric kernels: compiled (numba) and pure-numpy twins.

Both implementations follow the exact same floating-point operation
order, so for a fixed draw sequence they produce bit-identical output:

* chain updates are elementwise (``x += s * inc``) with increments
  pre-assembled in numpy,
* reductions over the small dimension d are explicit sequential loops in
  both twins,
* quadrature accumulates terms in fixed j order in both twins.

The forward kernel advances a block of paths through one chunk of coarse
steps, optionally carrying a coupled fine chain (refinement K), the
driving Brownian motion, exit / cut-off detection, per-cell ranges of a
scalar observable of the fine chain, and node storage.
"""

from __future__ import annotations

import numpy as np

from ._accel import njit
from .problems import TAPER_INNER, TAPER_OUTER

# domain kinds understood by the kernels
DOM_BOX = 0
DOM_BALL = 1

# observable kinds tracked per coarse cell on the fine chain
OBS_NONE = -1
OBS_COORD0 = 0
OBS_RADIUS2 = 1


# ---------------------------------------------------------------------------
# compiled forward kernel


@njit(inline="always")
def _taper(x, tlo, thi):
    dist = 0.0
    for j in range(x.shape[0]):
        dj = tlo[j] - x[j]
        if x[j] - thi[j] > dj:
            dj = x[j] - thi[j]
        if dj > dist:
            dist = dj
    u = (TAPER_OUTER - dist) / (TAPER_OUTER - TAPER_INNER)
    if u < 0.0:
        u = 0.0
    elif u > 1.0:
        u = 1.0
    return u * u * (3.0 - 2.0 * u)


@njit(inline="always")
def _outside(x, dom_kind, lo, hi, center, rad2):
    if dom_kind == DOM_BOX:
        for j in range(x.shape[0]):
            if x[j] <= lo[j] or x[j] >= hi[j]:
                return True
        return False
    s = 0.0
    for j in range(x.shape[0]):
        dj = x[j] - center[j]
        s += dj * dj
    return s >= rad2


@njit(inline="always")
def _observe(x, obs_kind):
    if obs_kind == OBS_COORD0:
        return x[0]
    s = 0.0
    for j in range(x.shape[0]):
        s += x[j] * x[j]
    return s


@njit(cache=True)
def forward_chunk_numba(
    xc,
    xf,
    w,
    cfound,
    ffound,
    cutfound,
    cexit_rel,
    fexit_rel,
    cut_rel,
    cexit_state,
    fexit_state,
    inc_c,
    inc_f,
    dw_c,
    K,
    has_fine,
    stop_at_exit,
    dom_kind,
    lo,
    hi,
    center,
    rad2,
    tlo,
    thi,
    track_w,
    cut_active,
    cut_r,
    obs_kind,
    obs_min,
    obs_max,
    st_c,
    st_w,
    st_f,
    store_c,
    store_w,
    store_f,
):
    n = xc.shape[0]
    d = xc.shape[1]
    C = inc_c.shape[1]
    any_store = store_c + store_w + store_f
    for i in range(n):
        cf = cfound[i] != 0
        ff = ffound[i] != 0
        kf = cutfound[i] != 0
        for c in range(C):
            if (
                stop_at_exit != 0
                and any_store == 0
                and cf
                and (ff or has_fine == 0)
                and (kf or cut_active == 0)
            ):
                break
            if has_fine != 0:
                if obs_kind != OBS_NONE and not ff:
                    o = _observe(xf[i], obs_kind)
                    if o < obs_min[i, c]:
                        obs_min[i, c] = o
                    if o > obs_max[i, c]:
                        obs_max[i, c] = o
                for k in range(K):
                    if ff and stop_at_exit != 0:
                        break
                    s = _taper(xf[i], tlo, thi)
                    base = c * K + k
                    for j in range(d):
                        xf[i, j] += s * inc_f[i, base, j]
                    if not ff:
                        if _outside(xf[i], dom_kind, lo, hi, center, rad2):
                            ff = True
                            fexit_rel[i] = base + 1
                            for j in range(d):
                                fexit_state[i, j] = xf[i, j]
                        elif obs_kind != OBS_NONE:
                            o = _observe(xf[i], obs_kind)
                            if o < obs_min[i, c]:
                                obs_min[i, c] = o
                            if o > obs_max[i, c]:
                                obs_max[i, c] = o
                if store_f != 0:
                    for j in range(d):
                        st_f[i, c, j] = xf[i, j]
            if (not cf) or stop_at_exit == 0:
                s = _taper(xc[i], tlo, thi)
                for j in range(d):
                    xc[i, j] += s * inc_c[i, c, j]
                if not cf and _outside(xc[i], dom_kind, lo, hi, center, rad2):
                    cf = True
                    cexit_rel[i] = c + 1
                    for j in range(d):
                        cexit_state[i, j] = xc[i, j]
            if store_c != 0:
                for j in range(d):
                    st_c[i, c, j] = xc[i, j]
            if track_w != 0:
                for j in range(d):
                    w[i, j] += dw_c[i, c, j]
                if cut_active != 0 and not kf:
                    m = 0.0
                    for j in range(d):
                        aj = w[i, j] if w[i, j] >= 0.0 else -w[i, j]
                        if aj > m:
                            m = aj
                    if m >= cut_r:
                        kf = True
                        cut_rel[i] = c + 1
                if store_w != 0:
                    for j in range(d):
                        st_w[i, c, j] = w[i, j]
        cfound[i] = 1 if cf else 0
        ffound[i] = 1 if ff else 0
        cutfound[i] = 1 if kf else 0


# ---------------------------------------------------------------------------
# numpy twin


def _taper_np(x, tlo, thi):
    # sequential max over coordinates, matching the compiled kernel
    dist = np.maximum(tlo[0] - x[..., 0], x[..., 0] - thi[0])
    for j in range(1, x.shape[-1]):
        dj = np.maximum(tlo[j] - x[..., j], x[..., j] - thi[j])
        dist = np.maximum(dist, dj)
    dist = np.maximum(dist, 0.0)
    u = np.clip((TAPER_OUTER - dist) / (TAPER_OUTER - TAPER_INNER), 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _outside_np(x, dom_kind, lo, hi, center, rad2):
    if dom_kind == DOM_BOX:
        out = (x[..., 0] <= lo[0]) | (x[..., 0] >= hi[0])
        for j in range(1, x.shape[-1]):
            out |= (x[..., j] <= lo[j]) | (x[..., j] >= hi[j])
        return out
    s = np.square(x[..., 0] - center[0])
    for j in range(1, x.shape[-1]):
        s = s + np.square(x[..., j] - center[j])
    return s >= rad2


def _observe_np(x, obs_kind):
    if obs_kind == OBS_COORD0:
        return x[..., 0]
    s = np.square(x[..., 0])
    for j in range(1, x.shape[-1]):
        s = s + np.square(x[..., j])
    return s


def _first_true(mask):
    """Index of first True along axis 1, or -1."""
    any_hit = mask.any(axis=1)
    idx = mask.argmax(axis=1)
    return np.where(any_hit, idx, -1)


def forward_chunk_numpy(
    xc,
    xf,
    w,
    cfound,
    ffound,
    cutfound,
    cexit_rel,
    fexit_rel,
    cut_rel,
    cexit_state,
    fexit_state,
    inc_c,
    inc_f,
    dw_c,
    K,
    has_fine,
    stop_at_exit,
    dom_kind,
    lo,
    hi,
    center,
    rad2,
    tlo,
    thi,
    track_w,
    cut_active,
    cut_r,
    obs_kind,
    obs_min,
    obs_max,
    st_c,
    st_w,
    st_f,
    store_c,
    store_w,
    store_f,
):
    if stop_at_exit != 0:
        _chunk_numpy_stopped(
            xc, xf, w, cfound, ffound, cutfound,
            cexit_rel, fexit_rel, cut_rel, cexit_state, fexit_state,
            inc_c, inc_f, dw_c, K, has_fine,
            dom_kind, lo, hi, center, rad2,
            track_w, cut_active, cut_r,
            obs_kind, obs_min, obs_max,
            st_c, st_w, st_f, store_c, store_w, store_f,
        )
    else:
        _chunk_numpy_stepwise(
            xc, xf, w, cfound, ffound, cutfound,
            cexit_rel, fexit_rel, cut_rel, cexit_state, fexit_state,
            inc_c, inc_f, dw_c, K, has_fine,
            dom_kind, lo, hi, center, rad2, tlo, thi,
            track_w, cut_active, cut_r,
            obs_kind, obs_min, obs_max,
            st_c, st_w, st_f, store_c, store_w, store_f,
        )


def _chunk_numpy_stopped(
    xc, xf, w, cfound, ffound, cutfound,
    cexit_rel, fexit_rel, cut_rel, cexit_state, fexit_state,
    inc_c, inc_f, dw_c, K, has_fine,
    dom_kind, lo, hi, center, rad2,
    track_w, cut_active, cut_r,
    obs_kind, obs_min, obs_max,
    st_c, st_w, st_f, store_c, store_w, store_f,
):
    """Vectorized twin for the stopped mode.

    Pre-exit states stay inside the domain where the taper factor is
    exactly 1, so chains are plain cumulative sums of the increments
    (np.cumsum accumulates sequentially, matching the compiled loop).
    """
    n, C, d = inc_c.shape
    # --- coarse chain
    live = cfound == 0
    nodes_c = np.cumsum(inc_c, axis=1)
    nodes_c += xc[:, None, :]
    out = _outside_np(nodes_c, dom_kind, lo, hi, center, rad2)
    hit = _first_true(out)
    hit[~live] = -1
    found = hit >= 0
    cexit_rel[found] = hit[found] + 1
    cexit_state[found] = nodes_c[found, hit[found]]
    # final state: frozen at exit for exited paths, last node otherwise
    newxc = np.where(found[:, None], cexit_state, nodes_c[:, -1])
    newxc = np.where(live[:, None], newxc, xc)
    if store_c != 0:
        st_c[:] = np.where(live[:, None, None], nodes_c, xc[:, None, :])
        frozen_tail = found[:, None] & (np.arange(C)[None, :] >= hit[:, None])
        st_c[frozen_tail] = np.repeat(
            cexit_state, frozen_tail.sum(axis=1), axis=0
        )
    xc[:] = newxc
    cfound[found] = 1

    # --- fine chain
    if has_fine != 0:
        livef = ffound == 0
        CK = inc_f.shape[1]
        nodes_f = np.cumsum(inc_f, axis=1)
        nodes_f += xf[:, None, :]
        outf = _outside_np(nodes_f, dom_kind, lo, hi, center, rad2)
        hitf = _first_true(outf)
        hitf[~livef] = -1
        foundf = hitf >= 0
        fexit_rel[foundf] = hitf[foundf] + 1
        fexit_state[foundf] = nodes_f[foundf, hitf[foundf]]
        if obs_kind != OBS_NONE:
            # observable at fine nodes 0..CK, pre-exit nodes only
            obs = np.empty((n, CK + 1))
            obs[:, 0] = _observe_np(xf, obs_kind)
            obs[:, 1:] = _observe_np(nodes_f, obs_kind)
            node_idx = np.arange(CK + 1)[None, :]
            kexit = np.where(foundf, hitf + 1, CK + 1)
            kexit = np.where(livef, kexit, 0)
            pre = node_idx < kexit[:, None]
            omin = np.where(pre, obs, np.inf)
            omax = np.where(pre, obs, -np.inf)
            cell_min = omin[:, :-1].reshape(n, C, K).min(axis=2)
            cell_max = omax[:, :-1].reshape(n, C, K).max(axis=2)
            right_min = omin[:, K::K]
            right_max = omax[:, K::K]
            np.minimum(cell_min, right_min, out=cell_min)
            np.maximum(cell_max, right_max, out=cell_max)
            np.minimum(obs_min, cell_min, out=obs_min)
            np.maximum(obs_max, cell_max, out=obs_max)
        newxf = np.where(foundf[:, None], fexit_state, nodes_f[:, -1])
        newxf = np.where(livef[:, None], newxf, xf)
        if store_f != 0:
            sub = nodes_f[:, K - 1 :: K, :]
            st_f[:] = np.where(livef[:, None, None], sub, xf[:, None, :])
            kexit = np.where(foundf, hitf + 1, CK + 1)
            node_fine = (np.arange(C) + 1) * K
            frozen = foundf[:, None] & (node_fine[None, :] >= kexit[:, None])
            st_f[frozen] = np.repeat(fexit_state, frozen.sum(axis=1), axis=0)
        xf[:] = newxf
        ffound[foundf] = 1

    # --- Brownian driver
    if track_w != 0:
        nodes_w = np.cumsum(dw_c, axis=1)
        nodes_w += w[:, None, :]
        if store_w != 0:
            st_w[:] = nodes_w
        if cut_active != 0:
            livk = cutfound == 0
            m = np.abs(nodes_w[..., 0])
            for j in range(1, d):
                m = np.maximum(m, np.abs(nodes_w[..., j]))
            hitk = _first_true(m >= cut_r)
            hitk[~livk] = -1
            foundk = hitk >= 0
            cut_rel[foundk] = hitk[foundk] + 1
            cutfound[foundk] = 1
        w[:] = nodes_w[:, -1]


def _chunk_numpy_stepwise(
    xc, xf, w, cfound, ffound, cutfound,
    cexit_rel, fexit_rel, cut_rel, cexit_state, fexit_state,
    inc_c, inc_f, dw_c, K, has_fine,
    dom_kind, lo, hi, center, rad2, tlo, thi,
    track_w, cut_active, cut_r,
    obs_kind, obs_min, obs_max,
    st_c, st_w, st_f, store_c, store_w, store_f,
):
    """Stepwise twin for the unstopped mode (taper can engage off-domain)."""
    n, C, d = inc_c.shape
    cf = cfound != 0
    ff = ffound != 0
    kf = cutfound != 0
    for c in range(C):
        if has_fine != 0:
            if obs_kind != OBS_NONE:
                pre = ~ff
                if np.any(pre):
                    o = _observe_np(xf[pre], obs_kind)
                    obs_min[pre, c] = np.minimum(obs_min[pre, c], o)
                    obs_max[pre, c] = np.maximum(obs_max[pre, c], o)
            for k in range(K):
                s = _taper_np(xf, tlo, thi)
                xf += s[:, None] * inc_f[:, c * K + k, :]
                newly = ~ff & _outside_np(xf, dom_kind, lo, hi, center, rad2)
                if np.any(newly):
                    ff |= newly
                    fexit_rel[newly] = c * K + k + 1
                    fexit_state[newly] = xf[newly]
                if obs_kind != OBS_NONE:
                    pre = ~ff
                    if np.any(pre):
                        o = _observe_np(xf[pre], obs_kind)
                        obs_min[pre, c] = np.minimum(obs_min[pre, c], o)
                        obs_max[pre, c] = np.maximum(obs_max[pre, c], o)
            if store_f != 0:
                st_f[:, c, :] = xf
        s = _taper_np(xc, tlo, thi)
        xc += s[:, None] * inc_c[:, c, :]
        newly = ~cf & _outside_np(xc, dom_kind, lo, hi, center, rad2)
        if np.any(newly):
            cf |= newly
            cexit_rel[newly] = c + 1
            cexit_state[newly] = xc[newly]
        if store_c != 0:
            st_c[:, c, :] = xc
        if track_w != 0:
            w += dw_c[:, c, :]
            if cut_active != 0:
                m = np.abs(w[:, 0])
                for j in range(1, d):
                    m = np.maximum(m, np.abs(w[:, j]))
                newk = ~kf & (m >= cut_r)
                if np.any(newk):
                    kf |= newk
                    cut_rel[newk] = c + 1
            if store_w != 0:
                st_w[:, c, :] = w
    cfound[:] = cf
    ffound[:] = ff
    cutfound[:] = kf


# ---------------------------------------------------------------------------
# quadrature gather kernels (one backward-induction conditional expectation)


@njit(cache=True)
def quad_gather_1d_numba(v_next, idx, frac, inside, gout, wq, out):
    m, q = idx.shape
    for i in range(m):
        acc = 0.0
        for j in range(q):
            if inside[i, j] != 0:
                a = v_next[idx[i, j]]
                b = v_next[idx[i, j] + 1]
                val = a + frac[i, j] * (b - a)
            else:
                val = gout[i, j]
            acc += wq[j] * val
        out[i] = acc


def quad_gather_1d_numpy(v_next, idx, frac, inside, gout, wq, out):
    q = idx.shape[1]
    acc = np.zeros(idx.shape[0])
    for j in range(q):
        a = v_next[idx[:, j]]
        b = v_next[idx[:, j] + 1]
        val = np.where(inside[:, j] != 0, a + frac[:, j] * (b - a), gout[:, j])
        acc += wq[j] * val
    out[:] = acc


@njit(cache=True)
def quad_gather_2d_numba(v_next, ix, iy, fx, fy, inside, gout, wq, ny, out):
    m, q = ix.shape
    for i in range(m):
        acc = 0.0
        for j in range(q):
            if inside[i, j] != 0:
                base = ix[i, j] * ny + iy[i, j]
                a = v_next[base]
                b = v_next[base + ny]
                c = v_next[base + 1]
                dd = v_next[base + ny + 1]
                vx0 = a + fx[i, j] * (b - a)
                vx1 = c + fx[i, j] * (dd - c)
                val = vx0 + fy[i, j] * (vx1 - vx0)
            else:
                val = gout[i, j]
            acc += wq[j] * val
        out[i] = acc


def quad_gather_2d_numpy(v_next, ix, iy, fx, fy, inside, gout, wq, ny, out):
    q = ix.shape[1]
    acc = np.zeros(ix.shape[0])
    for j in range(q):
        base = ix[:, j] * ny + iy[:, j]
        a = v_next[base]
        b = v_next[base + ny]
        c = v_next[base + 1]
        dd = v_next[base + ny + 1]
        vx0 = a + fx[:, j] * (b - a)
        vx1 = c + fx[:, j] * (dd - c)
        val = np.where(inside[:, j] != 0, vx0 + fy[:, j] * (vx1 - vx0), gout[:, j])
        acc += wq[j] * val
    out[:] = acc


@njit(cache=True)
def quad_gather_3d_numba(v_next, ix, iy, iz, fx, fy, fz, inside, gout, wq, ny, nz, out):
    m, q = ix.shape
    for i in range(m):
        acc = 0.0
        for j in range(q):
            if inside[i, j] != 0:
                base = (ix[i, j] * ny + iy[i, j]) * nz + iz[i, j]
                v000 = v_next[base]
                v100 = v_next[base + ny * nz]
                v010 = v_next[base + nz]
                v110 = v_next[base + ny * nz + nz]
                v001 = v_next[base + 1]
                v101 = v_next[base + ny * nz + 1]
                v011 = v_next[base + nz + 1]
                v111 = v_next[base + ny * nz + nz + 1]
                x00 = v000 + fx[i, j] * (v100 - v000)
                x10 = v010 + fx[i, j] * (v110 - v010)
                x01 = v001 + fx[i, j] * (v101 - v001)
                x11 = v011 + fx[i, j] * (v111 - v011)
                y0 = x00 + fy[i, j] * (x10 - x00)
                y1 = x01 + fy[i, j] * (x11 - x01)
                val = y0 + fz[i, j] * (y1 - y0)
            else:
                val = gout[i, j]
            acc += wq[j] * val
        out[i] = acc


def quad_gather_3d_numpy(v_next, ix, iy, iz, fx, fy, fz, inside, gout, wq, ny, nz, out):
    q = ix.shape[1]
    acc = np.zeros(ix.shape[0])
    for j in range(q):
        base = (ix[:, j] * ny + iy[:, j]) * nz + iz[:, j]
        v000 = v_next[base]
        v100 = v_next[base + ny * nz]
        v010 = v_next[base + nz]
        v110 = v_next[base + ny * nz + nz]
        v001 = v_next[base + 1]
        v101 = v_next[base + ny * nz + 1]
        v011 = v_next[base + nz + 1]
        v111 = v_next[base + ny * nz + nz + 1]
        x00 = v000 + fx[:, j] * (v100 - v000)
        x10 = v010 + fx[:, j] * (v110 - v010)
        x01 = v001 + fx[:, j] * (v101 - v001)
        x11 = v011 + fx[:, j] * (v111 - v011)
        y0 = x00 + fy[:, j] * (x10 - x00)
        y1 = x01 + fy[:, j] * (x11 - x01)
        val = np.where(inside[:, j] != 0, y0 + fz[:, j] * (y1 - y0), gout[:, j])
        acc += wq[j] * val
    out[:] = acc
