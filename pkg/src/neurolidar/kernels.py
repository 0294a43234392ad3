"""Hot inner loops, each with a numba kernel and a pure-numpy twin.

The public wrappers take a ``backend`` argument (``"numba"``, ``"numpy"`` or
``None`` for the process default). Both paths are required to agree exactly:
integer rasters bit-for-bit, float rasters to the last ulp on the same inputs.
"""
import numpy as np

from ._accel import njit, use_numba

KIND_SPHERE = 0
KIND_BOX = 1
KIND_PLANE = 2

_EPS_T = 1e-6


def _resolve(backend):
    if backend is None:
        return "numba" if use_numba() else "numpy"
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not use_numba():
        raise RuntimeError("numba backend requested but numba is disabled")
    return backend


# ---------------------------------------------------------------------------
# event accumulation

@njit
def _frame_nb(x, y, p, height, width):
    out = np.zeros((height, width), dtype=np.int32)
    for i in range(x.shape[0]):
        out[y[i], x[i]] += p[i]
    return out


def _frame_np(x, y, p, height, width):
    idx = y.astype(np.int64) * width + x.astype(np.int64)
    n = height * width
    pos = np.bincount(idx[p > 0], minlength=n)
    neg = np.bincount(idx[p < 0], minlength=n)
    return (pos - neg).astype(np.int32).reshape(height, width)


@njit
def _voxel_nb(t, x, y, p, t_start, t_end, bins, height, width):
    out = np.zeros((bins, height, width), dtype=np.int32)
    span = t_end - t_start
    for i in range(t.shape[0]):
        b = (bins * (t[i] - t_start)) // span
        if b >= bins:
            b = bins - 1
        out[b, y[i], x[i]] += p[i]
    return out


def voxel_bins(t, t_start, t_end, bins):
    """Integer bin index of each timestamp, clamped to ``bins - 1``."""
    b = (np.int64(bins) * (t.astype(np.int64) - t_start)) // (t_end - t_start)
    return np.minimum(b, bins - 1)


def _voxel_np(t, x, y, p, t_start, t_end, bins, height, width):
    b = voxel_bins(t, t_start, t_end, bins)
    idx = (b * height + y.astype(np.int64)) * width + x.astype(np.int64)
    n = bins * height * width
    pos = np.bincount(idx[p > 0], minlength=n)
    neg = np.bincount(idx[p < 0], minlength=n)
    return (pos - neg).astype(np.int32).reshape(bins, height, width)


def accumulate_frame(x, y, p, height, width, backend=None):
    if _resolve(backend) == "numba":
        return _frame_nb(x, y, p, height, width)
    return _frame_np(x, y, p, height, width)


def accumulate_voxel(t, x, y, p, t_start, t_end, bins, height, width, backend=None):
    if _resolve(backend) == "numba":
        return _voxel_nb(t, x, y, p, np.int64(t_start), np.int64(t_end),
                         bins, height, width)
    return _voxel_np(t, x, y, p, t_start, t_end, bins, height, width)


# ---------------------------------------------------------------------------
# contrast-threshold event synthesis
#
# Events for interval i, pixel (r, c) are generated in (i, r, c, j) order by both
# backends; the caller sorts by timestamp with a stable sort.

_K_EPS = 1e-9


@njit
def _synth_nb(log_i, times, threshold):
    n_t, height, width = log_i.shape
    ref = log_i[0].copy()
    # pass 1: count
    total = 0
    ref_c = ref.copy()
    for i in range(1, n_t):
        for r in range(height):
            for c in range(width):
                d = log_i[i, r, c] - ref_c[r, c]
                k = int(np.floor(abs(d) / threshold + _K_EPS))
                if k > 0:
                    total += k
                    s = 1.0 if d > 0 else -1.0
                    ref_c[r, c] += k * threshold * s
    t_out = np.empty(total, dtype=np.int64)
    x_out = np.empty(total, dtype=np.uint16)
    y_out = np.empty(total, dtype=np.uint16)
    p_out = np.empty(total, dtype=np.int8)
    n = 0
    for i in range(1, n_t):
        t0 = times[i - 1]
        dt = times[i] - t0
        for r in range(height):
            for c in range(width):
                l_prev = log_i[i - 1, r, c]
                l_now = log_i[i, r, c]
                d = l_now - ref[r, c]
                k = int(np.floor(abs(d) / threshold + _K_EPS))
                if k == 0:
                    continue
                s = 1.0 if d > 0 else -1.0
                seg = l_now - l_prev
                for j in range(1, k + 1):
                    level = ref[r, c] + s * j * threshold
                    if abs(seg) < 1e-12:
                        f = 1.0
                    else:
                        f = (level - l_prev) / seg
                    if f < 0.0:
                        f = 0.0
                    elif f > 1.0:
                        f = 1.0
                    t_out[n] = t0 + np.int64(np.floor(f * dt))
                    x_out[n] = c
                    y_out[n] = r
                    p_out[n] = 1 if s > 0 else -1
                    n += 1
                ref[r, c] += k * threshold * s
    return t_out, x_out, y_out, p_out


def _synth_np(log_i, times, threshold):
    n_t, height, width = log_i.shape
    ref = log_i[0].copy()
    ts, xs, ys, ps = [], [], [], []
    rows, cols = np.mgrid[0:height, 0:width]
    rows = rows.ravel()
    cols = cols.ravel()
    for i in range(1, n_t):
        l_prev = log_i[i - 1].ravel()
        l_now = log_i[i].ravel()
        rf = ref.ravel()
        d = l_now - rf
        k = np.floor(np.abs(d) / threshold + _K_EPS).astype(np.int64)
        hit = np.flatnonzero(k > 0)
        if hit.size == 0:
            continue
        kh = k[hit]
        s = np.where(d[hit] > 0, 1.0, -1.0)
        pix = np.repeat(hit, kh)
        # j = 1..k within each pixel's run
        starts = np.cumsum(kh) - kh
        j = np.arange(kh.sum()) - np.repeat(starts, kh) + 1
        sr = np.repeat(s, kh)
        level = rf[pix] + sr * j * threshold
        seg = l_now[pix] - l_prev[pix]
        flat = np.abs(seg) < 1e-12
        with np.errstate(divide="ignore", invalid="ignore"):
            f = np.where(flat, 1.0, (level - l_prev[pix]) / np.where(flat, 1.0, seg))
        f = np.clip(f, 0.0, 1.0)
        t0 = times[i - 1]
        dt = times[i] - t0
        ts.append(t0 + np.floor(f * dt).astype(np.int64))
        xs.append(cols[pix].astype(np.uint16))
        ys.append(rows[pix].astype(np.uint16))
        ps.append(np.where(sr > 0, 1, -1).astype(np.int8))
        rf[hit] += kh * threshold * s
        ref = rf.reshape(height, width)
    if not ts:
        return (np.empty(0, np.int64), np.empty(0, np.uint16),
                np.empty(0, np.uint16), np.empty(0, np.int8))
    return (np.concatenate(ts), np.concatenate(xs), np.concatenate(ys),
            np.concatenate(ps))


def synthesize(log_i, times, threshold, backend=None):
    """Contrast-threshold events from a (T, H, W) log-intensity stack.

    Returns time-sorted column arrays (t, x, y, p).
    """
    log_i = np.ascontiguousarray(log_i, dtype=np.float64)
    times = np.ascontiguousarray(times, dtype=np.int64)
    if _resolve(backend) == "numba":
        t, x, y, p = _synth_nb(log_i, times, float(threshold))
    else:
        t, x, y, p = _synth_np(log_i, times, float(threshold))
    order = np.argsort(t, kind="stable")
    return t[order], x[order], y[order], p[order]


# ---------------------------------------------------------------------------
# ray casting
#
# Rays leave the camera origin with direction (u, v, 1), so the ray parameter
# of a hit is its z-depth. Primitive rows: kind, cx, cy, cz, sx, sy, sz with
# camera-relative centers; spheres use sx as radius, boxes (sx, sy, sz) as half
# extents, planes cy as the plane's camera-relative y (normal -y).

@njit
def _raycast_nb(dir_u, dir_v, prims, max_range):
    height, width = dir_u.shape
    depth = np.zeros((height, width), dtype=np.float64)
    ident = np.full((height, width), -1, dtype=np.int32)
    normal = np.zeros((height, width, 3), dtype=np.float64)
    n_prim = prims.shape[0]
    for r in range(height):
        for c in range(width):
            a = dir_u[r, c]
            b = dir_v[r, c]
            best = np.inf
            best_id = -1
            nx = 0.0
            ny = 0.0
            nz = 0.0
            for k in range(n_prim):
                kind = int(prims[k, 0])
                px = prims[k, 1]
                py = prims[k, 2]
                pz = prims[k, 3]
                if kind == 0:
                    rad = prims[k, 4]
                    qa = a * a + b * b + 1.0
                    qb = -2.0 * (a * px + b * py + pz)
                    qc = px * px + py * py + pz * pz - rad * rad
                    disc = qb * qb - 4.0 * qa * qc
                    if disc < 0.0:
                        continue
                    sq = np.sqrt(disc)
                    t = (-qb - sq) / (2.0 * qa)
                    if t <= _EPS_T:
                        t = (-qb + sq) / (2.0 * qa)
                    if t <= _EPS_T or t >= best:
                        continue
                    hx = (a * t - px) / rad
                    hy = (b * t - py) / rad
                    hz = (t - pz) / rad
                    if qc < 0.0:
                        hx = -hx
                        hy = -hy
                        hz = -hz
                    best = t
                    best_id = k
                    nx = hx
                    ny = hy
                    nz = hz
                elif kind == 1:
                    d0 = a
                    d1 = b
                    tmin = -np.inf
                    tmax = np.inf
                    ax = -1
                    sgn = 0.0
                    ok = True
                    for axis in range(3):
                        if axis == 0:
                            dd = d0
                            cc = px
                            hs = prims[k, 4]
                        elif axis == 1:
                            dd = d1
                            cc = py
                            hs = prims[k, 5]
                        else:
                            dd = 1.0
                            cc = pz
                            hs = prims[k, 6]
                        lo = cc - hs
                        hi = cc + hs
                        if dd == 0.0:
                            if lo > 0.0 or hi < 0.0:
                                ok = False
                            continue
                        t1 = lo / dd
                        t2 = hi / dd
                        if t1 > t2:
                            t1, t2 = t2, t1
                        if t1 > tmin:
                            tmin = t1
                            ax = axis
                            sgn = -1.0 if dd > 0 else 1.0
                        if t2 < tmax:
                            tmax = t2
                    if not ok or tmax < tmin or tmax <= _EPS_T:
                        continue
                    if tmin > _EPS_T:
                        t = tmin
                    else:
                        t = tmax
                    if t >= best:
                        continue
                    best = t
                    best_id = k
                    nx = 0.0
                    ny = 0.0
                    nz = 0.0
                    if ax == 0:
                        nx = sgn
                    elif ax == 1:
                        ny = sgn
                    else:
                        nz = sgn
                else:
                    if b <= 0.0:
                        continue
                    t = py / b
                    if t <= _EPS_T or t >= best:
                        continue
                    best = t
                    best_id = k
                    nx = 0.0
                    ny = -1.0
                    nz = 0.0
            if best_id >= 0 and best <= max_range:
                depth[r, c] = best
                ident[r, c] = best_id
                normal[r, c, 0] = nx
                normal[r, c, 1] = ny
                normal[r, c, 2] = nz
    return depth, ident, normal


def _raycast_np(dir_u, dir_v, prims, max_range):
    height, width = dir_u.shape
    a = dir_u.ravel()
    b = dir_v.ravel()
    n = a.size
    best = np.full(n, np.inf)
    best_id = np.full(n, -1, dtype=np.int32)
    normal = np.zeros((n, 3))
    for k in range(prims.shape[0]):
        kind = int(prims[k, 0])
        px, py, pz = prims[k, 1], prims[k, 2], prims[k, 3]
        nrm = np.zeros((n, 3))
        if kind == KIND_SPHERE:
            rad = prims[k, 4]
            qa = a * a + b * b + 1.0
            qb = -2.0 * (a * px + b * py + pz)
            qc = px * px + py * py + pz * pz - rad * rad
            disc = qb * qb - 4.0 * qa * qc
            ok = disc >= 0.0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            t = (-qb - sq) / (2.0 * qa)
            t = np.where(t <= _EPS_T, (-qb + sq) / (2.0 * qa), t)
            ok &= t > _EPS_T
            flip = -1.0 if qc < 0.0 else 1.0
            nrm[:, 0] = flip * (a * t - px) / rad
            nrm[:, 1] = flip * (b * t - py) / rad
            nrm[:, 2] = flip * (t - pz) / rad
        elif kind == KIND_BOX:
            tmin = np.full(n, -np.inf)
            tmax = np.full(n, np.inf)
            ax = np.full(n, -1)
            sgn = np.zeros(n)
            ok = np.ones(n, dtype=bool)
            for axis, dd, cc, hs in ((0, a, px, prims[k, 4]), (1, b, py, prims[k, 5]),
                                     (2, np.ones(n), pz, prims[k, 6])):
                lo, hi = cc - hs, cc + hs
                zero = dd == 0.0
                ok &= ~(zero & ((lo > 0.0) | (hi < 0.0)))
                safe = np.where(zero, 1.0, dd)
                t1 = lo / safe
                t2 = hi / safe
                near = np.minimum(t1, t2)
                far = np.maximum(t1, t2)
                upd = ~zero & (near > tmin)
                tmin = np.where(upd, near, tmin)
                ax = np.where(upd, axis, ax)
                sgn = np.where(upd, np.where(dd > 0, -1.0, 1.0), sgn)
                tmax = np.where(~zero & (far < tmax), far, tmax)
            ok &= (tmax >= tmin) & (tmax > _EPS_T)
            t = np.where(tmin > _EPS_T, tmin, tmax)
            for axis in range(3):
                nrm[:, axis] = np.where(ax == axis, sgn, 0.0)
        else:
            ok = b > 0.0
            t = np.where(ok, py / np.where(ok, b, 1.0), np.inf)
            ok &= t > _EPS_T
            nrm[:, 1] = -1.0
        win = ok & (t < best)
        best = np.where(win, t, best)
        best_id = np.where(win, k, best_id).astype(np.int32)
        normal[win] = nrm[win]
    valid = (best_id >= 0) & (best <= max_range)
    depth = np.where(valid, best, 0.0)
    best_id = np.where(valid, best_id, -1).astype(np.int32)
    normal[~valid] = 0.0
    return depth.reshape(height, width), best_id.reshape(height, width), \
        normal.reshape(height, width, 3)


def raycast(dir_u, dir_v, prims, max_range, backend=None):
    """Nearest hit per pixel: (z-depth with 0 for miss, primitive index or -1, normals)."""
    dir_u = np.ascontiguousarray(dir_u, dtype=np.float64)
    dir_v = np.ascontiguousarray(dir_v, dtype=np.float64)
    prims = np.ascontiguousarray(prims, dtype=np.float64).reshape(-1, 7)
    if _resolve(backend) == "numba":
        return _raycast_nb(dir_u, dir_v, prims, float(max_range))
    return _raycast_np(dir_u, dir_v, prims, float(max_range))
