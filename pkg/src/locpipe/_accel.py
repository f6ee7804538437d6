"""Hot numeric kernels, each with a numba-compiled and a pure-numpy twin.

The numba path is used when numba imports cleanly, unless the environment
variable ``LOCPIPE_NUMBA`` is set to ``0``/``false``/``off``, which forces
the numpy fallbacks. Selection happens once at import time; the active
backend name is exposed as ``BACKEND``.

Twins compute the same quantities with the same tie-breaking rules; sums
may differ by float rounding (different accumulation order), which the
equivalence tests bound. BLAS-shaped work (large matmuls) intentionally
stays on numpy.
"""

import os

import numpy as np

__all__ = [
    "BACKEND",
    "NUMBA_ENABLED",
    "IMPLS",
    "mutual_nn_ratio",
    "vlad_hard_accumulate",
    "vlad_soft_accumulate",
    "reproj_sq_errors",
    "pairwise_sq_dists",
    "splat_warp",
]


def _numba_wanted():
    flag = os.environ.get("LOCPIPE_NUMBA", "").strip().lower()
    return flag not in ("0", "false", "off", "no")


NUMBA_ENABLED = False
if _numba_wanted():
    try:
        from numba import njit

        NUMBA_ENABLED = True
    except ImportError:
        pass

if not NUMBA_ENABLED:
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap

BACKEND = "numba" if NUMBA_ENABLED else "numpy"


# ---------------------------------------------------------------------------
# mutual nearest neighbour + Lowe ratio over a similarity matrix


def _mutual_nn_ratio_np(sim, ratio):
    na, nb = sim.shape
    if na == 0 or nb == 0:
        return np.empty((0, 2), np.int64), np.empty(0, np.float64)
    best_b = np.argmax(sim, axis=1)
    row_best = sim[np.arange(na), best_b]
    if nb >= 2:
        masked = sim.copy()
        masked[np.arange(na), best_b] = -np.inf
        row_second = np.max(masked, axis=1)
    else:
        # no second neighbour: ratio test passes vacuously (d2 = inf)
        row_second = np.full(na, -np.inf)
    best_a = np.argmax(sim, axis=0)
    col_best = sim[best_a, np.arange(nb)]
    if na >= 2:
        masked = sim.copy()
        masked[best_a, np.arange(nb)] = -np.inf
        col_second = np.max(masked, axis=0)
    else:
        col_second = np.full(nb, -np.inf)

    def dist(s):
        return np.sqrt(np.maximum(0.0, 2.0 - 2.0 * s))

    # ratio test applied on both sides keeps matching symmetric in (a, b)
    row_ok = dist(row_best) < ratio * dist(row_second)
    col_ok = dist(col_best) < ratio * dist(col_second)
    mutual = best_a[best_b] == np.arange(na)
    keep = mutual & row_ok & col_ok[best_b]

    ia = np.nonzero(keep)[0]
    ib = best_b[ia]
    pairs = np.column_stack([ia, ib]).astype(np.int64)
    scores = np.clip(0.5 * (1.0 + row_best[ia]), 0.0, 1.0)
    return pairs, scores


@njit(cache=True)
def _mutual_nn_ratio_nb(sim, ratio):  # pragma: no cover - compiled
    na, nb = sim.shape
    best_b = np.empty(na, np.int64)
    row_best = np.empty(na, np.float64)
    row_second = np.empty(na, np.float64)
    for i in range(na):
        b1 = -np.inf
        b2 = -np.inf
        j1 = 0
        for j in range(nb):
            v = sim[i, j]
            if v > b1:
                b2 = b1
                b1 = v
                j1 = j
            elif v > b2:
                b2 = v
        best_b[i] = j1
        row_best[i] = b1
        row_second[i] = b2
    best_a = np.empty(nb, np.int64)
    col_best = np.empty(nb, np.float64)
    col_second = np.empty(nb, np.float64)
    for j in range(nb):
        b1 = -np.inf
        b2 = -np.inf
        i1 = 0
        for i in range(na):
            v = sim[i, j]
            if v > b1:
                b2 = b1
                b1 = v
                i1 = i
            elif v > b2:
                b2 = v
        best_a[j] = i1
        col_best[j] = b1
        col_second[j] = b2

    # ratio test applied on both sides keeps matching symmetric in (a, b)
    keep = np.zeros(na, np.bool_)
    count = 0
    for i in range(na):
        j = best_b[i]
        if best_a[j] != i:
            continue
        d1 = np.sqrt(max(0.0, 2.0 - 2.0 * row_best[i]))
        d2 = np.sqrt(max(0.0, 2.0 - 2.0 * row_second[i]))
        if not d1 < ratio * d2:
            continue
        c1 = np.sqrt(max(0.0, 2.0 - 2.0 * col_best[j]))
        c2 = np.sqrt(max(0.0, 2.0 - 2.0 * col_second[j]))
        if c1 < ratio * c2:
            keep[i] = True
            count += 1
    pairs = np.empty((count, 2), np.int64)
    scores = np.empty(count, np.float64)
    k = 0
    for i in range(na):
        if keep[i]:
            pairs[k, 0] = i
            pairs[k, 1] = best_b[i]
            s = 0.5 * (1.0 + row_best[i])
            scores[k] = min(1.0, max(0.0, s))
            k += 1
    return pairs, scores


def _mutual_nn_ratio_nb_entry(sim, ratio):
    if sim.shape[0] == 0 or sim.shape[1] == 0:
        return np.empty((0, 2), np.int64), np.empty(0, np.float64)
    return _mutual_nn_ratio_nb(np.ascontiguousarray(sim, np.float64), float(ratio))


# ---------------------------------------------------------------------------
# VLAD accumulation


def _vlad_hard_accumulate_np(descs, cents):
    n = descs.shape[0]
    k, d = cents.shape
    v = np.zeros((k, d), np.float64)
    if n == 0:
        return v, np.empty(0, np.int64)
    d2 = (
        np.sum(descs * descs, axis=1)[:, None]
        - 2.0 * descs @ cents.T
        + np.sum(cents * cents, axis=1)[None, :]
    )
    assign = np.argmin(d2, axis=1).astype(np.int64)
    np.add.at(v, assign, descs - cents[assign])
    return v, assign


@njit(cache=True)
def _vlad_hard_accumulate_nb(descs, cents):  # pragma: no cover - compiled
    n, d = descs.shape
    k = cents.shape[0]
    v = np.zeros((k, d), np.float64)
    assign = np.empty(n, np.int64)
    for i in range(n):
        best = np.inf
        bk = 0
        for kk in range(k):
            acc = 0.0
            for j in range(d):
                diff = descs[i, j] - cents[kk, j]
                acc += diff * diff
            if acc < best:
                best = acc
                bk = kk
        assign[i] = bk
        for j in range(d):
            v[bk, j] += descs[i, j] - cents[bk, j]
    return v, assign


def _vlad_hard_accumulate_nb_entry(descs, cents):
    if descs.shape[0] == 0:
        return np.zeros(cents.shape, np.float64), np.empty(0, np.int64)
    return _vlad_hard_accumulate_nb(
        np.ascontiguousarray(descs, np.float64),
        np.ascontiguousarray(cents, np.float64),
    )


def _vlad_soft_accumulate_np(descs, cents, w, b):
    n = descs.shape[0]
    k, d = cents.shape
    if n == 0:
        return np.zeros((k, d), np.float64), np.empty((0, k), np.float64)
    logits = descs @ w.T + b[None, :]
    logits -= np.max(logits, axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= np.sum(weights, axis=1, keepdims=True)
    v = weights.T @ descs - np.sum(weights, axis=0)[:, None] * cents
    return v, weights


@njit(cache=True)
def _vlad_soft_accumulate_nb(descs, cents, w, b):  # pragma: no cover - compiled
    n, d = descs.shape
    k = cents.shape[0]
    v = np.zeros((k, d), np.float64)
    weights = np.empty((n, k), np.float64)
    for i in range(n):
        m = -np.inf
        for kk in range(k):
            acc = b[kk]
            for j in range(d):
                acc += w[kk, j] * descs[i, j]
            weights[i, kk] = acc
            if acc > m:
                m = acc
        tot = 0.0
        for kk in range(k):
            e = np.exp(weights[i, kk] - m)
            weights[i, kk] = e
            tot += e
        for kk in range(k):
            weights[i, kk] /= tot
        for kk in range(k):
            wt = weights[i, kk]
            for j in range(d):
                v[kk, j] += wt * (descs[i, j] - cents[kk, j])
    return v, weights


def _vlad_soft_accumulate_nb_entry(descs, cents, w, b):
    k, d = cents.shape
    if descs.shape[0] == 0:
        return np.zeros((k, d), np.float64), np.empty((0, k), np.float64)
    return _vlad_soft_accumulate_nb(
        np.ascontiguousarray(descs, np.float64),
        np.ascontiguousarray(cents, np.float64),
        np.ascontiguousarray(w, np.float64),
        np.ascontiguousarray(b, np.float64),
    )


# ---------------------------------------------------------------------------
# reprojection errors for pose scoring


def _reproj_sq_errors_np(rot, t, fx, fy, cx, cy, pts3, pts2):
    pc = pts3 @ rot.T + t
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = fx * pc[:, 0] / z + cx
        v = fy * pc[:, 1] / z + cy
    du = u - pts2[:, 0]
    dv = v - pts2[:, 1]
    err = du * du + dv * dv
    err[z <= 0.0] = np.inf
    return err


@njit(cache=True)
def _reproj_sq_errors_nb(rot, t, fx, fy, cx, cy, pts3, pts2):  # pragma: no cover
    n = pts3.shape[0]
    err = np.empty(n, np.float64)
    for i in range(n):
        x = rot[0, 0] * pts3[i, 0] + rot[0, 1] * pts3[i, 1] + rot[0, 2] * pts3[i, 2] + t[0]
        y = rot[1, 0] * pts3[i, 0] + rot[1, 1] * pts3[i, 1] + rot[1, 2] * pts3[i, 2] + t[1]
        z = rot[2, 0] * pts3[i, 0] + rot[2, 1] * pts3[i, 1] + rot[2, 2] * pts3[i, 2] + t[2]
        if z <= 0.0:
            err[i] = np.inf
        else:
            du = fx * x / z + cx - pts2[i, 0]
            dv = fy * y / z + cy - pts2[i, 1]
            err[i] = du * du + dv * dv
    return err


def _reproj_sq_errors_nb_entry(rot, t, fx, fy, cx, cy, pts3, pts2):
    return _reproj_sq_errors_nb(
        np.ascontiguousarray(rot, np.float64),
        np.ascontiguousarray(t, np.float64),
        float(fx), float(fy), float(cx), float(cy),
        np.ascontiguousarray(pts3, np.float64),
        np.ascontiguousarray(pts2, np.float64),
    )


# ---------------------------------------------------------------------------
# pairwise squared distances


def _pairwise_sq_dists_np(a, b):
    d2 = (
        np.sum(a * a, axis=1)[:, None]
        - 2.0 * a @ b.T
        + np.sum(b * b, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


@njit(cache=True)
def _pairwise_sq_dists_nb(a, b):  # pragma: no cover - compiled
    n, d = a.shape
    m = b.shape[0]
    out = np.empty((n, m), np.float64)
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for kk in range(d):
                diff = a[i, kk] - b[j, kk]
                acc += diff * diff
            out[i, j] = acc
    return out


def _pairwise_sq_dists_nb_entry(a, b):
    return _pairwise_sq_dists_nb(
        np.ascontiguousarray(a, np.float64), np.ascontiguousarray(b, np.float64)
    )


# ---------------------------------------------------------------------------
# forward depth warp (nearest-neighbour splat with z-buffer)
#
# Ref pixels with depth > 0 are unprojected with the ref intrinsics, moved
# by (rot, t) into the destination camera frame, and splatted into the
# nearest destination pixel. The smallest destination-frame depth wins a
# pixel; ties keep the earliest source pixel in row-major order.


def _splat_warp_np(img, depth, rot, t, fx, fy, cx, cy,
                   fx2, fy2, cx2, cy2, h2, w2):
    h, w = depth.shape
    warped = np.zeros((h2, w2), np.float64)
    zbuf = np.full((h2, w2), np.inf, np.float64)
    vv, uu = np.nonzero(depth > 0.0)
    if vv.size == 0:
        return warped, np.zeros((h2, w2), np.bool_)
    z = depth[vv, uu]
    x = (uu - cx) / fx * z
    y = (vv - cy) / fy * z
    pts = np.column_stack([x, y, z]) @ rot.T + t
    zd = pts[:, 2]
    front = zd > 0.0
    pts, zd = pts[front], zd[front]
    vals = img[vv[front], uu[front]]
    src = np.arange(front.size)[front]
    u2 = np.round(fx2 * pts[:, 0] / zd + cx2).astype(np.int64)
    v2 = np.round(fy2 * pts[:, 1] / zd + cy2).astype(np.int64)
    inside = (u2 >= 0) & (u2 < w2) & (v2 >= 0) & (v2 < h2)
    u2, v2, zd, vals, src = u2[inside], v2[inside], zd[inside], vals[inside], src[inside]
    # write order: descending depth, then descending source index, so the
    # final write per pixel is the nearest depth / earliest source pixel
    order = np.lexsort((-src, -zd))
    lin = v2[order] * w2 + u2[order]
    zbuf.reshape(-1)[lin] = zd[order]
    warped.reshape(-1)[lin] = vals[order]
    return warped, np.isfinite(zbuf)


@njit(cache=True)
def _splat_warp_nb(img, depth, rot, t, fx, fy, cx, cy,
                   fx2, fy2, cx2, cy2, h2, w2):  # pragma: no cover - compiled
    h, w = depth.shape
    warped = np.zeros((h2, w2), np.float64)
    zbuf = np.full((h2, w2), np.inf, np.float64)
    for v in range(h):
        for u in range(w):
            z = depth[v, u]
            if z <= 0.0:
                continue
            x = (u - cx) / fx * z
            y = (v - cy) / fy * z
            xd = rot[0, 0] * x + rot[0, 1] * y + rot[0, 2] * z + t[0]
            yd = rot[1, 0] * x + rot[1, 1] * y + rot[1, 2] * z + t[1]
            zd = rot[2, 0] * x + rot[2, 1] * y + rot[2, 2] * z + t[2]
            if zd <= 0.0:
                continue
            u2 = int(np.round(fx2 * xd / zd + cx2))
            v2 = int(np.round(fy2 * yd / zd + cy2))
            if u2 < 0 or u2 >= w2 or v2 < 0 or v2 >= h2:
                continue
            if zd < zbuf[v2, u2]:
                zbuf[v2, u2] = zd
                warped[v2, u2] = img[v, u]
    valid = np.empty((h2, w2), np.bool_)
    for v in range(h2):
        for u in range(w2):
            valid[v, u] = np.isfinite(zbuf[v, u])
    return warped, valid


def _splat_warp_nb_entry(img, depth, rot, t, fx, fy, cx, cy,
                         fx2, fy2, cx2, cy2, h2, w2):
    return _splat_warp_nb(
        np.ascontiguousarray(img, np.float64),
        np.ascontiguousarray(depth, np.float64),
        np.ascontiguousarray(rot, np.float64),
        np.ascontiguousarray(t, np.float64),
        float(fx), float(fy), float(cx), float(cy),
        float(fx2), float(fy2), float(cx2), float(cy2),
        int(h2), int(w2),
    )


# ---------------------------------------------------------------------------

IMPLS = {
    "numpy": {
        "mutual_nn_ratio": _mutual_nn_ratio_np,
        "vlad_hard_accumulate": _vlad_hard_accumulate_np,
        "vlad_soft_accumulate": _vlad_soft_accumulate_np,
        "reproj_sq_errors": _reproj_sq_errors_np,
        "pairwise_sq_dists": _pairwise_sq_dists_np,
        "splat_warp": _splat_warp_np,
    },
    "numba": {
        "mutual_nn_ratio": _mutual_nn_ratio_nb_entry,
        "vlad_hard_accumulate": _vlad_hard_accumulate_nb_entry,
        "vlad_soft_accumulate": _vlad_soft_accumulate_nb_entry,
        "reproj_sq_errors": _reproj_sq_errors_nb_entry,
        "pairwise_sq_dists": _pairwise_sq_dists_nb_entry,
        "splat_warp": _splat_warp_nb_entry,
    },
}

_active = IMPLS[BACKEND]

mutual_nn_ratio = _active["mutual_nn_ratio"]
vlad_hard_accumulate = _active["vlad_hard_accumulate"]
vlad_soft_accumulate = _active["vlad_soft_accumulate"]
reproj_sq_errors = _active["reproj_sq_errors"]
pairwise_sq_dists = _active["pairwise_sq_dists"]
splat_warp = _active["splat_warp"]
