# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Same contract as ``dofield._kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, INFINITY

cnp.import_array()

cdef int[8][3] _CORNERS = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                           [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]]
cdef int[12][3] _EDGE_START = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 0],
                               [0, 0, 1], [1, 0, 1], [0, 1, 1], [0, 0, 1],
                               [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]]
cdef int[12] _EDGE_AXIS = [0, 1, 0, 1, 0, 1, 0, 1, 2, 2, 2, 2]


def composite_forward(sigma, delta, color, double background):
    cdef double[:, ::1] sg = np.ascontiguousarray(sigma, dtype=np.float64)
    cdef double[:, ::1] dl = np.ascontiguousarray(delta, dtype=np.float64)
    cdef double[:, ::1] cl = np.ascontiguousarray(color, dtype=np.float64)
    cdef Py_ssize_t R = sg.shape[0], N = sg.shape[1], r, i
    pixel_a = np.empty(R, dtype=np.float64)
    weights_a = np.empty((R, N), dtype=np.float64)
    trans_a = np.empty((R, N + 1), dtype=np.float64)
    cdef double[::1] pixel = pixel_a
    cdef double[:, ::1] w = weights_a
    cdef double[:, ::1] T = trans_a
    cdef double acc, s, e, pix
    for r in range(R):
        acc = 0.0
        pix = 0.0
        T[r, 0] = 1.0
        for i in range(N):
            s = sg[r, i] * dl[r, i]
            acc += s
            e = exp(-acc)
            T[r, i + 1] = e
            w[r, i] = T[r, i] * (1.0 - exp(-s))
            pix += w[r, i] * cl[r, i]
        pixel[r] = pix + background * T[r, N]
    dt = np.asarray(sigma).dtype
    return pixel_a.astype(dt, copy=False), weights_a.astype(dt, copy=False), trans_a.astype(dt, copy=False)


def composite_backward(grad_pixel, delta, color, double background, weights, trans):
    cdef double[::1] gp = np.ascontiguousarray(grad_pixel, dtype=np.float64)
    cdef double[:, ::1] dl = np.ascontiguousarray(delta, dtype=np.float64)
    cdef double[:, ::1] cl = np.ascontiguousarray(color, dtype=np.float64)
    cdef double[:, ::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef double[:, ::1] T = np.ascontiguousarray(trans, dtype=np.float64)
    cdef Py_ssize_t R = dl.shape[0], N = dl.shape[1], r, i
    gs_a = np.empty((R, N), dtype=np.float64)
    gc_a = np.empty((R, N), dtype=np.float64)
    cdef double[:, ::1] gs = gs_a
    cdef double[:, ::1] gc = gc_a
    cdef double after, tail
    for r in range(R):
        after = 0.0
        tail = background * T[r, N]
        for i in range(N - 1, -1, -1):
            gs[r, i] = gp[r] * (T[r, i + 1] * cl[r, i] - after - tail) * dl[r, i]
            gc[r, i] = gp[r] * w[r, i]
            after += w[r, i] * cl[r, i]
    dt = np.asarray(delta).dtype
    return gs_a.astype(dt, copy=False), gc_a.astype(dt, copy=False)


def sample_pdf(weights, edges, u):
    cdef double[:, ::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef double[:, ::1] ed = np.ascontiguousarray(edges, dtype=np.float64)
    cdef double[:, ::1] uu = np.ascontiguousarray(u, dtype=np.float64)
    cdef Py_ssize_t R = w.shape[0], N = w.shape[1], M = uu.shape[1], r, i, j, b, lo_i, hi_i
    out_a = np.empty((R, M), dtype=np.float64)
    cdef double[:, ::1] out = out_a
    cdef double[::1] cdf = np.empty(N, dtype=np.float64)
    cdef double[::1] pdf = np.empty(N, dtype=np.float64)
    cdef double total, acc, x, lo, frac
    cdef bint flat
    for r in range(R):
        total = 0.0
        for i in range(N):
            total += w[r, i]
        flat = total < 1e-6
        if flat:
            total = <double>N
        acc = 0.0
        for i in range(N):
            pdf[i] = (1.0 if flat else w[r, i]) / total
            acc += pdf[i]
            cdf[i] = acc
        cdf[N - 1] = 1.0
        for j in range(M):
            x = uu[r, j]
            # first bin whose cdf exceeds x (side="right")
            lo_i = 0
            hi_i = N
            while lo_i < hi_i:
                b = (lo_i + hi_i) // 2
                if cdf[b] <= x:
                    lo_i = b + 1
                else:
                    hi_i = b
            b = lo_i if lo_i < N else N - 1
            lo = cdf[b] - pdf[b]
            if pdf[b] > 0:
                frac = (x - lo) / pdf[b]
            else:
                frac = 0.0
            if frac < 0.0:
                frac = 0.0
            elif frac > 1.0:
                frac = 1.0
            out[r, j] = ed[r, b] + frac * (ed[r, b + 1] - ed[r, b])
    return out_a


cdef inline double _clamp01(double x) nogil:
    if x < 0.0:
        return 0.0
    if x > 1.0:
        return 1.0
    return x


cdef double _seg_seg_dist2(double* p1, double* d1, double* p2, double* d2) nogil:
    cdef double r0 = p1[0] - p2[0], r1 = p1[1] - p2[1], r2 = p1[2] - p2[2]
    cdef double a = d1[0] * d1[0] + d1[1] * d1[1] + d1[2] * d1[2]
    cdef double e = d2[0] * d2[0] + d2[1] * d2[1] + d2[2] * d2[2]
    cdef double f = d2[0] * r0 + d2[1] * r1 + d2[2] * r2
    cdef double c = d1[0] * r0 + d1[1] * r1 + d1[2] * r2
    cdef double b = d1[0] * d2[0] + d1[1] * d2[1] + d1[2] * d2[2]
    cdef double denom = a * e - b * b
    cdef double s, t, m
    m = a * e
    if m < 1.0:
        m = 1.0
    if denom > 1e-300 * m:
        s = _clamp01((b * f - c * e) / denom)
    else:
        s = 0.0
    if e > 0:
        t = (b * s + f) / e
    else:
        t = 0.0
    if t < 0.0:
        s = _clamp01(-c / a) if a > 0 else 0.0
    elif t > 1.0:
        s = _clamp01((b - c) / a) if a > 0 else 0.0
    t = _clamp01(t)
    cdef double x0 = p1[0] + d1[0] * s - p2[0] - d2[0] * t
    cdef double x1 = p1[1] + d1[1] * s - p2[1] - d2[1] * t
    cdef double x2 = p1[2] + d1[2] * s - p2[2] - d2[2] * t
    return x0 * x0 + x1 * x1 + x2 * x2


def segment_hits(origins, dirs, t_near, t_far, seg_a, seg_b, radii):
    cdef double[:, ::1] o = np.ascontiguousarray(origins, dtype=np.float64)
    cdef double[:, ::1] d = np.ascontiguousarray(dirs, dtype=np.float64)
    cdef double[::1] tn = np.ascontiguousarray(t_near, dtype=np.float64)
    cdef double[::1] tf = np.ascontiguousarray(t_far, dtype=np.float64)
    cdef double[:, ::1] A = np.ascontiguousarray(seg_a, dtype=np.float64)
    cdef double[:, ::1] B = np.ascontiguousarray(seg_b, dtype=np.float64)
    cdef double[::1] rad = np.ascontiguousarray(radii, dtype=np.float64)
    cdef Py_ssize_t M = o.shape[0], C = A.shape[0], m, c, k
    hit_a = np.zeros(M, dtype=bool)
    cdef cnp.npy_bool[::1] hit = hit_a
    cdef double p1[3]
    cdef double d1[3]
    cdef double p2[3]
    cdef double d2[3]
    for m in range(M):
        for k in range(3):
            p1[k] = o[m, k] + d[m, k] * tn[m]
            d1[k] = d[m, k] * (tf[m] - tn[m])
        for c in range(C):
            for k in range(3):
                p2[k] = A[c, k]
                d2[k] = B[c, k] - A[c, k]
            if _seg_seg_dist2(p1, d1, p2, d2) <= rad[c] * rad[c]:
                hit[m] = True
                break
    return hit_a


def capsule_sdf(points, seg_a, seg_b, radii):
    cdef double[:, ::1] P = np.ascontiguousarray(points, dtype=np.float64)
    cdef double[:, ::1] A = np.ascontiguousarray(seg_a, dtype=np.float64)
    cdef double[:, ::1] B = np.ascontiguousarray(seg_b, dtype=np.float64)
    cdef double[::1] rad = np.ascontiguousarray(radii, dtype=np.float64)
    cdef Py_ssize_t n = P.shape[0], C = A.shape[0], p, c
    best_a = np.empty(n, dtype=np.float64)
    arg_a = np.zeros(n, dtype=np.int64)
    cdef double[::1] best = best_a
    cdef cnp.int64_t[::1] arg = arg_a
    cdef double ab0, ab1, ab2, ap0, ap1, ap2, h, q0, q1, q2, dd, ab2n
    for p in range(n):
        best[p] = INFINITY
        for c in range(C):
            ab0 = B[c, 0] - A[c, 0]
            ab1 = B[c, 1] - A[c, 1]
            ab2 = B[c, 2] - A[c, 2]
            ap0 = P[p, 0] - A[c, 0]
            ap1 = P[p, 1] - A[c, 1]
            ap2 = P[p, 2] - A[c, 2]
            ab2n = ab0 * ab0 + ab1 * ab1 + ab2 * ab2
            h = _clamp01((ap0 * ab0 + ap1 * ab1 + ap2 * ab2) / ab2n)
            q0 = ap0 - h * ab0
            q1 = ap1 - h * ab1
            q2 = ap2 - h * ab2
            dd = sqrt(q0 * q0 + q1 * q1 + q2 * q2) - rad[c]
            if dd < best[p]:
                best[p] = dd
                arg[p] = c
    return best_a, arg_a


def marching_cubes(values, double isolevel, tri_table):
    cdef double[:, :, ::1] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef cnp.int64_t[:, ::1] tt = np.ascontiguousarray(tri_table, dtype=np.int64)
    cdef Py_ssize_t nx = v.shape[0], ny = v.shape[1], nz = v.shape[2]
    cdef Py_ssize_t npts = nx * ny * nz
    edge_vertex_a = np.full(3 * npts, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] edge_vertex = edge_vertex_a
    verts = []
    faces = []
    cdef Py_ssize_t i, j, k, q, s, ex, ey, ez, gid, ax
    cdef int case, e
    cdef double v0, v1, mu
    cdef long tri[3]
    for i in range(nx - 1):
        for j in range(ny - 1):
            for k in range(nz - 1):
                case = 0
                for q in range(8):
                    if v[i + _CORNERS[q][0], j + _CORNERS[q][1], k + _CORNERS[q][2]] < isolevel:
                        case |= 1 << q
                if case == 0 or case == 255:
                    continue
                s = 0
                while s < 16 and tt[case, s] >= 0:
                    e = <int>tt[case, s]
                    ex = i + _EDGE_START[e][0]
                    ey = j + _EDGE_START[e][1]
                    ez = k + _EDGE_START[e][2]
                    ax = _EDGE_AXIS[e]
                    gid = ax * npts + (ex * ny + ey) * nz + ez
                    if edge_vertex[gid] < 0:
                        v0 = v[ex, ey, ez]
                        if ax == 0:
                            v1 = v[ex + 1, ey, ez]
                        elif ax == 1:
                            v1 = v[ex, ey + 1, ez]
                        else:
                            v1 = v[ex, ey, ez + 1]
                        mu = (isolevel - v0) / (v1 - v0)
                        if ax == 0:
                            verts.append((ex + mu, <double>ey, <double>ez))
                        elif ax == 1:
                            verts.append((<double>ex, ey + mu, <double>ez))
                        else:
                            verts.append((<double>ex, <double>ey, ez + mu))
                        edge_vertex[gid] = len(verts) - 1
                    tri[s % 3] = edge_vertex[gid]
                    if s % 3 == 2:
                        faces.append((tri[0], tri[1], tri[2]))
                    s += 1
    if not faces:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    return np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64)
