"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in the compiled
``_kernels`` extension. The two are interchangeable and are tested
against each other; this module is what runs when the extension is not
built.
"""

import numpy as np

# Cube corner offsets and edge table in the usual Bourke layout.
CORNERS = np.array(
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
     [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]],
    dtype=np.int64,
)
# (start corner offset, axis) for the 12 edges, always pointing towards +axis
EDGE_START = np.array(
    [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 0],
     [0, 0, 1], [1, 0, 1], [0, 1, 1], [0, 0, 1],
     [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]],
    dtype=np.int64,
)
EDGE_AXIS = np.array([0, 1, 0, 1, 0, 1, 0, 1, 2, 2, 2, 2], dtype=np.int64)


def composite_forward(sigma, delta, color, background):
    """Alpha-composite samples along each ray.

    Returns ``(pixel, weights, trans)`` where ``trans`` has one extra
    column holding the transmittance past the last sample.
    """
    dt = np.asarray(sigma).dtype
    sigma, delta, color = (np.asarray(a, dtype=np.float64) for a in (sigma, delta, color))
    s = sigma * delta
    csum = np.cumsum(s, axis=1)
    trans = np.empty((s.shape[0], s.shape[1] + 1))
    trans[:, 0] = 1.0
    trans[:, 1:] = np.exp(-csum)
    weights = trans[:, :-1] * (1.0 - np.exp(-s))
    pixel = np.sum(weights * color, axis=1) + background * trans[:, -1]
    return pixel.astype(dt, copy=False), weights.astype(dt, copy=False), trans.astype(dt, copy=False)


def composite_backward(grad_pixel, delta, color, background, weights, trans):
    """Gradients of the composited pixel wrt densities and colors."""
    dt = np.asarray(delta).dtype
    grad_pixel, delta, color, weights, trans = (
        np.asarray(a, dtype=np.float64) for a in (grad_pixel, delta, color, weights, trans)
    )
    wc = weights * color
    # suffix sum over i > k
    after = np.cumsum(wc[:, ::-1], axis=1)[:, ::-1] - wc
    ds = trans[:, 1:] * color - after - background * trans[:, -1:]
    grad_sigma = grad_pixel[:, None] * ds * delta
    grad_color = grad_pixel[:, None] * weights
    return grad_sigma.astype(dt, copy=False), grad_color.astype(dt, copy=False)


def sample_pdf(weights, edges, u):
    """Inverse-transform sampling from piecewise-constant per-ray PDFs.

    ``weights`` is [R, N], ``edges`` the [R, N+1] bin boundaries and ``u``
    the [R, M] uniforms in [0, 1). Rays whose total weight is below 1e-6
    sample uniformly between the first and last edge.
    """
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum(axis=1, keepdims=True)
    flat = total[:, 0] < 1e-6
    if flat.any():
        w = w.copy()
        w[flat] = 1.0
        total = w.sum(axis=1, keepdims=True)
    pdf = w / total
    cdf = np.cumsum(pdf, axis=1)
    cdf[:, -1] = 1.0
    out = np.empty(u.shape, dtype=np.float64)
    for r in range(w.shape[0]):
        b = np.searchsorted(cdf[r], u[r], side="right")
        b = np.minimum(b, w.shape[1] - 1)
        lo = cdf[r, b] - pdf[r, b]
        frac = np.where(pdf[r, b] > 0, (u[r] - lo) / np.where(pdf[r, b] > 0, pdf[r, b], 1.0), 0.0)
        frac = np.clip(frac, 0.0, 1.0)
        out[r] = edges[r, b] + frac * (edges[r, b + 1] - edges[r, b])
    return out


def _segment_segment_dist2(p1, d1, p2, d2):
    """Squared closest distance between segments p1+s*d1 and p2+t*d2, s,t in [0,1].

    All arguments broadcast; the last axis holds xyz.
    """
    r = p1 - p2
    a = np.sum(d1 * d1, axis=-1)
    e = np.sum(d2 * d2, axis=-1)
    f = np.sum(d2 * r, axis=-1)
    c = np.sum(d1 * r, axis=-1)
    b = np.sum(d1 * d2, axis=-1)
    denom = a * e - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(denom > 1e-300 * np.maximum(a * e, 1.0), (b * f - c * e) / denom, 0.0)
        s = np.clip(s, 0.0, 1.0)
        t = np.where(e > 0, (b * s + f) / np.where(e > 0, e, 1.0), 0.0)
        low = t < 0.0
        high = t > 1.0
        s = np.where(low, np.clip(np.where(a > 0, -c / np.where(a > 0, a, 1.0), 0.0), 0.0, 1.0), s)
        s = np.where(high, np.clip(np.where(a > 0, (b - c) / np.where(a > 0, a, 1.0), 0.0), 0.0, 1.0), s)
        t = np.clip(t, 0.0, 1.0)
    diff = p1 + d1 * s[..., None] - p2 - d2 * t[..., None]
    return np.sum(diff * diff, axis=-1)


def segment_hits(origins, dirs, t_near, t_far, seg_a, seg_b, radii):
    """Does the ray piece [t_near, t_far] come within a capsule radius of any axis segment?"""
    p1 = origins + dirs * t_near[:, None]
    d1 = dirs * (t_far - t_near)[:, None]
    hit = np.zeros(origins.shape[0], dtype=bool)
    for a, bpt, rad in zip(seg_a, seg_b, radii):
        dist2 = _segment_segment_dist2(p1, d1, a[None, :], (bpt - a)[None, :])
        hit |= dist2 <= rad * rad
    return hit


def capsule_sdf(points, seg_a, seg_b, radii):
    """Minimum capsule signed distance and the index of the closest capsule."""
    best = np.full(points.shape[0], np.inf)
    arg = np.zeros(points.shape[0], dtype=np.int64)
    for i, (a, b, rad) in enumerate(zip(seg_a, seg_b, radii)):
        ab = b - a
        ap = points - a
        h = np.clip(ap @ ab / (ab @ ab), 0.0, 1.0)
        d = np.sqrt(np.sum((ap - h[:, None] * ab) ** 2, axis=1)) - rad
        closer = d < best
        best = np.where(closer, d, best)
        arg = np.where(closer, i, arg)
    return best, arg


def marching_cubes(values, isolevel, tri_table):
    """Triangulate the isosurface of a scalar grid.

    Vertices come back in index coordinates; vertices on shared edges are
    shared between triangles.
    """
    values = np.ascontiguousarray(values, dtype=np.float64)
    nx, ny, nz = values.shape
    below = values < isolevel
    cx, cy, cz = nx - 1, ny - 1, nz - 1
    case = np.zeros((cx, cy, cz), dtype=np.int64)
    for bit, (ox, oy, oz) in enumerate(CORNERS):
        case |= below[ox:ox + cx, oy:oy + cy, oz:oz + cz].astype(np.int64) << bit
    active = np.nonzero((case != 0) & (case != 255))
    if active[0].size == 0:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    cube = np.stack(active, axis=1)
    rows = tri_table[case[active]]  # [A, 16]
    # edge ids per (cube, slot)
    slot_cube, slot = np.nonzero(rows >= 0)
    edge = rows[slot_cube, slot]
    start = cube[slot_cube] + EDGE_START[edge]
    axis = EDGE_AXIS[edge]
    flat = (start[:, 0] * ny + start[:, 1]) * nz + start[:, 2]
    gid = axis * (nx * ny * nz) + flat
    uniq, inverse = np.unique(gid, return_inverse=True)
    u_axis = uniq // (nx * ny * nz)
    u_flat = uniq % (nx * ny * nz)
    sx = u_flat // (ny * nz)
    sy = (u_flat // nz) % ny
    sz = u_flat % nz
    p0 = np.stack([sx, sy, sz], axis=1)
    p1 = p0.copy()
    p1[np.arange(p1.shape[0]), u_axis] += 1
    v0 = values[p0[:, 0], p0[:, 1], p0[:, 2]]
    v1 = values[p1[:, 0], p1[:, 1], p1[:, 2]]
    mu = (isolevel - v0) / (v1 - v0)
    verts = p0.astype(np.float64)
    verts[np.arange(verts.shape[0]), u_axis] += mu
    faces = inverse.reshape(-1, 3)
    return verts, faces.astype(np.int64)
