"""Compiled inner loops (numba). Pure functions over plain arrays."""
import numpy as np
from numba import njit


@njit(cache=True)
def _closest_sqdist(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    # Ericson, Real-Time Collision Detection, 5.1.5
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return apx * apx + apy * apy + apz * apz
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bpx * bpx + bpy * bpy + bpz * bpz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        qx, qy, qz = ax + v * abx - px, ay + v * aby - py, az + v * abz - pz
        return qx * qx + qy * qy + qz * qz
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cpx * cpx + cpy * cpy + cpz * cpz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        qx, qy, qz = ax + w * acx - px, ay + w * acy - py, az + w * acz - pz
        return qx * qx + qy * qy + qz * qz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        qx = bx + w * (cx - bx) - px
        qy = by + w * (cy - by) - py
        qz = bz + w * (cz - bz) - pz
        return qx * qx + qy * qy + qz * qz
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    qx = ax + abx * v + acx * w - px
    qy = ay + aby * v + acy * w - py
    qz = az + abz * v + acz * w - pz
    return qx * qx + qy * qy + qz * qz


@njit(cache=True)
def unsigned_distance_grid(tris, origin, h, nx, ny, nz):
    """Exact unsigned distance from every grid point to the triangle soup.

    Triangles are culled per voxel row by a running lower bound on their
    bounding-box distance, which keeps the cost far below voxels x triangles.
    """
    nt = tris.shape[0]
    lo = np.empty((nt, 3))
    hi = np.empty((nt, 3))
    for t in range(nt):
        for a in range(3):
            lo[t, a] = min(tris[t, 0, a], tris[t, 1, a], tris[t, 2, a])
            hi[t, a] = max(tris[t, 0, a], tris[t, 1, a], tris[t, 2, a])
    out = np.empty((nx, ny, nz))
    for i in range(nx):
        px = origin[0] + i * h
        for j in range(ny):
            py = origin[1] + j * h
            for k in range(nz):
                pz = origin[2] + k * h
                best = 1e300
                for t in range(nt):
                    # squared distance to the triangle's bounding box
                    dx = max(lo[t, 0] - px, 0.0, px - hi[t, 0])
                    dy = max(lo[t, 1] - py, 0.0, py - hi[t, 1])
                    dz = max(lo[t, 2] - pz, 0.0, pz - hi[t, 2])
                    if dx * dx + dy * dy + dz * dz >= best:
                        continue
                    d = _closest_sqdist(px, py, pz,
                                        tris[t, 0, 0], tris[t, 0, 1], tris[t, 0, 2],
                                        tris[t, 1, 0], tris[t, 1, 1], tris[t, 1, 2],
                                        tris[t, 2, 0], tris[t, 2, 1], tris[t, 2, 2])
                    if d < best:
                        best = d
                out[i, j, k] = np.sqrt(best)
    return out


@njit(cache=True)
def parity_counts(tris, origin, h, dims, axis, jitter):
    """Crossings of axis-parallel rays (towards +axis) per grid point.

    Returns an int array shaped ``dims`` holding, for each grid point, the
    number of triangle crossings strictly beyond it along ``axis``. Ray
    origins are offset by ``jitter`` (two small values) in the transverse
    axes to avoid grazing edges and vertices.
    """
    a1 = (axis + 1) % 3
    a2 = (axis + 2) % 3
    n0, n1, n2 = dims[axis], dims[a1], dims[a2]
    diff = np.zeros((n1, n2, n0 + 1), dtype=np.int64)
    for t in range(tris.shape[0]):
        y0, z0 = tris[t, 0, a1], tris[t, 0, a2]
        y1, z1 = tris[t, 1, a1], tris[t, 1, a2]
        y2, z2 = tris[t, 2, a1], tris[t, 2, a2]
        det = (y1 - y0) * (z2 - z0) - (y2 - y0) * (z1 - z0)
        if det == 0.0:
            continue
        ymin, ymax = min(y0, y1, y2), max(y0, y1, y2)
        zmin, zmax = min(z0, z1, z2), max(z0, z1, z2)
        j0 = max(int(np.ceil((ymin - origin[a1] - jitter[0]) / h)), 0)
        j1 = min(int(np.floor((ymax - origin[a1] - jitter[0]) / h)), n1 - 1)
        k0 = max(int(np.ceil((zmin - origin[a2] - jitter[1]) / h)), 0)
        k1 = min(int(np.floor((zmax - origin[a2] - jitter[1]) / h)), n2 - 1)
        for j in range(j0, j1 + 1):
            py = origin[a1] + j * h + jitter[0]
            for k in range(k0, k1 + 1):
                pz = origin[a2] + k * h + jitter[1]
                l1 = ((y1 - py) * (z2 - pz) - (y2 - py) * (z1 - pz)) / det
                l2 = ((y2 - py) * (z0 - pz) - (y0 - py) * (z2 - pz)) / det
                l0 = 1.0 - l1 - l2
                if l0 < 0.0 or l1 < 0.0 or l2 < 0.0:
                    continue
                c = l1 * tris[t, 0, axis] + l2 * tris[t, 1, axis] + l0 * tris[t, 2, axis]
                # grid points with coordinate < c see this crossing
                m = int(np.ceil((c - origin[axis]) / h))
                if m <= 0:
                    continue
                if m > n0:
                    m = n0
                diff[j, k, 0] += 1
                diff[j, k, m] -= 1
    out = np.zeros((n1, n2, n0), dtype=np.int64)
    for j in range(n1):
        for k in range(n2):
            run = 0
            for i in range(n0):
                run += diff[j, k, i]
                out[j, k, i] = run
    return out


@njit(cache=True)
def rasterize(tris, fx, fy, cx, cy, width, height, near):
    """Nearest ray hit per pixel.

    ``tris`` holds camera-frame triangle corners ``(T, 3, 3)``. Each pixel
    ``(u, v)`` casts the ray ``((u-cx)/fx, (v-cy)/fy, 1)``; because that ray
    has unit z, the hit parameter is the camera-frame depth directly.
    Triangles are visited through their screen-space bounding boxes.
    """
    depth = np.full((height, width), np.inf)
    index = np.full((height, width), -1, dtype=np.int64)
    for t in range(tris.shape[0]):
        x0, y0, z0 = tris[t, 0, 0], tris[t, 0, 1], tris[t, 0, 2]
        x1, y1, z1 = tris[t, 1, 0], tris[t, 1, 1], tris[t, 1, 2]
        x2, y2, z2 = tris[t, 2, 0], tris[t, 2, 1], tris[t, 2, 2]
        if z0 <= near or z1 <= near or z2 <= near:
            continue
        u0, u1, u2 = fx * x0 / z0 + cx, fx * x1 / z1 + cx, fx * x2 / z2 + cx
        v0, v1, v2 = fy * y0 / z0 + cy, fy * y1 / z1 + cy, fy * y2 / z2 + cy
        umin = max(int(np.ceil(min(u0, u1, u2) - 1e-9)), 0)
        umax = min(int(np.floor(max(u0, u1, u2) + 1e-9)), width - 1)
        vmin = max(int(np.ceil(min(v0, v1, v2) - 1e-9)), 0)
        vmax = min(int(np.floor(max(v0, v1, v2) + 1e-9)), height - 1)
        if umin > umax or vmin > vmax:
            continue
        e1x, e1y, e1z = x1 - x0, y1 - y0, z1 - z0
        e2x, e2y, e2z = x2 - x0, y2 - y0, z2 - z0
        sx, sy, sz = -x0, -y0, -z0
        for v in range(vmin, vmax + 1):
            dy = (v - cy) / fy
            for u in range(umin, umax + 1):
                dx = (u - cx) / fx
                # Moller-Trumbore, ray origin at the camera center, d = (dx, dy, 1)
                px = dy * e2z - e2y
                py = e2x - dx * e2z
                pz = dx * e2y - dy * e2x
                det = e1x * px + e1y * py + e1z * pz
                if abs(det) < 1e-18:
                    continue
                inv = 1.0 / det
                bu = (sx * px + sy * py + sz * pz) * inv
                if bu < -1e-12 or bu > 1.0 + 1e-12:
                    continue
                qx = sy * e1z - sz * e1y
                qy = sz * e1x - sx * e1z
                qz = sx * e1y - sy * e1x
                bv = (dx * qx + dy * qy + qz) * inv
                if bv < -1e-12 or bu + bv > 1.0 + 1e-12:
                    continue
                tz = (e2x * qx + e2y * qy + e2z * qz) * inv
                if tz > near and tz < depth[v, u]:
                    depth[v, u] = tz
                    index[v, u] = t
    return depth, index


@njit(cache=True)
def crop_bilinear(img, centers, sides, size, fill):
    """Batched square crops ``(N, size, size, C)`` with bilinear resampling.

    Sample ``(i, j)`` of crop ``n`` reads source pixel
    ``center + side * ((idx + 0.5) / size - 0.5)``; out-of-bounds corners
    contribute ``fill``.
    """
    H, W, C = img.shape
    n = centers.shape[0]
    out = np.empty((n, size, size, C))
    for b in range(n):
        for i in range(size):
            vs = centers[b, 1] + sides[b] * ((i + 0.5) / size - 0.5)
            v0 = int(np.floor(vs))
            fv = vs - v0
            for j in range(size):
                us = centers[b, 0] + sides[b] * ((j + 0.5) / size - 0.5)
                u0 = int(np.floor(us))
                fu = us - u0
                for c in range(C):
                    acc = 0.0
                    for dv in range(2):
                        vv = v0 + dv
                        wv = fv if dv == 1 else 1.0 - fv
                        for du in range(2):
                            uu = u0 + du
                            wu = fu if du == 1 else 1.0 - fu
                            if vv >= 0 and vv < H and uu >= 0 and uu < W:
                                acc += wu * wv * img[vv, uu, c]
                            else:
                                acc += wu * wv * fill[c]
                    out[b, i, j, c] = acc
    return out


@njit(cache=True)
def crop_pooled(img, centers, sides, size, pool, fill):
    """:func:`crop_bilinear` followed by ``pool x pool`` box averaging, fused."""
    H, W, C = img.shape
    n = centers.shape[0]
    m = size // pool
    out = np.zeros((n, m, m, C))
    scale = 1.0 / (pool * pool)
    for b in range(n):
        for i in range(size):
            vs = centers[b, 1] + sides[b] * ((i + 0.5) / size - 0.5)
            v0 = int(np.floor(vs))
            fv = vs - v0
            for j in range(size):
                us = centers[b, 0] + sides[b] * ((j + 0.5) / size - 0.5)
                u0 = int(np.floor(us))
                fu = us - u0
                for c in range(C):
                    acc = 0.0
                    for dv in range(2):
                        vv = v0 + dv
                        wv = fv if dv == 1 else 1.0 - fv
                        for du in range(2):
                            uu = u0 + du
                            wu = fu if du == 1 else 1.0 - fu
                            if vv >= 0 and vv < H and uu >= 0 and uu < W:
                                acc += wu * wv * img[vv, uu, c]
                            else:
                                acc += wu * wv * fill[c]
                    out[b, i // pool, j // pool, c] += acc * scale
    return out
