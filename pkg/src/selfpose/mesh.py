"""Triangle meshes, the procedural object corpus and surface sampling."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull
from scipy.spatial.distance import pdist


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Closed triangle mesh in the object frame (meters).

    ``face_colors`` holds a linear RGB albedo per triangle. ``symmetric``
    marks objects whose appearance is rotation-ambiguous; such objects are
    scored with ADD-S instead of ADD.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    name: str = "mesh"
    face_colors: np.ndarray | None = None
    symmetric: bool = False
    _diameter: float | None = field(default=None, repr=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float).reshape(-1, 3)
        f = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError("triangle index out of range")
        if self.face_colors is None:
            c = np.tile([0.7, 0.7, 0.7], (len(f), 1))
        else:
            c = np.asarray(self.face_colors, dtype=float)
            c = np.tile(c, (len(f), 1)) if c.shape == (3,) else c.reshape(len(f), 3)
        for arr in (v, f, c):
            arr.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)
        object.__setattr__(self, "face_colors", c)

    @property
    def diameter(self):
        if self._diameter is None:
            v = self.vertices
            if len(v) > 64:
                try:
                    v = v[ConvexHull(v).vertices]
                except Exception:
                    pass
            object.__setattr__(self, "_diameter", float(pdist(v).max()) if len(v) > 1 else 0.0)
        return self._diameter

    @property
    def corners(self):
        return self.vertices[self.triangles]

    def face_areas(self):
        a, b, c = np.moveaxis(self.corners, 1, 0)
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def transformed(self, R, t=(0.0, 0.0, 0.0), name=None):
        v = self.vertices @ np.asarray(R, dtype=float).T + np.asarray(t, dtype=float)
        return TriangleMesh(v, self.triangles, name or self.name, self.face_colors, self.symmetric)


def open_edges(mesh: TriangleMesh):
    """Undirected edges not shared by exactly two triangles."""
    f = mesh.triangles
    edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    counts = Counter(map(tuple, edges.tolist()))
    return sorted(e for e, n in counts.items() if n != 2)


def check_watertight(mesh: TriangleMesh):
    bad = open_edges(mesh)
    if bad:
        shown = ", ".join(f"{a}-{b}" for a, b in bad[:10])
        more = f" (+{len(bad) - 10} more)" if len(bad) > 10 else ""
        raise MeshError(f"mesh '{mesh.name}' is not watertight; offending edges: {shown}{more}")
    if mesh.diameter <= 0:
        raise MeshError(f"mesh '{mesh.name}' has zero diameter")


# --------------------------------------------------------------------------
# wavefront-style I/O (v/f lines only)
# --------------------------------------------------------------------------

def load_obj(path) -> TriangleMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                faces.append([idx[0], idx[k], idx[k + 1]])
    if not faces:
        raise MeshError(f"{path}: no faces")
    return TriangleMesh(np.array(verts), np.array(faces), name=Path(path).stem)


def save_obj(mesh: TriangleMesh, path):
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# surface sampling
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ModelPoints:
    points: np.ndarray

    @property
    def m(self):
        return len(self.points)


def sample_surface(mesh: TriangleMesh, m: int, seed=0) -> ModelPoints:
    """Area-weighted uniform samples on the mesh surface."""
    if m < 1:
        raise ValueError("m must be >= 1")
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise MeshError(f"mesh '{mesh.name}' has zero surface area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=m, p=areas / total)
    r1 = np.sqrt(rng.random(m))
    r2 = rng.random(m)
    a, b, c = np.moveaxis(mesh.corners[tri], 1, 0)
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return ModelPoints(pts)


# --------------------------------------------------------------------------
# procedural corpus
# --------------------------------------------------------------------------

def box(size=(0.10, 0.07, 0.045), colors=None, name="box") -> TriangleMesh:
    sx, sy, sz = np.asarray(size) / 2
    v = np.array([[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)])
    # vertex index = 4*ix + 2*iy + iz; quads wound outward
    quads = [
        (0, 1, 3, 2), (4, 6, 7, 5),  # -x, +x
        (0, 4, 5, 1), (2, 3, 7, 6),  # -y, +y
        (0, 2, 6, 4), (1, 5, 7, 3),  # -z, +z
    ]
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    if colors is None:
        colors = [(0.85, 0.2, 0.15), (0.9, 0.75, 0.1), (0.2, 0.45, 0.85),
                  (0.15, 0.7, 0.3), (0.8, 0.8, 0.8), (0.55, 0.25, 0.6)]
    fc = np.repeat(np.asarray(colors, dtype=float), 2, axis=0)
    return TriangleMesh(v, np.array(tris), name, fc)


CAN_SECTORS = ((0.9, 0.15, 0.1), (0.75, 0.75, 0.78), (0.15, 0.35, 0.8), (0.95, 0.75, 0.1))


def cylinder(radius=0.033, height=0.10, segments=24, sectors=CAN_SECTORS, name="can",
             base_color=(0.75, 0.75, 0.78), top_color=(0.95, 0.95, 0.9), bottom_color=(0.3, 0.3, 0.32)
             ) -> TriangleMesh:
    """Capped cylinder along z.

    ``sectors`` paints the side in equal angular sectors (any view sees at
    least two of them); ``sectors=None`` gives a plain, rotation-symmetric side.
    """
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    h = height / 2
    v = np.concatenate([
        np.column_stack([ring, np.full(segments, -h)]),
        np.column_stack([ring, np.full(segments, h)]),
        [[0, 0, -h], [0, 0, h]],
    ])
    bot_c, top_c = 2 * segments, 2 * segments + 1
    tris, colors = [], []
    palette = [np.asarray(base_color, dtype=float)] if not sectors else [np.asarray(c, dtype=float) for c in sectors]
    for i in range(segments):
        j = (i + 1) % segments
        side = palette[i * len(palette) // segments]
        tris += [(i, j, segments + j), (i, segments + j, segments + i)]
        colors += [side, side]
        tris.append((bot_c, j, i))
        tris.append((top_c, segments + i, segments + j))
        colors += [np.asarray(bottom_color, dtype=float), np.asarray(top_color, dtype=float)]
    return TriangleMesh(v, np.array(tris), name, np.array(colors), symmetric=not sectors)


def icosphere(radius=0.035, subdivisions=3, color=(0.2, 0.6, 0.9), name="sphere") -> TriangleMesh:
    t = (1 + 5 ** 0.5) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, dtype=float) / np.linalg.norm(p) for p in v]
    faces = list(f)
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                p = verts[a] + verts[b]
                verts.append(p / np.linalg.norm(p))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriangleMesh(np.array(verts) * radius, np.array(faces), name, np.asarray(color), symmetric=True)


def prism(polygon, depth, color=(0.8, 0.55, 0.2), name="prism", side_colors=None, back_color=None) -> TriangleMesh:
    """Extrude a simple counter-clockwise polygon (xy) along z, centered on its bbox."""
    poly = np.asarray(polygon, dtype=float)
    n = len(poly)
    caps = _ear_clip(poly)
    h = depth / 2
    v = np.concatenate([np.column_stack([poly, np.full(n, -h)]), np.column_stack([poly, np.full(n, h)])])
    tris, colors = [], []
    col = np.asarray(color, dtype=float)
    back = col * 0.7 if back_color is None else np.asarray(back_color, dtype=float)
    for a, b, c in caps:
        tris.append((c, b, a))  # bottom faces -z
        tris.append((n + a, n + b, n + c))
        colors += [back, col]
    for i in range(n):
        j = (i + 1) % n
        tris += [(i, j, n + j), (i, n + j, n + i)]
        sc = np.asarray(side_colors[i % len(side_colors)]) if side_colors is not None else col * 0.85
        colors += [sc, sc]
    v = v - (v.min(axis=0) + v.max(axis=0)) / 2
    return TriangleMesh(v, np.array(tris), name, np.array(colors))


def _ear_clip(poly):
    idx = list(range(len(poly)))
    out = []

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    guard = 0
    while len(idx) > 3 and guard < 10000:
        guard += 1
        for k in range(len(idx)):
            i0, i1, i2 = idx[k - 1], idx[k], idx[(k + 1) % len(idx)]
            a, b, c = poly[i0], poly[i1], poly[i2]
            if cross(a, b, c) <= 0:
                continue
            inside = False
            for m in idx:
                if m in (i0, i1, i2):
                    continue
                p = poly[m]
                if cross(a, b, p) >= 0 and cross(b, c, p) >= 0 and cross(c, a, p) >= 0:
                    inside = True
                    break
            if not inside:
                out.append((i0, i1, i2))
                idx.pop(k)
                break
    out.append(tuple(idx))
    return out


def l_bracket(leg_a=0.10, leg_b=0.075, thickness=0.028, depth=0.045, name="bracket") -> TriangleMesh:
    poly = [(0, 0), (leg_a, 0), (leg_a, thickness), (thickness, thickness), (thickness, leg_b), (0, leg_b)]
    sides = [(0.6, 0.6, 0.6), (0.25, 0.3, 0.75), (0.9, 0.85, 0.3),
             (0.3, 0.7, 0.35), (0.55, 0.3, 0.15), (0.75, 0.2, 0.2)]
    return prism(poly, depth, color=(0.85, 0.55, 0.15), name=name, side_colors=sides,
                 back_color=(0.2, 0.6, 0.65))


def torus(major=0.025, minor=0.008, seg_major=16, seg_minor=8) -> tuple[np.ndarray, np.ndarray]:
    """Torus in the xz-plane around the origin (vertices, triangles)."""
    u = 2 * np.pi * np.arange(seg_major) / seg_major
    w = 2 * np.pi * np.arange(seg_minor) / seg_minor
    uu, ww = np.meshgrid(u, w, indexing="ij")
    r = major + minor * np.cos(ww)
    v = np.stack([r * np.cos(uu), minor * np.sin(ww), r * np.sin(uu)], axis=-1).reshape(-1, 3)
    tris = []
    for i in range(seg_major):
        for j in range(seg_minor):
            a = i * seg_minor + j
            b = ((i + 1) % seg_major) * seg_minor + j
            c = ((i + 1) % seg_major) * seg_minor + (j + 1) % seg_minor
            d = i * seg_minor + (j + 1) % seg_minor
            tris += [(a, c, b), (a, d, c)]
    return v, np.array(tris)


def mug(radius=0.036, height=0.085, name="mug") -> TriangleMesh:
    """Cylinder body plus a detached torus handle.

    The handle does not touch the body, so ray-parity signs stay exact.
    """
    blue = (0.15, 0.35, 0.7)
    body = cylinder(radius, height, segments=24, name=name,
                    sectors=((0.95, 0.9, 0.8), blue, (0.95, 0.9, 0.8), (0.8, 0.25, 0.3)),
                    top_color=(0.35, 0.2, 0.1), bottom_color=(0.6, 0.6, 0.55))
    major, minor, gap = 0.02, 0.006, 0.003
    tv, tf = torus(major, minor)
    tv = tv + np.array([radius + gap + minor + major, 0.0, 0.0])
    v = np.concatenate([body.vertices, tv])
    f = np.concatenate([body.triangles, tf + len(body.vertices)])
    colors = np.concatenate([body.face_colors, np.tile(blue, (len(tf), 1))])
    mesh = TriangleMesh(v, f, name, colors)
    lo, hi = mesh.bounds()
    return mesh.transformed(np.eye(3), -(lo + hi) / 2)


def unit_cube() -> TriangleMesh:
    return box((1.0, 1.0, 1.0), name="unit_cube")


CORPUS = {
    "box": box,
    "can": cylinder,
    "sphere": icosphere,
    "bracket": l_bracket,
    "mug": mug,
}


def make_mesh(name: str) -> TriangleMesh:
    """Procedural mesh by name, or a wavefront file path."""
    if name in CORPUS:
        return CORPUS[name]()
    if name == "unit_cube":
        return unit_cube()
    p = Path(name)
    if p.exists():
        return load_obj(p)
    raise MeshError(f"unknown mesh '{name}' (corpus: {', '.join(sorted(CORPUS))})")
