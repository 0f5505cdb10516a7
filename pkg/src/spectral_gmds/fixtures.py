"""Synthetic test surfaces with known geometry or known isometries."""

from __future__ import annotations

import numpy as np
from scipy.spatial import ConvexHull
from scipy.spatial.transform import Rotation

from .mesh import TriMesh

MAX_ICOSPHERE_LEVEL = 6


def icosphere(level: int) -> TriMesh:
    """Unit geodesic sphere from ``level`` midpoint subdivisions of an icosahedron.

    Has ``10 * 4**level + 2`` vertices.
    """
    if not 0 <= level <= MAX_ICOSPHERE_LEVEL:
        raise ValueError(f"icosphere level must be in [0, {MAX_ICOSPHERE_LEVEL}]")
    g = (1.0 + 5.0**0.5) / 2.0
    v = [
        (-1, g, 0), (1, g, 0), (-1, -g, 0), (1, -g, 0),
        (0, -1, g), (0, 1, g), (0, -1, -g), (0, 1, -g),
        (g, 0, -1), (g, 0, 1), (-g, 0, -1), (-g, 0, 1),
    ]
    f = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(level):
        cache = {}

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                p = verts[a] + verts[b]
                verts.append(p / np.linalg.norm(p))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriMesh(np.array(verts), np.array(faces))


def _graded(count, length, grading):
    # monotone coordinates on [0, length] whose spacing varies linearly
    # from (1+g) to (1-g) times the uniform spacing
    s = np.linspace(0.0, 1.0, count)
    return length * (s + grading * s * (1.0 - s))


def bent_plane(nx: int, ny: int, bend_angle: float, extent: tuple[float, float] = (1.0, 1.0),
               grading: tuple[float, float] = (0.0, 0.0), taper: float = 0.0) -> TriMesh:
    """A flat ``nx`` by ``ny`` vertex grid folded along its middle column.

    The flat strip spans ``[0, extent[0]] x [0, extent[1]]`` (the unit square
    by default). Vertices right of column ``(nx - 1) // 2`` are rotated by ``bend_angle``
    about that column's line, so every edge keeps its flat length.
    ``grading`` makes the x and y spacing vary linearly across the strip
    (factor ``1 + g`` at one end, ``1 - g`` at the other), which removes the
    reflection symmetries of a uniform grid. Grading changes only the
    sampling; ``taper`` changes the shape itself, stretching column heights
    linearly to ``1 + taper`` at the far end so the flat strip becomes a
    right trapezoid with no intrinsic symmetry.
    """
    if nx < 2 or ny < 2:
        raise ValueError("bent_plane needs nx, ny >= 2")
    gx, gy = grading
    if not (abs(gx) < 1 and abs(gy) < 1):
        raise ValueError("grading factors must lie in (-1, 1)")
    if not taper > -1:
        raise ValueError("taper must be > -1")
    if not (extent[0] > 0 and extent[1] > 0):
        raise ValueError("extent must be positive")
    xs = _graded(nx, float(extent[0]), gx)
    ys = _graded(ny, float(extent[1]), gy)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    x, y = X.ravel(), Y.ravel()
    y = y * (1.0 + taper * x / float(extent[0]))
    z = np.zeros_like(x)
    col = np.tile(np.arange(nx), ny)
    fold = (nx - 1) // 2
    x0 = xs[fold]
    right = col > fold
    r = x[right] - x0
    x[right] = x0 + r * np.cos(bend_angle)
    z[right] = r * np.sin(bend_angle)

    tris = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            b, c, d = a + 1, a + nx, a + nx + 1
            tris.append((a, b, d))
            tris.append((a, d, c))
    return TriMesh(np.column_stack([x, y, z]), np.array(tris))


def fibonacci_sphere(n: int) -> TriMesh:
    """Convex-hull triangulation of ``n`` Fibonacci-lattice points on the unit sphere."""
    if n < 4:
        raise ValueError("need at least 4 points")
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * np.pi * (3.0 - 5.0**0.5)
    v = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    hull = ConvexHull(v)
    t = hull.simplices.astype(np.int64)
    # orient outward
    c = v[t].mean(axis=1)
    nrm = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    flip = np.einsum("ij,ij->i", nrm, c) < 0
    t[flip] = t[flip][:, [0, 2, 1]]
    # qhull's simplex order is not canonical; rotate each triple to start at
    # its smallest index (keeps orientation) and sort the rows
    rot = np.argmin(t, axis=1)
    t = np.stack([np.roll(row, -k) for row, k in zip(t, rot)])
    t = t[np.lexsort((t[:, 2], t[:, 1], t[:, 0]))]
    return TriMesh(v, t)


_BUMPS = (
    # direction, height, width
    ((0.62, 0.48, 0.62), 0.35, 0.35),
    ((-0.30, -0.80, 0.52), 0.22, 0.25),
    ((-0.70, 0.20, -0.68), -0.15, 0.40),
)


def asymmetrize(mesh: TriMesh, axes=(1.45, 1.0, 0.75)) -> TriMesh:
    """Radially deform a star-shaped closed mesh into a shape with no symmetry.

    The surface is stretched into a tri-axial ellipsoid and gets three
    Gaussian bumps at generic directions. Connectivity is unchanged.
    """
    v = mesh.vertices
    u = v / np.linalg.norm(v, axis=1, keepdims=True)
    r = np.ones(len(v))
    for d, h, w in _BUMPS:
        d = np.asarray(d) / np.linalg.norm(d)
        r += h * np.exp(-np.sum((u - d) ** 2, axis=1) / w**2)
    return TriMesh(u * r[:, None] * np.asarray(axes), mesh.triangles)


def blob(n: int) -> TriMesh:
    """Asymmetric closed surface with exactly ``n`` vertices."""
    return asymmetrize(fibonacci_sphere(n))


def relabel(mesh: TriMesh, perm) -> tuple[TriMesh, np.ndarray]:
    """Reorder vertices so that new vertex ``k`` is old vertex ``perm[k]``.

    Returns the new mesh and the ground-truth map ``truth`` with
    ``truth[i]`` the new index of old vertex ``i``.
    """
    perm = np.asarray(perm, dtype=np.int64)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return TriMesh(mesh.vertices[perm], inv[mesh.triangles]), inv


def rigid_motion(mesh: TriMesh, rotvec=(0.3, -1.1, 0.7), translation=(2.0, -1.0, 0.5)) -> TriMesh:
    R = Rotation.from_rotvec(rotvec).as_matrix()
    return TriMesh(mesh.vertices @ R.T + np.asarray(translation), mesh.triangles)


def shuffled_copy(mesh: TriMesh, seed: int = 0, move: bool = True) -> tuple[TriMesh, np.ndarray]:
    """A vertex-permuted (and optionally rigidly moved) copy plus its ground truth."""
    perm = np.random.default_rng(seed).permutation(mesh.n)
    out, truth = relabel(mesh, perm)
    if move:
        out = rigid_motion(out)
    return out, truth


def generate_test_mesh(kind: str, **params) -> TriMesh:
    """Build a fixture by name: ``icosphere``, ``bent_plane``, ``blob``."""
    if kind == "icosphere":
        return icosphere(int(params.get("level", 3)))
    if kind == "bent_plane":
        return bent_plane(int(params.get("nx", 20)), int(params.get("ny", 20)),
                          float(params.get("bend_angle", 0.0)),
                          extent=tuple(params.get("extent", (1.0, 1.0))),
                          grading=tuple(params.get("grading", (0.0, 0.0))),
                          taper=float(params.get("taper", 0.0)))
    if kind == "blob":
        return blob(int(params.get("n", 2000)))
    raise ValueError(f"unknown fixture kind {kind!r}")
