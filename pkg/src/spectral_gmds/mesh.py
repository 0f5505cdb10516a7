"""Triangle meshes: loading, validation, and per-vertex area weights."""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

log = logging.getLogger(__name__)

DEGENERATE_TOL = 1e-12


class MeshError(Exception):
    """Raised when a mesh file cannot be parsed."""


class MeshValidationError(MeshError):
    """Raised when a mesh violates the TriMesh invariants.

    ``violations`` holds one human-readable entry per problem found, each
    naming the offending vertex or triangle indices.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid mesh:\n  " + "\n  ".join(self.violations))


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriMesh:
    """A validated, immutable triangle mesh.

    Parameters
    ----------
    vertices : (n, 3) array_like of float
    triangles : (m, 3) array_like of int
        Counter-clockwise vertex index triples.
    validate : bool
        Check the invariants (index range, no degenerate triangles,
        edge-manifold, single connected component).
    """

    vertices: np.ndarray
    triangles: np.ndarray
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        t = np.asarray(self.triangles)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshValidationError([f"vertices must have shape (n, 3), got {v.shape}"])
        if t.size == 0:
            t = t.reshape(0, 3)
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshValidationError([f"triangles must have shape (m, 3), got {t.shape}"])
        object.__setattr__(self, "vertices", _frozen(v, np.float64))
        object.__setattr__(self, "triangles", _frozen(t, np.int64))
        if self.validate:
            problems = validation_errors(self.vertices, self.triangles)
            if problems:
                raise MeshValidationError(problems)

    @property
    def n(self) -> int:
        return self.vertices.shape[0]

    @property
    def m(self) -> int:
        return self.triangles.shape[0]

    def __repr__(self):
        return f"TriMesh(n={self.n}, m={self.m})"

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as a sorted (e, 2) array."""
        return _undirected_edges(self.triangles)[0]

    @cached_property
    def triangle_areas(self) -> np.ndarray:
        return triangle_areas(self.vertices, self.triangles)

    @property
    def area(self) -> float:
        return float(self.triangle_areas.sum())

    @cached_property
    def content_hash(self) -> str:
        """SHA-256 over the vertex and triangle buffers."""
        h = hashlib.sha256()
        h.update(np.asarray(self.vertices.shape, dtype="<i8").tobytes())
        h.update(self.vertices.astype("<f8").tobytes())
        h.update(self.triangles.astype("<i8").tobytes())
        return h.hexdigest()

    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)

    def adjacency(self) -> sparse.csr_matrix:
        """Edge graph weighted by Euclidean edge length."""
        e = self.edges
        w = self.edge_lengths()
        n = self.n
        a = sparse.coo_matrix((w, (e[:, 0], e[:, 1])), shape=(n, n))
        return (a + a.T).tocsr()

    def boundary_vertices(self) -> np.ndarray:
        e, counts = _undirected_edges(self.triangles)
        return np.unique(e[counts == 1])

    def bbox_diagonal(self) -> float:
        if self.n == 0:
            return 0.0
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))


def _undirected_edges(t):
    if len(t) == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0, return_counts=True)


def triangle_areas(v, t) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    t = np.asarray(t)
    cr = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    return 0.5 * np.linalg.norm(cr, axis=1)


def validation_errors(v, t) -> list[str]:
    """List every invariant violation of the raw arrays (empty when valid)."""
    problems = []
    n = len(v)
    if n == 0 or len(t) == 0:
        return ["mesh has no vertices or no triangles"]
    if not np.all(np.isfinite(v)):
        bad = np.flatnonzero(~np.all(np.isfinite(v), axis=1))
        problems.append(f"non-finite coordinates at vertices {bad[:20].tolist()}")
    out = np.flatnonzero(np.any((t < 0) | (t >= n), axis=1))
    if len(out):
        problems.append(f"triangles with vertex index out of [0, {n}): {out[:20].tolist()}")
        return problems

    repeated = np.flatnonzero((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 2] == t[:, 0]))
    if len(repeated):
        problems.append(f"triangles with repeated vertices: {repeated[:20].tolist()}")
    diag = np.linalg.norm(v.max(0) - v.min(0))
    areas = triangle_areas(v, t)
    degenerate = np.flatnonzero(areas <= DEGENERATE_TOL * diag**2)
    degenerate = np.setdiff1d(degenerate, repeated)
    if len(degenerate):
        problems.append(f"degenerate (zero-area) triangles: {degenerate[:20].tolist()}")

    e, counts = _undirected_edges(t)
    nm = e[counts > 2]
    if len(nm):
        problems.append(
            "non-manifold edges (more than 2 adjacent triangles): "
            + ", ".join(f"({a}, {b})" for a, b in nm[:20])
        )

    adj = sparse.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    ncomp, labels = connected_components(adj, directed=False)
    if ncomp > 1:
        sizes = np.bincount(labels)
        main = np.argmax(sizes)
        stray = np.flatnonzero(labels != main)
        problems.append(
            f"mesh has {ncomp} connected components; vertices outside the largest: "
            f"{stray[:20].tolist()}{' ...' if len(stray) > 20 else ''}"
        )
    return problems


@dataclass(frozen=True, eq=False)
class MassDiagonal:
    """Lumped (diagonal) mass matrix: one positive area per vertex."""

    a: np.ndarray

    def __post_init__(self):
        a = _frozen(self.a, np.float64)
        if a.ndim != 1 or not np.all(a > 0):
            raise ValueError("vertex areas must be a vector of positive values")
        object.__setattr__(self, "a", a)

    @property
    def total_area(self) -> float:
        return float(self.a.sum())

    def matrix(self) -> sparse.dia_matrix:
        return sparse.diags(self.a)


def vertex_areas(mesh: TriMesh, scheme: str = "mixed") -> MassDiagonal:
    """Per-vertex area weights.

    ``scheme="mixed"`` is the mixed Voronoi rule: Voronoi cell areas inside
    non-obtuse triangles; for an obtuse triangle, half of its area goes to
    the obtuse vertex and a quarter to each of the other two.
    ``scheme="barycentric"`` gives each vertex a third of every incident
    triangle.
    """
    v, t = mesh.vertices, mesh.triangles
    tri_area = mesh.triangle_areas
    if scheme == "barycentric":
        per_corner = np.repeat(tri_area[:, None] / 3.0, 3, axis=1)
    elif scheme == "mixed":
        per_corner = _mixed_voronoi_corners(v, t, tri_area)
    else:
        raise ValueError(f"unknown area scheme {scheme!r}")
    a = np.bincount(t.ravel(), weights=per_corner.ravel(), minlength=mesh.n)
    bad = np.flatnonzero(a <= 0)
    if len(bad):
        raise MeshValidationError([f"vertices with no area (unreferenced): {bad[:20].tolist()}"])
    return MassDiagonal(a)


def _mixed_voronoi_corners(v, t, tri_area):
    p = [v[t[:, k]] for k in range(3)]
    out = np.empty((len(t), 3))
    # corner k sits opposite edge (k+1, k+2)
    cos_sign = np.empty((len(t), 3))
    cots = np.empty((len(t), 3))
    for k in range(3):
        u = p[(k + 1) % 3] - p[k]
        w = p[(k + 2) % 3] - p[k]
        d = np.einsum("ij,ij->i", u, w)
        cos_sign[:, k] = d
        cots[:, k] = d / (2.0 * tri_area)
    sq = [np.einsum("ij,ij->i", p[(k + 1) % 3] - p[(k + 2) % 3], p[(k + 1) % 3] - p[(k + 2) % 3])
          for k in range(3)]
    for k in range(3):
        i, j = (k + 1) % 3, (k + 2) % 3
        # edge (k, j) is opposite corner i, edge (k, i) opposite corner j
        out[:, k] = (sq[j] * cots[:, j] + sq[i] * cots[:, i]) / 8.0
    obtuse = cos_sign < 0
    any_obtuse = obtuse.any(axis=1)
    if any_obtuse.any():
        rows = np.flatnonzero(any_obtuse)
        out[rows] = np.where(obtuse[rows], 0.5, 0.25) * tri_area[rows, None]
    return out


def load_mesh(path, validate: bool = True) -> TriMesh:
    """Read an OFF or OBJ file into a validated TriMesh."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".off":
        v, t = read_off(path)
    elif ext == ".obj":
        v, t = read_obj(path)
    else:
        raise MeshError(f"unsupported mesh format {ext!r} (expected .off or .obj)")
    return TriMesh(v, t, validate=validate)


def _content_lines(f):
    for lineno, raw in enumerate(f, start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line


def read_off(path):
    with open(path, "r", encoding="ascii", errors="strict") as f:
        lines = _content_lines(f)
        try:
            lineno, header = next(lines)
        except StopIteration:
            raise MeshError(f"{path}: empty file") from None
        tokens = header.split()
        if not tokens[0].upper().endswith("OFF"):
            raise MeshError(f"{path}:{lineno}: not an OFF header: {header!r}")
        tokens = tokens[1:]
        try:
            if not tokens:
                lineno, header = next(lines)
                tokens = header.split()
            nv, nf = int(tokens[0]), int(tokens[1])
        except (StopIteration, IndexError, ValueError):
            raise MeshError(f"{path}: malformed OFF counts line") from None
        v = np.empty((nv, 3))
        t = np.empty((nf, 3), dtype=np.int64)
        try:
            for i in range(nv):
                lineno, line = next(lines)
                v[i] = [float(x) for x in line.split()[:3]]
            for i in range(nf):
                lineno, line = next(lines)
                tok = line.split()
                k = int(tok[0])
                if k != 3:
                    raise MeshError(f"{path}:{lineno}: face with {k} vertices; only triangles are supported")
                t[i] = [int(x) for x in tok[1:4]]
        except StopIteration:
            raise MeshError(f"{path}: unexpected end of file") from None
        except (ValueError, IndexError):
            raise MeshError(f"{path}:{lineno}: cannot parse {line!r}") from None
    return v, t


def read_obj(path):
    verts, faces = [], []
    ignored = set()
    with open(path, "r", encoding="ascii", errors="strict") as f:
        for lineno, line in _content_lines(f):
            tok = line.split()
            try:
                if tok[0] == "v":
                    verts.append([float(x) for x in tok[1:4]])
                    if len(verts[-1]) != 3:
                        raise ValueError
                elif tok[0] == "f":
                    idx = []
                    for s in tok[1:]:
                        k = int(s.split("/")[0])
                        idx.append(k - 1 if k > 0 else len(verts) + k)
                    if len(idx) != 3:
                        raise MeshError(
                            f"{path}:{lineno}: face with {len(idx)} vertices; only triangles are supported"
                        )
                    faces.append(idx)
                else:
                    ignored.add(tok[0])
            except ValueError:
                raise MeshError(f"{path}:{lineno}: cannot parse {line!r}") from None
    if ignored:
        log.warning("%s: ignored OBJ records: %s", path, ", ".join(sorted(ignored)))
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def save_off(mesh: TriMesh, path) -> None:
    """Write an OFF file; coordinates use the shortest round-trip repr."""
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write("OFF\n")
        f.write(f"{mesh.n} {mesh.m} 0\n")
        for x, y, z in mesh.vertices.tolist():
            f.write(f"{x!r} {y!r} {z!r}\n")
        for a, b, c in mesh.triangles.tolist():
            f.write(f"3 {a} {b} {c}\n")
