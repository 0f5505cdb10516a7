"""Fast-marching geodesic distances and farthest-point sampling."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _fmm, storage
from .mesh import TriMesh

FPS_TIE_RTOL = 1e-12


class UnreachableError(RuntimeError):
    pass


@lru_cache(maxsize=8)
def _topology(mesh: TriMesh):
    return _fmm.topology(mesh.vertices, mesh.triangles)


@dataclass(frozen=True, eq=False)
class DistanceField:
    source: int
    dist: np.ndarray


def _check(dist, sources):
    bad = ~np.isfinite(dist)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise UnreachableError(f"vertex {col} is unreachable from source {sources[row]}")


def _mode(update):
    if update not in ("circular", "planar"):
        raise ValueError(f"unknown fast-marching update {update!r}")
    return update == "circular"


def fast_march(mesh: TriMesh, source: int, return_order: bool = False, update: str = "circular"):
    """Geodesic distance field from one vertex.

    ``update`` selects the triangle update: ``"circular"`` places a virtual
    point source behind the edge (exact on flat patches), ``"planar"`` is
    the plane-front update. Obtuse corners are unfolded into adjacent
    triangles in both modes, with edge (Dijkstra) updates as the fallback.
    With ``return_order`` also returns the vertices in acceptance order.
    """
    lens, tnbr, vt_ptr, vt_tri = _topology(mesh)
    dist, order = _fmm.march(mesh.n, mesh.triangles, lens, tnbr, vt_ptr, vt_tri, int(source),
                             _mode(update))
    _check(dist[None], [source])
    field = DistanceField(int(source), dist)
    return (field, order) if return_order else field


def march_many(mesh: TriMesh, sources, update: str = "circular") -> np.ndarray:
    """Distance fields (one row per source), computed in parallel."""
    sources = np.asarray(sources, dtype=np.int64)
    lens, tnbr, vt_ptr, vt_tri = _topology(mesh)
    out = _fmm.march_many(mesh.n, mesh.triangles, lens, tnbr, vt_ptr, vt_tri, sources,
                          _mode(update))
    _check(out, sources)
    return out


def sample_count(n: int, fraction: float | None = None, count: int | None = None) -> int:
    if (fraction is None) == (count is None):
        raise ValueError("give exactly one of fraction or count")
    if count is None:
        if not 0 < fraction <= 1:
            raise ValueError("sample fraction must lie in (0, 1]")
        count = int(np.floor(fraction * n + 1e-9))
    if not 2 <= count <= n:
        raise ValueError(f"sample count must be in [2, {n}], got {count}")
    return count


def farthest_point_sample(mesh: TriMesh, fraction: float | None = None, count: int | None = None,
                          return_fields: bool = False, update: str = "circular"):
    """Greedy farthest-point sampling seeded at vertex 0.

    Each new sample maximizes the geodesic distance to the samples chosen so
    far; values within a relative 1e-12 of the maximum count as ties and go
    to the lowest index. With ``return_fields`` the distance field of every
    sample (shape ``(m, n)``) is returned as well.
    """
    m = sample_count(mesh.n, fraction, count)
    circular = _mode(update)
    lens, tnbr, vt_ptr, vt_tri = _topology(mesh)
    idx = [0]
    fields = np.empty((m, mesh.n))
    for k in range(m):
        d, _ = _fmm.march(mesh.n, mesh.triangles, lens, tnbr, vt_ptr, vt_tri, idx[k], circular)
        _check(d[None], [idx[k]])
        fields[k] = d
        if k == m - 1:
            break
        mind = d if k == 0 else np.minimum(mind, d)
        top = mind.max()
        idx.append(int(np.flatnonzero(mind >= top * (1.0 - FPS_TIE_RTOL))[0]))
    idx = np.array(idx, dtype=np.int64)
    return (idx, fields) if return_fields else idx


def covering_radius(mesh: TriMesh, indices) -> float:
    return float(march_many(mesh, indices).min(axis=0).max())


@dataclass(frozen=True, eq=False)
class SampledDistances:
    """Symmetric geodesic distances among sample vertices."""

    indices: np.ndarray
    d: np.ndarray
    mesh_hash: str = ""
    asymmetry: float = 0.0

    @property
    def m(self) -> int:
        return len(self.indices)

    def save(self, path, meta=None) -> None:
        storage.write(path, "samples",
                      {"mesh_hash": self.mesh_hash, "asymmetry": self.asymmetry, **(meta or {})},
                      {"indices": self.indices, "d": self.d})

    @classmethod
    def load(cls, path, mesh_hash: str | None = None) -> "SampledDistances":
        meta, arr = storage.read(path, "samples")
        if mesh_hash is not None and meta["mesh_hash"] != mesh_hash:
            raise storage.CacheError(f"{path}: samples were computed for a different mesh")
        return cls(arr["indices"], arr["d"], meta["mesh_hash"], meta["asymmetry"])


def distance_matrix(mesh: TriMesh, indices, fields: np.ndarray | None = None,
                    symmetrize: bool = True) -> SampledDistances:
    """Pairwise geodesic distances among ``indices``.

    The directed fast-marching distances are averaged with their transpose
    (unless ``symmetrize=False``). Pass ``fields`` from
    :func:`farthest_point_sample` to skip recomputing the marches.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 1 or len(indices) == 0 or len(np.unique(indices)) != len(indices):
        raise ValueError("indices must be a non-empty list of distinct vertices")
    if indices.min() < 0 or indices.max() >= mesh.n:
        raise ValueError("sample index out of range")
    if fields is None:
        fields = march_many(mesh, indices)
    raw = fields[:, indices]
    denom = np.maximum(np.maximum(raw, raw.T), 1e-300)
    asym = float(np.max(np.abs(raw - raw.T) / denom)) if len(indices) > 1 else 0.0
    d = 0.5 * (raw + raw.T) if symmetrize else raw.copy()
    np.fill_diagonal(d, 0.0)
    return SampledDistances(indices, d, mesh.content_hash, asym)
