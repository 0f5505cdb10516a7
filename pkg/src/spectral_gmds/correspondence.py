"""Functional maps in the spectral domain: function transfer and point maps.

The map between shapes is ``K = Phi_2 alpha Phi_1^T`` acting on
area-weighted functions. ``K`` is never formed except through the guarded
debug helper :func:`dense_functional_map`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .laplacian import EigenBasis

DENSE_LIMIT = 4_000_000
_ROW_BLOCK = 256


@dataclass(frozen=True, eq=False)
class PointMap:
    """``target_index[i]`` is the vertex of shape 2 matched to vertex ``i`` of shape 1."""

    target_index: np.ndarray
    match_distance: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.target_index)

    def save_text(self, path) -> None:
        with open(path, "w", encoding="ascii", newline="\n") as f:
            for i, (j, d) in enumerate(zip(self.target_index.tolist(), self.match_distance.tolist())):
                f.write(f"{i} {j} {d!r}\n")

    def save_json(self, path) -> None:
        doc = {"meta": self.meta, "target_index": self.target_index.tolist(),
               "match_distance": self.match_distance.tolist()}
        with open(path, "w", encoding="ascii", newline="\n") as f:
            json.dump(doc, f, indent=1, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "PointMap":
        """Read either the text (``i j dist``) or the JSON format."""
        with open(path, encoding="ascii") as f:
            text = f.read()
        if text.lstrip().startswith("{"):
            doc = json.loads(text)
            return cls(np.asarray(doc["target_index"], dtype=np.int64),
                       np.asarray(doc["match_distance"], dtype=np.float64), doc.get("meta", {}))
        rows = [ln.split() for ln in text.splitlines() if ln.strip()]
        if any(len(r) != 3 for r in rows):
            raise ValueError(f"{path}: expected 'i j distance' on every line")
        idx = np.array([int(r[0]) for r in rows])
        if not np.array_equal(idx, np.arange(len(rows))):
            raise ValueError(f"{path}: source indices must be 0..n-1 in order")
        return cls(np.array([int(r[1]) for r in rows], dtype=np.int64),
                   np.array([float(r[2]) for r in rows]))


def _check_dims(alpha, basis1, basis2):
    if alpha.shape != (basis2.M, basis1.M):
        raise ValueError(f"alpha has shape {alpha.shape}, expected {(basis2.M, basis1.M)}")


def transfer_function(alpha, basis1: EigenBasis, basis2: EigenBasis, f1) -> np.ndarray:
    """Map ``f1`` on shape 1 to shape 2: ``Phi_2 alpha Phi_1^T A_1 f1``."""
    _check_dims(alpha, basis1, basis2)
    f1 = np.asarray(f1, dtype=np.float64)
    if f1.shape[0] != basis1.n:
        raise ValueError("function length does not match shape 1")
    return basis2.phi @ (alpha @ basis1.project(f1))


def dense_functional_map(alpha, basis1: EigenBasis, basis2: EigenBasis) -> np.ndarray:
    """The full ``n2 x n1`` matrix ``Phi_2 alpha Phi_1^T`` (small meshes only)."""
    _check_dims(alpha, basis1, basis2)
    if basis1.n * basis2.n > DENSE_LIMIT:
        raise ValueError(f"dense functional map refused: {basis2.n} x {basis1.n} exceeds {DENSE_LIMIT}")
    return basis2.phi @ alpha @ basis1.phi.T


def nearest_rows(queries, targets):
    """Exact nearest target row for every query row, lowest index on ties.

    Candidates are screened with the expanded-norm formula, then distances to
    every candidate within its round-off bound are recomputed element-wise,
    so the result does not depend on BLAS threading.
    """
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    targets = np.ascontiguousarray(targets, dtype=np.float64)
    tn = np.einsum("ij,ij->i", targets, targets)
    idx = np.empty(len(queries), dtype=np.int64)
    dist = np.empty(len(queries))
    for lo in range(0, len(queries), _ROW_BLOCK):
        q = queries[lo:lo + _ROW_BLOCK]
        qn = np.einsum("ij,ij->i", q, q)
        d2 = qn[:, None] + tn[None, :] - 2.0 * (q @ targets.T)
        slack = 1e-10 * (qn[:, None] + tn[None, :]) + 1e-300
        floor = np.min(d2 + slack, axis=1)
        for r in range(len(q)):
            cand = np.flatnonzero(d2[r] - slack[r] <= floor[r])
            diff = targets[cand] - q[r]
            exact = np.sqrt(np.sum(diff * diff, axis=1))
            k = int(np.argmin(exact))
            idx[lo + r] = cand[k]
            dist[lo + r] = exact[k]
    return idx, dist


def extract_point_map(alpha, basis1: EigenBasis, basis2: EigenBasis,
                      area_weighted: bool = False) -> PointMap:
    """Nearest-neighbour point map in the spectral embedding.

    Vertex ``i`` of shape 1 goes to ``argmin_j ||Phi_2[j] - Phi_1[i] alpha^T||``.
    With ``area_weighted`` both sides are the coefficient vectors of vertex
    delta functions (rows scaled by the vertex areas) instead.
    """
    _check_dims(alpha, basis1, basis2)
    q = basis1.phi @ alpha.T
    t = basis2.phi
    if area_weighted:
        q = q * basis1.mass.a[:, None]
        t = t * basis2.mass.a[:, None]
    idx, dist = nearest_rows(q, t)
    return PointMap(idx, dist, {"M1": basis1.M, "M2": basis2.M, "area_weighted": area_weighted})


def ground_truth_alpha(basis1: EigenBasis, basis2: EigenBasis, truth) -> np.ndarray:
    """Coefficients of the map induced by a vertex bijection.

    ``truth[i]`` is the vertex of shape 2 corresponding to vertex ``i`` of
    shape 1; returns ``Phi_2^T A_2 P Phi_1`` where ``P`` moves values from
    ``i`` to ``truth[i]``.
    """
    truth = np.asarray(truth, dtype=np.int64)
    if basis1.n != basis2.n or len(truth) != basis1.n or \
            not np.array_equal(np.sort(truth), np.arange(basis2.n)):
        raise ValueError("truth must be a bijection between equally sized meshes")
    moved = np.empty((basis2.n, basis1.M))
    moved[truth] = basis1.phi
    return basis2.phi.T @ (basis2.mass.a[:, None] * moved)


def recovery_rate(pm: PointMap, truth) -> float:
    return float(np.mean(pm.target_index == np.asarray(truth)))
