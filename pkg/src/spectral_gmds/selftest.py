"""Built-in fixture checks run by ``spectral-gmds selftest``.

Every check is deterministic and prints the same row on every run; the
whole suite is sized to finish well inside two minutes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import dijkstra

from . import fixtures
from .correspondence import extract_point_map
from .evaluation import distortion_curve, geodesic_errors
from .geodesics import distance_matrix, farthest_point_sample, fast_march
from .interp import interpolate_distances, reconstruct_block
from .laplacian import mesh_eigenbasis
from .sgmds import SgmdsProblem, SolverConfig, gradient, objective, solve


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    limit: float
    passed: bool
    relation: str = "<="


def _le(name, value, limit):
    return Check(name, float(value), float(limit), bool(value <= limit), "<=")


def _ge(name, value, limit):
    return Check(name, float(value), float(limit), bool(value >= limit), ">=")


def check_sphere_spectrum():
    b = mesh_eigenbasis(fixtures.icosphere(4), 12)
    expected = np.array([2.0] * 3 + [6.0] * 5 + [12.0] * 3)
    rel = np.abs(b.evals[1:] - expected) / expected
    return [_le("sphere spectrum, max rel. error of l(l+1)", rel[:8].max(), 0.03)]


def check_orthonormality():
    worst = 0.0
    for mesh in (fixtures.icosphere(3), fixtures.bent_plane(15, 12, 0.8, taper=0.5), fixtures.blob(800)):
        b = mesh_eigenbasis(mesh, 30)
        G = b.phi.T @ (b.mass.a[:, None] * b.phi)
        worst = max(worst, np.abs(G - np.eye(b.M)).max())
    return [_le("eigenbasis Phi^T A Phi - I (max abs)", worst, 1e-8)]


def check_fast_marching():
    grid = fixtures.bent_plane(50, 50, 0.0)
    d = fast_march(grid, 0).dist
    eu = np.linalg.norm(grid.vertices - grid.vertices[0], axis=1)
    flat = np.max(np.abs(d[1:] - eu[1:]) / eu[1:])
    sph = fixtures.icosphere(4)
    v = sph.vertices / np.linalg.norm(sph.vertices, axis=1, keepdims=True)
    d = fast_march(sph, 0).dist
    gc = np.arccos(np.clip(v @ v[0], -1, 1))
    sphere = np.max(np.abs(d[1:] - gc[1:]) / gc[1:])
    over = 0.0
    for mesh in (grid, sph):
        dj = dijkstra(mesh.adjacency(), indices=0)
        over = max(over, np.max(fast_march(mesh, 0).dist - dj))
    return [_le("fast marching vs Euclidean on a flat grid", flat, 0.02),
            _le("fast marching vs great circles on a sphere", sphere, 0.05),
            _le("fast marching minus Dijkstra (max)", over, 1e-9)]


def check_interpolation():
    mesh = fixtures.icosphere(3)
    b = mesh_eigenbasis(mesh, 60)
    idx, fields = farthest_point_sample(mesh, count=64, return_fields=True)
    fit = distance_matrix(mesh, idx[:32], fields[:32])
    sd = interpolate_distances(b, fit)
    full = distance_matrix(mesh, idx, fields).d
    rec = reconstruct_block(sd, b, idx[32:], idx[32:])
    mask = ~np.eye(32, dtype=bool)
    err = np.sqrt(np.mean((rec - full[32:, 32:])[mask] ** 2)) / full[32:, 32:][mask].mean()
    return [_le("held-out interpolated distances, RMS / mean", err, 0.10)]


def check_gradient():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        M = 6
        a1 = rng.normal(size=(M, M))
        a2 = rng.normal(size=(M, M))
        p = SgmdsProblem(a1 + a1.T, a2 + a2.T, np.sort(rng.uniform(0, 4, M)),
                         np.sort(rng.uniform(0, 4, M)), rng.normal(size=M), rng.normal(size=M),
                         0.5, 0.8)
        a = rng.normal(size=(M, M))
        g = gradient(a, p)
        fd = np.empty_like(a)
        for i in range(M):
            for j in range(M):
                e = np.zeros_like(a)
                e[i, j] = 1e-6
                fd[i, j] = (objective(a + e, p) - objective(a - e, p)) / 2e-6
        worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    return [_le("objective gradient vs central differences", worst, 1e-5)]


def _shape(mesh, M, fraction):
    b = mesh_eigenbasis(mesh, M)
    idx, fields = farthest_point_sample(mesh, fraction=fraction, return_fields=True)
    return b, interpolate_distances(b, distance_matrix(mesh, idx, fields))


def check_self_match():
    mesh = fixtures.blob(1000)
    b, sd = _shape(mesh, 40, 0.05)
    p = SgmdsProblem.from_shapes(b, sd, b, sd)
    start = np.eye(40) + np.random.default_rng(1).uniform(-0.1, 0.1, (40, 40))
    res = solve(p, SolverConfig(), alpha0=start)
    pm = extract_point_map(res.alpha, b, b)
    return [_le("self-match final objective", res.objective, 1e-8),
            _ge("self-match identity point map", np.mean(pm.target_index == np.arange(mesh.n)), 0.99)]


def check_isometric_pair():
    flat = fixtures.bent_plane(20, 20, 0.0, taper=0.5)
    bent, truth = fixtures.shuffled_copy(fixtures.bent_plane(20, 20, np.pi / 3, taper=0.5), seed=3)
    b1, s1 = _shape(flat, 30, 0.2)
    b2, s2 = _shape(bent, 30, 0.2)
    res = solve(SgmdsProblem.from_shapes(b1, s1, b2, s2))
    pm = extract_point_map(res.alpha, b1, b2)
    curve = distortion_curve(geodesic_errors(pm, truth, bent))
    return [_ge("bent strip: exact ground-truth recovery", np.mean(pm.target_index == truth), 0.95),
            _ge("bent strip: fraction within 0.05", curve.at(0.05), 0.95)]


CHECKS = (check_sphere_spectrum, check_orthonormality, check_fast_marching, check_interpolation,
          check_gradient, check_self_match, check_isometric_pair)


def run(force_fail: bool = False, out=print) -> bool:
    rows = []
    for fn in CHECKS:
        rows.extend(fn())
    if force_fail:
        rows.append(Check("forced failure", 1.0, 0.0, False))
    width = max(len(r.name) for r in rows)
    for r in rows:
        mark = "PASS" if r.passed else "FAIL"
        out(f"{mark}  {r.name:<{width}}  {r.value:.3e} {r.relation} {r.limit:.3g}")
    ok = all(r.passed for r in rows)
    out(f"selftest: {sum(r.passed for r in rows)}/{len(rows)} checks passed")
    return ok
