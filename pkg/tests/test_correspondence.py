import numpy as np
import pytest

from conftest import spectral_shape
from spectral_gmds import fixtures
from spectral_gmds.correspondence import (DENSE_LIMIT, PointMap, dense_functional_map,
                                          extract_point_map, ground_truth_alpha, nearest_rows,
                                          recovery_rate, transfer_function)
from spectral_gmds.laplacian import mesh_eigenbasis
from spectral_gmds.sgmds import SgmdsProblem, solve


def one_ring(mesh):
    nbrs = [set() for _ in range(mesh.n)]
    for a, b in mesh.edges:
        nbrs[a].add(b)
        nbrs[b].add(a)
    return nbrs


@pytest.fixture(scope="module")
def big_pair():
    m1 = fixtures.blob(4344)
    m2, truth = fixtures.shuffled_copy(m1, seed=5)
    return m1, m2, truth, mesh_eigenbasis(m1, 100), mesh_eigenbasis(m2, 100)


def test_identity_transfer_in_span(blob_shape):
    _, b, _ = blob_shape
    f = b.phi @ np.random.default_rng(0).normal(size=b.M)
    assert np.max(np.abs(transfer_function(np.eye(b.M), b, b, f) - f)) <= 1e-9


def test_transfer_linear(blob_shape):
    _, b, _ = blob_shape
    rng = np.random.default_rng(1)
    a = rng.normal(size=(b.M, b.M))
    f, g = rng.normal(size=(2, b.n))
    lhs = transfer_function(a, b, b, 2.5 * f - 0.7 * g)
    rhs = 2.5 * transfer_function(a, b, b, f) - 0.7 * transfer_function(a, b, b, g)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.abs(lhs).max())


def test_constant_maps_to_constant(tapered_pair):
    flat, bent, _ = tapered_pair
    b1, s1 = spectral_shape(flat, 30, fraction=0.2)
    b2, s2 = spectral_shape(bent, 30, fraction=0.2)
    res = solve(SgmdsProblem.from_shapes(b1, s1, b2, s2))
    f2 = transfer_function(res.alpha, b1, b2, np.ones(flat.n))
    a2 = b2.mass.a
    # area-weighted RMS deviation from the constant one
    dev = np.sqrt(np.sum(a2 * (f2 - 1.0) ** 2) / a2.sum())
    assert dev <= res.constraint_residual / np.sqrt(a2.sum()) * (1 + 1e-6) + 1e-12


def test_indicator_transfer_with_ground_truth(big_pair):
    m1, m2, truth, b1, b2 = big_pair
    a = ground_truth_alpha(b1, b2, truth)
    u = m1.vertices / np.linalg.norm(m1.vertices, axis=1, keepdims=True)
    f1 = (u @ np.array([1.0, 0.0, 0.0]) > 0.8).astype(float)
    f2 = transfer_function(a, b1, b2, f1)
    smooth = np.empty(m2.n)
    smooth[truth] = b1.phi @ b1.project(f1)
    sharp = np.empty(m2.n)
    sharp[truth] = f1
    assert np.corrcoef(f2, smooth)[0, 1] >= 0.99
    # the band-limited copy of a sharp step still tracks the step itself
    assert np.corrcoef(f2, sharp)[0, 1] >= 0.95


def test_identity_point_map(blob_shape):
    _, b, _ = blob_shape
    pm = extract_point_map(np.eye(b.M), b, b)
    assert np.array_equal(pm.target_index, np.arange(b.n))
    assert np.all(pm.match_distance == 0)


def test_ground_truth_alpha_recovers_permutation():
    m1 = fixtures.blob(400)
    m2, truth = fixtures.shuffled_copy(m1, seed=6)
    b1, b2 = mesh_eigenbasis(m1, 30), mesh_eigenbasis(m2, 30)
    pm = extract_point_map(ground_truth_alpha(b1, b2, truth), b1, b2)
    assert np.array_equal(pm.target_index, truth)
    # brute-force oracle over all pairs
    q = b1.phi @ ground_truth_alpha(b1, b2, truth).T
    d = np.linalg.norm(q[:, None, :] - b2.phi[None, :, :], axis=2)
    assert np.array_equal(np.argmin(d, axis=1), truth)
    assert recovery_rate(pm, truth) == 1.0


def test_solved_strip_recovery(tapered_pair):
    flat, bent, truth = tapered_pair
    b1, s1 = spectral_shape(flat, 30, fraction=0.2)
    b2, s2 = spectral_shape(bent, 30, fraction=0.2)
    res = solve(SgmdsProblem.from_shapes(b1, s1, b2, s2))
    pm = extract_point_map(res.alpha, b1, b2)
    exact = pm.target_index == truth
    assert exact.mean() >= 0.95
    ring = one_ring(bent)
    assert all(pm.target_index[i] in ring[truth[i]] for i in np.flatnonzero(~exact))


def test_orthogonal_embedding_invariance(blob_shape):
    _, b, _ = blob_shape
    rng = np.random.default_rng(2)
    a = np.eye(b.M) + 0.05 * rng.normal(size=(b.M, b.M))
    Q, _ = np.linalg.qr(rng.normal(size=(b.M, b.M)))
    rotated = type(b)(b.phi @ Q, b.evals, b.mass, b.mesh_hash)
    base = extract_point_map(a, b, b)
    moved = extract_point_map(Q.T @ a, b, rotated)
    assert np.array_equal(base.target_index, moved.target_index)


def test_nearest_rows_matches_brute_force():
    rng = np.random.default_rng(3)
    q, t = rng.normal(size=(700, 6)), rng.normal(size=(300, 6))
    idx, dist = nearest_rows(q, t)
    d = np.linalg.norm(q[:, None] - t[None], axis=2)
    assert np.array_equal(idx, np.argmin(d, axis=1))
    assert np.allclose(dist, d.min(axis=1), rtol=1e-14)


def test_nearest_rows_ties_lowest_index():
    t = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [1.0, 0.0]])
    idx, _ = nearest_rows(np.zeros((1, 2)), t)
    assert idx[0] == 0
    idx, _ = nearest_rows(np.array([[1.0, 0.0]]), t)
    assert idx[0] == 0


def test_area_weighted_option(blob_shape):
    _, b, _ = blob_shape
    pm = extract_point_map(np.eye(b.M), b, b, area_weighted=True)
    assert pm.meta["area_weighted"] and np.mean(pm.target_index == np.arange(b.n)) == 1.0


def test_dimension_checks(blob_shape):
    _, b, _ = blob_shape
    with pytest.raises(ValueError):
        transfer_function(np.eye(b.M + 1), b, b, np.ones(b.n))
    with pytest.raises(ValueError):
        transfer_function(np.eye(b.M), b, b, np.ones(b.n + 1))
    with pytest.raises(ValueError):
        ground_truth_alpha(b, b, np.zeros(b.n, dtype=int))


def test_dense_functional_map_guard(blob_shape, big_pair):
    _, b, _ = blob_shape
    K = dense_functional_map(np.eye(b.M), b, b)
    f = np.random.default_rng(4).normal(size=b.n)
    assert np.allclose(K @ (b.mass.a * f), transfer_function(np.eye(b.M), b, b, f), atol=1e-12)
    _, _, _, b1, b2 = big_pair
    assert b1.n * b2.n > DENSE_LIMIT
    with pytest.raises(ValueError, match="refused"):
        dense_functional_map(np.eye(100), b1, b2)


def test_point_map_files(tmp_path):
    pm = PointMap(np.array([2, 0, 1]), np.array([0.1, 1e-17, 2.0 / 3.0]), {"M1": 3})
    pm.save_text(tmp_path / "pm.txt")
    pm.save_json(tmp_path / "pm.json")
    assert (tmp_path / "pm.txt").read_text().splitlines()[0] == "0 2 0.1"
    for name in ("pm.txt", "pm.json"):
        back = PointMap.load(tmp_path / name)
        assert np.array_equal(back.target_index, pm.target_index)
        assert np.array_equal(back.match_distance, pm.match_distance)
    assert PointMap.load(tmp_path / "pm.json").meta == {"M1": 3}
    (tmp_path / "bad.txt").write_text("0 1\n")
    with pytest.raises(ValueError):
        PointMap.load(tmp_path / "bad.txt")
