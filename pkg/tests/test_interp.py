import numpy as np
import pytest

from conftest import spectral_shape
from spectral_gmds import fixtures
from spectral_gmds.geodesics import SampledDistances, distance_matrix, farthest_point_sample
from spectral_gmds.interp import (InterpolationError, SpectralDistance, default_mu,
                                  interpolate_distances, objective, objective_gradient,
                                  reconstruct_block, reconstruct_distance)
from spectral_gmds.laplacian import mesh_eigenbasis


@pytest.fixture(scope="module")
def sphere_fit(sphere3):
    b = mesh_eigenbasis(sphere3, 60)
    idx, fields = farthest_point_sample(sphere3, count=64, return_fields=True)
    fit = distance_matrix(sphere3, idx[:32], fields[:32])
    full = distance_matrix(sphere3, idx, fields)
    return b, fit, full


def test_zero_distances_give_zero(blob800):
    b = mesh_eigenbasis(blob800, 15)
    sd = SampledDistances(np.arange(0, 800, 40), np.zeros((20, 20)))
    assert np.array_equal(interpolate_distances(b, sd, mu=1e3).alpha, np.zeros((15, 15)))


def test_complete_basis_reproduces_all_pairs():
    mesh = fixtures.blob(30)
    b = mesh_eigenbasis(mesh, 30)
    sd = distance_matrix(mesh, np.arange(30))
    res = interpolate_distances(b, sd, mu=1e8)
    rec = b.phi @ res.alpha @ b.phi.T
    assert np.max(np.abs(rec - sd.d)) <= 1e-4 * np.max(sd.d)
    A = np.diag(b.mass.a)
    oracle = b.phi.T @ A @ sd.d @ A @ b.phi
    assert np.max(np.abs(res.alpha - oracle)) <= 1e-4 * np.max(np.abs(oracle))


@pytest.mark.parametrize("mu", [1e3, None])
def test_sphere_fit_and_held_out(sphere_fit, mu):
    b, fit, full = sphere_fit
    res = interpolate_distances(b, fit, mu)
    mask = ~np.eye(32, dtype=bool)
    mean = fit.d[mask].mean()
    assert res.fit_rms <= 0.02 * mean
    held = full.indices[32:]
    rec = reconstruct_block(res, b, held, held)
    truth = full.d[32:, 32:]
    assert np.sqrt(np.mean((rec - truth)[mask] ** 2)) <= 0.10 * truth[mask].mean()


def test_reconstruction_bounds_on_reference_fixture(sphere_fit):
    # bounds frozen from the reference run on icosphere level 3, 32 samples, M=60
    b, fit, _ = sphere_fit
    res = interpolate_distances(b, fit)
    rec = reconstruct_block(res, b, fit.indices, fit.indices)
    mask = ~np.eye(32, dtype=bool)
    err = np.abs(rec - fit.d)[mask]
    assert err.max() <= 4.0 * res.fit_rms
    assert np.mean(err <= 3.0 * res.fit_rms) >= 0.99
    assert np.max(np.abs(np.diag(rec))) <= 4.5 * res.fit_rms


@pytest.mark.parametrize("name", ["blob", "strip"])
def test_sampled_pairs_within_three_rms(name, blob800):
    mesh = blob800 if name == "blob" else fixtures.bent_plane(20, 20, 1.0, taper=0.5)
    b, res = spectral_shape(mesh, 40, count=40)
    idx = farthest_point_sample(mesh, count=40)
    rec = reconstruct_block(res, b, idx, idx)
    d = distance_matrix(mesh, idx).d
    mask = ~np.eye(40, dtype=bool)
    # measured: 0.991 (blob), 0.972 (strip, heavier tail near the boundary)
    assert np.mean(np.abs(rec - d)[mask] <= 3.0 * res.fit_rms) >= 0.95


def test_reconstruct_symmetric_exactly(sphere_fit):
    b, fit, _ = sphere_fit
    res = interpolate_distances(b, fit)
    assert np.max(np.abs(res.alpha - res.alpha.T)) <= 1e-10
    for i, j in [(0, 5), (17, 400), (641, 3)]:
        assert reconstruct_distance(res, b, i, j) == reconstruct_distance(res, b, j, i)
    blk = reconstruct_block(res, b, [0, 17], [5, 400])
    assert blk[0, 0] == pytest.approx(reconstruct_distance(res, b, 0, 5), rel=1e-12)


def test_global_minimizer_properties(sphere_fit):
    b, fit, _ = sphere_fit
    mu = 1e3
    res = interpolate_distances(b, fit, mu)
    f = objective(res.alpha, b, fit, mu)
    assert f <= objective(np.zeros((60, 60)), b, fit, mu)
    PJ = b.phi[fit.indices]
    P = np.linalg.pinv(PJ)
    direct = P @ fit.d @ P.T
    assert f <= objective(direct, b, fit, mu)
    g0 = np.linalg.norm(objective_gradient(np.zeros((60, 60)), b, fit, mu))
    assert np.linalg.norm(objective_gradient(res.alpha, b, fit, mu)) <= 1e-6 * g0


def test_fit_rms_monotone_in_mu(sphere_fit):
    b, fit, _ = sphere_fit
    rms = [interpolate_distances(b, fit, mu).fit_rms for mu in (1e1, 1e3, 1e5)]
    assert rms[0] >= rms[1] >= rms[2]


def test_objective_monotone_in_M(sphere_fit):
    b, fit, _ = sphere_fit
    mu = 1e2
    vals = []
    for M in (10, 20, 40, 60):
        bm = b.truncated(M)
        vals.append(objective(interpolate_distances(bm, fit, mu).alpha, bm, fit, mu))
    assert all(b_ <= a_ * (1 + 1e-9) for a_, b_ in zip(vals, vals[1:]))


def test_gradient_finite_differences(blob800):
    rng = np.random.default_rng(3)
    b = mesh_eigenbasis(blob800, 6)
    sd = distance_matrix(blob800, farthest_point_sample(blob800, count=10))
    a = rng.normal(size=(6, 6))
    g = objective_gradient(a, b, sd, 7.0)
    fd = np.empty_like(a)
    for i in range(6):
        for j in range(6):
            e = np.zeros_like(a)
            e[i, j] = 1e-6
            fd[i, j] = (objective(a + e, b, sd, 7.0) - objective(a - e, b, sd, 7.0)) / 2e-6
    assert np.linalg.norm(g - fd) <= 1e-6 * np.linalg.norm(fd)


def test_default_mu_formula(sphere_fit):
    b, fit, _ = sphere_fit
    assert default_mu(60, fit) == pytest.approx(1e3 * (60 / 32) ** 2 * np.mean(fit.d**2), rel=1e-14)
    assert interpolate_distances(b, fit).mu == default_mu(60, fit)


def test_squared_option(sphere_fit):
    b, fit, _ = sphere_fit
    res = interpolate_distances(b, fit, squared=True)
    rec = reconstruct_block(res, b, fit.indices, fit.indices)
    mask = ~np.eye(32, dtype=bool)
    assert np.sqrt(np.mean((rec - fit.d**2)[mask] ** 2)) == pytest.approx(res.fit_rms, rel=0.05)
    assert res.squared


def test_invalid_inputs(sphere_fit, blob800):
    b, fit, _ = sphere_fit
    with pytest.raises(InterpolationError, match="mu must be > 0"):
        interpolate_distances(b, fit, mu=0.0)
    small = mesh_eigenbasis(fixtures.blob(50), 10)
    with pytest.raises(InterpolationError):
        interpolate_distances(small, fit)


def test_cache_round_trip(tmp_path, sphere_fit):
    b, fit, _ = sphere_fit
    res = interpolate_distances(b, fit)
    res.save(tmp_path / "i.bin")
    back = SpectralDistance.load(tmp_path / "i.bin")
    assert np.array_equal(back.alpha, res.alpha)
    assert (back.mu, back.fit_rms, back.basis_hash) == (res.mu, res.fit_rms, res.basis_hash)
