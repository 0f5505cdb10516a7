import numpy as np
import pytest

from conftest import spectral_shape
from spectral_gmds import fixtures
from spectral_gmds.sgmds import (SgmdsProblem, SolverConfig, SolverError, constraint_residuals,
                                 gradient, init_alpha, objective, project_constraints, solve,
                                 unitarity_residual)


def random_problem(rng, M1, M2=None, mu1=0.5, mu2=0.8, equal_norms=False):
    M2 = M1 if M2 is None else M2
    a1 = rng.normal(size=(M1, M1))
    a2 = rng.normal(size=(M2, M2))
    c1, c2 = rng.normal(size=M1), rng.normal(size=M2)
    if equal_norms:
        c2 *= np.linalg.norm(c1) / np.linalg.norm(c2)
    return SgmdsProblem(a1 + a1.T, a2 + a2.T, np.sort(rng.uniform(0, 4, M1)),
                        np.sort(rng.uniform(0, 4, M2)), c1, c2, mu1, mu2)


def loop_objective(a, p):
    M2, M1 = a.shape
    t1 = t2 = t3 = 0.0
    for i in range(M2):
        for j in range(M1):
            e = sum(a[i, k] * p.alpha1[k, j] for k in range(M1)) - \
                sum(p.alpha2[i, k] * a[k, j] for k in range(M2))
            t1 += e * e
    for i in range(M1):
        for j in range(M1):
            q = sum(a[k, i] * p.lambda2[k] * a[k, j] for k in range(M2))
            u = sum(a[k, i] * a[k, j] for k in range(M2))
            t2 += ((p.lambda1[i] if i == j else 0.0) - q) ** 2
            t3 += (u - (1.0 if i == j else 0.0)) ** 2
    return t1 + p.mu1 * t2 + p.mu2 * t3


def identical_problem(M=8):
    rng = np.random.default_rng(5)
    a = rng.normal(size=(M, M))
    lam = np.sort(rng.uniform(0, 3, M))
    c = rng.normal(size=M)
    return SgmdsProblem(a + a.T, a + a.T, lam, lam, c, c, 0.3, 1.0)


@pytest.fixture(scope="module")
def blob_pair():
    m1 = fixtures.blob(600)
    m2, truth = fixtures.shuffled_copy(m1, seed=4)
    b1, s1 = spectral_shape(m1, 20, fraction=0.1)
    b2, s2 = spectral_shape(m2, 20, fraction=0.1)
    return b1, s1, b2, s2


# objective

def test_objective_zero_at_identity():
    p = identical_problem()
    assert objective(np.eye(8), p) == 0.0


def test_objective_at_zero():
    p = random_problem(np.random.default_rng(1), 7)
    assert objective(np.zeros((7, 7)), p) == pytest.approx(p.mu1 * np.sum(p.lambda1**2) + p.mu2 * 7,
                                                           rel=1e-14)


@pytest.mark.parametrize("shape", [(5, 5), (6, 4), (4, 6)])
def test_objective_scalar_loop_oracle(shape):
    rng = np.random.default_rng(2)
    M2, M1 = shape
    p = random_problem(rng, M1, M2)
    a = rng.normal(size=(M2, M1))
    assert objective(a, p) == pytest.approx(loop_objective(a, p), rel=1e-12)


# gradient

def test_gradient_zero_at_identity():
    p = identical_problem()
    assert np.max(np.abs(gradient(np.eye(8), p))) <= 1e-12


def central_differences(a, p, h=1e-6):
    fd = np.empty_like(a)
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            e = np.zeros_like(a)
            e[i, j] = h
            fd[i, j] = (objective(a + e, p) - objective(a - e, p)) / (2 * h)
    return fd


@pytest.mark.parametrize("seed", range(20))
def test_gradient_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    p = random_problem(rng, 6)
    a = rng.normal(size=(6, 6))
    fd = central_differences(a, p)
    assert np.linalg.norm(gradient(a, p) - fd) <= 1e-5 * np.linalg.norm(fd)


def test_gradient_rectangular():
    rng = np.random.default_rng(8)
    p = random_problem(rng, 4, 7)
    a = rng.normal(size=(7, 4))
    fd = central_differences(a, p)
    assert np.linalg.norm(gradient(a, p) - fd) <= 1e-5 * np.linalg.norm(fd)


def test_gradient_linear_in_weights():
    rng = np.random.default_rng(9)
    p = random_problem(rng, 6)
    a = rng.normal(size=(6, 6))
    base = gradient(a, p, 0.0, 0.0)
    once = gradient(a, p) - base
    twice = gradient(a, p, 2 * p.mu1, 2 * p.mu2) - base
    assert np.allclose(twice, 2 * once, rtol=1e-12, atol=1e-12 * np.abs(once).max())


# initialization and projection

def test_init_identical_is_identity():
    p = identical_problem()
    assert np.allclose(init_alpha(p), np.eye(8), rtol=0, atol=1e-12)


@pytest.mark.parametrize("col", [2, 3])
def test_init_detects_negated_column(blob_shape, col):
    _, b, sd = blob_shape
    S = np.ones(b.M)
    S[col] = -1
    p = SgmdsProblem(sd.alpha, S[:, None] * sd.alpha * S[None, :], b.evals, b.evals,
                     b.mass_vector(), S * b.mass_vector(), 0.1, 1.0)
    a0 = init_alpha(p)
    assert a0[col, col] == pytest.approx(-1.0, abs=1e-9)
    assert np.allclose(np.abs(np.diag(a0)), 1.0, atol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_init_satisfies_mass_constraint(seed):
    rng = np.random.default_rng(seed)
    p = random_problem(rng, 6 + seed, 6 + (seed % 3))
    a0 = init_alpha(p)
    assert np.linalg.norm(a0 @ p.c1 - p.c2) <= 1e-9 * np.linalg.norm(p.c2)


def test_projection_is_least_change_when_consistent():
    rng = np.random.default_rng(11)
    p = random_problem(rng, 5, equal_norms=True)
    x = rng.normal(size=(5, 5))
    out = project_constraints(x, p)
    r1, r2 = constraint_residuals(out, p)
    assert max(r1, r2) <= 1e-12 * np.linalg.norm(p.c1)
    # oracle: minimum-norm correction onto the affine constraint set
    B = np.vstack([np.kron(np.eye(5), p.c1[None, :]), np.kron(p.c2[None, :], np.eye(5))])
    rhs = np.concatenate([p.c2, p.c1])
    oracle = x.ravel() - np.linalg.pinv(B) @ (B @ x.ravel() - rhs)
    assert np.allclose(out.ravel(), oracle, rtol=0, atol=1e-12)
    assert np.allclose(project_constraints(out, p), out, rtol=0, atol=1e-12)


# solver

def test_self_match_from_perturbed_start(blob_shape):
    _, b, sd = blob_shape
    p = SgmdsProblem.from_shapes(b, sd, b, sd)
    start = np.eye(b.M) + np.random.default_rng(1).uniform(-0.1, 0.1, (b.M, b.M))
    res = solve(p, alpha0=start)
    assert res.converged
    assert res.objective <= 1e-8
    assert np.linalg.norm(res.alpha - np.eye(b.M)) <= 1e-3


def test_isometric_strip_residuals(tapered_pair):
    flat, bent, _ = tapered_pair
    b1, s1 = spectral_shape(flat, 30, fraction=0.2)
    b2, s2 = spectral_shape(bent, 30, fraction=0.2)
    res = solve(SgmdsProblem.from_shapes(b1, s1, b2, s2))
    assert res.converged
    assert res.unitarity_residual <= 0.05
    assert max(res.constraint_residual, res.transpose_residual) <= 1e-6


def kkt_least_squares(p):
    # vec(a alpha1 - alpha2 a) = K vec(a) for row-major vec; minimize
    # ||K x||^2 subject to the two mass constraints
    M = p.shape[0]
    K = np.kron(np.eye(M), p.alpha1.T) - np.kron(p.alpha2, np.eye(M))
    B = np.vstack([np.kron(np.eye(M), p.c1[None, :]), np.kron(p.c2[None, :], np.eye(M))])
    rhs = np.concatenate([p.c2, p.c1])
    kkt = np.block([[2 * K.T @ K, B.T], [B, np.zeros((2 * M, 2 * M))]])
    sol = np.linalg.lstsq(kkt, np.concatenate([np.zeros(M * M), rhs]), rcond=None)[0]
    return sol[:M * M].reshape(M, M), K


@pytest.mark.parametrize("seed", range(3))
def test_zero_weights_match_kronecker_oracle(seed):
    rng = np.random.default_rng(30 + seed)
    p = random_problem(rng, 6, mu1=0.0, mu2=0.0, equal_norms=True)
    oracle, _ = kkt_least_squares(p)
    res = solve(p)
    assert res.converged
    assert np.max(np.abs(res.alpha - oracle)) <= 1e-6


def test_zero_weights_equal_alphas():
    # alpha2 = alpha1: every feasible matrix commuting with alpha1 is optimal
    rng = np.random.default_rng(40)
    p = random_problem(rng, 6, mu1=0.0, mu2=0.0, equal_norms=True)
    p = SgmdsProblem(p.alpha1, p.alpha1, p.lambda1, p.lambda2, p.c1, p.c1, 0.0, 0.0)
    oracle, K = kkt_least_squares(p)
    res = solve(p)
    assert objective(oracle, p) <= 1e-12
    assert res.objective <= 1e-10
    assert np.linalg.norm(K @ res.alpha.ravel()) <= 1e-5
    r1, r2 = constraint_residuals(res.alpha, p)
    assert max(r1, r2) <= 1e-6 * np.linalg.norm(p.c1)


def test_inner_histories_non_increasing(blob_pair):
    res = solve(SgmdsProblem.from_shapes(*blob_pair))
    assert res.inner_history
    for hist in res.inner_history:
        assert all(b <= a for a, b in zip(hist, hist[1:]))


def test_solution_not_worse_than_init(blob_pair, tapered_pair):
    flat, bent, _ = tapered_pair
    problems = [SgmdsProblem.from_shapes(*blob_pair)]
    b1, s1 = spectral_shape(flat, 20, fraction=0.15)
    b2, s2 = spectral_shape(bent, 20, fraction=0.15)
    problems.append(SgmdsProblem.from_shapes(b1, s1, b2, s2))
    for p in problems:
        assert solve(p).objective <= objective(init_alpha(p), p)


def test_permutation_consistency(blob_pair):
    p = SgmdsProblem.from_shapes(*blob_pair)
    perm = np.random.default_rng(0).permutation(20)
    P = np.eye(20)[perm]
    pp = SgmdsProblem(p.alpha1, P @ p.alpha2 @ P.T, p.lambda1, P @ p.lambda2, p.c1, P @ p.c2,
                      p.mu1, p.mu2)
    a0 = init_alpha(p)
    res = solve(p, alpha0=a0)
    resp = solve(pp, alpha0=P @ a0)
    assert np.max(np.abs(resp.alpha - P @ res.alpha)) <= 1e-6
    assert resp.objective == pytest.approx(res.objective, abs=1e-6)


def test_swap_symmetry(blob_pair):
    b1, s1, b2, s2 = blob_pair
    p = SgmdsProblem.from_shapes(b1, s1, b2, s2, mu1=0.0)
    a0 = init_alpha(p)
    res = solve(p, alpha0=a0)
    sw = solve(p.swapped(), alpha0=a0.T)
    assert sw.objective == pytest.approx(res.objective, abs=1e-6)
    assert objective(np.asarray(res.alpha).T, p.swapped()) == pytest.approx(res.objective, rel=1e-9)


def test_constraints_on_converged_solves(blob_pair):
    p = SgmdsProblem.from_shapes(*blob_pair)
    res = solve(p)
    assert res.converged
    assert res.constraint_residual <= 1e-6 * np.linalg.norm(p.c2)
    assert res.transpose_residual <= 1e-6 * np.linalg.norm(p.c1)
    assert res.unitarity_residual == pytest.approx(unitarity_residual(res.alpha))


def test_non_convergence_reported(blob_pair):
    p = SgmdsProblem.from_shapes(*blob_pair)
    res = solve(p, SolverConfig(outer_iters=1, inner_iters=2))
    assert not res.converged
    assert "not converged" in res.message
    d = res.diagnostics()
    assert d["converged"] is False and len(d["objective_history"]) == 1
    assert np.isfinite(d["constraint_residual"]) and np.isfinite(d["unitarity_residual"])


def test_unequal_areas_noted():
    p = random_problem(np.random.default_rng(12), 5)
    res = solve(p, SolverConfig(outer_iters=2))
    assert not res.converged
    assert "unequal areas" in res.message


def test_nan_objective_raises():
    p = random_problem(np.random.default_rng(13), 4, equal_norms=True)
    bad = p.alpha1.copy()
    bad[1, 2] = bad[2, 1] = np.nan
    p = SgmdsProblem(bad, p.alpha2, p.lambda1, p.lambda2, p.c1, p.c2, p.mu1, p.mu2)
    with pytest.raises(SolverError, match="NaN at iteration 0"):
        solve(p, alpha0=np.eye(4))
    with pytest.raises(SolverError, match="NaN at iteration 0"):
        solve(p)


def test_rectangular_solve():
    rng = np.random.default_rng(14)
    p = random_problem(rng, 5, 7, equal_norms=True)
    res = solve(p)
    assert res.alpha.shape == (7, 5)
    assert res.objective <= objective(init_alpha(p), p)


def test_problem_validation():
    rng = np.random.default_rng(15)
    p = random_problem(rng, 4)
    with pytest.raises(ValueError):
        SgmdsProblem(p.alpha1, p.alpha2, p.lambda1[:3], p.lambda2, p.c1, p.c2, 1, 1)
    with pytest.raises(ValueError):
        SgmdsProblem(p.alpha1, p.alpha2, p.lambda1, p.lambda2, np.zeros(4), p.c2, 1, 1)


def test_default_weights(blob_shape):
    _, b, sd = blob_shape
    p = SgmdsProblem.from_shapes(b, sd, b, sd)
    assert p.mu1 == pytest.approx(1 / np.sum(b.evals**2)) and p.mu2 == 1.0


def test_config_file(tmp_path):
    path = tmp_path / "solver.cfg"
    path.write_text("# solver\nmu1 = 0.25\nmu2=2\nouter_iters = 3  # fewer\ninner_tol=1e-8\n"
                    "penalty_start=10\npenalty_growth=5\ninner_iters=50\n")
    cfg = SolverConfig.from_file(path)
    assert (cfg.mu1, cfg.mu2, cfg.outer_iters, cfg.inner_tol) == (0.25, 2.0, 3, 1e-8)
    assert (cfg.penalty_start, cfg.penalty_growth, cfg.inner_iters) == (10.0, 5.0, 50)
    assert SolverConfig.from_mapping(cfg.as_dict()) == cfg
    path.write_text("rho=3\n")
    with pytest.raises(ValueError, match="unknown solver option"):
        SolverConfig.from_file(path)
    path.write_text("mu1\n")
    with pytest.raises(ValueError, match="key=value"):
        SolverConfig.from_file(path)
