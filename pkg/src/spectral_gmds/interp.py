"""Smooth spectral interpolation of sampled geodesic distance matrices.

Given distances ``D`` known among the sample vertices ``J``, find the
symmetric coefficient matrix ``alpha`` minimizing the Dirichlet energy of
the kernel ``Phi alpha Phi^T`` plus a quadratic penalty on its mismatch
with ``D`` at every sampled pair::

    sum_ij (lam_i + lam_j) alpha_ij**2  +  mu * || Phi_J alpha Phi_J^T - D ||_F**2

The minimizer solves the linear system ``L(alpha) = b`` with
``L(X) = Lam X + X Lam + mu G X G``, ``G = Phi_J^T Phi_J`` and
``b = mu Phi_J^T D Phi_J``; ``L`` is symmetric positive definite for
``mu > 0`` and is applied matrix-free inside conjugate gradients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import storage
from .geodesics import SampledDistances
from .laplacian import EigenBasis

log = logging.getLogger(__name__)

CG_TOL = 1e-10


class InterpolationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SpectralDistance:
    alpha: np.ndarray
    mu: float
    fit_rms: float
    basis_hash: str = ""
    squared: bool = False
    cg_iterations: int = 0

    @property
    def M(self) -> int:
        return self.alpha.shape[0]

    def save(self, path) -> None:
        storage.write(path, "spectral",
                      {"M": self.M, "mu": self.mu, "fit_rms": self.fit_rms,
                       "basis_hash": self.basis_hash, "squared": self.squared,
                       "cg_iterations": self.cg_iterations},
                      {"alpha": self.alpha})

    @classmethod
    def load(cls, path) -> "SpectralDistance":
        meta, arr = storage.read(path, "spectral")
        return cls(arr["alpha"], meta["mu"], meta["fit_rms"], meta["basis_hash"],
                   meta["squared"], meta["cg_iterations"])


def default_mu(M: int, samples: SampledDistances, squared: bool = False) -> float:
    """``1e3 * (M / m)**2 * mean(D**2)``: fit term dominant at the samples."""
    d = samples.d**2 if squared else samples.d
    return 1e3 * (M / samples.m) ** 2 * float(np.mean(d**2))


def _target(samples, squared):
    return samples.d**2 if squared else samples.d


def objective(alpha, basis: EigenBasis, samples: SampledDistances, mu: float,
              squared: bool = False) -> float:
    lam = basis.evals
    PJ = basis.phi[samples.indices]
    r = PJ @ alpha @ PJ.T - _target(samples, squared)
    return float(np.sum((lam[:, None] + lam[None, :]) * alpha**2) + mu * np.sum(r * r))


def objective_gradient(alpha, basis: EigenBasis, samples: SampledDistances, mu: float,
                       squared: bool = False) -> np.ndarray:
    lam = basis.evals
    PJ = basis.phi[samples.indices]
    r = PJ @ alpha @ PJ.T - _target(samples, squared)
    return 2.0 * (lam[:, None] * alpha + alpha * lam[None, :]) + 2.0 * mu * PJ.T @ r @ PJ


def _pcg(apply, b, precond, tol, maxiter):
    x = np.zeros_like(b)
    r = b.copy()
    z = r / precond
    p = z.copy()
    rz = np.vdot(r, z)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return x, 0, 0.0
    for it in range(1, maxiter + 1):
        Ap = apply(p)
        step = rz / np.vdot(p, Ap)
        x += step * p
        r -= step * Ap
        res = np.linalg.norm(r) / bnorm
        if res <= tol:
            return x, it, res
        z = r / precond
        rz_new = np.vdot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, maxiter, res


def interpolate_distances(basis: EigenBasis, samples: SampledDistances, mu: float | None = None,
                          squared: bool = False, tol: float = CG_TOL,
                          maxiter: int | None = None) -> SpectralDistance:
    """Fit ``alpha`` so that ``Phi alpha Phi^T`` interpolates the sampled distances.

    ``mu=None`` picks :func:`default_mu`. With ``squared`` the squared
    distances are fitted instead.
    """
    if samples.indices.max() >= basis.n:
        raise InterpolationError("sample indices do not belong to this basis's mesh")
    if mu is None:
        mu = default_mu(basis.M, samples, squared)
    if not mu > 0:
        raise InterpolationError("the interpolation penalty mu must be > 0")
    lam = basis.evals.copy()
    lam[0] = max(lam[0], 0.0)
    PJ = basis.phi[samples.indices]
    G = PJ.T @ PJ
    D = _target(samples, squared)
    b = mu * (PJ.T @ D @ PJ)
    b = 0.5 * (b + b.T)
    lsum = lam[:, None] + lam[None, :]

    def apply(X):
        return lsum * X + mu * (G @ X @ G)

    precond = lsum + mu * np.outer(np.diag(G), np.diag(G))
    if maxiter is None:
        maxiter = max(1000, 20 * basis.M)
    alpha, iters, res = _pcg(apply, b, precond, tol, maxiter)
    if res > tol:
        log.warning("interpolation CG stopped at relative residual %.3g after %d iterations", res, iters)
    alpha = 0.5 * (alpha + alpha.T)
    r = PJ @ alpha @ PJ.T - D
    fit_rms = float(np.sqrt(np.mean(r * r)))
    return SpectralDistance(alpha, float(mu), fit_rms, f"{basis.mesh_hash}:{basis.M}", squared, iters)


def reconstruct_distance(sd: SpectralDistance, basis: EigenBasis, i: int, j: int) -> float:
    """Interpolated distance between vertices ``i`` and ``j``.

    Evaluated in an order-independent form so that ``(i, j)`` and ``(j, i)``
    agree bit for bit.
    """
    a = basis.phi[i] @ sd.alpha @ basis.phi[j]
    b = basis.phi[j] @ sd.alpha @ basis.phi[i]
    return float(0.5 * (a + b))


def reconstruct_block(sd: SpectralDistance, basis: EigenBasis, rows, cols) -> np.ndarray:
    return basis.phi[np.asarray(rows)] @ sd.alpha @ basis.phi[np.asarray(cols)].T
