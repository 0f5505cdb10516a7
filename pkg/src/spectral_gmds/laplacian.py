"""Cotangent stiffness matrix and truncated Laplace-Beltrami eigenbasis."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy import sparse
import scipy.sparse.linalg
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh, splu

from . import storage
from .mesh import MassDiagonal, MeshValidationError, TriMesh, vertex_areas

log = logging.getLogger(__name__)

COT_LIMIT = 1e8
DENSE_LIMIT = 600
SIGN_TIE_RTOL = 1e-9
DEFLATION_ROUNDS = 10
DEFLATION_BLOCK = 6


class EigenSolverError(RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


def cotan_weights(mesh: TriMesh) -> sparse.csr_matrix:
    """Symmetric positive semi-definite cotangent stiffness matrix W.

    Off-diagonal ``W[i, j] = -(cot(beta_ij) + cot(gamma_ij)) / 2`` over the
    angles opposite edge (i, j); rows sum to zero.
    """
    v, t = mesh.vertices, mesh.triangles
    rows, cols, vals = [], [], []
    for k in range(3):
        i, j = t[:, (k + 1) % 3], t[:, (k + 2) % 3]
        u = v[i] - v[t[:, k]]
        w = v[j] - v[t[:, k]]
        cot = np.einsum("ij,ij->i", u, w) / np.linalg.norm(np.cross(u, w), axis=1)
        bad = np.flatnonzero(~(np.abs(cot) <= COT_LIMIT))
        if len(bad):
            raise MeshValidationError(
                [f"near-degenerate triangles (|cot| > {COT_LIMIT:g}): {bad[:20].tolist()}"]
            )
        rows += [i, j]
        cols += [j, i]
        vals += [-0.5 * cot, -0.5 * cot]
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    n = mesh.n
    off = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    off.sum_duplicates()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    return (off + sparse.diags(diag)).tocsr()


@dataclass(frozen=True, eq=False)
class EigenBasis:
    """A-orthonormal eigenvectors ``phi`` (n x M) with ascending ``evals``."""

    phi: np.ndarray
    evals: np.ndarray
    mass: MassDiagonal
    mesh_hash: str = ""

    @property
    def M(self) -> int:
        return self.phi.shape[1]

    @property
    def n(self) -> int:
        return self.phi.shape[0]

    def mass_vector(self) -> np.ndarray:
        """``C = Phi^T A 1``, the spectral coefficients of the constant one."""
        return self.phi.T @ self.mass.a

    def project(self, f) -> np.ndarray:
        return self.phi.T @ (self.mass.a * np.asarray(f, dtype=np.float64))

    def truncated(self, M: int) -> "EigenBasis":
        return EigenBasis(self.phi[:, :M], self.evals[:M], self.mass, self.mesh_hash)

    def save(self, path) -> None:
        storage.write(path, "eigbasis", {"n": self.n, "M": self.M, "mesh_hash": self.mesh_hash},
                      {"evals": self.evals, "phi": np.asfortranarray(self.phi), "mass": self.mass.a})

    @classmethod
    def load(cls, path, mesh_hash: str | None = None) -> "EigenBasis":
        meta, arr = storage.read(path, "eigbasis")
        if mesh_hash is not None and meta["mesh_hash"] != mesh_hash:
            raise storage.CacheError(f"{path}: eigenbasis was computed for a different mesh")
        return cls(np.ascontiguousarray(arr["phi"]), arr["evals"], MassDiagonal(arr["mass"]),
                   meta["mesh_hash"])


def _fix_signs(phi):
    # make each column's largest-magnitude entry positive; near-ties go to
    # the lowest vertex index
    mag = np.abs(phi)
    top = mag.max(axis=0)
    for k in range(phi.shape[1]):
        i = np.flatnonzero(mag[:, k] >= top[k] * (1.0 - SIGN_TIE_RTOL))[0]
        if phi[i, k] < 0:
            phi[:, k] = -phi[:, k]
    return phi


def _shift_invert(S, lu, sigma, k, v0, tol, maxiter, deflate=None):
    """``k`` eigenpairs of ``S`` closest to ``sigma`` via Lanczos on ``(S - sigma)^-1``.

    With ``deflate`` (orthonormal columns) the operator is restricted to
    their orthogonal complement.
    """
    n = S.shape[0]
    if deflate is None:
        proj = lambda x: x  # noqa: E731
    else:
        proj = lambda x: x - deflate @ (deflate.T @ x)  # noqa: E731
    op = LinearOperator((n, n), matvec=lambda x: proj(lu.solve(proj(np.ravel(x)))), dtype=np.float64)
    try:
        mu, Y = eigsh(op, k=k, which="LM", v0=proj(v0), tol=tol, maxiter=maxiter)
    except ArpackNoConvergence as exc:
        res = None
        if exc.eigenvectors is not None and exc.eigenvectors.size:
            lam = sigma + 1.0 / exc.eigenvalues
            R = S @ exc.eigenvectors - exc.eigenvectors * lam
            res = float(np.max(np.linalg.norm(R, axis=0)))
        raise EigenSolverError(
            f"eigensolver did not converge after {maxiter} iterations "
            f"({len(exc.eigenvalues)} of {k} pairs; residual {res})", residual=res
        ) from None
    return sigma + 1.0 / mu, Y


def _rayleigh_ritz(S, Y, M):
    # re-orthonormalize and keep the M lowest Ritz pairs
    Q, _ = np.linalg.qr(Y)
    H = Q.T @ (S @ Q)
    lam, V = np.linalg.eigh((H + H.T) * 0.5)
    return lam[:M], Q @ V[:, :M]


def eigenbasis(w, mass: MassDiagonal, M: int, mesh_hash: str = "",
               tol: float = 1e-12, maxiter: int | None = None) -> EigenBasis:
    """The ``M`` smallest solutions of ``W phi = lambda A phi``.

    Works on the symmetrized operator ``A^-1/2 W A^-1/2``, which is exact
    because A is diagonal. Small problems use a dense solver; larger ones
    use shift-invert Lanczos (ARPACK) followed by a Rayleigh-Ritz cleanup
    and a deflated search for eigenpairs the Lanczos run missed.
    """
    n = w.shape[0]
    if not 2 <= M <= n:
        raise ValueError(f"eigen count must satisfy 2 <= M <= n ({n}), got {M}")
    s = 1.0 / np.sqrt(mass.a)
    S = sparse.diags(s) @ sparse.csr_matrix(w) @ sparse.diags(s)
    S = ((S + S.T) * 0.5).tocsc()

    if n <= DENSE_LIMIT or M >= n - 1:
        lam, Y = scipy.linalg.eigh(S.toarray(), subset_by_index=(0, M - 1))
    else:
        if maxiter is None:
            maxiter = int(10 * M * np.sqrt(n))
        sigma = -1e-2 / mass.total_area
        lu = splu((S - sigma * sparse.identity(n, format="csc")).tocsc())
        v0 = np.sqrt(mass.a) * (1.0 + 0.5 * np.cos(0.7 * np.arange(n)))
        lam, Y = _shift_invert(S, lu, sigma, M, v0, tol, maxiter)
        lam, Y = _rayleigh_ritz(S, Y, M)
        # single-vector Lanczos can miss copies of a repeated eigenvalue;
        # look for eigenvalues below the M-th one orthogonal to those found
        for _ in range(DEFLATION_ROUNDS):
            k = min(DEFLATION_BLOCK, n - M - 1)
            if k < 1:
                break
            extra, Z = _shift_invert(S, lu, sigma, k, v0 * np.sin(1.3 * np.arange(n) + 0.4),
                                     tol, maxiter, deflate=Y)
            keep = extra < lam[-1] - 1e-8 * abs(lam[-1])
            if not keep.any():
                break
            log.debug("eigensolver: %d missed eigenpairs recovered by deflation", int(keep.sum()))
            lam, Y = _rayleigh_ritz(S, np.hstack([Y, Z[:, keep]]), M)
    order = np.argsort(lam, kind="stable")
    lam, Y = lam[order], Y[:, order]
    phi = _fix_signs(Y * s[:, None])
    phi.setflags(write=False)
    lam.setflags(write=False)
    return EigenBasis(phi, lam, mass, mesh_hash)


def mesh_eigenbasis(mesh: TriMesh, M: int, area_scheme: str = "mixed") -> EigenBasis:
    """Assemble W and A for ``mesh`` and solve for ``M`` eigenpairs."""
    return eigenbasis(cotan_weights(mesh), vertex_areas(mesh, area_scheme),
                      min(M, mesh.n), mesh.content_hash)


def eigen_residuals(w, basis: EigenBasis) -> np.ndarray:
    """Per-column ``||W phi - lambda A phi||`` relative to ``||W||_1``."""
    R = w @ basis.phi - (basis.mass.a[:, None] * basis.phi) * basis.evals
    return np.linalg.norm(R, axis=0) / sparse.linalg.norm(w, 1)
