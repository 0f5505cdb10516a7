"""Spectral GMDS: optimize the functional-map coefficients between two shapes.

For shapes with eigenbases (Phi_i, Lam_i) and interpolated distance
coefficients alpha_i (``D_i ~ Phi_i alpha_i Phi_i^T``), find the M2 x M1
matrix ``a`` minimizing::

    f(a) = ||a alpha_1 - alpha_2 a||^2
           + mu1 ||Lam_1 - a^T Lam_2 a||^2      (conformality)
           + mu2 ||a^T a - I||^2                (unitarity)

subject to mass preservation ``a C_1 = C_2`` and ``a^T C_2 = C_1`` with
``C_i = Phi_i^T A_i 1``. Norms are Frobenius.

Gradient, with E = a alpha_1 - alpha_2 a, F = Lam_1 - a^T Lam_2 a and
U = a^T a - I (F and U symmetric, Lam_2 diagonal)::

    d||E||^2 = 2 <E, da alpha_1 - alpha_2 da>   ->  2 (E alpha_1^T - alpha_2^T E)
    d||F||^2 = -2 <F, da^T Lam_2 a + a^T Lam_2 da>  ->  -4 Lam_2 a F
    d||U||^2 = 2 <U, da^T a + a^T da>           ->  4 a U

The equality constraints are handled by an augmented Lagrangian outer loop
around an L-BFGS inner solver with a backtracking (Armijo) line search.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .interp import SpectralDistance
from .laplacian import EigenBasis

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class SgmdsProblem:
    alpha1: np.ndarray
    alpha2: np.ndarray
    lambda1: np.ndarray
    lambda2: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    mu1: float
    mu2: float

    def __post_init__(self):
        M1, M2 = len(self.lambda1), len(self.lambda2)
        if self.alpha1.shape != (M1, M1) or self.alpha2.shape != (M2, M2):
            raise ValueError("distance coefficient shapes do not match the eigenvalue counts")
        if self.c1.shape != (M1,) or self.c2.shape != (M2,):
            raise ValueError("mass vectors do not match the eigenvalue counts")
        if not (np.linalg.norm(self.c1) > 0 and np.linalg.norm(self.c2) > 0):
            raise ValueError("mass vectors must be nonzero")

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.lambda2), len(self.lambda1)

    @classmethod
    def from_shapes(cls, basis1: EigenBasis, sd1: SpectralDistance, basis2: EigenBasis,
                    sd2: SpectralDistance, mu1: float | None = None, mu2: float | None = None):
        """Assemble a problem; ``mu1`` defaults to ``1 / ||Lam_1||_F**2``, ``mu2`` to 1."""
        lam1 = np.asarray(basis1.evals, dtype=np.float64)
        lam2 = np.asarray(basis2.evals, dtype=np.float64)
        if mu1 is None:
            mu1 = 1.0 / float(np.sum(lam1**2))
        if mu2 is None:
            mu2 = 1.0
        return cls(sd1.alpha, sd2.alpha, lam1, lam2, basis1.mass_vector(), basis2.mass_vector(),
                   float(mu1), float(mu2))

    def swapped(self) -> "SgmdsProblem":
        return SgmdsProblem(self.alpha2, self.alpha1, self.lambda2, self.lambda1, self.c2, self.c1,
                            self.mu1, self.mu2)


@dataclass
class SolverConfig:
    mu1: float | None = None
    mu2: float | None = None
    penalty_start: float = 1e2
    penalty_growth: float = 10.0
    outer_iters: int = 8
    inner_iters: int = 500
    inner_tol: float = 1e-6
    constraint_tol: float = 1e-6
    memory: int = 10

    @classmethod
    def from_mapping(cls, values: dict) -> "SolverConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ValueError(f"unknown solver option {key!r}")
            val = raw
            if isinstance(raw, str):
                val = None if raw.strip().lower() in ("", "none", "default") else raw
            if val is not None:
                val = int(val) if key in ("outer_iters", "inner_iters", "memory") else float(val)
            kwargs[key] = val
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "SolverConfig":
        """Read a plain ``key=value`` file (``#`` starts a comment)."""
        values = {}
        with open(path, encoding="ascii") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key=value")
                k, v = line.split("=", 1)
                values[k.strip()] = v.strip()
        return cls.from_mapping(values)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class FunctionalMapCoeffs:
    alpha: np.ndarray
    objective_history: list = field(default_factory=list)
    inner_history: list = field(default_factory=list)
    constraint_residual: float = math.inf
    transpose_residual: float = math.inf
    unitarity_residual: float = math.inf
    objective: float = math.inf
    converged: bool = False
    outer_iterations: int = 0
    inner_iterations: int = 0
    message: str = ""

    def diagnostics(self) -> dict:
        return {
            "objective": self.objective,
            "objective_history": list(self.objective_history),
            "constraint_residual": self.constraint_residual,
            "transpose_residual": self.transpose_residual,
            "unitarity_residual": self.unitarity_residual,
            "converged": self.converged,
            "outer_iterations": self.outer_iterations,
            "inner_iterations": self.inner_iterations,
            "message": self.message,
        }


def _with_problem(p, mu1, mu2):
    return p.mu1 if mu1 is None else mu1, p.mu2 if mu2 is None else mu2


def objective(alpha, p: SgmdsProblem, mu1: float | None = None, mu2: float | None = None) -> float:
    mu1, mu2 = _with_problem(p, mu1, mu2)
    E = alpha @ p.alpha1 - p.alpha2 @ alpha
    F = np.diag(p.lambda1) - alpha.T @ (p.lambda2[:, None] * alpha)
    U = alpha.T @ alpha - np.eye(alpha.shape[1])
    return float(np.sum(E * E) + mu1 * np.sum(F * F) + mu2 * np.sum(U * U))


def gradient(alpha, p: SgmdsProblem, mu1: float | None = None, mu2: float | None = None) -> np.ndarray:
    return _value_and_grad(alpha, p, *_with_problem(p, mu1, mu2))[1]


def _value_and_grad(alpha, p, mu1, mu2):
    E = alpha @ p.alpha1 - p.alpha2 @ alpha
    L2a = p.lambda2[:, None] * alpha
    F = np.diag(p.lambda1) - alpha.T @ L2a
    F = 0.5 * (F + F.T)
    U = alpha.T @ alpha - np.eye(alpha.shape[1])
    U = 0.5 * (U + U.T)
    val = np.sum(E * E) + mu1 * np.sum(F * F) + mu2 * np.sum(U * U)
    g = 2.0 * (E @ p.alpha1.T - p.alpha2.T @ E) - 4.0 * mu1 * (L2a @ F) + 4.0 * mu2 * (alpha @ U)
    return float(val), g


def residuals(alpha, p: SgmdsProblem) -> tuple[np.ndarray, np.ndarray]:
    return alpha @ p.c1 - p.c2, alpha.T @ p.c2 - p.c1


def constraint_residuals(alpha, p: SgmdsProblem) -> tuple[float, float]:
    """``(||a C1 - C2||, ||a^T C2 - C1||)``."""
    r1, r2 = residuals(alpha, p)
    return float(np.linalg.norm(r1)), float(np.linalg.norm(r2))


def unitarity_residual(alpha) -> float:
    return float(np.linalg.norm(alpha.T @ alpha - np.eye(alpha.shape[1])))


def project_constraints(alpha, p: SgmdsProblem) -> np.ndarray:
    """Least-change (Frobenius) projection onto ``a C1 = C2, a^T C2 = C1``.

    When ``||C1|| != ||C2||`` the two constraints are inconsistent; the
    shared entry ``c2^T a c1`` is then set to its least-squares value and a
    final rank-one correction makes ``a C1 = C2`` exact.
    """
    n1, n2 = np.linalg.norm(p.c1), np.linalg.norm(p.c2)
    u1, u2 = p.c1 / n1, p.c2 / n2
    P = alpha - np.outer(u2, u2 @ alpha)
    P = P - np.outer(P @ u1, u1)
    s = 2.0 * n1 * n2 / (n1 * n1 + n2 * n2)
    out = P + s * np.outer(u2, u1)
    out += np.outer(p.c2 - out @ p.c1, p.c1) / (n1 * n1)
    return out


SIGN_RESTARTS = 64


def _flip_ascent(Q, s):
    # single-sign flips (s[0] fixed) until none improves s^T Q s
    K = len(s)
    h = Q @ s - np.diag(Q) * s
    tol = 1e-14 * (np.abs(Q).sum(axis=1) + 1e-300)
    for _ in range(100 * K):
        gain = s[1:] * h[1:]
        k = int(np.argmin(gain)) + 1
        if not gain[k - 1] < -tol[k]:
            break
        s[k] = -s[k]
        h += 2.0 * s[k] * Q[:, k]
        h[k] -= 2.0 * s[k] * Q[k, k]
    return s


def _sign_pattern(Q, s0):
    """Maximize ``s^T Q s`` over ``s in {-1, +1}^K`` with ``s[0] = s0``.

    Local search from several starts: greedy assignment, the rounded
    leading eigenvector of ``Q``, and a fixed set of seeded random patterns.
    The best local optimum wins (first found on ties), so the result is
    deterministic.
    """
    K = Q.shape[0]
    Q = 0.5 * (Q + Q.T)
    starts = []
    g = np.zeros(K)
    g[0] = s0
    for k in range(1, K):
        g[k] = -1.0 if Q[k, :k] @ g[:k] < 0 else 1.0
    starts.append(g)
    if K > 1:
        v = np.linalg.eigh(Q)[1][:, -1]
        v = np.where(v * (v[0] if v[0] != 0 else 1.0) * s0 < 0, -1.0, 1.0)
        v[0] = s0
        starts.append(v)
    rng = np.random.default_rng(0)
    for _ in range(SIGN_RESTARTS):
        r = rng.choice([-1.0, 1.0], size=K)
        r[0] = s0
        starts.append(r)
    best, best_score = None, -np.inf
    for st in starts:
        s = _flip_ascent(Q, st.copy())
        score = s @ Q @ s
        if best is None or score > best_score + 1e-12 * abs(best_score):
            best, best_score = s, score
    return best


def init_alpha(p: SgmdsProblem) -> np.ndarray:
    """Signed-identity start, projected onto the mass constraints.

    Eigenvector signs are arbitrary per shape, so the diagonal signs are
    chosen to make ``alpha_1`` and the sign-corrected ``alpha_2`` agree as
    well as possible (maximizing ``sum_ij s_i s_j alpha1_ij alpha2_ij``
    by greedy assignment followed by single-flip improvement). For
    rectangular problems the leading square block is used.
    """
    M2, M1 = p.shape
    K = min(M1, M2)
    Q = p.alpha1[:K, :K] * p.alpha2[:K, :K]
    s0 = -1.0 if p.c1[0] * p.c2[0] < 0 else 1.0
    s = _sign_pattern(Q, s0)
    a0 = np.zeros((M2, M1))
    a0[np.arange(K), np.arange(K)] = s
    return project_constraints(a0, p)


class _Preconditioner:
    """Approximate inverse Hessian of the augmented Lagrangian.

    Works in rotated coordinates ``L^T X Q1``, where ``Q1`` diagonalizes
    alpha_1 and, for square problems, ``L = R Q1`` with ``R`` the polar
    factor of the current ``a``. There ``a`` becomes symmetric positive
    semidefinite, so the linearized unitarity term couples only the entries
    (i, j) and (j, i), and the commutator term is nearly diagonal with
    curvature ``2 (s1_j - s2_i)**2`` (``s2`` the diagonal of ``L^T alpha_2 L``).
    Rectangular problems use the eigenvectors of alpha_2 for ``L``.
    Conformality enters as a constant shift. The penalty Hessian
    ``rho (X C1 C1^T + C2 C2^T X)`` is added exactly through the Woodbury
    identity.
    """

    def __init__(self, p, alpha, mu1, mu2, rho):
        M2, M1 = p.shape
        s1, self.Q1 = np.linalg.eigh(p.alpha1)
        if M1 == M2:
            u, _, vt = np.linalg.svd(alpha)
            self.L = (u @ vt) @ self.Q1
            s2 = np.einsum("ij,ij->j", self.L, p.alpha2 @ self.L)
        else:
            s2, self.L = np.linalg.eigh(p.alpha2)
        t = 2.0 * (s1[None, :] - s2[:, None]) ** 2
        shift = mu1 * float(np.mean(p.lambda1**2))
        shift = max(shift, 1e-6 * (float(np.mean(t)) + 8.0 * mu2), 1e-300)
        K = min(M1, M2)
        rot = self.L.T @ alpha @ self.Q1
        d = np.where(np.diag(rot[:K, :K]) < 0, -1.0, 1.0)
        self.K = K
        self.base = t + shift
        self.A = self.base[:K, :K] + 4.0 * mu2
        self.C = 4.0 * mu2 * np.outer(d, d)
        self.det = self.A * self.A.T - self.C * self.C
        self.c1, self.c2 = p.c1, p.c2
        self.shape = (M2, M1)
        # Woodbury capacitance for B(y) = y_a C1^T + C2 y_b^T
        cols = []
        for k in range(M2 + M1):
            y = np.zeros(M2 + M1)
            y[k] = 1.0
            cols.append(self._bt(self._sinv(self._b(y))))
        W = np.array(cols).T
        self.cap = np.linalg.cholesky(np.eye(M2 + M1) / rho + 0.5 * (W + W.T))

    def _b(self, y):
        M2 = self.shape[0]
        return np.outer(y[:M2], self.c1) + np.outer(self.c2, y[M2:])

    def _bt(self, X):
        return np.concatenate([X @ self.c1, X.T @ self.c2])

    def _sinv(self, X):
        R = self.L.T @ X @ self.Q1
        Y = R / self.base
        K = self.K
        Rk = R[:K, :K]
        Y[:K, :K] = (self.A.T * Rk - self.C * Rk.T) / self.det
        return self.L @ Y @ self.Q1.T

    def __call__(self, g):
        X = g.reshape(self.shape)
        Y = self._sinv(X)
        z = self._bt(Y)
        z = np.linalg.solve(self.cap.T, np.linalg.solve(self.cap, z))
        Y = Y - self._sinv(self._b(z))
        return Y.ravel()


def _lbfgs(fun, x0, tol, maxiter, memory, history, precond=None):
    """Preconditioned L-BFGS with Armijo backtracking.

    ``precond`` applies the initial inverse-Hessian approximation; accepted
    function values are appended to ``history``.
    """
    x = x0.copy()
    f, g = fun(x)
    history.append(f)
    S, Y = [], []
    gnorm = np.linalg.norm(g)
    it = 0

    def h0(q):
        return precond(q) if precond is not None else q

    while it < maxiter:
        if gnorm <= tol * (1.0 + abs(f)):
            return x, f, g, it, True
        q = g.copy()
        coef = []
        for s_, y_ in zip(reversed(S), reversed(Y)):
            rho = 1.0 / (y_ @ s_)
            a = rho * (s_ @ q)
            q -= a * y_
            coef.append((rho, a))
        r = h0(q)
        if S:
            hy = h0(Y[-1])
            r *= (S[-1] @ Y[-1]) / (Y[-1] @ hy)
        elif precond is None:
            r /= max(gnorm, 1e-300)
        for (s_, y_), (rho, a) in zip(zip(S, Y), reversed(coef)):
            b = rho * (y_ @ r)
            r += (a - b) * s_
        d = -r
        slope = g @ d
        if not slope < 0:
            S.clear()
            Y.clear()
            d = -g / max(gnorm, 1e-300)
            slope = g @ d
        step = 1.0
        while True:
            xn = x + step * d
            fn, gn = fun(xn)
            if math.isnan(fn):
                raise SolverError(f"objective is NaN at inner iteration {it + 1}")
            if fn <= f + 1e-4 * step * slope:
                break
            step *= 0.5
            if step < 1e-20:
                return x, f, g, it, False
        it += 1
        s_, y_ = xn - x, gn - g
        if s_ @ y_ > 1e-12 * np.linalg.norm(s_) * np.linalg.norm(y_):
            S.append(s_)
            Y.append(y_)
            if len(S) > memory:
                S.pop(0)
                Y.pop(0)
        x, f, g = xn, fn, gn
        gnorm = np.linalg.norm(g)
        history.append(f)
    return x, f, g, it, gnorm <= tol * (1.0 + abs(f))


def _multiplier_estimate(g, p):
    # least-squares y1, y2 with g + y1 C1^T + C2 y2^T ~ 0
    M2, M1 = p.shape
    c1, c2 = p.c1, p.c2
    N = np.block([[np.eye(M2) * (c1 @ c1), np.outer(c2, c1)],
                  [np.outer(c1, c2), np.eye(M1) * (c2 @ c2)]])
    rhs = -np.concatenate([g @ c1, g.T @ c2])
    y = np.linalg.lstsq(N, rhs, rcond=None)[0]
    return y[:M2], y[M2:]


def solve(p: SgmdsProblem, cfg: SolverConfig | None = None, alpha0=None) -> FunctionalMapCoeffs:
    """Minimize the S-GMDS objective under the mass-preservation constraints.

    Each outer iteration minimizes the augmented Lagrangian
    ``f + y1.r1 + y2.r2 + rho/2 (|r1|^2 + |r2|^2)`` with L-BFGS, then updates
    the multipliers and multiplies ``rho`` by ``penalty_growth``. The result
    is ``converged`` once the constraint residual is at most
    ``constraint_tol * ||C2||`` and the inner solve met its tolerance.
    """
    cfg = cfg or SolverConfig()
    mu1, mu2 = _with_problem(p, cfg.mu1, cfg.mu2)
    data = (p.alpha1, p.alpha2, p.lambda1, p.lambda2, p.c1, p.c2, mu1, mu2)
    if not all(np.all(np.isfinite(x)) for x in data):
        raise SolverError("objective is NaN at iteration 0: the problem data is not finite")
    M2, M1 = p.shape
    alpha = init_alpha(p) if alpha0 is None else project_constraints(np.asarray(alpha0, float), p)
    if not np.all(np.isfinite(alpha)):
        raise SolverError("objective is NaN at iteration 0: the start point is not finite")
    c1, c2 = p.c1, p.c2
    tol1 = cfg.constraint_tol * np.linalg.norm(c2)
    tol2 = cfg.constraint_tol * np.linalg.norm(c1)

    start = alpha.copy()
    y1, y2 = _multiplier_estimate(_value_and_grad(alpha, p, mu1, mu2)[1], p)
    rho = cfg.penalty_start
    result = FunctionalMapCoeffs(alpha)
    total_inner = 0
    for outer in range(1, cfg.outer_iters + 1):

        def fun(x, rho=rho, y1=y1, y2=y2):
            a = x.reshape(M2, M1)
            f, g = _value_and_grad(a, p, mu1, mu2)
            r1 = a @ c1 - c2
            r2 = a.T @ c2 - c1
            f += y1 @ r1 + y2 @ r2 + 0.5 * rho * (r1 @ r1 + r2 @ r2)
            g = g + np.outer(y1 + rho * r1, c1) + np.outer(c2, y2 + rho * r2)
            return f, g.ravel()

        hist = []
        pre = _Preconditioner(p, alpha, mu1, mu2, rho)
        x, _, _, its, inner_ok = _lbfgs(fun, alpha.ravel(), cfg.inner_tol, cfg.inner_iters,
                                         cfg.memory, hist, pre)
        total_inner += its
        alpha = x.reshape(M2, M1)
        fval = objective(alpha, p, mu1, mu2)
        if math.isnan(fval):
            raise SolverError(f"objective is NaN after outer iteration {outer}")
        r1, r2 = residuals(alpha, p)
        n1, n2 = np.linalg.norm(r1), np.linalg.norm(r2)
        result.objective_history.append(fval)
        result.inner_history.append(hist)
        log.debug("outer %d: f=%.6g constraints=%.3g,%.3g inner=%d rho=%.3g", outer, fval, n1, n2,
                  its, rho)
        result.outer_iterations = outer
        if n1 <= tol1 and n2 <= tol2 and inner_ok:
            result.converged = True
            break
        y1 = y1 + rho * r1
        y2 = y2 + rho * r2
        rho *= cfg.penalty_growth

    # the multiplier terms can trade objective for constraint violation at
    # round-off level; never hand back something worse than a feasible start
    r1, r2 = residuals(start, p)
    if (np.linalg.norm(r1) <= tol1 and np.linalg.norm(r2) <= tol2
            and objective(start, p, mu1, mu2) < objective(alpha, p, mu1, mu2)):
        alpha = start
    result.alpha = alpha
    result.objective = objective(alpha, p, mu1, mu2)
    result.constraint_residual, result.transpose_residual = constraint_residuals(alpha, p)
    result.unitarity_residual = unitarity_residual(alpha)
    result.inner_iterations = total_inner
    if result.converged:
        result.message = "converged"
    else:
        result.message = (f"not converged after {result.outer_iterations} outer iterations "
                          f"(constraint residuals {result.constraint_residual:.3g}, "
                          f"{result.transpose_residual:.3g}; targets {tol1:.3g}, {tol2:.3g})")
        if abs(np.linalg.norm(c1) - np.linalg.norm(c2)) > cfg.constraint_tol * np.linalg.norm(c2):
            result.message += "; ||C1|| != ||C2|| (unequal areas) makes the constraints inconsistent"
        log.warning(result.message)
    return result
