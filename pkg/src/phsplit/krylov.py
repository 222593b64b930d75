"""Krylov solvers for the midpoint system of the conservative flow.

Two routes to ``x1`` solving ``(I - h/2 J) x1 = (I + h/2 J) x0`` with ``J``
skew-symmetric:

* ``gmres`` treats it as a general linear system,
* ``cayley_arnoldi`` evaluates the Cayley map ``(I - h/2 J)^{-1}(I + h/2 J)``
  on ``x0`` in the Krylov space of ``J``, built with a short skew-symmetric
  recurrence. Every iterate keeps the 2-norm of ``x0``.

Both record the residual norm and iterate norm at every iteration.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla

EPS = np.finfo(float).eps


@dataclass(frozen=True)
class LinearOperator:
    """Matrix-free operator ``v -> A v``.

    ``properties`` is a subset of ``{"skew_symmetric",
    "symmetric_positive_definite", "general"}``.
    """

    dim: int
    apply: Callable[[np.ndarray], np.ndarray]
    properties: frozenset = frozenset({"general"})

    def __matmul__(self, v):
        return self.apply(v)

    @classmethod
    def from_matrix(cls, A, properties=("general",)) -> LinearOperator:
        return cls(A.shape[0], lambda v: A @ v, frozenset(properties))


def linearity_defect(op: LinearOperator, rng: np.random.Generator, probes: int = 5) -> float:
    """Largest relative deviation from ``A(au + bv) = a Au + b Av`` on random probes."""
    worst = 0.0
    for _ in range(probes):
        u, v = rng.standard_normal((2, op.dim))
        a, b = rng.standard_normal(2)
        lhs = op.apply(a * u + b * v)
        rhs = a * op.apply(u) + b * op.apply(v)
        scale = max(np.linalg.norm(lhs), np.linalg.norm(rhs), 1e-300)
        worst = max(worst, np.linalg.norm(lhs - rhs) / scale)
    return worst


@dataclass
class KrylovReport:
    residual_norms: list = field(default_factory=list)
    iterate_norms: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    breakdown: bool = False
    iterates_kept: list | None = None

    def rows(self):
        return [
            (k + 1, r, xn) for k, (r, xn) in enumerate(zip(self.residual_norms, self.iterate_norms))
        ]

    def norm_deviations(self, reference_norm: float) -> np.ndarray:
        return np.abs(1.0 - np.asarray(self.iterate_norms) / reference_norm)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "residual_norm", "iterate_norm"])
            for k, r, xn in self.rows():
                w.writerow([k, repr(float(r)), repr(float(xn))])

    def _record(self, x, res, keep):
        self.residual_norms.append(float(res))
        self.iterate_norms.append(float(np.linalg.norm(x)))
        self.iterations = len(self.residual_norms)
        if keep:
            self.iterates_kept.append(x.copy())


def residual_of_cayley_system(J, h: float, x_candidate, x0) -> float:
    """``|(I - h/2 J) x_candidate - (I + h/2 J) x0|_2``."""
    a = 0.5 * h
    apply = J.apply if isinstance(J, LinearOperator) else (lambda v: J @ v)
    r = (x_candidate - a * apply(x_candidate)) - (x0 + a * apply(x0))
    return float(np.linalg.norm(r))


def stopping_rule_h2(h: float) -> float:
    """Absolute residual threshold ``h**2``, matching a second-order integrator."""
    if not h > 0:
        raise ValueError("h must be positive")
    return h * h


def gmres(A: LinearOperator, b, tol: float = 1e-10, maxit: int = 500, atol: float = 0.0,
          keep_iterates: bool = False):
    """Full (unrestarted) GMRES from a zero initial guess.

    Stops once ``|b - A x_k| <= max(tol |b|, atol)``. Each iteration forms the
    iterate explicitly, so the report holds true residual and iterate norms.

    Returns:
        ``(x, report)``. ``report.converged`` is False after ``maxit`` iterations or
        on a breakdown that leaves a nonzero residual.
    """
    b = np.asarray(b, dtype=float)
    n = b.size
    report = KrylovReport(iterates_kept=[] if keep_iterates else None)
    beta = np.linalg.norm(b)
    x = np.zeros(n)
    if beta == 0.0:
        report.converged = True
        return x, report
    threshold = max(tol * beta, atol)
    maxit = min(maxit, n)

    V = np.zeros((maxit + 1, n))
    H = np.zeros((maxit + 1, maxit))
    cs = np.zeros(maxit)
    sn = np.zeros(maxit)
    g = np.zeros(maxit + 1)
    g[0] = beta
    V[0] = b / beta
    for k in range(maxit):
        w = A.apply(V[k])
        for i in range(k + 1):
            H[i, k] = V[i] @ w
            w = w - H[i, k] * V[i]
        H[k + 1, k] = np.linalg.norm(w)
        breakdown = H[k + 1, k] <= 10 * EPS * np.linalg.norm(H[: k + 2, k])
        if not breakdown:
            V[k + 1] = w / H[k + 1, k]
        for i in range(k):
            hi, hi1 = H[i, k], H[i + 1, k]
            H[i, k] = cs[i] * hi + sn[i] * hi1
            H[i + 1, k] = -sn[i] * hi + cs[i] * hi1
        rho = np.hypot(H[k, k], H[k + 1, k])
        cs[k], sn[k] = H[k, k] / rho, H[k + 1, k] / rho
        H[k, k] = rho
        H[k + 1, k] = 0.0
        g[k + 1] = -sn[k] * g[k]
        g[k] = cs[k] * g[k]

        y = sla.solve_triangular(H[: k + 1, : k + 1], g[: k + 1])
        x = V[: k + 1].T @ y
        res = np.linalg.norm(b - A.apply(x))
        report._record(x, res, keep_iterates)
        if res <= threshold:
            report.converged = True
            break
        if breakdown:
            report.breakdown = True
            break
    return x, report


def cayley_arnoldi(J: LinearOperator, x0, h: float, tol: float = 1e-10, maxit: int = 500,
                   atol: float = 0.0, reorthogonalize: bool = True, keep_iterates: bool = False):
    """Cayley-transform action ``(I - h/2 J)^{-1}(I + h/2 J) x0`` for skew ``J``.

    Builds an orthonormal basis ``V_k`` of the Krylov space of ``J`` and ``x0``
    through the three-term recurrence ``J v_k = -b_{k-1} v_{k-1} + b_k v_{k+1}``;
    the projected matrix ``T_k = V_k^T J V_k`` is skew-symmetric tridiagonal. The
    k-th iterate is ``|x0| V_k (I - h/2 T_k)^{-1}(I + h/2 T_k) e_1``, whose
    norm equals ``|x0|`` since the small Cayley map is orthogonal.

    Stops once ``|(I - h/2 J) x_k - (I + h/2 J) x0| <= max(tol |(I + h/2 J) x0|, atol)``.

    Args:
        J: Skew-symmetric operator.
        x0: Starting vector.
        h: Step size.
        tol: Relative residual tolerance.
        maxit: Maximum Krylov dimension.
        atol: Absolute residual tolerance.
        reorthogonalize: One classical Gram-Schmidt pass against the whole basis
            per iteration.
        keep_iterates: Store every iterate in the report.

    Returns:
        ``(x1, report)``.
    """
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    report = KrylovReport(iterates_kept=[] if keep_iterates else None)
    beta0 = np.linalg.norm(x0)
    if beta0 == 0.0:
        report.converged = True
        return np.zeros(n), report
    a = 0.5 * h
    Jx0 = J.apply(x0)
    rhs = x0 + a * Jx0
    threshold = max(tol * np.linalg.norm(rhs), atol)
    maxit = min(maxit, n)

    V = np.zeros((maxit + 1, n))
    V[0] = x0 / beta0
    betas = np.zeros(maxit)
    x = x0.copy()
    for k in range(1, maxit + 1):
        T = np.zeros((k, k))
        idx = np.arange(k - 1)
        T[idx + 1, idx] = betas[: k - 1]
        T[idx, idx + 1] = -betas[: k - 1]
        e1 = np.zeros(k)
        e1[0] = 1.0
        c = np.linalg.solve(np.eye(k) - a * T, e1 + a * T[:, 0])
        x = beta0 * (V[:k].T @ c)
        res = np.linalg.norm((x - a * J.apply(x)) - rhs)
        report._record(x, res, keep_iterates)
        if res <= threshold:
            report.converged = True
            break
        if k == maxit:
            break

        w = J.apply(V[k - 1])
        if k > 1:
            w = w + betas[k - 2] * V[k - 2]
        if reorthogonalize:
            w = w - V[:k].T @ (V[:k] @ w)
        bk = np.linalg.norm(w)
        scale = max(betas[: k - 1].max() if k > 1 else 0.0, np.linalg.norm(Jx0) / beta0, 1e-300)
        if bk <= 10 * EPS * scale:
            # invariant subspace: the current iterate is the exact Cayley image
            report.breakdown = True
            report.converged = True
            break
        betas[k - 1] = bk
        V[k] = w / bk
    return x, report


def arnoldi_basis(J: LinearOperator, x0, k: int, reorthogonalize: bool = True):
    """First ``k`` basis vectors and the projected matrix of the skew recurrence.

    Exposed for diagnostics (orthogonality and structure checks).
    """
    x0 = np.asarray(x0, dtype=float)
    V = np.zeros((k, x0.size))
    V[0] = x0 / np.linalg.norm(x0)
    T = np.zeros((k, k))
    prev = 0.0
    for j in range(k - 1):
        w = J.apply(V[j])
        if j > 0:
            w = w + prev * V[j - 1]
        if reorthogonalize:
            w = w - V[: j + 1].T @ (V[: j + 1] @ w)
        prev = np.linalg.norm(w)
        V[j + 1] = w / prev
        T[j + 1, j] = prev
        T[j, j + 1] = -prev
    return V.T, T
