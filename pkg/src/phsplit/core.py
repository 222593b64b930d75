"""Port-Hamiltonian system models, structural checks and energy bookkeeping.

A linear port-Hamiltonian system with quadratic energy reads

    x' = (J - R) Q x + B u,    y = B^T Q x,    H(x) = 1/2 x^T Q x,

with ``J`` skew-symmetric, ``R`` symmetric positive semi-definite and ``Q``
symmetric positive definite. Matrices may be dense numpy arrays or
``scipy.sparse`` matrices; the latter is required for long chains.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

Array = np.ndarray

STRUCTURE_RTOL = 1e-12
# above this size the PSD check switches from a full eigensolve to a shifted factorization probe
DENSE_EIG_LIMIT = 2000


class StructureError(ValueError):
    """Matrix dimensions are inconsistent with the declared system size."""


class DefinitenessError(ValueError):
    """A matrix required to be positive definite is not."""

    def __init__(self, message: str, smallest_eigenvalue: float):
        super().__init__(message)
        self.smallest_eigenvalue = smallest_eigenvalue


def _dense(A) -> Array:
    return A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)


def _max_abs(A) -> float:
    if sp.issparse(A):
        return float(abs(A).max()) if A.nnz else 0.0
    return float(np.max(np.abs(A))) if A.size else 0.0


def is_diagonal(A) -> bool:
    if sp.issparse(A):
        coo = A.tocoo()
        return bool(np.all(coo.row[coo.data != 0] == coo.col[coo.data != 0]))
    A = np.asarray(A)
    return bool(np.count_nonzero(A - np.diag(np.diag(A))) == 0)


def _diagonal(A) -> Array:
    return A.diagonal() if sp.issparse(A) else np.diag(A).copy()


@dataclass(frozen=True)
class QuadraticPHSystem:
    """Constant-coefficient port-Hamiltonian system with ``H(x) = 1/2 x^T Q x``.

    Args:
        J: Skew-symmetric interconnection matrix, shape (n, n).
        R: Symmetric positive semi-definite dissipation matrix, shape (n, n).
        Q: Symmetric positive definite energy weight, shape (n, n).
        B: Port matrix of shape (n, d). ``None`` means no ports (d = 0).
    """

    J: Array
    R: Array
    Q: Array
    B: Array | None = None
    name: str = ""

    def __post_init__(self):
        J = self.J if sp.issparse(self.J) else np.asarray(self.J, dtype=float)
        n = J.shape[0]
        object.__setattr__(self, "J", J)
        for attr in ("R", "Q"):
            M = getattr(self, attr)
            if not sp.issparse(M):
                M = np.asarray(M, dtype=float)
                object.__setattr__(self, attr, M)
        B = self.B
        if B is None:
            B = np.zeros((n, 0))
        elif not sp.issparse(B):
            B = np.asarray(B, dtype=float)
            if B.ndim == 1:
                B = B.reshape(n, -1) if B.size else np.zeros((n, 0))
        object.__setattr__(self, "B", B)
        for attr in ("J", "R", "Q"):
            shape = getattr(self, attr).shape
            if shape != (n, n):
                raise StructureError(f"{attr} has shape {shape}, expected ({n}, {n})")
        if B.shape[0] != n:
            raise StructureError(f"B has {B.shape[0]} rows, expected {n}")

    @property
    def n(self) -> int:
        return self.J.shape[0]

    @property
    def d(self) -> int:
        return self.B.shape[1]

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.J)

    def grad(self, x: Array) -> Array:
        return self.Q @ x

    def J_at(self, x: Array):
        return self.J

    def R_at(self, x: Array):
        return self.R

    def B_at(self, x: Array):
        return self.B

    @cached_property
    def congruence(self) -> CongruenceTransform:
        return congruence_from(self.Q)

    def rhs(self, x: Array, u: Array | None = None) -> Array:
        """Full right-hand side ``(J - R) Q x + B u``."""
        g = self.Q @ x
        f = self.J @ g - self.R @ g
        if self.d and u is not None:
            f = f + self.B @ u
        return f


@dataclass(frozen=True)
class NonlinearPHSystem:
    """Port-Hamiltonian system with state-dependent structure and general energy.

    All callables take a state vector ``x`` of length ``n``.
    """

    n: int
    d: int
    J_of: Callable[[Array], Array]
    R_of: Callable[[Array], Array]
    B_of: Callable[[Array], Array]
    H_of: Callable[[Array], float]
    gradH_of: Callable[[Array], Array]
    name: str = ""

    is_sparse = False

    def grad(self, x: Array) -> Array:
        return np.asarray(self.gradH_of(x), dtype=float)

    def J_at(self, x: Array) -> Array:
        return np.asarray(self.J_of(x), dtype=float)

    def R_at(self, x: Array) -> Array:
        return np.asarray(self.R_of(x), dtype=float)

    def B_at(self, x: Array) -> Array:
        B = np.asarray(self.B_of(x), dtype=float)
        return B.reshape(self.n, self.d)

    def rhs(self, x: Array, u: Array | None = None) -> Array:
        g = self.grad(x)
        f = (self.J_at(x) - self.R_at(x)) @ g
        if self.d and u is not None:
            f = f + self.B_at(x) @ u
        return f


PHSystem = QuadraticPHSystem | NonlinearPHSystem


@dataclass(frozen=True)
class InputSignal:
    """Port input ``u(t)`` returning a vector of length ``d``."""

    u_of: Callable[[float], Array]
    description: str = ""

    def __call__(self, t: float) -> Array:
        return np.atleast_1d(np.asarray(self.u_of(t), dtype=float))

    @classmethod
    def zero(cls, d: int) -> InputSignal:
        return cls(lambda t: np.zeros(d), description="zero")

    @classmethod
    def constant(cls, value) -> InputSignal:
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(lambda t: value.copy(), description=f"constant {value.tolist()}")

    @classmethod
    def sine(cls, amplitude, frequency: float, phase: float = 0.0) -> InputSignal:
        amplitude = np.atleast_1d(np.asarray(amplitude, dtype=float))
        return cls(
            lambda t: amplitude * np.sin(frequency * t + phase),
            description=f"sine amplitude={amplitude.tolist()} frequency={frequency}",
        )


def evaluate_input(u: InputSignal | None, t: float, d: int) -> Array:
    if u is None or d == 0:
        return np.zeros(d)
    val = u(t)
    if val.shape != (d,):
        raise StructureError(f"input returned shape {val.shape}, expected ({d},)")
    return val


@dataclass(frozen=True)
class State:
    x: Array
    t: float = 0.0


@dataclass(frozen=True)
class TimeAugmentedState:
    """State plus the autonomisation clock ``s``.

    Dissipative substeps advance ``s`` with the step, conservative ones leave it
    untouched.
    """

    x: Array
    s: float = 0.0


@dataclass(frozen=True)
class EnergyBalance:
    dissipated: float = 0.0
    supplied: float = 0.0

    def __add__(self, other: EnergyBalance) -> EnergyBalance:
        return EnergyBalance(self.dissipated + other.dissipated, self.supplied + other.supplied)


@dataclass(frozen=True)
class StepResult:
    """Outcome of one (sub)step.

    ``energy_balance`` holds the energy dissipated and supplied through the
    ports over this step only. ``substeps`` is filled by composite steps.
    """

    state: State
    y: Array
    H_value: float
    energy_balance: EnergyBalance = field(default_factory=EnergyBalance)
    substeps: tuple = ()
    H_start: float | None = None

    @property
    def x(self) -> Array:
        return self.state.x

    @property
    def t(self) -> float:
        return self.state.t


@dataclass(frozen=True)
class Violation:
    matrix: str
    property: str
    defect: float

    def __str__(self):
        return f"{self.matrix}: {self.property} violated (defect {self.defect:.3e})"


@dataclass(frozen=True)
class CongruenceTransform:
    """Symmetric square root of ``Q`` and its inverse.

    ``x_tilde = Q_half @ x`` maps into coordinates where the energy is
    ``1/2 |x_tilde|^2``.
    """

    Q_half: Array
    Q_half_inv: Array
    provenance: str

    def to_tilde(self, x: Array) -> Array:
        return self.Q_half @ x

    def from_tilde(self, xt: Array) -> Array:
        return self.Q_half_inv @ xt


def _check_vector(sys, x: Array) -> Array:
    x = np.asarray(x, dtype=float)
    if x.shape != (sys.n,):
        raise StructureError(f"state has shape {x.shape}, expected ({sys.n},)")
    return x


def _smallest_eigenvalue(S) -> float:
    n = S.shape[0]
    if n == 0:
        return np.inf
    if n <= DENSE_EIG_LIMIT:
        return float(np.linalg.eigvalsh(_dense(S))[0])
    # ARPACK on the shifted operator; only the sign matters to callers
    return float(spla.eigsh(sp.csr_matrix(S), k=1, which="SA", return_eigenvectors=False)[0])


def _psd_probe(S, shift: float) -> bool:
    """Positive definiteness of ``S + shift*I`` by a pivot-free factorization.

    For a symmetric matrix an LU factorization without pivoting exists and has
    all positive pivots exactly when the matrix is positive definite.
    """
    n = S.shape[0]
    if sp.issparse(S):
        M = (S + shift * sp.eye(n)).tocsc()
        try:
            lu = spla.splu(M, permc_spec="NATURAL", diag_pivot_thresh=0.0,
                           options={"SymmetricMode": True})
        except RuntimeError:
            return False
        return bool(np.all(lu.U.diagonal() > 0) and np.all(lu.perm_r == np.arange(n)))
    try:
        np.linalg.cholesky(_dense(S) + shift * np.eye(n))
    except np.linalg.LinAlgError:
        return False
    return True


def validate_structure(sys: QuadraticPHSystem) -> list[Violation]:
    """Check skewness of J, PSD-ness of R and definiteness of Q.

    Returns:
        One ``Violation`` per failed property; empty when the system is valid.

    Raises:
        StructureError: if matrix dimensions disagree.
    """
    n = sys.J.shape[0]
    for name in ("R", "Q"):
        if getattr(sys, name).shape != (n, n):
            raise StructureError(f"{name} has shape {getattr(sys, name).shape}, expected ({n}, {n})")
    if sys.B.shape[0] != n:
        raise StructureError(f"B has {sys.B.shape[0]} rows, expected {n}")

    out = []
    J, R, Q = sys.J, sys.R, sys.Q
    scale = max(_max_abs(J), np.finfo(float).tiny)
    skew_defect = _max_abs(J + J.T)
    if skew_defect > STRUCTURE_RTOL * scale:
        out.append(Violation("J", "skew-symmetry", skew_defect))

    r_scale = _max_abs(R)
    r_sym = _max_abs(R - R.T)
    if r_sym > STRUCTURE_RTOL * max(r_scale, np.finfo(float).tiny):
        out.append(Violation("R", "symmetry", r_sym))
    elif r_scale > 0:
        if n <= DENSE_EIG_LIMIT or is_diagonal(R):
            lam = float(np.min(_diagonal(R))) if is_diagonal(R) else _smallest_eigenvalue(R)
            if lam < -STRUCTURE_RTOL * r_scale:
                out.append(Violation("R", "positive semi-definiteness", -lam))
        elif not _psd_probe(R, STRUCTURE_RTOL * r_scale):
            out.append(Violation("R", "positive semi-definiteness", float("nan")))

    q_scale = _max_abs(Q)
    q_sym = _max_abs(Q - Q.T)
    if q_sym > STRUCTURE_RTOL * max(q_scale, np.finfo(float).tiny):
        out.append(Violation("Q", "symmetry", q_sym))
    else:
        lam = float(np.min(_diagonal(Q))) if is_diagonal(Q) else _smallest_eigenvalue(Q)
        if not lam > 0:
            out.append(Violation("Q", "positive definiteness", -lam))
    return out


def check_nonlinear_structure(sys: NonlinearPHSystem, x: Array) -> list[Violation]:
    """Structural check of a state-dependent system at one state."""
    x = _check_vector(sys, x)
    frozen = QuadraticPHSystem(J=sys.J_at(x), R=sys.R_at(x), Q=np.eye(sys.n), B=sys.B_at(x))
    return validate_structure(frozen)


def gradient(sys, x: Array) -> Array:
    return sys.grad(_check_vector(sys, x))


def hamiltonian(sys, x: Array) -> float:
    """Energy ``1/2 x^T Q x`` (quadratic) or ``H_of(x)`` (nonlinear)."""
    x = _check_vector(sys, x)
    if isinstance(sys, NonlinearPHSystem):
        return float(sys.H_of(x))
    return 0.5 * float(x @ (sys.Q @ x))


def output(sys, x: Array) -> Array:
    """Port output ``B(x)^T grad H(x)``."""
    x = _check_vector(sys, x)
    return np.asarray(sys.B_at(x).T @ sys.grad(x)).ravel()


def congruence_from(Q) -> CongruenceTransform:
    """Principal square root of an SPD matrix and its inverse.

    Diagonal matrices take entrywise roots (kept sparse when given sparse);
    anything else goes through a symmetric eigendecomposition.

    Raises:
        DefinitenessError: if ``Q`` is not positive definite.
    """
    if is_diagonal(Q):
        q = _diagonal(Q)
        if q.size and not np.min(q) > 0:
            raise DefinitenessError(
                f"Q is not positive definite: smallest eigenvalue {np.min(q):.3e}", float(np.min(q))
            )
        root = np.sqrt(q)
        if sp.issparse(Q):
            return CongruenceTransform(sp.diags(root).tocsr(), sp.diags(1.0 / root).tocsr(), "diagonal")
        return CongruenceTransform(np.diag(root), np.diag(1.0 / root), "diagonal")

    Qd = _dense(Q)
    if not np.allclose(Qd, Qd.T, rtol=0, atol=STRUCTURE_RTOL * max(_max_abs(Qd), 1e-300)):
        raise DefinitenessError("Q is not symmetric", float("nan"))
    lam, V = np.linalg.eigh(0.5 * (Qd + Qd.T))
    if not lam[0] > 0:
        raise DefinitenessError(
            f"Q is not positive definite: smallest eigenvalue {lam[0]:.3e}", float(lam[0])
        )
    root = np.sqrt(lam)
    Q_half = (V * root) @ V.T
    Q_half_inv = (V / root) @ V.T
    return CongruenceTransform(0.5 * (Q_half + Q_half.T), 0.5 * (Q_half_inv + Q_half_inv.T),
                               "eigendecomposition")


def transform_system(sys: QuadraticPHSystem, ct: CongruenceTransform | None = None) -> QuadraticPHSystem:
    """Rewrite ``sys`` in coordinates ``x_tilde = Q^{1/2} x``.

    The result has ``Q = I``, ``J~ = Q^{1/2} J Q^{1/2}``, ``R~ = Q^{1/2} R Q^{1/2}``
    and ``B~ = Q^{1/2} B``.
    """
    ct = sys.congruence if ct is None else ct
    S = ct.Q_half
    J = S @ sys.J @ S
    R = S @ sys.R @ S
    B = S @ sys.B
    if sp.issparse(J):
        # congruence keeps skewness exactly only after explicit (anti)symmetrisation
        J = (0.5 * (J - J.T)).tocsr()
        R = (0.5 * (R + R.T)).tocsr()
        I = sp.identity(sys.n, format="csr")
        B = B.toarray() if sp.issparse(B) else B
    else:
        J = 0.5 * (J - J.T)
        R = 0.5 * (R + R.T)
        I = np.eye(sys.n)
    return QuadraticPHSystem(J=J, R=R, Q=I, B=B, name=sys.name + "~" if sys.name else "")


@dataclass(frozen=True)
class DissipativityReport:
    lhs: float
    bound: float
    dissipated: float
    satisfied: bool


def dissipativity_ledger(sys, trajectory: Sequence[StepResult]) -> DissipativityReport:
    """Check ``H(end) - H(start) <= supplied energy`` over a trajectory.

    The supplied energy is the sum of the per-step ``energy_balance.supplied``
    entries, i.e. the same quadrature of ``y^T u`` that produced each step.
    """
    if len(trajectory) == 0:
        raise ValueError("trajectory is empty")
    first = trajectory[0]
    H0 = first.H_start if first.H_start is not None else first.H_value
    steps = trajectory[1:] if first.H_start is None else trajectory
    bound = float(sum(s.energy_balance.supplied for s in steps))
    dissipated = float(sum(s.energy_balance.dissipated for s in steps))
    lhs = trajectory[-1].H_value - H0
    return DissipativityReport(
        lhs=lhs, bound=bound, dissipated=dissipated,
        satisfied=bool(lhs <= bound + 1e-10 * (1 + abs(bound))),
    )
