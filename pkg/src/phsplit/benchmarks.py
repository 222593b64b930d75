"""Benchmark systems: the damped two-mass oscillator and the mass-spring-damper chain."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from phsplit.core import InputSignal, QuadraticPHSystem, transform_system
from phsplit.integrators import EXPM_LIMIT, exact_linear_flow
from phsplit.krylov import LinearOperator

# dense eigensolve for the spectral radius up to this size, Lanczos above
DENSE_RADIUS_LIMIT = 400


@dataclass(frozen=True)
class TwoMassParams:
    m1: float = 200.0
    m2: float = 200.0
    K1: float = 10.0
    K2: float = 1000.0
    K: float = 10.0
    r1: float = 5.0
    r2: float = 2.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be positive")


@dataclass(frozen=True)
class MsdChainParams:
    """Single mass-spring-damper chain, wall-anchored at the first mass.

    ``mass``, ``stiffness`` and ``damping`` apply to every cell. The state
    dimension is ``2 * n_cells``.
    """

    n_cells: int = 500
    mass: float = 1.0
    stiffness: float = 1.0
    damping: float = 0.1
    input_ports: int = 0

    def __post_init__(self):
        if self.n_cells < 1:
            raise ValueError("n_cells must be at least 1")
        if not (self.mass > 0 and self.stiffness > 0):
            raise ValueError("mass and stiffness must be positive")
        if self.damping < 0:
            raise ValueError("damping must be non-negative")
        if not 0 <= self.input_ports <= self.n_cells:
            raise ValueError("input_ports must lie in [0, n_cells]")


TWO_MASS_J = np.array(
    [
        [0, 0, 0, 1, 0],
        [0, 0, 0, 1, -1],
        [0, 0, 0, 0, 1],
        [-1, -1, 0, 0, 0],
        [0, 1, -1, 0, 0],
    ],
    dtype=float,
)


def build_two_mass(params: TwoMassParams | None = None) -> QuadraticPHSystem:
    """Two damped masses coupled by a spring, state ``(q1, q1 - q2, q2, p1, p2)``."""
    p = params or TwoMassParams()
    return QuadraticPHSystem(
        J=TWO_MASS_J.copy(),
        R=np.diag([0.0, 0.0, 0.0, p.r1, p.r2]),
        Q=np.diag([p.K1, p.K, p.K2, 1.0 / p.m1, 1.0 / p.m2]),
        B=None,
        name="two_mass",
    )


def two_mass_initial_state() -> np.ndarray:
    """Mass 1 displaced by one unit, mass 2 at rest at the origin."""
    return np.array([1.0, 1.0, 0.0, 0.0, 0.0])


def _chain_J(n_cells: int) -> sp.csr_matrix:
    # interleaved (e_1, p_1, e_2, p_2, ...) with e_i the elongation of spring i
    n = 2 * n_cells
    e = np.arange(0, n, 2)
    p = e + 1
    rows = np.concatenate([e, p, e[1:], p[:-1]])
    cols = np.concatenate([p, e, p[:-1], e[1:]])
    vals = np.concatenate([np.ones(n_cells), -np.ones(n_cells), -np.ones(n_cells - 1), np.ones(n_cells - 1)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def build_msd_chain(params: MsdChainParams | None = None) -> QuadraticPHSystem:
    """Sparse chain wall-k-m-k-m-...-m with a damper on every mass.

    Spring ``i`` joins mass ``i-1`` (the wall for ``i = 1``) to mass ``i``. Inputs,
    if any, are forces on the first ``input_ports`` masses.
    """
    p = params or MsdChainParams()
    nc = p.n_cells
    n = 2 * nc
    q = np.empty(n)
    q[0::2] = p.stiffness
    q[1::2] = 1.0 / p.mass
    r = np.zeros(n)
    r[1::2] = p.damping
    B = np.zeros((n, p.input_ports))
    for j in range(p.input_ports):
        B[2 * j + 1, j] = 1.0
    return QuadraticPHSystem(
        J=_chain_J(nc),
        R=sp.diags(r).tocsr(),
        Q=sp.diags(q).tocsr(),
        B=B,
        name="msd_chain",
    )


def chain_J_apply(w: np.ndarray) -> np.ndarray:
    """``J @ w`` for the chain interconnection without an assembled matrix."""
    e, p = w[0::2], w[1::2]
    out = np.empty_like(w)
    out[0::2] = p
    out[2::2] -= p[:-1]
    out[1::2] = -e
    out[1:-1:2] += e[1:]
    return out


def msd_conservative_operator(sys: QuadraticPHSystem) -> LinearOperator:
    """Matrix-free ``J~ = Q^{1/2} J Q^{1/2}`` for a chain built by ``build_msd_chain``."""
    if sys.name != "msd_chain":
        raise ValueError("operator requires a system from build_msd_chain")
    s = np.sqrt(sys.Q.diagonal())
    return LinearOperator(sys.n, lambda v: s * chain_J_apply(s * v), frozenset({"skew_symmetric"}))


def conservative_operator(sysT: QuadraticPHSystem) -> LinearOperator:
    return LinearOperator(sysT.n, lambda v: sysT.J @ v, frozenset({"skew_symmetric"}))


def _skew_tridiagonal_band(Jt):
    """Subdiagonal of ``Jt`` if it is sparse, skew and tridiagonal, else None."""
    if not sp.issparse(Jt) or Jt.shape[0] < 2:
        return None
    C = Jt.tocoo()
    if np.any(np.abs(C.row - C.col) != 1):
        return None
    return Jt.diagonal(-1)


def spectral_radius(sys: QuadraticPHSystem) -> float:
    """Spectral radius of ``J~ = Q^{1/2} J Q^{1/2}``.

    ``J~`` is skew, so the radius is the square root of the largest eigenvalue
    of ``-J~^2 = J~^T J~``. Sparse skew tridiagonal ``J~`` (the chain) uses a
    tridiagonal eigensolve; otherwise a dense eigensolve for small systems and
    ARPACK Lanczos on the matrix-free product for large ones.
    """
    Jt = transform_system(sys).J
    band = _skew_tridiagonal_band(Jt)
    if band is not None:
        # i * J~ is similar to the symmetric tridiagonal matrix with off-diagonal |b_k|
        if not band.any():
            return 0.0
        lam = sla.eigvalsh_tridiagonal(np.zeros(sys.n), np.abs(band), select="i",
                                       select_range=(sys.n - 1, sys.n - 1))
        return float(lam[0])
    if sys.n <= DENSE_RADIUS_LIMIT:
        Jd = Jt.toarray() if sp.issparse(Jt) else Jt
        lam = np.linalg.eigvalsh(Jd.T @ Jd)[-1]
        return float(np.sqrt(max(lam, 0.0)))
    op = spla.LinearOperator((sys.n, sys.n), matvec=lambda v: Jt.T @ (Jt @ v), dtype=float)
    v0 = np.random.default_rng(0).standard_normal(sys.n)
    lam = spla.eigsh(op, k=1, which="LA", tol=1e-14, v0=v0, return_eigenvectors=False)[0]
    return float(np.sqrt(max(lam, 0.0)))


def scale_to_spectral_radius(sys: QuadraticPHSystem, target: float) -> QuadraticPHSystem:
    """Rescale stiffnesses and inverse masses uniformly so that ``rho(J~) = target``.

    Multiplying ``Q`` by ``c`` multiplies ``J~`` (and the whole generator
    ``(J - R) Q``) by ``c``, i.e. a pure change of time scale.

    Raises:
        ValueError: if ``target <= 0`` or ``J~`` vanishes.
    """
    if not target > 0:
        raise ValueError("target must be positive")
    rho = spectral_radius(sys)
    if not rho > 0:
        raise ValueError("J~ has zero spectral radius; no scaling reaches the target")
    c = target / rho
    return QuadraticPHSystem(J=sys.J, R=sys.R, Q=sys.Q * c, B=sys.B, name=sys.name)


def chain_max_frequency(n_cells: int, mass: float = 1.0, stiffness: float = 1.0) -> float:
    """Closed-form top eigenfrequency of the uniform wall-anchored chain.

    The fixed-free chain has frequencies
    ``2 sqrt(k/m) sin((2j - 1) pi / (2 (2n + 1)))``, ``j = 1..n``.
    """
    return 2.0 * np.sqrt(stiffness / mass) * np.cos(np.pi / (2 * n_cells + 1))


def reference_solution(sys: QuadraticPHSystem, x0, t_eval: float, u: InputSignal | None = None,
                       t0: float = 0.0, nodes: int = 6) -> np.ndarray:
    """Exact state at ``t_eval`` via the dense exponential of ``(J - R) Q``.

    Raises:
        ValueError: for ``n > EXPM_LIMIT``; integrate with a fine-step midpoint
            scheme instead.
    """
    if sys.n > EXPM_LIMIT:
        raise ValueError(
            f"reference_solution needs a dense exponential (n = {sys.n} > {EXPM_LIMIT}); "
            "use a fine-step midpoint integration as reference instead"
        )
    return exact_linear_flow(sys, x0, t_eval - t0, "full", u, t0, nodes)


BENCHMARKS = {
    "two_mass": (TwoMassParams, build_two_mass),
    "msd_chain": (MsdChainParams, build_msd_chain),
}


def make_benchmark(name: str, params: dict | None = None) -> QuadraticPHSystem:
    """Build a benchmark by name.

    ``msd_chain`` accepts an extra ``spectral_radius`` entry (default 10) to
    which the chain is calibrated; ``null`` skips calibration.
    """
    if name not in BENCHMARKS:
        raise KeyError(f"unknown benchmark {name!r}; choose from {sorted(BENCHMARKS)}")
    params = dict(params or {})
    target = params.pop("spectral_radius", 10.0) if name == "msd_chain" else None
    cls, build = BENCHMARKS[name]
    sys = build(cls(**params))
    if target is not None:
        sys = scale_to_spectral_radius(sys, float(target))
    return sys


def benchmark_params(name: str, params: dict | None = None) -> dict:
    cls, _ = BENCHMARKS[name]
    out = asdict(cls())
    out.update(params or {})
    return out
