"""Substep integrators for the conservative and dissipative flows.

Everything here advances one flow over one step: discrete-gradient steps
(average vector field plus Newton), linear implicit-midpoint solves in
congruence coordinates, exact matrix-exponential flows, nested multirate
stepping and a fourth-order triple-jump composition for the conservative
part.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from phsplit import krylov
from phsplit.core import (
    EnergyBalance,
    InputSignal,
    NonlinearPHSystem,
    QuadraticPHSystem,
    State,
    StepResult,
    TimeAugmentedState,
    evaluate_input,
    hamiltonian,
    is_diagonal,
)

# dense matrix exponentials beyond this size are refused
EXPM_LIMIT = 2000

PARTS = ("conservative", "dissipative", "full")

TRIPLE_JUMP_OUTER = 1.0 / (2.0 - 2.0 ** (1.0 / 3.0))
TRIPLE_JUMP_INNER = 1.0 - 2.0 * TRIPLE_JUMP_OUTER


class StepFailure(RuntimeError):
    """A substep could not be completed (e.g. Newton did not converge)."""

    def __init__(self, message: str, residual: float = float("nan"), index: int | None = None):
        super().__init__(message)
        self.residual = residual
        self.index = index


@dataclass(frozen=True)
class DiscreteGradientStepConfig:
    """Newton and quadrature settings for discrete-gradient steps.

    ``newton_tol=None`` selects ``1e-12 * (1 + |x0|)``.
    """

    newton_tol: float | None = None
    newton_max_iter: int = 25
    quadrature_nodes: int = 3
    input_average_rule: str = "midpoint-of-endpoints"

    def __post_init__(self):
        if self.newton_tol is not None and not self.newton_tol > 0:
            raise ValueError("newton_tol must be positive")
        if self.quadrature_nodes < 1:
            raise ValueError("quadrature_nodes must be at least 1")
        if self.newton_max_iter < 1:
            raise ValueError("newton_max_iter must be at least 1")
        if self.input_average_rule != "midpoint-of-endpoints":
            raise ValueError(f"unknown input rule {self.input_average_rule!r}")


@dataclass(frozen=True)
class MultirateConfig:
    m: int = 8
    inner_scheme: str = "discrete-gradient"

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be at least 1")
        if self.inner_scheme not in ("discrete-gradient", "exact", "composition4"):
            raise ValueError(f"unknown inner scheme {self.inner_scheme!r}")


@dataclass(frozen=True)
class LinearSolverChoice:
    """Solver for the linear midpoint system of the conservative flow.

    ``method`` is one of ``direct``, ``gmres`` or ``cayley_arnoldi``. Iterative
    methods stop at ``max(tol * |rhs|, atol)``.
    """

    method: str = "direct"
    tol: float = 1e-12
    atol: float = 0.0
    maxit: int = 500

    def __post_init__(self):
        if self.method not in ("direct", "gmres", "cayley_arnoldi"):
            raise ValueError(f"unknown linear solver {self.method!r}")


def _gauss_legendre(nodes: int):
    xi, w = np.polynomial.legendre.leggauss(nodes)
    return 0.5 * (xi + 1.0), 0.5 * w


def _identity(n, sparse):
    return sp.identity(n, format="csc") if sparse else np.eye(n)


def _solve(A, b):
    if sp.issparse(A):
        return spla.spsolve(A.tocsc(), b)
    return np.linalg.solve(A, b)


def _dense(A):
    return A.toarray() if sp.issparse(A) else np.asarray(A)


def avf_discrete_gradient(sys, x0, x1, nodes: int = 3):
    """Average-vector-field discrete gradient of H between ``x0`` and ``x1``.

    Exact ``Q (x0 + x1) / 2`` for quadratic energies, Gauss-Legendre
    quadrature of ``int_0^1 grad H((1 - xi) x0 + xi x1) dxi`` otherwise.
    """
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    if isinstance(sys, QuadraticPHSystem):
        return sys.Q @ (0.5 * (x0 + x1))
    xi, w = _gauss_legendre(nodes)
    out = np.zeros_like(x0)
    for s, ws in zip(xi, w):
        out += ws * sys.grad((1.0 - s) * x0 + s * x1)
    return out


def _part_matrices(sys, xm, part):
    J = sys.J_at(xm)
    R = sys.R_at(xm)
    B = sys.B_at(xm)
    n = sys.n
    if part == "conservative":
        R = sp.csr_matrix((n, n)) if sp.issparse(J) else np.zeros((n, n))
        B = np.zeros((n, 0)) if not sp.issparse(B) else sp.csr_matrix((n, 0))
    elif part == "dissipative":
        J = sp.csr_matrix((n, n)) if sp.issparse(R) else np.zeros((n, n))
    return J, R, B


def _fd_jacobian(F, x, F0):
    n = x.size
    Jac = np.empty((n, n))
    for j in range(n):
        eps = 1e-7 * (1.0 + abs(x[j]))
        xp = x.copy()
        xp[j] += eps
        Jac[:, j] = (F(xp) - F0) / eps
    return Jac


def discrete_gradient_step(sys, state, h: float, u: InputSignal | None = None,
                           cfg: DiscreteGradientStepConfig | None = None,
                           part: str = "full") -> StepResult:
    """One discrete-gradient step of the chosen flow.

    Solves ``(x1 - x0)/h = (J - R) dgH(x0, x1) + B u_bar`` by Newton iteration,
    with ``J, R, B`` frozen at ``(x0 + x1)/2`` and
    ``u_bar = (u(t0) + u(t0 + h))/2``. ``part="conservative"`` drops ``R`` and
    ``B`` and leaves the clock alone; ``part="dissipative"`` drops ``J``.

    Args:
        sys: Quadratic or nonlinear port-Hamiltonian system.
        state: ``TimeAugmentedState`` or ``State`` to step from.
        h: Positive step size.
        u: Port input; ``None`` means zero input.
        cfg: Newton/quadrature settings.
        part: ``"full"``, ``"conservative"`` or ``"dissipative"``.

    Returns:
        StepResult with the discrete output ``y1 = B^T dgH`` and the energy
        ledger ``dissipated = h dgH^T R dgH``, ``supplied = h y1^T u_bar``.

    Raises:
        ValueError: for ``h <= 0``.
        StepFailure: if Newton stalls after ``cfg.newton_max_iter`` iterations.
    """
    if part not in PARTS:
        raise ValueError(f"unknown part {part!r}")
    if not h > 0:
        raise ValueError("discrete-gradient steps require h > 0")
    cfg = cfg or DiscreteGradientStepConfig()
    x0 = np.asarray(state.x, dtype=float)
    t0 = state.s if isinstance(state, TimeAugmentedState) else state.t
    advances_clock = part != "conservative"
    t1 = t0 + h if advances_clock else t0
    d = sys.d
    if part == "conservative" or d == 0:
        ubar = np.zeros(d if part != "conservative" else 0)
    else:
        ubar = 0.5 * (evaluate_input(u, t0, d) + evaluate_input(u, t1, d))
    tol = cfg.newton_tol if cfg.newton_tol is not None else 1e-12 * (1.0 + np.linalg.norm(x0))
    linear = isinstance(sys, QuadraticPHSystem)

    if linear:
        J, R, B = _part_matrices(sys, x0, part)
        forcing = (B @ ubar) if ubar.size else 0.0
        A = (J - R) @ sys.Q
        I = _identity(sys.n, sp.issparse(A))
        jac = I - 0.5 * h * A

        def residual(x1):
            return x1 - x0 - h * (A @ (0.5 * (x0 + x1)) + forcing)
    else:
        def residual(x1):
            xm = 0.5 * (x0 + x1)
            J, R, B = _part_matrices(sys, xm, part)
            g = avf_discrete_gradient(sys, x0, x1, cfg.quadrature_nodes)
            f = (J - R) @ g
            if ubar.size:
                f = f + B @ ubar
            return x1 - x0 - h * f

    x1 = x0.copy()
    F = residual(x1)
    if linear:
        # one Newton step with the exact Jacobian solves the linear relation
        x1 = x1 - _solve(jac, F)
        F = residual(x1)
    res = np.linalg.norm(F)
    it = 0
    while res > tol:
        if it >= cfg.newton_max_iter:
            raise StepFailure(f"Newton did not converge in {it} iterations (residual {res:.3e})", res)
        Jac = jac if linear else _fd_jacobian(residual, x1, F)
        x1 = x1 - _solve(Jac, F)
        F = residual(x1)
        res = np.linalg.norm(F)
        it += 1

    xm = 0.5 * (x0 + x1)
    J, R, B = _part_matrices(sys, xm, part)
    g = avf_discrete_gradient(sys, x0, x1, cfg.quadrature_nodes)
    y1 = np.asarray(B.T @ g).ravel() if ubar.size else np.zeros(0)
    balance = EnergyBalance(
        dissipated=float(h * (g @ (R @ g))),
        supplied=float(h * (y1 @ ubar)) if ubar.size else 0.0,
    )
    return StepResult(
        state=State(x1, t1),
        y=y1,
        H_value=hamiltonian(sys, x1),
        energy_balance=balance,
        H_start=hamiltonian(sys, x0),
    )


def _as_operator(A, properties):
    return krylov.LinearOperator(A.shape[0], lambda v, A=A: A @ v, frozenset(properties))


def midpoint_conservative_linear(sysT: QuadraticPHSystem, x0, h: float,
                                 solver: LinearSolverChoice | None = None,
                                 report: list | None = None):
    """Implicit-midpoint step of ``x' = J Q x``.

    Solves ``(I - h/2 J~) x1 = (I + h/2 J~) x0``. With ``Q = I`` the system is
    taken as given; otherwise the direct route solves in the original
    coordinates and the Krylov routes pass through ``Q^{1/2}``.

    Args:
        sysT: Quadratic system (normally already in congruence coordinates).
        x0: Initial state.
        h: Step size; may be negative.
        solver: Linear solver choice, direct by default.
        report: If given, the ``KrylovReport`` of an iterative solve is appended.

    Returns:
        The new state.

    Raises:
        StepFailure: if an iterative solve stops unconverged.
    """
    solver = solver or LinearSolverChoice()
    x0 = np.asarray(x0, dtype=float)
    identity_q = is_diagonal(sysT.Q) and np.all(
        (sysT.Q.diagonal() if sp.issparse(sysT.Q) else np.diag(sysT.Q)) == 1.0)
    if h == 0:
        return x0.copy()

    if solver.method == "direct":
        A = sysT.J if identity_q else sysT.J @ sysT.Q
        I = _identity(sysT.n, sp.issparse(A))
        return _solve(I - 0.5 * h * A, x0 + 0.5 * h * (A @ x0))

    if not identity_q:
        ct = sysT.congruence
        S = ct.Q_half
        Jt = S @ sysT.J @ S
        xt = midpoint_conservative_linear(
            QuadraticPHSystem(J=Jt, R=sysT.R * 0, Q=_identity(sysT.n, sp.issparse(Jt))),
            ct.to_tilde(x0), h, solver, report)
        return ct.from_tilde(xt)

    Jop = _as_operator(sysT.J, {"skew_symmetric"})
    if solver.method == "cayley_arnoldi":
        x1, rep = krylov.cayley_arnoldi(Jop, x0, h, tol=solver.tol, maxit=solver.maxit,
                                        atol=solver.atol)
    else:
        a = 0.5 * h
        Aop = krylov.LinearOperator(sysT.n, lambda v: v - a * (sysT.J @ v), frozenset({"general"}))
        b = x0 + a * (sysT.J @ x0)
        x1, rep = krylov.gmres(Aop, b, tol=solver.tol, maxit=solver.maxit, atol=solver.atol)
    if report is not None:
        report.append(rep)
    if not rep.converged:
        last = rep.residual_norms[-1] if rep.residual_norms else float("nan")
        raise StepFailure(f"{solver.method} did not converge in {rep.iterations} iterations", last)
    return x1


def midpoint_dissipative_linear(sysT: QuadraticPHSystem, x0, h_half: float, u0=None, u1=None,
                                method: str = "cholesky"):
    """Implicit-midpoint step of ``x' = -R~ x + B~ u`` over a substep of length ``h_half``.

    Solves ``(I + h_half/2 R~) x1 = (I - h_half/2 R~) x0 + h_half B~ (u0 + u1)/2``;
    with ``h_half = h/2`` this is the ``I + h/4 R~`` system of a Strang half-step.
    The matrix is symmetric positive definite for PSD ``R~``.

    Args:
        method: ``"cholesky"`` (dense) or ``"cg"`` (conjugate gradients).
    """
    x0 = np.asarray(x0, dtype=float)
    R = sysT.R
    a = 0.5 * h_half
    rhs = x0 - a * (R @ x0)
    if sysT.d and u0 is not None:
        ubar = 0.5 * (np.asarray(u0, dtype=float) + np.asarray(u1 if u1 is not None else u0, dtype=float))
        rhs = rhs + h_half * (sysT.B @ ubar)
    n = sysT.n
    if method == "cholesky":
        M = _dense(R) * a + np.eye(n)
        try:
            factor = sla.cho_factor(M)
        except np.linalg.LinAlgError as exc:
            raise StepFailure("I + (h/4) R~ is not positive definite; R~ is not PSD") from exc
        return sla.cho_solve(factor, rhs)
    if method == "cg":
        M = (sp.identity(n) + a * sp.csr_matrix(R)) if sp.issparse(R) else np.eye(n) + a * R
        x1, info = spla.cg(M, rhs, x0=x0, rtol=1e-14, atol=0.0, maxiter=10 * n)
        if info != 0:
            raise StepFailure(f"CG did not converge (info={info})")
        return x1
    raise ValueError(f"unknown method {method!r}")


def _generator(sys: QuadraticPHSystem, part: str):
    J, R, Q = _dense(sys.J), _dense(sys.R), _dense(sys.Q)
    if part == "conservative":
        return J @ Q
    if part == "dissipative":
        return -R @ Q
    if part == "full":
        return (J - R) @ Q
    raise ValueError(f"unknown part {part!r}")


def exact_linear_flow(sys: QuadraticPHSystem, x0, h: float, part: str = "full",
                      u: InputSignal | None = None, t0: float = 0.0, nodes: int = 6):
    """Exact flow of one part of a linear system over time ``h``.

    ``conservative`` uses ``exp(h J Q)``, ``dissipative`` ``exp(-h R Q)`` and
    ``full`` ``exp(h (J - R) Q)``. For the two parts carrying the input the
    variation-of-constants integral is added by composite Gauss-Legendre
    quadrature with ``nodes`` points per panel.

    Raises:
        ValueError: for systems larger than ``EXPM_LIMIT``.
    """
    if sys.n > EXPM_LIMIT:
        raise ValueError(f"dense exponential refused for n = {sys.n} > {EXPM_LIMIT}")
    x0 = np.asarray(x0, dtype=float)
    if h == 0:
        return x0.copy()
    A = _generator(sys, part)
    if part == "conservative" or not sys.d or u is None:
        return sla.expm(h * A) @ x0
    # composite Gauss-Legendre panels keep the input integral accurate on long intervals
    panels = _input_panels(sys, A, h)
    dt = h / panels
    E = sla.expm(dt * A)
    B = _dense(sys.B)
    xi, w = _gauss_legendre(nodes)
    K = [ws * dt * (sla.expm((1.0 - s) * dt * A) @ B) for s, ws in zip(xi, w)]
    x = x0
    for p in range(panels):
        tp = t0 + p * dt
        x = E @ x + sum(Kj @ evaluate_input(u, tp + s * dt, sys.d) for Kj, s in zip(K, xi))
    return x


def _input_panels(sys: QuadraticPHSystem, A, h: float) -> int:
    # panel width <= min(0.1, 0.5 / |A~|_1), A~ the generator in congruence coordinates
    ct = sys.congruence
    S, Si = _dense(ct.Q_half), _dense(ct.Q_half_inv)
    scale = np.linalg.norm(S @ A @ Si, 1)
    width = min(0.1, 0.5 / scale) if scale > 0 else 0.1
    return max(1, int(np.ceil(abs(h) / width - 1e-12)))


def exact_flow_step(sys: QuadraticPHSystem, state, h: float, part: str,
                    u: InputSignal | None = None, nodes: int = 6) -> StepResult:
    """``exact_linear_flow`` wrapped as a substep with its energy ledger.

    Without input the dissipated energy is ``H(x0) - H(x1)``, which the exact
    flow satisfies identically. With input both integrals along the exact path
    use the same Gauss-Legendre rule as the variation-of-constants term.
    """
    x0 = np.asarray(state.x, dtype=float)
    t0 = state.s if isinstance(state, TimeAugmentedState) else state.t
    x1 = exact_linear_flow(sys, x0, h, part, u, t0, nodes)
    H0, H1 = hamiltonian(sys, x0), hamiltonian(sys, x1)
    t1 = t0 if part == "conservative" else t0 + h
    has_input = part != "conservative" and sys.d and u is not None
    if part == "conservative":
        balance = EnergyBalance()
    elif not has_input:
        balance = EnergyBalance(dissipated=H0 - H1)
    else:
        xi, w = _gauss_legendre(nodes)
        diss = supp = 0.0
        for s, ws in zip(xi, w):
            tau = s * h
            xt = exact_linear_flow(sys, x0, tau, part, u, t0, nodes)
            g = sys.Q @ xt
            ut = evaluate_input(u, t0 + tau, sys.d)
            diss += h * ws * float(g @ (sys.R @ g))
            supp += h * ws * float((sys.B.T @ g) @ ut)
        balance = EnergyBalance(diss, supp)
    y = np.asarray(sys.B.T @ (sys.Q @ x1)).ravel() if part != "conservative" else np.zeros(0)
    return StepResult(State(x1, t1), y, H1, balance, H_start=H0)


def composition4_conservative(sysT: QuadraticPHSystem, x0, h: float,
                              solver: LinearSolverChoice | None = None):
    """Triple-jump composition of the midpoint step: order four, conservative flow only.

    Substeps ``g1 h, g2 h, g1 h`` with ``g1 = 1/(2 - 2^(1/3))`` and
    ``g2 = 1 - 2 g1 < 0``. The negative middle step is admissible only
    because no dissipation or input is involved.
    """
    x = np.asarray(x0, dtype=float)
    for g in (TRIPLE_JUMP_OUTER, TRIPLE_JUMP_INNER, TRIPLE_JUMP_OUTER):
        x = midpoint_conservative_linear(sysT, x, g * h, solver)
    return x


def nested_multirate_conservative(sysT, x0, h: float, cfg: MultirateConfig | None = None,
                                  solver: LinearSolverChoice | None = None,
                                  dg_cfg: DiscreteGradientStepConfig | None = None):
    """``m`` consecutive conservative micro-steps of size ``h/m``.

    Raises:
        StepFailure: with ``index`` set to the failing micro-step.
    """
    cfg = cfg or MultirateConfig()
    k = h / cfg.m
    x = np.asarray(x0, dtype=float)
    for i in range(cfg.m):
        try:
            if cfg.inner_scheme == "exact":
                x = exact_linear_flow(sysT, x, k, "conservative")
            elif cfg.inner_scheme == "composition4":
                x = composition4_conservative(sysT, x, k, solver)
            elif isinstance(sysT, QuadraticPHSystem):
                x = midpoint_conservative_linear(sysT, x, k, solver)
            else:
                x = discrete_gradient_step(sysT, TimeAugmentedState(x), k, None, dg_cfg,
                                           part="conservative").x
        except StepFailure as exc:
            raise StepFailure(f"micro-step {i}: {exc}", exc.residual, index=i) from exc
    return x
