import numpy as np
import pytest

from phsplit.benchmarks import build_two_mass
from phsplit.core import QuadraticPHSystem

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance():
    def record(number, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


@pytest.fixture
def two_mass():
    return build_two_mass()


def random_ph_system(rng, n, d=0, rank_R=None, diagonal_Q=False):
    """Random valid dense system: skew J, PSD R (optionally rank deficient), SPD Q."""
    A = rng.standard_normal((n, n))
    J = A - A.T
    k = n if rank_R is None else rank_R
    C = rng.standard_normal((n, k))
    R = 0.1 * C @ C.T
    if diagonal_Q:
        Q = np.diag(rng.uniform(0.5, 3.0, n))
    else:
        M = rng.standard_normal((n, n))
        Q = M @ M.T / n + np.eye(n)
    B = rng.standard_normal((n, d)) if d else None
    return QuadraticPHSystem(J=J, R=R, Q=Q, B=B)


# ---- independent oracles (eigendecomposition based, no scipy.linalg.expm)


def sym_sqrt(Q):
    lam, V = np.linalg.eigh(Q)
    return (V * np.sqrt(lam)) @ V.T, (V / np.sqrt(lam)) @ V.T


def expm_skew(S, t):
    """exp(t S) for real skew S via the Hermitian matrix iS."""
    lam, U = np.linalg.eigh(1j * S)
    return np.real((U * np.exp(-1j * t * lam)) @ U.conj().T)


def expm_sym(S, t):
    lam, V = np.linalg.eigh(S)
    return (V * np.exp(t * lam)) @ V.T


def flow_oracle(sys, part, t):
    """Propagator of one part in original coordinates, built by congruence + eigh."""
    J, R, Q = (np.asarray(M.toarray() if hasattr(M, "toarray") else M) for M in (sys.J, sys.R, sys.Q))
    S, Si = sym_sqrt(Q)
    if part == "conservative":
        return Si @ expm_skew(S @ J @ S, t) @ S
    if part == "dissipative":
        return Si @ expm_sym(-(S @ R @ S), t) @ S
    raise ValueError(part)


def midpoint_propagator(A, h):
    I = np.eye(A.shape[0])
    return np.linalg.solve(I - 0.5 * h * A, I + 0.5 * h * A)
