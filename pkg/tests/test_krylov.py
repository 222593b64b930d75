import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phsplit.benchmarks import MsdChainParams, build_msd_chain, msd_conservative_operator, scale_to_spectral_radius
from phsplit.krylov import (
    KrylovReport,
    LinearOperator,
    arnoldi_basis,
    cayley_arnoldi,
    gmres,
    linearity_defect,
    residual_of_cayley_system,
    stopping_rule_h2,
)


def skew(rng, n, scale=1.0):
    A = rng.standard_normal((n, n))
    return scale * (A - A.T)


def cayley_dense(J, h, x0):
    n = J.shape[0]
    a = 0.5 * h
    return np.linalg.solve(np.eye(n) - a * J, x0 + a * J @ x0)


@pytest.fixture(scope="module")
def chain_op():
    sys = scale_to_spectral_radius(build_msd_chain(MsdChainParams(n_cells=500)), 10.0)
    return msd_conservative_operator(sys)


def unit(n, seed=0):
    x = np.random.default_rng(seed).standard_normal(n)
    return x / np.linalg.norm(x)


# ---------------------------------------------------------------- operators


def test_linear_operator_linearity():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((20, 20))
    op = LinearOperator.from_matrix(A)
    assert linearity_defect(op, rng) <= 1e-12
    np.testing.assert_array_equal(op @ np.ones(20), A @ np.ones(20))


def test_chain_operator_is_linear_and_skew(chain_op):
    rng = np.random.default_rng(1)
    assert linearity_defect(chain_op, rng) <= 1e-12
    u, v = rng.standard_normal((2, chain_op.dim))
    assert abs(u @ chain_op.apply(v) + v @ chain_op.apply(u)) <= 1e-12 * np.linalg.norm(u) * np.linalg.norm(v) * 10


# ---------------------------------------------------------------- gmres


def test_gmres_identity():
    b = np.array([1.0, -2.0, 3.0])
    x, rep = gmres(LinearOperator.from_matrix(np.eye(3)), b)
    assert rep.converged and rep.iterations == 1
    np.testing.assert_allclose(x, b, rtol=1e-15)


def test_gmres_diagonal():
    x, rep = gmres(LinearOperator.from_matrix(np.diag([1.0, 2.0])), np.array([1.0, 1.0]))
    assert rep.converged and rep.iterations <= 2
    np.testing.assert_allclose(x, [1.0, 0.5], rtol=1e-14)


def test_gmres_zero_rhs():
    x, rep = gmres(LinearOperator.from_matrix(np.eye(4)), np.zeros(4))
    assert rep.converged and not x.any()


def test_gmres_maxit_unconverged():
    rng = np.random.default_rng(3)
    A = np.eye(30) + rng.standard_normal((30, 30))
    x, rep = gmres(LinearOperator.from_matrix(A), rng.standard_normal(30), tol=1e-14, maxit=3)
    assert not rep.converged and rep.iterations == 3
    assert len(rep.residual_norms) == len(rep.iterate_norms) == 3


def test_gmres_chain_residual_strictly_decreasing(chain_op):
    h = 0.005
    x0 = unit(chain_op.dim)
    A = LinearOperator(chain_op.dim, lambda v: v - 0.5 * h * chain_op.apply(v))
    b = x0 + 0.5 * h * chain_op.apply(x0)
    x, rep = gmres(A, b, tol=1e-10)
    assert rep.converged
    assert np.all(np.diff(rep.residual_norms) < 0)
    assert residual_of_cayley_system(chain_op, h, x, x0) <= 1e-10 * np.linalg.norm(b)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 60), st.floats(0.01, 2.0))
def test_gmres_residual_monotone_and_matches_lu(seed, n, h):
    rng = np.random.default_rng(seed)
    J = skew(rng, n)
    x0 = rng.standard_normal(n)
    A = np.eye(n) - 0.5 * h * J
    b = x0 + 0.5 * h * J @ x0
    x, rep = gmres(LinearOperator.from_matrix(A), b, tol=1e-12)
    r = np.asarray(rep.residual_norms)
    assert np.all(r[1:] <= r[:-1] + 1e-14)
    assert rep.converged
    ref = np.linalg.solve(A, b)
    assert np.linalg.norm(x - ref) <= 1e-9 * np.linalg.norm(ref)


# ---------------------------------------------------------------- cayley-arnoldi


def test_cayley_arnoldi_planar_rotation():
    omega, h = 3.0, 0.2
    J = LinearOperator.from_matrix(np.array([[0.0, omega], [-omega, 0.0]]), ("skew_symmetric",))
    x, rep = cayley_arnoldi(J, np.array([1.0, 0.0]), h, tol=1e-14)
    assert rep.converged and rep.iterations <= 2
    theta = 2 * np.arctan(omega * h / 2)
    np.testing.assert_allclose(x, [np.cos(theta), -np.sin(theta)], atol=1e-15)


def test_cayley_arnoldi_zero_operator():
    x0 = np.array([1.0, 2.0, 3.0])
    x, rep = cayley_arnoldi(LinearOperator.from_matrix(np.zeros((3, 3))), x0, 0.1)
    assert rep.converged and rep.iterations == 1
    np.testing.assert_array_equal(x, x0)


def test_cayley_arnoldi_chain_norm_preserved(chain_op):
    h = 0.005
    x0 = unit(chain_op.dim)
    xg, rg = gmres(LinearOperator(chain_op.dim, lambda v: v - 0.5 * h * chain_op.apply(v)),
                   x0 + 0.5 * h * chain_op.apply(x0), tol=1e-10)
    x, rep = cayley_arnoldi(chain_op, x0, h, tol=1e-10)
    assert rep.converged
    assert rep.norm_deviations(1.0).max() <= 1e-14
    assert rg.norm_deviations(1.0)[0] > 1e-10
    rhs = np.linalg.norm(x0 + 0.5 * h * chain_op.apply(x0))
    assert residual_of_cayley_system(chain_op, h, x, x0) <= 1e-10 * rhs
    # odd/even: residual at odd k not below the next even k for >= 80% of odd k
    r = rep.residual_norms
    pairs = [(r[k], r[k + 1]) for k in range(0, len(r) - 1, 2)]
    assert sum(a >= b for a, b in pairs) >= 0.8 * len(pairs)


def test_cayley_arnoldi_maxit_keeps_norm():
    rng = np.random.default_rng(5)
    J = LinearOperator.from_matrix(skew(rng, 80, 5.0), ("skew_symmetric",))
    x0 = rng.standard_normal(80)
    x, rep = cayley_arnoldi(J, x0, 1.0, tol=1e-14, maxit=4)
    assert not rep.converged and rep.iterations == 4
    assert abs(np.linalg.norm(x) / np.linalg.norm(x0) - 1) <= 1e-14


def test_cayley_arnoldi_breakdown_exact():
    # x0 in a 2-dimensional invariant subspace of a larger J
    J = np.zeros((6, 6))
    J[0, 1], J[1, 0] = 2.0, -2.0
    J[2:, 2:] = skew(np.random.default_rng(0), 4)
    x0 = np.array([1.0, 1.0, 0, 0, 0, 0])
    x, rep = cayley_arnoldi(LinearOperator.from_matrix(J), x0, 0.3, tol=0.0)
    assert rep.converged and rep.breakdown
    np.testing.assert_allclose(x, cayley_dense(J, 0.3, x0), atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 200), st.floats(1e-3, 5.0))
def test_cayley_arnoldi_properties(seed, n, h):
    rng = np.random.default_rng(seed)
    J = skew(rng, n, 1.0 / np.sqrt(n))
    x0 = rng.standard_normal(n)
    x, rep = cayley_arnoldi(LinearOperator.from_matrix(J), x0, h, tol=1e-12, keep_iterates=True)
    assert rep.converged
    assert rep.norm_deviations(np.linalg.norm(x0)).max() <= 1e-13
    assert len(rep.iterates_kept) == rep.iterations
    ref = cayley_dense(J, h, x0)
    assert np.linalg.norm(x - ref) <= 1e-9 * np.linalg.norm(ref)


def test_basis_orthonormal_and_tridiagonal_up_to_200(chain_op):
    V, T = arnoldi_basis(chain_op, unit(chain_op.dim, 3), 200)
    assert np.linalg.norm(V.T @ V - np.eye(200)) <= 1e-10
    assert np.abs(T + T.T).max() <= 1e-12
    assert np.abs(np.triu(T, 2)).max() == 0.0 and np.abs(np.tril(T, -2)).max() == 0.0
    # T is the projection V^T J V
    JV = np.column_stack([chain_op.apply(V[:, j]) for j in range(200)])
    P = V.T @ JV
    assert np.abs(P[:199, :199] - T[:199, :199]).max() <= 1e-10 * np.abs(T).max()


# ---------------------------------------------------------------- residual and stopping rule


def test_residual_dense_oracle():
    rng = np.random.default_rng(2)
    J = skew(rng, 30)
    x0 = rng.standard_normal(30)
    assert residual_of_cayley_system(J, 0.1, cayley_dense(J, 0.1, x0), x0) <= 1e-12 * np.linalg.norm(x0)


def test_residual_of_start_vector():
    rng = np.random.default_rng(4)
    J = skew(rng, 10)
    x0 = rng.standard_normal(10)
    assert residual_of_cayley_system(J, 0.2, x0, x0) == pytest.approx(0.2 * np.linalg.norm(J @ x0), rel=1e-13)


@pytest.mark.parametrize("h,expected", [(0.005, 2.5e-5), (0.1, 0.01), (1.0, 1.0)])
def test_stopping_rule(h, expected):
    assert stopping_rule_h2(h) == pytest.approx(expected, rel=1e-15)


def test_stopping_rule_rejects_nonpositive():
    with pytest.raises(ValueError):
        stopping_rule_h2(0.0)


def test_report_csv(tmp_path):
    rep = KrylovReport()
    rep._record(np.array([3.0, 4.0]), 0.5, False)
    rep.to_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines() == ["iteration,residual_norm,iterate_norm", "1,0.5,5.0"]
