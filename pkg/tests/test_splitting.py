import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import flow_oracle, random_ph_system
from phsplit.benchmarks import MsdChainParams, build_msd_chain, build_two_mass, reference_solution, two_mass_initial_state
from phsplit.core import (
    InputSignal,
    QuadraticPHSystem,
    State,
    TimeAugmentedState,
    dissipativity_ledger,
    gradient,
    hamiltonian,
)
from phsplit.integrators import DiscreteGradientStepConfig, LinearSolverChoice, StepFailure
from phsplit.splitting import (
    IntegrationError,
    StrangScheme,
    SubflowSolver,
    dg_subflow,
    exact_subflow,
    integrate,
    make_scheme,
    parse_variant,
    split_rhs,
    step_count,
    strang_step,
)


def conservative_only(sys):
    return QuadraticPHSystem(J=sys.J, R=np.zeros_like(sys.R), Q=sys.Q)


def dissipative_only(sys):
    return QuadraticPHSystem(J=np.zeros_like(sys.J), R=sys.R, Q=sys.Q)


# ---------------------------------------------------------------- split_rhs


def test_split_rhs_trivial_parts():
    rng = np.random.default_rng(0)
    sys = random_ph_system(rng, 5)
    x = rng.standard_normal(5)
    _, f2 = split_rhs(conservative_only(sys), x, 0.0)
    assert not f2.any()
    f1, _ = split_rhs(dissipative_only(sys), x, 0.0)
    assert not f1.any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 10), st.integers(0, 3))
def test_split_rhs_sums_to_full(seed, n, d):
    rng = np.random.default_rng(seed)
    sys = random_ph_system(rng, n, d=d)
    u = InputSignal.sine(rng.standard_normal(d), 1.3) if d else None
    x, t = rng.standard_normal(n), float(rng.uniform(0, 5))
    f1, f2 = split_rhs(sys, x, t, u)
    full = (sys.J - sys.R) @ sys.Q @ x + (sys.B @ u(t) if d else 0.0)
    assert np.linalg.norm(f1 + f2 - full) <= 1e-14 * max(np.linalg.norm(full), 1.0) * 10
    # the conservative part is orthogonal to the gradient
    g = gradient(sys, x)
    assert abs(g @ f1) <= 1e-12 * np.linalg.norm(g) * np.linalg.norm(f1) + 1e-300


# ---------------------------------------------------------------- strang_step


def test_one_part_splittings_are_exact():
    rng = np.random.default_rng(2)
    sys = random_ph_system(rng, 6)
    x0 = rng.standard_normal(6)
    scheme = make_scheme("exact_splitting")
    h = 0.3
    cons = conservative_only(sys)
    r = strang_step(scheme, cons, TimeAugmentedState(x0), h=h)
    np.testing.assert_allclose(r.x, flow_oracle(cons, "conservative", h) @ x0, atol=1e-12 * np.linalg.norm(x0))
    diss = dissipative_only(sys)
    r = strang_step(scheme, diss, TimeAugmentedState(x0), h=h)
    np.testing.assert_allclose(r.x, flow_oracle(diss, "dissipative", h) @ x0, atol=1e-12 * np.linalg.norm(x0))


def test_strang_clock_and_substeps():
    sys = build_msd_chain(MsdChainParams(n_cells=4, input_ports=1))
    u = InputSignal.sine([1.0], 2.0)
    r = strang_step(make_scheme("dg_splitting"), sys, TimeAugmentedState(np.ones(8), 1.0), u, 0.2)
    assert r.t == pytest.approx(1.2, abs=1e-15)
    s = [sub.t for sub in r.substeps]
    assert s == pytest.approx([1.1, 1.1, 1.2], abs=1e-15)
    assert r.substeps[1].energy_balance.supplied == 0.0
    total = sum(sub.energy_balance.supplied for sub in r.substeps)
    assert r.energy_balance.supplied == pytest.approx(total, rel=1e-15)
    np.testing.assert_allclose(r.y, sys.B.T @ (sys.Q @ r.x))


def test_strang_symmetry_exact_flows():
    rng = np.random.default_rng(4)
    scheme = make_scheme("exact_splitting")
    for _ in range(5):
        sys = random_ph_system(rng, 7)
        x0 = rng.standard_normal(7)
        fwd = strang_step(scheme, sys, TimeAugmentedState(x0), h=0.25)
        back = fwd.x
        for flow, step in ((scheme.outer, -0.125), (scheme.inner, -0.25), (scheme.outer, -0.125)):
            back = flow.advance(sys, TimeAugmentedState(back), step, None).x
        assert np.linalg.norm(back - x0) <= 1e-10 * np.linalg.norm(x0)


def test_strang_two_mass_error_quarters(two_mass):
    x0 = two_mass_initial_state()
    ref = reference_solution(two_mass, x0, 20.0)
    errs = [np.linalg.norm(integrate(make_scheme("exact_splitting"), two_mass, x0, 0, 20, h)[-1].x - ref)
            for h in (0.2, 0.1)]
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(0, 2),
       st.sampled_from(["exact_splitting", "dg_splitting", "multirate_nested:3", "multirate_highorder:2"]))
def test_strang_discrete_dissipativity(seed, n, d, variant):
    rng = np.random.default_rng(seed)
    sys = random_ph_system(rng, n, d=d)
    u = InputSignal.sine(rng.standard_normal(d), 1.0) if d else None
    r = strang_step(make_scheme(variant), sys, TimeAugmentedState(rng.standard_normal(n), 0.0), u, 0.1)
    eb = r.energy_balance
    scale = max(1.0, abs(r.H_start))
    assert r.H_value - r.H_start <= eb.supplied + 1e-10 * scale
    assert eb.dissipated >= -1e-14 * scale
    if variant != "multirate_highorder:2":
        # composition4 is energy-preserving only to solver accuracy, not exactly
        assert abs(r.H_value - r.H_start - (eb.supplied - eb.dissipated)) <= 1e-10 * scale


def test_scheme_validation():
    diss = exact_subflow("dissipative")
    with pytest.raises(ValueError):
        StrangScheme(diss, diss)
    with pytest.raises(ValueError):
        StrangScheme(diss, exact_subflow("conservative"), ordering="sideways")
    with pytest.raises(ValueError):
        SubflowSolver("mixed", lambda *a: None)


def test_conservative_outer_ordering(two_mass):
    x0 = two_mass_initial_state()
    ref = reference_solution(two_mass, x0, 20.0)
    scheme = make_scheme("exact_splitting", ordering="conservative-outer")
    errs = [np.linalg.norm(integrate(scheme, two_mass, x0, 0, 20, h)[-1].x - ref) for h in (0.2, 0.1)]
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.1)


def test_parse_variant():
    assert parse_variant("multirate_nested:16") == ("multirate_nested", 16)
    assert parse_variant("multirate_nested{4}") == ("multirate_nested", 4)
    assert parse_variant("dg_splitting") == ("dg_splitting", None)
    with pytest.raises(ValueError):
        parse_variant("lie_trotter")
    assert make_scheme("multirate_highorder").label == "multirate_highorder:8"


def test_strang_failure_reports_substep(two_mass):
    def broken(sys, state, h, u):
        raise StepFailure("no")

    scheme = StrangScheme(exact_subflow("dissipative"), SubflowSolver("conservative", broken, "broken"))
    with pytest.raises(IntegrationError) as info:
        strang_step(scheme, two_mass, TimeAugmentedState(np.ones(5)), h=0.1)
    assert info.value.substep == 1


# ---------------------------------------------------------------- integrate


def test_integrate_zero_steps(two_mass):
    traj = integrate(make_scheme("exact_splitting"), two_mass, np.ones(5), 1.0, 1.0, 0.1)
    assert len(traj) == 1 and traj[0].t == 1.0


def test_integrate_shortened_last_step(two_mass):
    traj = integrate(make_scheme("dg_splitting"), two_mass, np.ones(5), 0.0, 1.05, 0.1)
    assert len(traj) == 12
    assert traj[-1].t == 1.05
    assert traj[-1].t - traj[-2].t == pytest.approx(0.05)
    assert step_count(0.0, 1.0, 0.1) == (10, 0.0)


def test_integrate_input_validation(two_mass):
    with pytest.raises(ValueError):
        integrate(make_scheme("dg_splitting"), two_mass, np.ones(5), 1.0, 0.0, 0.1)
    with pytest.raises(ValueError):
        integrate(make_scheme("dg_splitting"), two_mass, np.ones(5), 0.0, 1.0, 0.0)


def test_integrate_conservative_energy_audit(two_mass):
    sys = conservative_only(two_mass)
    x0 = two_mass_initial_state()
    for variant in ("dg_splitting", "multirate_nested:4"):
        traj = integrate(make_scheme(variant), sys, x0, 0.0, 100.0, 0.1)
        assert len(traj) == 1001
        H = traj.energies
        assert np.abs(H - H[0]).max() <= 1e-11 * H[0]


def test_integrate_krylov_solver_variant(two_mass):
    x0 = two_mass_initial_state()
    direct = integrate(make_scheme("multirate_nested:4"), two_mass, x0, 0, 2, 0.1)
    krylov = integrate(make_scheme("multirate_nested:4", solver=LinearSolverChoice("cayley_arnoldi", tol=1e-14)),
                       two_mass, x0, 0, 2, 0.1)
    np.testing.assert_allclose(krylov[-1].x, direct[-1].x, rtol=1e-10, atol=1e-12)


def test_integrate_partial_trajectory_on_failure(two_mass):
    calls = {"n": 0}

    def flaky(sys, state, h, u):
        calls["n"] += 1
        if calls["n"] > 3:
            raise StepFailure("gave up")
        return exact_subflow("conservative").advance(sys, state, h, u)

    scheme = StrangScheme(dg_subflow("dissipative"), SubflowSolver("conservative", flaky))
    with pytest.raises(IntegrationError) as info:
        integrate(scheme, two_mass, np.ones(5), 0.0, 1.0, 0.1)
    assert len(info.value.trajectory) == 4


def test_trajectory_csv(tmp_path):
    sys = build_msd_chain(MsdChainParams(n_cells=2, input_ports=1))
    traj = integrate(make_scheme("dg_splitting"), sys, np.ones(4), 0.0, 0.3, 0.1, InputSignal.constant([1.0]))
    path = tmp_path / "t.csv"
    traj.to_csv(path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["t", "x_1", "x_2", "x_3", "x_4", "H", "y_1", "dissipated", "supplied"]
    assert len(rows) == 5
    assert float(rows[-1][0]) == 0.3
    diss, supp = traj.cumulative()
    assert float(rows[-1][-1]) == supp[-1]
    rep = dissipativity_ledger(sys, traj)
    assert rep.satisfied


def test_output_error_tracks_state_error(two_mass):
    # outputs at macro steps converge with the same order as the state
    sys = build_msd_chain(MsdChainParams(n_cells=3, input_ports=1))
    u = InputSignal.sine([1.0], 1.0)
    x0 = np.zeros(6)
    ref_x = reference_solution(sys, x0, 5.0, u)
    ref_y = sys.B.T @ (sys.Q @ ref_x)
    ex, ey = [], []
    for h in (0.1, 0.05):
        traj = integrate(make_scheme("dg_splitting"), sys, x0, 0.0, 5.0, h, u)
        ex.append(np.linalg.norm(traj[-1].x - ref_x))
        ey.append(np.linalg.norm(traj[-1].y - ref_y))
    assert ex[0] / ex[1] == pytest.approx(4.0, rel=0.15)
    assert ey[0] / ey[1] == pytest.approx(4.0, rel=0.25)


def test_state_accepted_in_strang_step(two_mass):
    a = strang_step(make_scheme("dg_splitting"), two_mass, State(np.ones(5), 0.0), h=0.1)
    b = strang_step(make_scheme("dg_splitting"), two_mass, TimeAugmentedState(np.ones(5), 0.0), h=0.1)
    np.testing.assert_array_equal(a.x, b.x)


def test_dg_config_passed_through(two_mass):
    cfg = DiscreteGradientStepConfig(newton_tol=1e-8)
    r = strang_step(make_scheme("dg_splitting", cfg=cfg), two_mass, TimeAugmentedState(np.ones(5)), h=0.1)
    assert np.isfinite(r.x).all()
