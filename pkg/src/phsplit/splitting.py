"""Strang splitting of a port-Hamiltonian system into conservative and dissipative flows.

The conservative flow ``x' = J grad H`` keeps the energy and freezes the
clock; the dissipative flow ``x' = -R grad H + B u(s)`` carries the input and
advances the clock ``s``. One macro step is

    dissipative(h/2) o conservative(h) o dissipative(h/2)

so the input is only ever sampled inside dissipative substeps.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from phsplit.core import (
    EnergyBalance,
    InputSignal,
    QuadraticPHSystem,
    State,
    StepResult,
    TimeAugmentedState,
    evaluate_input,
    hamiltonian,
    output,
)
from phsplit.integrators import (
    DiscreteGradientStepConfig,
    LinearSolverChoice,
    MultirateConfig,
    StepFailure,
    discrete_gradient_step,
    exact_flow_step,
    nested_multirate_conservative,
)

ORDERINGS = ("dissipative-outer", "conservative-outer")


class IntegrationError(RuntimeError):
    """A substep failed; ``trajectory`` holds the steps completed before it."""

    def __init__(self, message: str, trajectory=None, substep: int | None = None):
        super().__init__(message)
        self.trajectory = trajectory
        self.substep = substep


@dataclass(frozen=True)
class SubflowSolver:
    """Advances one split flow.

    ``advance(sys, state, h, u)`` returns a StepResult. Conservative solvers
    must return the clock unchanged, dissipative ones advanced by ``h``.
    """

    kind: str
    advance: Callable[..., StepResult]
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("conservative", "dissipative"):
            raise ValueError(f"unknown subflow kind {self.kind!r}")


@dataclass(frozen=True)
class StrangScheme:
    outer: SubflowSolver
    inner: SubflowSolver
    h: float | None = None
    ordering: str = "dissipative-outer"
    label: str = ""

    def __post_init__(self):
        if self.ordering not in ORDERINGS:
            raise ValueError(f"unknown ordering {self.ordering!r}")
        if self.ordering == "dissipative-outer":
            kinds = (self.outer.kind, self.inner.kind)
        else:
            kinds = (self.inner.kind, self.outer.kind)
        if kinds != ("dissipative", "conservative"):
            raise ValueError("a Strang scheme needs one dissipative and one conservative subflow")


def split_rhs(sys, x, t: float, u: InputSignal | None = None):
    """Conservative and dissipative parts of the right-hand side at ``(x, t)``.

    Returns:
        ``(f1, f2)`` with ``f1 = J grad H`` and ``f2 = -R grad H + B u(t)``.
    """
    x = np.asarray(x, dtype=float)
    g = sys.grad(x)
    f1 = sys.J_at(x) @ g
    f2 = -(sys.R_at(x) @ g)
    if sys.d:
        f2 = f2 + sys.B_at(x) @ evaluate_input(u, t, sys.d)
    return np.asarray(f1).ravel(), np.asarray(f2).ravel()


# ---------------------------------------------------------------- subflow factories


def exact_subflow(kind: str, nodes: int = 6) -> SubflowSolver:
    """Exact matrix-exponential flow (linear systems only)."""

    def advance(sys, state, h, u):
        return exact_flow_step(sys, state, h, kind, u, nodes)

    return SubflowSolver(kind, advance, f"exact-{kind}")


def dg_subflow(kind: str, cfg: DiscreteGradientStepConfig | None = None) -> SubflowSolver:
    """Average-vector-field discrete-gradient step of one flow."""

    def advance(sys, state, h, u):
        return discrete_gradient_step(sys, state, h, u, cfg, part=kind)

    return SubflowSolver(kind, advance, f"dg-{kind}")


def nested_subflow(mr: MultirateConfig, solver: LinearSolverChoice | None = None,
                   cfg: DiscreteGradientStepConfig | None = None) -> SubflowSolver:
    """Conservative flow by ``mr.m`` micro-steps of ``mr.inner_scheme``."""

    def advance(sys, state, h, u):
        x0 = np.asarray(state.x, dtype=float)
        x1 = nested_multirate_conservative(sys, x0, h, mr, solver, cfg)
        clock = state.s if isinstance(state, TimeAugmentedState) else state.t
        return StepResult(State(x1, clock), np.zeros(0), hamiltonian(sys, x1),
                          EnergyBalance(), H_start=hamiltonian(sys, x0))

    return SubflowSolver("conservative", advance, f"nested-{mr.inner_scheme}-m{mr.m}")


def midpoint_subflow(solver: LinearSolverChoice) -> SubflowSolver:
    """Single conservative midpoint step solved with ``solver``."""
    return nested_subflow(MultirateConfig(m=1), solver)


VARIANTS = ("exact_splitting", "dg_splitting", "multirate_nested", "multirate_highorder")


def parse_variant(spec: str) -> tuple[str, int | None]:
    """``"multirate_nested:16"`` -> ``("multirate_nested", 16)``."""
    m = re.fullmatch(r"([a-z_]+)(?::(\d+)|\{(\d+)\})?", spec.strip())
    if not m or m.group(1) not in VARIANTS:
        raise ValueError(f"unknown scheme variant {spec!r}; choose from {VARIANTS}")
    count = m.group(2) or m.group(3)
    return m.group(1), int(count) if count else None


def make_scheme(variant: str, m: int = 8, solver: LinearSolverChoice | None = None,
                cfg: DiscreteGradientStepConfig | None = None,
                ordering: str = "dissipative-outer") -> StrangScheme:
    """Build one of the four splitting variants.

    * ``exact_splitting``: exact flows for both parts.
    * ``dg_splitting``: discrete-gradient steps for both parts.
    * ``multirate_nested[:m]``: discrete-gradient dissipative part, ``m`` nested
      midpoint micro-steps for the conservative part.
    * ``multirate_highorder[:m]``: as above with the order-four triple-jump
      composition as micro-step.
    """
    name, count = parse_variant(variant)
    m = count or m
    if name == "exact_splitting":
        diss, cons = exact_subflow("dissipative"), exact_subflow("conservative")
    elif name == "dg_splitting":
        diss = dg_subflow("dissipative", cfg)
        cons = dg_subflow("conservative", cfg) if solver is None else midpoint_subflow(solver)
    elif name == "multirate_nested":
        diss = dg_subflow("dissipative", cfg)
        cons = nested_subflow(MultirateConfig(m, "discrete-gradient"), solver, cfg)
    else:
        diss = dg_subflow("dissipative", cfg)
        cons = nested_subflow(MultirateConfig(m, "composition4"), solver, cfg)
    label = variant if count or name in ("exact_splitting", "dg_splitting") else f"{name}:{m}"
    if ordering == "dissipative-outer":
        return StrangScheme(diss, cons, ordering=ordering, label=label)
    return StrangScheme(cons, diss, ordering=ordering, label=label)


# ---------------------------------------------------------------- driver


def strang_step(scheme: StrangScheme, sys, state, u: InputSignal | None = None,
                h: float | None = None) -> StepResult:
    """One symmetric Strang macro step.

    With the default ordering: dissipative half-step (clock ``s -> s + h/2``),
    conservative full step (clock frozen), dissipative half-step (clock
    ``-> s + h``). The energy ledger is the sum over the substeps, which are
    kept in ``result.substeps``.

    Raises:
        IntegrationError: if a substep fails; ``substep`` is its index (0-2).
    """
    h = scheme.h if h is None else h
    if h is None:
        raise ValueError("no step size given")
    if not isinstance(state, TimeAugmentedState):
        state = TimeAugmentedState(np.asarray(state.x, dtype=float), state.t)
    s0 = state.s
    plan = (
        (scheme.outer, 0.5 * h),
        (scheme.inner, h),
        (scheme.outer, 0.5 * h),
    )
    results = []
    current = state
    for idx, (flow, step) in enumerate(plan):
        try:
            res = flow.advance(sys, current, step, u)
        except (StepFailure, np.linalg.LinAlgError) as exc:
            raise IntegrationError(f"substep {idx} ({flow.label}) failed: {exc}", substep=idx) from exc
        results.append(res)
        current = TimeAugmentedState(res.x, res.t)

    balance = sum((r.energy_balance for r in results), EnergyBalance())
    x1 = current.x
    return StepResult(
        state=State(x1, s0 + h),
        y=output(sys, x1),
        H_value=hamiltonian(sys, x1),
        energy_balance=balance,
        substeps=tuple(results),
        H_start=hamiltonian(sys, state.x),
    )


@dataclass
class Trajectory:
    """Sequence of StepResults; element 0 is the initial state."""

    steps: list = field(default_factory=list)

    def __len__(self):
        return len(self.steps)

    def __getitem__(self, i):
        return self.steps[i]

    def __iter__(self):
        return iter(self.steps)

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.steps])

    @property
    def states(self) -> np.ndarray:
        return np.array([s.x for s in self.steps])

    @property
    def energies(self) -> np.ndarray:
        return np.array([s.H_value for s in self.steps])

    def cumulative(self) -> tuple[np.ndarray, np.ndarray]:
        diss = np.cumsum([s.energy_balance.dissipated for s in self.steps])
        supp = np.cumsum([s.energy_balance.supplied for s in self.steps])
        return diss, supp

    def to_csv(self, path):
        """Columns ``t, x_1..x_n, H, y_1..y_d, dissipated, supplied`` (cumulative ledger)."""
        n = self.steps[0].x.size
        d = self.steps[0].y.size
        diss, supp = self.cumulative()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", *[f"x_{i + 1}" for i in range(n)], "H",
                        *[f"y_{i + 1}" for i in range(d)], "dissipated", "supplied"])
            for s, dc, sc in zip(self.steps, diss, supp):
                w.writerow([repr(float(v)) for v in (s.t, *s.x, s.H_value, *s.y, dc, sc)])


def step_count(t0: float, t_end: float, h: float) -> tuple[int, float]:
    """Number of full steps and the length of a trailing shortened step (0 if none)."""
    span = t_end - t0
    ratio = span / h
    k = round(ratio)
    if abs(ratio - k) <= 1e-12 * max(1.0, ratio):
        return int(k), 0.0
    k = math.floor(ratio)
    return int(k), span - k * h


def integrate(scheme: StrangScheme, sys, x0, t0: float, t_end: float, h: float,
              u: InputSignal | None = None) -> Trajectory:
    """Repeated Strang steps from ``t0`` to exactly ``t_end``.

    If ``h`` does not divide the interval the last step is shortened.

    Raises:
        IntegrationError: on substep failure, with the partial trajectory attached.
    """
    if t_end < t0:
        raise ValueError("t_end must not precede t0")
    if not h > 0:
        raise ValueError("h must be positive")
    x0 = np.asarray(x0, dtype=float)
    traj = Trajectory([StepResult(State(x0.copy(), t0), output(sys, x0), hamiltonian(sys, x0))])
    full, tail = step_count(t0, t_end, h)
    sizes = [h] * full + ([tail] if tail > 0 else [])
    t = t0
    state = TimeAugmentedState(x0, t0)
    for i, step in enumerate(sizes):
        try:
            res = strang_step(scheme, sys, state, u, step)
        except IntegrationError as exc:
            exc.trajectory = traj
            raise
        t = t_end if i == len(sizes) - 1 else t0 + (i + 1) * h
        res = StepResult(State(res.x, t), res.y, res.H_value, res.energy_balance,
                         res.substeps, res.H_start)
        traj.steps.append(res)
        state = TimeAugmentedState(res.x, t)
    return traj
