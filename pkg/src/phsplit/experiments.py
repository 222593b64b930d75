"""Experiment runners: convergence study, Krylov solver comparison, multistep drift, simulation.

Each runner takes an ``ExperimentConfig``, writes UTF-8 CSV files into
``cfg.output_dir`` and returns the computed data for programmatic use.
"""

from __future__ import annotations

import csv
import json
import logging
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from phsplit import __version__
from phsplit.benchmarks import (
    conservative_operator,
    make_benchmark,
    msd_conservative_operator,
    reference_solution,
    spectral_radius,
    two_mass_initial_state,
)
from phsplit.core import InputSignal, QuadraticPHSystem, dissipativity_ledger, transform_system
from phsplit.integrators import LinearSolverChoice
from phsplit.krylov import LinearOperator, cayley_arnoldi, gmres, stopping_rule_h2
from phsplit.serialization import load_system, system_from_dict
from phsplit.splitting import IntegrationError, VARIANTS, integrate, make_scheme, parse_variant

log = logging.getLogger(__name__)

EXPERIMENTS = ("convergence", "solver_compare", "multistep_drift", "simulate")
SOLVERS = ("direct", "gmres", "cayley_arnoldi")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Declarative description of one experiment run.

    ``system`` is ``{"name": ..., "params": {...}}`` for a benchmark,
    ``{"file": path}`` for a serialized system, or an inline system document.
    ``solver`` is ``{"name": "direct" | "gmres" | "cayley_arnoldi", "tol": ..., "maxit": ...}``.
    """

    experiment: str = "simulate"
    system: dict = field(default_factory=lambda: {"name": "two_mass"})
    variants: list = field(default_factory=lambda: [
        "exact_splitting", "dg_splitting", "multirate_nested:8", "multirate_highorder:8"])
    step_sizes: list = field(default_factory=lambda: [0.4, 0.2, 0.1, 0.05, 0.025])
    h: float | None = None
    t0: float = 0.0
    t_end: float = 20.0
    x0: list | None = None
    solver: dict = field(default_factory=lambda: {"name": "direct"})
    steps: int = 20
    input: dict = field(default_factory=lambda: {"type": "zero"})
    seed: int = 0
    output_dir: str = "phs_output"

    @classmethod
    def from_dict(cls, doc: dict) -> ExperimentConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if self.experiment == "convergence" and not self.step_sizes:
            raise ConfigError("convergence needs a nonempty step_sizes list")
        if any(not float(h) > 0 for h in self.step_sizes):
            raise ConfigError("step sizes must be positive")
        if self.h is not None and not self.h > 0:
            raise ConfigError("h must be positive")
        if self.t_end < self.t0:
            raise ConfigError("t_end must not precede t0")
        if self.experiment != "simulate" and not self.t_end > self.t0:
            raise ConfigError("t_end must be positive")
        if self.steps < 1:
            raise ConfigError("steps must be at least 1")
        name = self.solver.get("name", "direct") if isinstance(self.solver, dict) else self.solver
        if name not in SOLVERS:
            raise ConfigError(f"solver must be one of {SOLVERS}, got {name!r}")
        for v in self.variants:
            try:
                parse_variant(v)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        if not isinstance(self.system, dict):
            raise ConfigError("system must be a mapping")


# ---------------------------------------------------------------- helpers


def build_system(cfg: ExperimentConfig) -> QuadraticPHSystem:
    spec = cfg.system
    try:
        if "file" in spec:
            return load_system(spec["file"])
        if "name" in spec:
            return make_benchmark(spec["name"], spec.get("params"))
        return system_from_dict(spec)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad system specification: {exc}") from None


def build_input(cfg: ExperimentConfig, d: int) -> InputSignal | None:
    spec = dict(cfg.input or {"type": "zero"})
    kind = spec.pop("type", "zero")
    if d == 0 or kind == "zero":
        return None
    if kind == "constant":
        return InputSignal.constant(np.broadcast_to(spec.get("value", 1.0), (d,)))
    if kind == "sine":
        amp = np.broadcast_to(spec.get("amplitude", 1.0), (d,))
        return InputSignal.sine(amp, float(spec.get("frequency", 1.0)), float(spec.get("phase", 0.0)))
    raise ConfigError(f"unknown input type {kind!r}")


def solver_params(cfg: ExperimentConfig) -> dict:
    spec = cfg.solver if isinstance(cfg.solver, dict) else {"name": cfg.solver}
    return {"name": spec.get("name", "direct"), "tol": float(spec.get("tol", 1e-10)),
            "maxit": int(spec.get("maxit", 500))}


def random_unit(n: int, seed: int) -> np.ndarray:
    x = np.random.default_rng(seed).standard_normal(n)
    return x / np.linalg.norm(x)


def initial_state(cfg: ExperimentConfig, sys: QuadraticPHSystem) -> np.ndarray:
    if cfg.x0 is not None:
        x0 = np.asarray(cfg.x0, dtype=float)
        if x0.shape != (sys.n,):
            raise ConfigError(f"x0 has length {x0.size}, system dimension is {sys.n}")
        return x0
    if sys.name == "two_mass":
        return two_mass_initial_state()
    return sys.congruence.from_tilde(random_unit(sys.n, cfg.seed))


def tilde_setup(cfg: ExperimentConfig, sys: QuadraticPHSystem):
    """Conservative operator in congruence coordinates, start vector and step size."""
    if sys.name == "msd_chain":
        Jop = msd_conservative_operator(sys)
    else:
        Jop = conservative_operator(transform_system(sys))
    if cfg.x0 is not None:
        xt0 = sys.congruence.to_tilde(initial_state(cfg, sys))
    else:
        xt0 = random_unit(sys.n, cfg.seed)
    h = cfg.h
    if h is None:
        rho = spectral_radius(sys)
        if not rho > 0:
            raise ConfigError("J~ vanishes, so h = 0.05 / rho is undefined; set h explicitly")
        h = 0.05 / rho
    return Jop, xt0, h


def version_string() -> str:
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5,
        )
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(cfg: ExperimentConfig, files: list, extra: dict | None = None) -> Path:
    out = _out_dir(cfg)
    doc = {"version": version_string(), "config": asdict(cfg), "outputs": sorted(files)}
    if extra:
        doc.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def _write_rows(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def loglog_slope(hs, errs) -> float:
    """Least-squares slope of ``log(err)`` against ``log(h)``."""
    return float(np.polyfit(np.log(hs), np.log(errs), 1)[0])


# ---------------------------------------------------------------- experiments


def run_convergence(cfg: ExperimentConfig) -> dict:
    """Final-time error against the dense-exponential reference for every variant and step size.

    Writes ``convergence.csv`` (variant, h, final_error, status) and
    ``slopes.csv`` (variant, slope) when at least two step sizes succeed.
    """
    sys = build_system(cfg)
    u = build_input(cfg, sys.d)
    x0 = initial_state(cfg, sys)
    ref = reference_solution(sys, x0, cfg.t_end, u, cfg.t0)
    sp = solver_params(cfg)
    solver = None
    if sp["name"] != "direct":
        solver = LinearSolverChoice(sp["name"], tol=sp["tol"], maxit=sp["maxit"])

    rows, errors, slopes = [], {}, {}
    failed = False
    for variant in cfg.variants:
        scheme = make_scheme(variant, solver=solver)
        errs = []
        for h in cfg.step_sizes:
            try:
                traj = integrate(scheme, sys, x0, cfg.t0, cfg.t_end, float(h), u)
                err = float(np.linalg.norm(traj[-1].x - ref))
                rows.append((scheme.label, float(h), err, "ok"))
                errs.append((float(h), err))
            except IntegrationError as exc:
                log.warning("variant %s, h=%g failed: %s", variant, h, exc)
                rows.append((scheme.label, float(h), float("nan"), "failed"))
                failed = True
        errors[scheme.label] = errs
        if len(errs) >= 2:
            slopes[scheme.label] = loglog_slope(*zip(*errs))

    out = _out_dir(cfg)
    _write_rows(out / "convergence.csv", ["variant", "h", "final_error", "status"], rows)
    files = ["convergence.csv"]
    if slopes:
        _write_rows(out / "slopes.csv", ["variant", "slope"], sorted(slopes.items()))
        files.append("slopes.csv")
    write_manifest(cfg, files)
    return {"errors": errors, "slopes": slopes, "rows": rows, "failed": failed}


def run_solver_compare(cfg: ExperimentConfig) -> dict:
    """One conservative midpoint step solved by GMRES and by the Cayley-Arnoldi method.

    Writes ``residual_history.csv`` and ``norm_deviation.csv`` (long format,
    one row per solver and iteration) plus the raw report of each solver.
    """
    sys = build_system(cfg)
    Jop, xt0, h = tilde_setup(cfg, sys)
    sp = solver_params(cfg)
    a = 0.5 * h
    Aop = LinearOperator(sys.n, lambda v: v - a * Jop.apply(v))
    b = xt0 + a * Jop.apply(xt0)
    _, rep_g = gmres(Aop, b, tol=sp["tol"], maxit=sp["maxit"])
    _, rep_a = cayley_arnoldi(Jop, xt0, h, tol=sp["tol"], maxit=sp["maxit"])
    norm0 = np.linalg.norm(xt0)
    reports = {"gmres": rep_g, "cayley_arnoldi": rep_a}

    out = _out_dir(cfg)
    res_rows, dev_rows = [], []
    for name, rep in reports.items():
        dev = rep.norm_deviations(norm0)
        for k, r in enumerate(rep.residual_norms):
            res_rows.append((name, k + 1, float(r)))
            dev_rows.append((name, k + 1, float(dev[k])))
        rep.to_csv(out / f"report_{name}.csv")
    _write_rows(out / "residual_history.csv", ["solver", "iteration", "residual_norm"], res_rows)
    _write_rows(out / "norm_deviation.csv", ["solver", "iteration", "norm_deviation"], dev_rows)
    files = ["residual_history.csv", "norm_deviation.csv", "report_gmres.csv", "report_cayley_arnoldi.csv"]
    write_manifest(cfg, files, {"h": h, "n": sys.n})
    return {"h": h, "x0_norm": norm0, "reports": reports,
            "converged": {k: r.converged for k, r in reports.items()}}


def run_multistep_drift(cfg: ExperimentConfig) -> dict:
    """``cfg.steps`` consecutive conservative steps, each solve stopped at residual ``h**2``.

    Writes ``drift.csv`` with the norm deviation ``|1 - |x_i| / |x_0||`` and the
    iteration count of each solver per step.
    """
    sys = build_system(cfg)
    Jop, xt0, h = tilde_setup(cfg, sys)
    sp = solver_params(cfg)
    atol = stopping_rule_h2(h)
    a = 0.5 * h
    Aop = LinearOperator(sys.n, lambda v: v - a * Jop.apply(v))
    norm0 = np.linalg.norm(xt0)

    xg, xa = xt0.copy(), xt0.copy()
    rows = []
    dev_g, dev_a, its_g, its_a = [], [], [], []
    for i in range(1, cfg.steps + 1):
        xg, rep_g = gmres(Aop, xg + a * Jop.apply(xg), tol=0.0, atol=atol, maxit=sp["maxit"])
        xa, rep_a = cayley_arnoldi(Jop, xa, h, tol=0.0, atol=atol, maxit=sp["maxit"])
        dev_g.append(abs(1.0 - np.linalg.norm(xg) / norm0))
        dev_a.append(abs(1.0 - np.linalg.norm(xa) / norm0))
        its_g.append(rep_g.iterations)
        its_a.append(rep_a.iterations)
        rows.append((i, dev_g[-1], dev_a[-1], its_g[-1], its_a[-1]))

    out = _out_dir(cfg)
    _write_rows(out / "drift.csv", ["step", "gmres_deviation", "cayley_arnoldi_deviation",
                                    "gmres_iterations", "cayley_arnoldi_iterations"], rows)
    write_manifest(cfg, ["drift.csv"], {"h": h, "tolerance": atol, "n": sys.n})
    return {"h": h, "tolerance": atol, "gmres": np.array(dev_g), "cayley_arnoldi": np.array(dev_a),
            "gmres_iterations": its_g, "cayley_arnoldi_iterations": its_a}


def run_simulate(cfg: ExperimentConfig) -> dict:
    """Single trajectory with the first configured variant, written to ``trajectory.csv``.

    Raises:
        IntegrationError: after writing the partial trajectory.
    """
    sys = build_system(cfg)
    u = build_input(cfg, sys.d)
    x0 = initial_state(cfg, sys)
    h = cfg.h if cfg.h is not None else 0.01
    sp = solver_params(cfg)
    solver = None
    if sp["name"] != "direct":
        solver = LinearSolverChoice(sp["name"], tol=sp["tol"], maxit=sp["maxit"])
    variant = cfg.variants[0] if cfg.variants else "exact_splitting"
    scheme = make_scheme(variant, solver=solver)
    out = _out_dir(cfg)
    try:
        traj = integrate(scheme, sys, x0, cfg.t0, cfg.t_end, h, u)
    except IntegrationError as exc:
        if exc.trajectory is not None:
            exc.trajectory.to_csv(out / "trajectory.csv")
        write_manifest(cfg, ["trajectory.csv"], {"status": "failed", "error": str(exc)})
        raise
    traj.to_csv(out / "trajectory.csv")
    ledger = dissipativity_ledger(sys, traj)
    write_manifest(cfg, ["trajectory.csv"], {"dissipativity": asdict(ledger), "variant": scheme.label})
    return {"trajectory": traj, "ledger": ledger}


RUNNERS = {
    "convergence": run_convergence,
    "solver_compare": run_solver_compare,
    "multistep_drift": run_multistep_drift,
    "simulate": run_simulate,
}


def default_system(experiment: str) -> dict:
    if experiment in ("solver_compare", "multistep_drift"):
        return {"name": "msd_chain", "params": {"n_cells": 500, "spectral_radius": 10.0}}
    return {"name": "two_mass"}


__all__ = [
    "ConfigError", "ExperimentConfig", "RUNNERS", "VARIANTS",
    "run_convergence", "run_multistep_drift", "run_simulate", "run_solver_compare",
]
