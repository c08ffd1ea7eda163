"""Single runs, convergence sweeps and rho sweeps over a scenario."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .assembly import LoadAssembler
from .equilibrate import FluxReconstructor
from .estimator import (
    ErrorEvaluator,
    ErrorReport,
    EstimatorTrace,
    ReferenceErrorEvaluator,
    eoc,
    error_report,
)
from .mesh import Mesh
from .scenarios import Scenario
from .spaces import LagrangeSpace
from .wavesolver import DEFAULT_ALPHA, LeapFrog, Stepper, TimeState, cfl_dt, n_steps


class SampledLoads:
    """Load-vector callback that keeps the last data samples for the estimator."""

    def __init__(self, assembler: LoadAssembler, f, g):
        self.assembler = assembler
        self.f, self.g = f, g
        self.t = None
        self.samples = None

    def __call__(self, t: float) -> np.ndarray:
        self.t = t
        self.samples = self.assembler.sample(self.f, self.g, t)
        return self.assembler.vector(*self.samples)

    def projected(self) -> tuple[np.ndarray, np.ndarray]:
        return self.assembler.project(*self.samples)


@dataclass
class CheckLog:
    """Worst equilibration defects seen over a run, each relative to its own scale."""

    divergence: float = 0.0
    boundary: float = 0.0
    compatibility: float = 0.0
    steps: int = 0

    def update(self, fr: FluxReconstructor, sigma, u, a, v, f_loc, g_loc) -> None:
        err, ref = fr.divergence_defects(sigma, a, f_loc)
        self.divergence = max(self.divergence, float(err.max()) / (ref + 1e-14))
        err, ref = fr.boundary_defects(sigma, v, g_loc)
        if len(err):
            self.boundary = max(self.boundary, float(err.max()) / (ref + 1e-14))
        d, scale = fr.compatibility_defects(u, a, v, f_loc, g_loc)
        mask = fr.compatibility_required
        if mask.any():
            ratio = d[mask] / (scale[mask] + np.finfo(float).tiny)
            self.compatibility = max(self.compatibility, float(ratio.max()))
        self.steps += 1


@dataclass
class Snapshot:
    t: float
    eta: np.ndarray
    u: np.ndarray


@dataclass
class RunOutput:
    scenario: str
    p: int
    mesh: Mesh
    trace: EstimatorTrace
    reports: list[ErrorReport]
    nr_dofs: int
    h_max: float
    dt: float
    checks: CheckLog | None = None
    snapshots: list[Snapshot] = field(default_factory=list)

    def report(self, rho: float) -> ErrorReport:
        for r in self.reports:
            if r.rho == rho:
                return r
        raise KeyError(rho)


class _Reference:
    """Co-stepped numerical reference with a finer step."""

    def __init__(self, scenario: Scenario, mesh: Mesh, space: LagrangeSpace, dt: float, solver: str):
        spec = scenario.reference
        self.ratio = spec.dt_divisor
        self.space = LagrangeSpace(mesh, spec.p)
        leapfrog = LeapFrog(self.space, scenario.materials, dt / spec.dt_divisor, solver)
        loads = SampledLoads(LoadAssembler(self.space, scenario.materials), scenario.f, scenario.g)
        self.stepper = Stepper(leapfrog, loads)
        self.errors = ReferenceErrorEvaluator(space, self.space, scenario.materials)

    def __call__(self, state: TimeState, rhos) -> dict[float, float]:
        target = state.n * self.ratio
        st = self.stepper.state
        while st.n < target or st.u_next is None:
            st = self.stepper.advance()
        return self.errors(state.centered_difference(), state.u_curr, st.centered_difference(), st.u_curr, rhos)


def run_experiment(
    scenario: Scenario,
    mesh: Mesh,
    p: int = 1,
    alpha: float | None = None,
    rhos: Sequence[float] | None = None,
    T: float | None = None,
    dt: float | None = None,
    threads: int = 1,
    solver: str = "cholesky",
    vtk_times: Sequence[float] = (),
    check: bool = False,
    with_error: bool = True,
) -> RunOutput:
    """Leap-frog run with per-step flux equilibration and damped accumulation."""
    materials = scenario.materials
    rhos = tuple(float(r) for r in (rhos or scenario.rhos))
    T = scenario.T if T is None else T
    alpha = DEFAULT_ALPHA[p] if alpha is None else alpha
    if dt is None:
        dt, _ = cfl_dt(mesh, materials, alpha)
    space = LagrangeSpace(mesh, p)
    fr = FluxReconstructor(space, materials, threads=threads)
    leapfrog = LeapFrog(space, materials, dt, solver)
    loads = SampledLoads(fr.loads, scenario.f, scenario.g)

    error = None
    if with_error and scenario.has_exact:
        exact = ErrorEvaluator(space, materials, scenario.du, scenario.grad_u)
        error = lambda st, rs: exact(st.t, st.centered_difference(), st.u_curr, rs)  # noqa: E731
    elif with_error and scenario.reference is not None:
        error = _Reference(scenario, mesh, space, dt, solver)

    trace = EstimatorTrace(rhos)
    checks = CheckLog() if check else None
    pending = sorted(float(t) for t in vtk_times)
    snapshots: list[Snapshot] = []

    N = n_steps(T, dt)
    stepper = Stepper(leapfrog, loads)
    for _ in range(1, N):
        st = stepper.advance()
        a, v = st.second_difference(), st.centered_difference()
        f_loc, g_loc = loads.projected()
        sigma = fr.reconstruct(st.u_curr, a, v, f_loc, g_loc)
        eta_k = fr.eta_elements(sigma, st.u_curr)
        errs = error(st, rhos) if error is not None else None
        trace.accumulate(st.t, math.sqrt(float(eta_k @ eta_k)), errs)
        if checks is not None:
            checks.update(fr, sigma, st.u_curr, a, v, f_loc, g_loc)
        while pending and st.t >= pending[0] - 1e-12:
            pending.pop(0)
            snapshots.append(Snapshot(st.t, eta_k.copy(), st.u_curr.copy()))

    h_max = float(mesh.diameters.max())
    reports = [error_report(trace, rho, space.n_dofs, h_max, dt) for rho in rhos]
    return RunOutput(scenario.name, p, mesh, trace, reports, space.n_dofs, h_max, dt, checks, snapshots)


@dataclass
class ConvergenceRow:
    nr_dofs: int
    h_max: float
    dt: float
    est: float
    err: float
    eff: float
    eoc_est: float
    eoc_err: float


def convergence_table(outputs: Sequence[RunOutput], rho: float, against: str = "dofs") -> list[ConvergenceRow]:
    """EOC per level against N_dofs^{1/2} (``against="dofs"``) or h_max (``"h"``)."""
    reps = [o.report(rho) for o in outputs]
    if against == "dofs":
        sizes = [1.0 / math.sqrt(r.nr_dofs) for r in reps]
    else:
        sizes = [r.h_max for r in reps]
    e_est = eoc([r.estimate for r in reps], sizes)
    e_err = eoc([r.error for r in reps], sizes)
    return [
        ConvergenceRow(r.nr_dofs, r.h_max, r.dt, r.estimate, r.error, r.effectivity, float(a), float(b))
        for r, a, b in zip(reps, e_est, e_err)
    ]
