"""Leap-frog time integration of the fully discrete wave equation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Protocol

import numpy as np

from .assembly import (
    LoadAssembler,
    MaterialData,
    apply_dirichlet,
    assemble_boundary_mass,
    assemble_mass,
    assemble_stiffness,
    factorize_spd,
)
from .mesh import Mesh
from .spaces import LagrangeSpace

DEFAULT_ALPHA = {1: 1.5, 2: 0.6}


class InstabilityError(RuntimeError):
    def __init__(self, step: int, t: float, reason: str):
        super().__init__(f"unstable time integration at step {step} (t={t:.6g}): {reason}")
        self.step = step
        self.t = t


def element_wave_speeds(mesh: Mesh, materials: MaterialData) -> np.ndarray:
    """Per-element minimum wave speed, including the absorbing-boundary term on touching elements."""
    a_min = materials.element_a_min(mesh)
    theta = np.sqrt(a_min / materials.element_mu(mesh))
    gamma = materials.edge_gamma(mesh)
    g_el = np.where(np.isnan(gamma[mesh.element_edges]), -np.inf, gamma[mesh.element_edges]).max(axis=1)
    touching = np.isfinite(g_el)
    theta[touching] = np.minimum(theta[touching], a_min[touching] / g_el[touching])
    return theta


def wave_speed(mesh: Mesh, materials: MaterialData, k: int) -> float:
    return float(element_wave_speeds(mesh, materials)[k])


def cfl_dt(mesh: Mesh, materials: MaterialData, alpha: float) -> tuple[float, int]:
    """Time step alpha * min_K rho_K / theta_K and the element attaining the minimum."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    ratio = mesh.inradius_diameters / element_wave_speeds(mesh, materials)
    k = int(np.argmin(ratio))
    return float(alpha * ratio[k]), k


@dataclass
class TimeState:
    n: int
    dt: float
    u_prev: np.ndarray
    u_curr: np.ndarray
    u_next: np.ndarray | None = None

    @property
    def t(self) -> float:
        return self.n * self.dt

    def second_difference(self) -> np.ndarray:
        return (self.u_next - 2.0 * self.u_curr + self.u_prev) / self.dt**2

    def centered_difference(self) -> np.ndarray:
        return (self.u_next - self.u_prev) / (2.0 * self.dt)


class Observer(Protocol):
    def __call__(self, state: TimeState) -> None: ...


class LeapFrog:
    """Fixed-step explicit scheme; the matrix M/dt^2 + B/(2 dt) is factorized once."""

    def __init__(self, space: LagrangeSpace, materials: MaterialData, dt: float, solver: str = "cholesky"):
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.space = space
        self.materials = materials
        self.dt = dt
        self.mask = space.dirichlet_mask
        self.M = assemble_mass(space, materials)
        self.K = assemble_stiffness(space, materials)
        self.B = assemble_boundary_mass(space, materials)
        self.S = apply_dirichlet(self.M / dt**2 + self.B / (2.0 * dt), self.mask)
        self._prev_op = (self.M / dt**2 - self.B / (2.0 * dt)).tocsr()
        self.handle = factorize_spd(self.S, solver)

    def step(self, state: TimeState, F: np.ndarray) -> TimeState:
        dt = self.dt
        rhs = F - self.K @ state.u_curr + (2.0 / dt**2) * (self.M @ state.u_curr) - self._prev_op @ state.u_prev
        rhs[self.mask] = 0.0
        state.u_next = self.handle.solve(rhs)
        state.u_next[self.mask] = 0.0
        return state

    def residual(self, state: TimeState, F: np.ndarray) -> np.ndarray:
        """Algebraic residual of the discrete equation at the free dofs."""
        r = (
            self.M @ state.second_difference()
            + self.B @ state.centered_difference()
            + self.K @ state.u_curr
            - F
        )
        r[self.mask] = 0.0
        return r

    def energy(self, u_old: np.ndarray, u_new: np.ndarray) -> float:
        """Leap-frog energy at the half step between two consecutive iterates."""
        v = (u_new - u_old) / self.dt
        return 0.5 * float(v @ (self.M @ v)) + 0.5 * float(u_old @ (self.K @ u_new))

    def m_norm(self, u: np.ndarray) -> float:
        return math.sqrt(max(float(u @ (self.M @ u)), 0.0))


@dataclass
class RunResult:
    state: TimeState
    n_steps: int
    dt: float


def n_steps(T: float, dt: float) -> int:
    """N = ceil(T / dt), tolerant to round-off in T / dt."""
    return math.ceil(T / dt - 1e-12) if T > 0 else 0


class Stepper:
    """Pull-style leap-frog iteration starting from u^0, u^1 (zero unless given).

    Each :meth:`advance` computes u^{n+1} for the current n and returns the
    full three-level state; the next call shifts by one step. A step aborts
    with :class:`InstabilityError` on non-finite values or when the M-norm
    exceeds ``growth_limit * (1 + norm)`` measured at the start of the
    current uninterrupted growth streak.
    """

    def __init__(self, leapfrog: LeapFrog, loads: Callable[[float], np.ndarray],
                 initial: tuple[np.ndarray, np.ndarray] | None = None, growth_limit: float = 1e6):
        n_dofs = leapfrog.space.n_dofs
        if initial is None:
            u0, u1 = np.zeros(n_dofs), np.zeros(n_dofs)
        else:
            u0, u1 = (np.array(v, dtype=float) for v in initial)
        self.leapfrog = leapfrog
        self.loads = loads
        self.growth_limit = growth_limit
        self.state = TimeState(1, leapfrog.dt, u0, u1)
        self._last = leapfrog.m_norm(u1)
        self._base = min(leapfrog.m_norm(u0), self._last)

    def advance(self) -> TimeState:
        st = self.state
        if st.u_next is not None:
            st = self.state = TimeState(st.n + 1, st.dt, st.u_curr, st.u_next)
        self.leapfrog.step(st, self.loads(st.t))
        if not np.all(np.isfinite(st.u_next)):
            raise InstabilityError(st.n, st.t, "non-finite values")
        norm = self.leapfrog.m_norm(st.u_next)
        if norm <= self._last:
            self._base = norm
        elif norm > self.growth_limit * (1.0 + self._base):
            raise InstabilityError(st.n, st.t, f"solution norm grew from {self._base:.3e} to {norm:.3e}")
        self._last = norm
        return st


def run(
    leapfrog: LeapFrog,
    loads: Callable[[float], np.ndarray],
    T: float,
    observers: Iterable[Observer] = (),
    initial: tuple[np.ndarray, np.ndarray] | None = None,
    growth_limit: float = 1e6,
) -> RunResult:
    """Advance up to t_N, N = ceil(T / dt).

    Observers see every state whose three levels are available, i.e. steps
    n = 1 .. N-1, in registration order. The returned state holds u^N as
    ``u_next``.
    """
    N = n_steps(T, leapfrog.dt)
    stepper = Stepper(leapfrog, loads, initial, growth_limit)
    observers = list(observers)
    for _ in range(1, N):
        state = stepper.advance()
        for obs in observers:
            obs(state)
    return RunResult(stepper.state, max(N - 1, 0), leapfrog.dt)


def make_load_function(assembler: LoadAssembler, f, g) -> Callable[[float], np.ndarray]:
    def loads(t: float) -> np.ndarray:
        return assembler.vector(*assembler.sample(f, g, t))

    return loads
