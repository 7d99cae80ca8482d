"""Implicit Euler time stepping for truth and reduced damped-wave systems."""

import logging
from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import IntegrationError, NumericalError
from .truth_fem import AffineLoad, DampedWaveOperators, StateVector

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverSettings:
    """Constant-step implicit Euler on [0, t_end]."""

    t_end: float
    step: float
    record_every: int = 1

    def __post_init__(self) -> None:
        if not 0 < self.step <= self.t_end:
            raise ValueError(
                f"Step must satisfy 0 < step <= t_end, got step={self.step}, "
                f"t_end={self.t_end}"
            )
        ratio = self.t_end / self.step
        if ratio > np.iinfo(np.int64).max:
            raise ValueError("t_end / step exceeds the integer range")
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ValueError(
                f"t_end={self.t_end} is not an integer multiple of step={self.step}"
            )
        if self.record_every < 1:
            raise ValueError("record_every must be at least 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.step))


@dataclass(frozen=True)
class Trajectory:
    """Recorded states of a time-discrete run.

    ``p`` and ``u`` hold one row per recorded instant. ``derivative_energies``
    is the energy of the discrete time derivative (x_n - x_{n-1}) / step and is
    NaN at t = 0.
    """

    times: np.ndarray
    p: np.ndarray
    u: np.ndarray
    step: float
    record_every: int = 1
    energies: np.ndarray | None = None
    derivative_energies: np.ndarray | None = None

    def __len__(self) -> int:
        return int(self.times.size)

    def state(self, index: int) -> StateVector:
        return StateVector(p=self.p[index], u=self.u[index])

    @property
    def records_every_step(self) -> bool:
        return self.record_every == 1


def _operators(system: Any) -> DampedWaveOperators:
    if isinstance(system, DampedWaveOperators):
        return system
    ops = getattr(system, "operators", None)
    if not isinstance(ops, DampedWaveOperators):
        raise TypeError(f"{type(system).__name__} does not carry damped-wave operators")
    return ops


def energy(system: Any, state: StateVector) -> float:
    """Weighted energy 1/2 (|a^1/2 p|^2 + |b^1/2 u|^2) of a state."""
    return _operators(system).energy(state.p, state.u)


def integrate(
    system: Any,
    mu: float,
    load: AffineLoad | None,
    x0: StateVector,
    settings: SolverSettings,
) -> Trajectory:
    """
    Integrate ``M x' + K(mu) x = L(t)`` with implicit Euler.

    Each step solves ``(M + tau K) x_{n+1} = M x_n + tau L(t_{n+1})`` with a
    factorization cached per (mu, tau) on the system's operators.

    Args:
        system: DampedWaveOperators, or a truth/reduced model carrying them
        mu: Damping parameter
        load: Affine load in the system's coordinates, None for homogeneous data
        x0: Initial state
        settings: Step size, horizon and recording cadence

    Returns:
        The recorded trajectory, starting with the initial state at t = 0

    Raises:
        ValueError: If x0 does not match the system dimensions
        IntegrationError: On factorization failure or a non-finite state
    """
    ops = _operators(system)
    n_p, n_u = ops.n_p, ops.n_u
    if x0.p.shape != (n_p,) or x0.u.shape != (n_u,):
        raise ValueError(
            f"Initial state has shapes {x0.p.shape}, {x0.u.shape}; "
            f"expected ({n_p},), ({n_u},)"
        )

    tau = settings.step
    try:
        solver = ops.step_solver(mu, tau)
    except NumericalError as e:
        raise IntegrationError(f"Step matrix for mu={mu}, tau={tau}: {e}") from e

    n_records = settings.n_steps // settings.record_every + 1
    times = np.empty(n_records)
    p_rec = np.empty((n_records, n_p))
    u_rec = np.empty((n_records, n_u))
    energies = np.empty(n_records)
    derivative_energies = np.full(n_records, np.nan)

    p, u = np.array(x0.p, dtype=float), np.array(x0.u, dtype=float)
    times[0], p_rec[0], u_rec[0] = 0.0, p, u
    energies[0] = ops.energy(p, u)

    record = 1
    for n in range(1, settings.n_steps + 1):
        t = n * tau
        rhs = np.concatenate([ops.mass_p @ p, ops.mass_u @ u])
        if load is not None:
            fp, fu = load.evaluate(t)
            rhs[:n_p] += tau * fp
            rhs[n_p:] += tau * fu
        x = solver.solve(rhs)
        if not np.all(np.isfinite(x)):
            raise IntegrationError(f"Non-finite state at t={t} (mu={mu})")
        p_new, u_new = x[:n_p], x[n_p:]

        if n % settings.record_every == 0:
            times[record] = t
            p_rec[record], u_rec[record] = p_new, u_new
            energies[record] = ops.energy(p_new, u_new)
            derivative_energies[record] = ops.energy(
                (p_new - p) / tau, (u_new - u) / tau
            )
            record += 1
        p, u = p_new, u_new

    logger.debug(
        f"Integrated {n_p + n_u} unknowns over {settings.n_steps} steps (mu={mu})"
    )
    return Trajectory(
        times=times,
        p=p_rec,
        u=u_rec,
        step=tau,
        record_every=settings.record_every,
        energies=energies,
        derivative_energies=derivative_energies,
    )
