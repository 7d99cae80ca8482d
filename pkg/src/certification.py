"""Stability constants, residual norms and a-posteriori error bounds.

The bound Delta(t) uses the exponential stability of compatible Galerkin
approximations: residuals enter through a memory kernel exp(-gamma (t - s)).
The generic bound Delta~(t) integrates plain residual norms and serves as the
comparison baseline.
"""

import logging
import threading
from dataclasses import dataclass
from typing import TYPE_CHECKING, Literal

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, LinearOperator, eigsh

from .errors import EigenSolverError, NumericalError
from .time_integration import SolverSettings, Trajectory
from .truth_fem import AffineLoad, LinearSolver, TruthModel

if TYPE_CHECKING:
    from .reduction import ReducedBasis, ReducedInitialState

logger = logging.getLogger(__name__)

DENSE_EIGEN_LIMIT = 200
EIGEN_TOLERANCE = 1e-12
ENERGY_UNDERFLOW = 1e-14

PoincareConvention = Literal["sqrt", "eigenvalue"]
ConstantsMode = Literal["per_mu", "worst_case"]


@dataclass(frozen=True)
class BoundConstants:
    """Constants entering the error bounds for one damping parameter."""

    mu: float
    C0: float
    C1: float
    C_P: float
    gamma: float
    Cprime: float
    Cdprime: float
    Ctilde: float

    def as_dict(self) -> dict[str, float]:
        return {
            "mu": self.mu,
            "C0": self.C0,
            "C1": self.C1,
            "C_P": self.C_P,
            "gamma": self.gamma,
            "Cprime": self.Cprime,
            "Cdprime": self.Cdprime,
            "Ctilde": self.Ctilde,
        }


def constants_from(mu: float, C0: float, C1: float, C_P: float) -> BoundConstants:
    """Stability constants from the coefficient bounds and the Poincare constant."""
    if not 0 < C0 <= C1:
        raise ValueError(f"Coefficient bounds must satisfy 0 < C0 <= C1, got {C0}, {C1}")
    if not C_P > 0:
        raise ValueError(f"Poincare constant must be positive, got {C_P}")
    gamma = (2.0 / 3.0) * (C0 / C1) * C0 / (2.0 * C0 + 4.0 * C_P * C1)
    c = 3.0 * np.sqrt(C1 / C0)
    return BoundConstants(
        mu=float(mu),
        C0=float(C0),
        C1=float(C1),
        C_P=float(C_P),
        gamma=float(gamma),
        Cprime=float(c),
        Cdprime=float(c),
        Ctilde=float(max(C1, 1.0 / C0) / C0),
    )


@dataclass(frozen=True)
class PoincareMatrices:
    """Pencil of the Poincare eigenproblem ``B u = lambda (A + D) u``.

    ``D = projection.T @ kernel_damping @ projection`` with ``projection`` the
    coefficients of the L2 projection onto the kernel fluxes.
    """

    A: sparse.csr_matrix
    B: sparse.csr_matrix
    projection: np.ndarray
    kernel_damping: np.ndarray

    @property
    def D(self) -> np.ndarray:
        return self.projection.T @ self.kernel_damping @ self.projection

    def rayleigh(self, u: np.ndarray) -> float:
        """Quotient ``u.B.u / u.(A + D).u``."""
        pu = self.projection @ u
        denominator = float(u @ (self.A @ u) + pu @ (self.kernel_damping @ pu))
        return float(u @ (self.B @ u)) / denominator


def poincare_matrices(model: TruthModel, mu: float) -> PoincareMatrices:
    """Assemble A (a^-1 weighted derivative stiffness), B (M_b) and the kernel damping."""
    inv_weight = 1.0 / (np.repeat(model.coefficients.a, model.cells_per_edge) * model.cell_width)
    A = sparse.csr_matrix(model.G.T @ sparse.diags(inv_weight) @ model.G)
    K = model.kernel_flux
    gram = K.T @ (model.M_V @ K)
    projection = linalg.solve(gram, (model.M_V @ K).T, assume_a="pos")
    kernel_damping = mu * (K.T @ (model.D_base @ K))
    return PoincareMatrices(
        A=A,
        B=sparse.csr_matrix(model.M_b),
        projection=np.asarray(projection),
        kernel_damping=np.asarray(kernel_damping),
    )


def poincare_eigenpair(model: TruthModel, mu: float) -> tuple[float, np.ndarray]:
    """
    Largest eigenvalue and eigenvector of ``B u = lambda (A + D) u``.

    Dense ``eigh`` below 200 unknowns; above, ARPACK in generalized mode with
    ``A + D`` applied through an augmented sparse factorization of
    ``[[A, P^T], [P, -S^-1]]`` that keeps the rank-k kernel term out of the
    sparse pattern.

    Raises:
        EigenSolverError: If A + D is singular or the iteration fails
    """
    mats = poincare_matrices(model, mu)
    n = model.n_u

    if n < DENSE_EIGEN_LIMIT:
        try:
            values, vectors = linalg.eigh(
                mats.B.toarray(), mats.A.toarray() + mats.D, subset_by_index=[n - 1, n - 1]
            )
        except linalg.LinAlgError as e:
            raise EigenSolverError(f"Poincare pencil is not definite (mu={mu}): {e}") from e
        vector = vectors[:, 0]
        return float(mats.rayleigh(vector)), vector

    try:
        kernel_inverse = linalg.inv(mats.kernel_damping)
    except linalg.LinAlgError as e:
        raise EigenSolverError(
            f"Damping vanishes on the kernel fluxes (mu={mu}): {e}"
        ) from e
    P = sparse.csr_matrix(mats.projection)
    augmented = sparse.bmat(
        [[mats.A, P.T], [P, sparse.csr_matrix(-kernel_inverse)]], format="csc"
    )
    try:
        solver = LinearSolver(augmented)
    except NumericalError as e:
        raise EigenSolverError(f"A + D is singular (mu={mu}): {e}") from e

    k = mats.projection.shape[0]

    def apply_inverse(y: np.ndarray) -> np.ndarray:
        rhs = np.concatenate([np.ravel(y), np.zeros(k)])
        return solver.solve(rhs)[:n]

    def apply_stiffness(x: np.ndarray) -> np.ndarray:
        x = np.ravel(x)
        px = mats.projection @ x
        return mats.A @ x + mats.projection.T @ (mats.kernel_damping @ px)

    try:
        values, vectors = eigsh(
            mats.B,
            k=1,
            M=LinearOperator((n, n), matvec=apply_stiffness, dtype=float),
            Minv=LinearOperator((n, n), matvec=apply_inverse, dtype=float),
            which="LA",
            v0=np.random.default_rng(0).standard_normal(n),
            tol=EIGEN_TOLERANCE,
        )
    except (ArpackError, ArpackNoConvergence) as e:
        raise EigenSolverError(f"Poincare eigensolver failed (mu={mu}): {e}") from e
    vector = vectors[:, 0]
    return float(mats.rayleigh(vector)), vector


def poincare_constant(
    model: TruthModel, mu: float, convention: PoincareConvention = "sqrt"
) -> float:
    """Generalized Poincare constant: sqrt of the largest eigenvalue, or the eigenvalue itself."""
    value, _ = poincare_eigenpair(model, mu)
    if convention == "sqrt":
        return float(np.sqrt(value))
    if convention == "eigenvalue":
        return value
    raise ValueError(f"Unknown Poincare convention '{convention}'")


def stability_constants(
    model: TruthModel,
    mu: float,
    convention: PoincareConvention = "sqrt",
    mu_range: tuple[float, float] | None = None,
    worst_case: bool = False,
) -> BoundConstants:
    """
    Bound constants for one parameter value.

    Args:
        model: Truth model
        mu: Damping parameter
        convention: Poincare convention, see poincare_constant
        mu_range: Admissible parameter interval; mu outside it is rejected
        worst_case: Use C0/C1 over the whole interval and C_P at its lower end

    Raises:
        ValueError: If mu lies outside mu_range, or worst_case lacks a range
    """
    if mu_range is not None and not mu_range[0] <= mu <= mu_range[1]:
        raise ValueError(f"mu={mu} outside the admissible range {list(mu_range)}")
    coeffs = model.coefficients
    if worst_case:
        if mu_range is None:
            raise ValueError("Worst-case constants need the parameter range")
        lo, hi = mu_range
        C0 = min(coeffs.bounds(lo)[0], coeffs.bounds(hi)[0])
        C1 = max(coeffs.bounds(lo)[1], coeffs.bounds(hi)[1])
        C_P = poincare_constant(model, lo, convention)
    else:
        C0, C1 = coeffs.bounds(mu)
        C_P = poincare_constant(model, mu, convention)
    return constants_from(mu, C0, C1, C_P)


class ConstantsProvider:
    """Bound constants cached per parameter value; safe to share between threads."""

    def __init__(
        self,
        model: TruthModel,
        convention: PoincareConvention = "sqrt",
        mode: ConstantsMode = "per_mu",
        mu_range: tuple[float, float] | None = None,
    ):
        self.model = model
        self.convention = convention
        self.mode = mode
        self.mu_range = mu_range
        self._cache: dict[float, BoundConstants] = {}
        self._lock = threading.Lock()

    def get(self, mu: float) -> BoundConstants:
        key = float(mu)
        if self.mu_range is not None and not self.mu_range[0] <= key <= self.mu_range[1]:
            raise ValueError(f"mu={key} outside the admissible range {list(self.mu_range)}")
        with self._lock:
            cached = self._cache.get(key)
        if cached is not None:
            return cached
        if self.mode == "worst_case":
            with self._lock:
                shared = next(iter(self._cache.values()), None)
            if shared is not None:
                constants = constants_from(key, shared.C0, shared.C1, shared.C_P)
            else:
                constants = stability_constants(
                    self.model, key, self.convention, self.mu_range, worst_case=True
                )
        else:
            constants = stability_constants(self.model, key, self.convention, self.mu_range)
        logger.debug(
            f"Constants for mu={key:.4g}: C_P={constants.C_P:.4g}, "
            f"gamma={constants.gamma:.4g}, C'={constants.Cprime:.4g}"
        )
        with self._lock:
            self._cache[key] = constants
        return constants


def fit_decay_rate(times: np.ndarray, energies: np.ndarray, start: float) -> float:
    """
    Least-squares decay rate of an energy series from ``start`` on.

    The window ends before the energy falls below 1e-14 of its value at the
    window start.

    Raises:
        ValueError: If start is not inside the recorded interval
        NumericalError: With fewer than 3 usable points or a nondecaying fit
    """
    times = np.asarray(times, dtype=float)
    energies = np.asarray(energies, dtype=float)
    if not times[0] <= start < times[-1]:
        raise ValueError(f"Fit start {start} outside [{times[0]}, {times[-1]})")

    window = np.flatnonzero((times >= start) & np.isfinite(energies))
    if window.size == 0:
        raise NumericalError(f"No finite energies recorded after t={start}")
    reference = energies[window[0]]
    usable = energies[window] > ENERGY_UNDERFLOW * reference
    cut = int(np.argmin(usable)) if not np.all(usable) else usable.size
    window = window[:cut]
    if window.size < 3:
        raise NumericalError(
            f"Only {window.size} usable energy values after t={start}; need at least 3"
        )

    slope, _ = np.polyfit(times[window], np.log(energies[window]), 1)
    if slope >= 0:
        raise NumericalError(f"Energy does not decay after t={start} (slope {slope:.3e})")
    return float(-slope)


def gamma_from_simulation(trajectory: Trajectory, start: float) -> float:
    """Decay rate fitted to the energy of the discrete time derivatives."""
    if trajectory.derivative_energies is None:
        raise ValueError("Trajectory carries no derivative energies")
    return fit_decay_rate(trajectory.times, trajectory.derivative_energies, start)


@dataclass(frozen=True)
class ResidualOfflineData:
    """Parameter- and state-independent Gramians of the residual components.

    Pressure residual coefficients are ``[theta_p, -dp, -u]`` against
    ``[F_k, M_a Q, G V]``, flux residual coefficients ``[theta_u, -du, p, -mu u]``
    against ``[G_k, M_b V, G^T Q, D V]``; ``gram_*`` hold the dual-norm
    Gramians of those columns.
    """

    gram_p: np.ndarray
    gram_u: np.ndarray
    load: AffineLoad
    dim_q: int
    dim_v: int

    def _coefficients(
        self,
        mu: float,
        times: np.ndarray,
        p: np.ndarray,
        u: np.ndarray,
        dp: np.ndarray,
        du: np.ndarray,
    ) -> tuple[np.ndarray, np.ndarray]:
        theta_p = np.empty((times.size, len(self.load.pressure_amplitudes)))
        theta_u = np.empty((times.size, len(self.load.flux_amplitudes)))
        for i, t in enumerate(times):
            theta_p[i], theta_u[i] = self.load.amplitudes(float(t))
        cp = np.hstack([theta_p, -dp, -u])
        cu = np.hstack([theta_u, -du, p, -mu * u])
        return cp, cu

    def norms_sq(
        self,
        mu: float,
        times: np.ndarray,
        p: np.ndarray,
        u: np.ndarray,
        dp: np.ndarray,
        du: np.ndarray,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Squared dual residual norms for rows of reduced states and derivatives."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        p, u, dp, du = (np.atleast_2d(x) for x in (p, u, dp, du))
        if p.shape[1] != self.dim_q or u.shape[1] != self.dim_v:
            raise ValueError(
                f"Reduced states of widths ({p.shape[1]}, {u.shape[1]}) do not match "
                f"basis dimensions ({self.dim_q}, {self.dim_v})"
            )
        cp, cu = self._coefficients(mu, times, p, u, dp, du)
        rp = np.einsum("ij,jk,ik->i", cp, self.gram_p, cp)
        ru = np.einsum("ij,jk,ik->i", cu, self.gram_u, cu)
        return np.clip(rp, 0.0, None), np.clip(ru, 0.0, None)

    def trajectory_norms_sq(
        self, mu: float, trajectory: Trajectory
    ) -> tuple[np.ndarray, np.ndarray]:
        """Residual norms at every step of a reduced run (zero at t = 0)."""
        if not trajectory.records_every_step:
            raise ValueError("Residuals need a trajectory recorded at every step")
        rp = np.zeros(len(trajectory))
        ru = np.zeros(len(trajectory))
        if len(trajectory) > 1:
            tau = trajectory.step
            dp = np.diff(trajectory.p, axis=0) / tau
            du = np.diff(trajectory.u, axis=0) / tau
            rp[1:], ru[1:] = self.norms_sq(
                mu, trajectory.times[1:], trajectory.p[1:], trajectory.u[1:], dp, du
            )
        return rp, ru


def prepare_residual_offline(
    model: TruthModel, rb: "ReducedBasis", load: AffineLoad
) -> ResidualOfflineData:
    """
    Precompute the residual Gramians of a reduced basis.

    Args:
        model: Truth model the basis lives in
        rb: Reduced basis (columns are truth coefficient vectors)
        load: Affine truth load

    Returns:
        Offline data whose online evaluation cost is independent of the truth size

    Raises:
        ValueError: On dimension mismatch between model, basis and load
    """
    Q, V = rb.q_basis, rb.v_basis
    if Q.shape[0] != model.n_p or V.shape[0] != model.n_u:
        raise ValueError("Reduced basis does not live in the truth spaces of the model")
    if load.pressure_vectors.shape[0] != model.n_p or load.flux_vectors.shape[0] != model.n_u:
        raise ValueError("Load vectors do not match the truth dimensions")

    pressure_columns = np.hstack(
        [load.pressure_vectors, np.asarray(model.M_a @ Q), np.asarray(model.G @ V)]
    )
    flux_columns = np.hstack(
        [
            load.flux_vectors,
            np.asarray(model.M_b @ V),
            np.asarray(model.G.T @ Q),
            np.asarray(model.D_base @ V),
        ]
    )
    gram_p = pressure_columns.T @ (pressure_columns / model.cell_width[:, None])
    gram_u = flux_columns.T @ model.gram_u_solver.solve(flux_columns)
    return ResidualOfflineData(
        gram_p=0.5 * (gram_p + gram_p.T),
        gram_u=0.5 * (gram_u + gram_u.T),
        load=load,
        dim_q=rb.dim_q,
        dim_v=rb.dim_v,
    )


def bound_series(
    times: np.ndarray,
    step: float,
    rp_sq: np.ndarray,
    ru_sq: np.ndarray,
    constants: BoundConstants,
    initial_error_p: float = 0.0,
    initial_error_u: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Delta and Delta~ along a time grid from residual norms.

    ``I_n = exp(-gamma tau) I_{n-1} + tau r_n^2`` feeds
    ``Delta_n = C' exp(-gamma t_n) e0^2 + C'' I_n``, and
    ``J_n = J_{n-1} + tau (|r^p_n| + |r^u_n|)`` feeds
    ``Delta~_n = C~ (|e^p_0| + |e^u_0| + J_n)^2``.
    """
    if constants.gamma <= 0:
        raise ValueError(f"Decay rate must be positive, got {constants.gamma}")
    decay = np.exp(-constants.gamma * step)
    r_sq = rp_sq + ru_sq
    r_sum = np.sqrt(rp_sq) + np.sqrt(ru_sq)
    integral = np.zeros(times.size)
    linear = np.zeros(times.size)
    for n in range(1, times.size):
        integral[n] = decay * integral[n - 1] + step * r_sq[n]
        linear[n] = linear[n - 1] + step * r_sum[n]

    e0_sq = initial_error_p**2 + initial_error_u**2
    delta = constants.Cprime * np.exp(-constants.gamma * times) * e0_sq
    delta = delta + constants.Cdprime * integral
    delta_tilde = constants.Ctilde * (initial_error_p + initial_error_u + linear) ** 2
    return delta, delta_tilde


@dataclass(frozen=True)
class CertifiedTrajectory:
    """Bounds along a reduced run, with true errors when the truth is known."""

    mu: float
    times: np.ndarray
    delta: np.ndarray
    delta_tilde: np.ndarray
    rp_norm_sq: np.ndarray
    ru_norm_sq: np.ndarray
    err_sq: np.ndarray | None = None
    eta: np.ndarray | None = None
    eta_tilde: np.ndarray | None = None

    def rigor_violations(self, rtol: float = 1e-10) -> int:
        """Number of instants where a bound falls below the true error."""
        if self.err_sq is None:
            return 0
        slack = rtol * np.maximum(self.err_sq, 0.0)
        below = (self.delta < self.err_sq - slack) | (self.delta_tilde < self.err_sq - slack)
        return int(np.sum(below))

    @property
    def tightness_ratio(self) -> float:
        """Delta(T) / Delta~(T)."""
        if self.delta_tilde[-1] == 0.0:
            return float("nan")
        return float(self.delta[-1] / self.delta_tilde[-1])


def error_norms_sq(
    model: TruthModel, rb: "ReducedBasis", reduced: Trajectory, truth: Trajectory
) -> np.ndarray:
    """Squared L2 errors ``|p - Q p^|^2 + |u - V u^|^2`` per recorded instant."""
    approx = rb.reconstruct(reduced.p, reduced.u)
    ep = truth.p - approx.p
    eu = truth.u - approx.u
    return np.einsum("ij,ij->i", ep, (model.M_Q @ ep.T).T) + np.einsum(
        "ij,ij->i", eu, (model.M_V @ eu.T).T
    )


def certify(
    model: TruthModel,
    rb: "ReducedBasis",
    mu: float,
    reduced: Trajectory,
    settings: SolverSettings,
    constants: BoundConstants,
    offline: ResidualOfflineData,
    initial: "ReducedInitialState",
    truth: Trajectory | None = None,
) -> CertifiedTrajectory:
    """
    Certify a reduced run.

    Args:
        model: Truth model
        rb: Basis the reduced run used
        mu: Damping parameter of the run
        reduced: Reduced trajectory recorded at every step
        settings: Time grid the run used
        constants: Bound constants for mu
        offline: Residual offline data of rb and the load
        initial: Projected initial state with its error norms
        truth: Optional truth trajectory on the same grid for errors and effectivities

    Returns:
        CertifiedTrajectory with Delta and Delta~ at every step

    Raises:
        ValueError: On mismatched time grids or invalid constants
    """
    if not reduced.records_every_step or not np.isclose(reduced.step, settings.step):
        raise ValueError("Reduced trajectory must be recorded at every step of the grid")
    if len(reduced) != settings.n_steps + 1:
        raise ValueError(
            f"Reduced trajectory has {len(reduced)} records, grid has {settings.n_steps + 1}"
        )

    rp_sq, ru_sq = offline.trajectory_norms_sq(mu, reduced)
    delta, delta_tilde = bound_series(
        reduced.times, settings.step, rp_sq, ru_sq, constants, initial.error_p, initial.error_u
    )

    err_sq = eta = eta_tilde = None
    if truth is not None:
        if truth.times.shape != reduced.times.shape or not np.allclose(
            truth.times, reduced.times
        ):
            raise ValueError("Truth and reduced trajectories use different time grids")
        err_sq = error_norms_sq(model, rb, reduced, truth)
        positive = err_sq > 0
        eta = np.full(err_sq.shape, np.nan)
        eta_tilde = np.full(err_sq.shape, np.nan)
        eta[positive] = delta[positive] / err_sq[positive]
        eta_tilde[positive] = delta_tilde[positive] / err_sq[positive]

    return CertifiedTrajectory(
        mu=float(mu),
        times=reduced.times,
        delta=delta,
        delta_tilde=delta_tilde,
        rp_norm_sq=rp_sq,
        ru_norm_sq=ru_sq,
        err_sq=err_sq,
        eta=eta,
        eta_tilde=eta_tilde,
    )


def decay_violations(
    model: TruthModel, trajectory: Trajectory, constants: BoundConstants, rtol: float = 1e-10
) -> int:
    """
    Count pairs s <= t breaking ``|x(t)|^2 <= C' exp(-gamma (t - s)) |x(s)|^2``.

    Meant for homogeneous runs, where the inequality is the exponential
    stability statement.
    """
    norms = np.einsum("ij,ij->i", trajectory.p, (model.M_Q @ trajectory.p.T).T)
    norms = norms + np.einsum("ij,ij->i", trajectory.u, (model.M_V @ trajectory.u.T).T)
    t = trajectory.times
    lag = t[None, :] - t[:, None]
    bound = constants.Cprime * np.exp(-constants.gamma * lag) * norms[:, None]
    later = lag >= 0
    violations = later & (norms[None, :] > bound * (1.0 + rtol))
    count = int(np.sum(violations))
    if count:
        logger.warning(f"Decay certificate violated at {count} (s, t) pairs (mu={constants.mu})")
    return count
