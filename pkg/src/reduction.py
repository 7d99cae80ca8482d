"""Compatible reduced spaces and the bound-driven POD-greedy training loop.

A reduced pair (Q_N, V_N) is compatible when the edgewise derivative maps V_N
onto Q_N and the constant-flux kernel K lies in V_N. Both hold by construction
here: V_N is always K plus the image of Q_N under a right-inverse of the
derivative.
"""

import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import pairwise
from typing import Literal

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.linalg import splu

from .certification import (
    ConstantsProvider,
    ResidualOfflineData,
    certify,
    prepare_residual_offline,
)
from .errors import GreedyStagnationError, NumericalError
from .time_integration import SolverSettings, Trajectory, integrate
from .truth_fem import (
    AffineLoad,
    DampedWaveOperators,
    SourceAndBoundaryData,
    StateVector,
    TruthModel,
    assemble_load,
    initial_state,
)

logger = logging.getLogger(__name__)

EIGENVALUE_FLOOR = 1e-14
Indicator = Literal["delta", "delta_tilde"]


def m_orthonormalize(
    vectors: np.ndarray,
    gram: sparse.spmatrix | np.ndarray,
    against: np.ndarray | None = None,
    drop_tol: float = 1e-10,
) -> np.ndarray:
    """
    Gram-Schmidt with reorthogonalization in the inner product ``gram``.

    Columns are orthogonalized against ``against`` (assumed orthonormal) and
    each other; columns whose remaining norm falls below ``drop_tol`` times
    their original norm are dropped.
    """
    n = vectors.shape[0]
    basis = np.zeros((n, 0)) if against is None else against
    kept: list[np.ndarray] = []
    for j in range(vectors.shape[1]):
        v = np.array(vectors[:, j], dtype=float)
        original = np.sqrt(max(float(v @ (gram @ v)), 0.0))
        if original == 0.0:
            continue
        for _ in range(2):
            if basis.shape[1]:
                v -= basis @ (basis.T @ (gram @ v))
            for w in kept:
                v -= w * float(w @ (gram @ v))
        norm = np.sqrt(max(float(v @ (gram @ v)), 0.0))
        if norm <= drop_tol * original:
            continue
        kept.append(v / norm)
    return np.column_stack(kept) if kept else np.zeros((n, 0))


class RightInverse:
    """A right-inverse of the edgewise derivative from Q into V."""

    def __init__(self, model: TruthModel):
        self.model = model

    def apply(self, q_hat: np.ndarray) -> np.ndarray:
        """Flux coefficients v with ``G v = q_hat`` (columnwise)."""
        raise NotImplementedError

    def lift(self, q: np.ndarray) -> np.ndarray:
        """Flux coefficients whose edgewise derivative is the pressure function q."""
        return self.apply(self.model.M_Q @ q)


class MinNormRightInverse(RightInverse):
    """Minimum M_V-norm solution ``M_V^-1 G^T (G M_V^-1 G^T)^-1 q_hat``.

    Evaluated through the sparse saddle-point system
    ``[[M_V, G^T], [G, 0]] [v; lam] = [0; q_hat]``.
    """

    def __init__(self, model: TruthModel):
        super().__init__(model)
        saddle = sparse.bmat([[model.M_V, model.G.T], [model.G, None]], format="csc")
        try:
            self._lu = splu(saddle)
        except RuntimeError as e:
            raise NumericalError(f"Divergence saddle system is singular: {e}") from e

    def apply(self, q_hat: np.ndarray) -> np.ndarray:
        q_hat = np.asarray(q_hat, dtype=float)
        squeeze = q_hat.ndim == 1
        q2 = q_hat[:, None] if squeeze else q_hat
        rhs = np.vstack([np.zeros((self.model.n_u, q2.shape[1])), q2])
        v = self._lu.solve(rhs)[: self.model.n_u]
        return v[:, 0] if squeeze else v


class AntiderivativeRightInverse(RightInverse):
    """Edgewise antiderivative plus edgewise constants restoring the junction balance."""

    def apply(self, q_hat: np.ndarray) -> np.ndarray:
        model = self.model
        graph = model.graph
        n = model.cells_per_edge
        q_hat = np.asarray(q_hat, dtype=float)
        squeeze = q_hat.ndim == 1
        q2 = q_hat[:, None] if squeeze else q_hat
        cols = q2.shape[1]

        increments = q2.reshape(graph.n_edges, n, cols)
        broken = np.zeros((graph.n_edges, n + 1, cols))
        broken[:, 1:] = np.cumsum(increments, axis=1)
        totals = broken[:, -1]

        balance = graph.balance_matrix
        if balance.shape[0]:
            incoming = np.clip(balance, 0.0, None)
            constants = linalg.lstsq(balance, -incoming @ totals)[0]
            broken += constants[:, None, :]
        v = model.from_broken(broken.reshape(-1, cols))
        return v[:, 0] if squeeze else v


def make_right_inverse(
    model: TruthModel, kind: Literal["min_norm", "antiderivative"] = "min_norm"
) -> RightInverse:
    if kind == "min_norm":
        return MinNormRightInverse(model)
    if kind == "antiderivative":
        return AntiderivativeRightInverse(model)
    raise ValueError(f"Unknown right-inverse '{kind}'")


@dataclass(frozen=True)
class ReducedBasis:
    """Compatible reduced spaces with their projected operators.

    ``q_basis`` columns are M_Q-orthonormal, ``v_basis`` columns M_V-orthonormal
    with the first ``kernel_dim`` spanning K. ``blocks[i]`` is the number of
    pressure modes added in greedy iteration i, so every whole-iteration prefix
    is itself compatible.
    """

    q_basis: np.ndarray
    v_basis: np.ndarray
    kernel_dim: int
    blocks: tuple[int, ...]
    operators: DampedWaveOperators = field(repr=False)

    @property
    def dim_q(self) -> int:
        return int(self.q_basis.shape[1])

    @property
    def dim_v(self) -> int:
        return int(self.v_basis.shape[1])

    @property
    def n(self) -> int:
        return self.dim_q + self.dim_v

    def project_load(self, load: AffineLoad) -> AffineLoad:
        return load.project(self.q_basis, self.v_basis)

    def reconstruct(self, p: np.ndarray, u: np.ndarray) -> StateVector:
        """Truth coefficients of reduced coefficients (row-stacked arrays allowed)."""
        return StateVector(p=p @ self.q_basis.T, u=u @ self.v_basis.T)

    def prefix(self, model: TruthModel, iterations: int) -> "ReducedBasis":
        """Sub-basis made of the kernel and the first ``iterations`` enrichments."""
        if not 0 <= iterations <= len(self.blocks):
            raise ValueError(
                f"Prefix of {iterations} iterations requested, basis has {len(self.blocks)}"
            )
        m = sum(self.blocks[:iterations])
        return build_reduced_basis(
            model,
            self.q_basis[:, :m],
            self.v_basis[:, : self.kernel_dim + m],
            self.kernel_dim,
            self.blocks[:iterations],
        )


def build_reduced_basis(
    model: TruthModel,
    q_basis: np.ndarray,
    v_basis: np.ndarray,
    kernel_dim: int,
    blocks: Sequence[int] = (),
) -> ReducedBasis:
    """Project the truth operators onto given bases."""
    if q_basis.shape[0] != model.n_p or v_basis.shape[0] != model.n_u:
        raise ValueError(
            f"Basis shapes {q_basis.shape}, {v_basis.shape} do not match "
            f"truth dimensions ({model.n_p}, {model.n_u})"
        )
    Q, V = q_basis, v_basis
    operators = DampedWaveOperators(
        mass_p=Q.T @ (model.M_a @ Q),
        mass_u=V.T @ (model.M_b @ V),
        damping=V.T @ (model.D_base @ V),
        div=Q.T @ (model.G @ V),
        gram_p=Q.T @ (model.M_Q @ Q),
        gram_u=V.T @ (model.M_V @ V),
    )
    return ReducedBasis(
        q_basis=Q,
        v_basis=V,
        kernel_dim=int(kernel_dim),
        blocks=tuple(int(b) for b in blocks),
        operators=operators,
    )


def kernel_only_basis(model: TruthModel) -> ReducedBasis:
    """The minimal compatible basis: Q_N = {0}, V_N = K."""
    v_basis = m_orthonormalize(model.kernel_flux, model.M_V)
    return build_reduced_basis(model, np.zeros((model.n_p, 0)), v_basis, v_basis.shape[1])


@dataclass(frozen=True)
class CompatibilityReport:
    a1_residual: float
    a1_rank: int
    a2_residual: float
    q_orthonormality: float
    v_orthonormality: float
    dim_q: int

    def passed(self, tol: float = 1e-10, ortho_tol: float = 1e-12) -> bool:
        return (
            self.a1_residual <= tol
            and self.a1_rank == self.dim_q
            and self.a2_residual <= tol
            and self.q_orthonormality <= ortho_tol
            and self.v_orthonormality <= ortho_tol
        )


def check_compatibility(model: TruthModel, rb: ReducedBasis) -> CompatibilityReport:
    """Residuals of the A1/A2 conditions and of the basis orthonormality."""
    Q, V = rb.q_basis, rb.v_basis

    derivatives = model.derivative(V)
    coefficients = Q.T @ (model.M_Q @ derivatives)
    remainder = derivatives - Q @ coefficients
    scale = max(1.0, float(np.max(_m_norms(derivatives, model.M_Q), initial=0.0)))
    a1_residual = float(np.max(_m_norms(remainder, model.M_Q), initial=0.0)) / scale
    if coefficients.size:
        sv = linalg.svdvals(coefficients)
        a1_rank = int(np.sum(sv > 1e-10 * sv[0]))
    else:
        a1_rank = 0

    kernel = model.kernel_flux / _m_norms(model.kernel_flux, model.M_V)
    kernel_remainder = kernel - V @ (V.T @ (model.M_V @ kernel))
    a2_residual = float(np.max(_m_norms(kernel_remainder, model.M_V), initial=0.0))

    return CompatibilityReport(
        a1_residual=a1_residual,
        a1_rank=a1_rank,
        a2_residual=a2_residual,
        q_orthonormality=_orthonormality_defect(Q, model.M_Q),
        v_orthonormality=_orthonormality_defect(V, model.M_V),
        dim_q=rb.dim_q,
    )


def _m_norms(vectors: np.ndarray, gram: sparse.spmatrix) -> np.ndarray:
    return np.sqrt(np.maximum(np.sum(vectors * (gram @ vectors), axis=0), 0.0))


def _orthonormality_defect(basis: np.ndarray, gram: sparse.spmatrix) -> float:
    if basis.shape[1] == 0:
        return 0.0
    return float(np.max(np.abs(basis.T @ (gram @ basis) - np.eye(basis.shape[1]))))


def joint_snapshots(model: TruthModel, trajectories: Sequence[Trajectory]) -> np.ndarray:
    """Columns p_1..p_L followed by the edgewise derivatives of u_1..u_L."""
    if not trajectories:
        return np.zeros((model.n_p, 0))
    pressures = np.vstack([traj.p for traj in trajectories]).T
    fluxes = np.vstack([traj.u for traj in trajectories]).T
    return np.hstack([pressures, model.derivative(fluxes)])


def pod_modes(
    snapshots: np.ndarray,
    gram: sparse.spmatrix,
    energy_cutoff: float,
    max_modes: int,
    reference_energy: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Method-of-snapshots POD in the ``gram`` inner product.

    Modes are kept until the captured share of the snapshot energy reaches
    ``1 - energy_cutoff``, at most ``max_modes``. Eigenvalues below 1e-14 of
    the largest, or below 1e-14 of ``reference_energy``, are discarded.

    Returns:
        The gram-orthonormal modes and the eigenvalues of the kept modes
    """
    n = snapshots.shape[0]
    if snapshots.shape[1] == 0 or max_modes <= 0:
        return np.zeros((n, 0)), np.zeros(0)
    correlation = snapshots.T @ (gram @ snapshots)
    correlation = 0.5 * (correlation + correlation.T)
    eigenvalues, eigenvectors = linalg.eigh(correlation)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues, eigenvectors = eigenvalues[order], eigenvectors[:, order]

    total = float(np.sum(np.clip(eigenvalues, 0.0, None)))
    floor = EIGENVALUE_FLOOR * max(float(eigenvalues[0]), reference_energy or 0.0)
    if total <= 0.0 or eigenvalues[0] <= floor:
        return np.zeros((n, 0)), np.zeros(0)

    captured = np.cumsum(eigenvalues) / total
    count = int(np.searchsorted(captured, 1.0 - energy_cutoff) + 1)
    count = min(count, max_modes, int(np.sum(eigenvalues > floor)))
    kept = eigenvalues[:count]
    modes = snapshots @ (eigenvectors[:, :count] / np.sqrt(kept))
    return modes, kept


def constrained_pca(
    model: TruthModel,
    snapshots: Sequence[Trajectory],
    energy_cutoff: float = 1e-7,
    max_modes: int = 10,
    basis: ReducedBasis | None = None,
    right_inverse: RightInverse | None = None,
    min_modes: int = 0,
) -> ReducedBasis:
    """
    Enrich a compatible basis by PCA of the joint pressure/derivative snapshots.

    The joint set {p_l, d/dx u_l} is deflated against the current Q_N, its
    principal components form the new pressure modes, and V_N grows by their
    right-inverse images. Without a basis the kernel-only basis is the start.

    Args:
        model: Truth model the snapshots belong to
        snapshots: Truth trajectories
        energy_cutoff: Admissible share of uncaptured (deflated) energy
        max_modes: Cap on the number of new pressure modes
        basis: Basis to enrich, None for the kernel-only basis
        right_inverse: Right-inverse of the derivative (min-norm by default)
        min_modes: Minimum number of new modes that must be found

    Returns:
        The enriched ReducedBasis (the input basis if nothing new was found)
    """
    if basis is None:
        basis = kernel_only_basis(model)
    if not snapshots and min_modes > 0:
        raise ValueError(f"Empty snapshot set cannot provide {min_modes} modes")

    joint = joint_snapshots(model, snapshots)
    reference = float(np.sum(joint * (model.M_Q @ joint)))
    Q = basis.q_basis
    if Q.shape[1]:
        joint = joint - Q @ (Q.T @ (model.M_Q @ joint))

    modes, eigenvalues = pod_modes(
        joint, model.M_Q, energy_cutoff, max_modes, reference_energy=reference
    )
    new_q = m_orthonormalize(modes, model.M_Q, against=Q)
    if new_q.shape[1] < min_modes:
        raise ValueError(
            f"Snapshots provide {new_q.shape[1]} modes, {min_modes} required"
        )
    if new_q.shape[1] == 0:
        return basis

    lifter = right_inverse or MinNormRightInverse(model)
    new_v = m_orthonormalize(lifter.lift(new_q), model.M_V, against=basis.v_basis)
    if new_v.shape[1] != new_q.shape[1]:
        raise NumericalError(
            f"Right-inverse images lost rank: {new_v.shape[1]} of {new_q.shape[1]}"
        )
    logger.debug(
        f"PCA added {new_q.shape[1]} modes; leading eigenvalues {eigenvalues[:3]}"
    )
    return build_reduced_basis(
        model,
        np.hstack([Q, new_q]),
        np.hstack([basis.v_basis, new_v]),
        basis.kernel_dim,
        (*basis.blocks, new_q.shape[1]),
    )


@dataclass(frozen=True)
class ReducedInitialState:
    state: StateVector
    error_p: float
    error_u: float

    @property
    def error_sq(self) -> float:
        return self.error_p**2 + self.error_u**2


def project_initial(
    model: TruthModel, rb: ReducedBasis, p0: np.ndarray, u0: np.ndarray
) -> ReducedInitialState:
    """L2 projections of truth initial data and the norms of what they miss."""
    p_hat = rb.q_basis.T @ (model.M_Q @ p0)
    u_hat = rb.v_basis.T @ (model.M_V @ u0)
    rest_p = p0 - rb.q_basis @ p_hat
    rest_u = u0 - rb.v_basis @ u_hat
    return ReducedInitialState(
        state=StateVector(p=p_hat, u=u_hat),
        error_p=float(np.sqrt(max(rest_p @ (model.M_Q @ rest_p), 0.0))),
        error_u=float(np.sqrt(max(rest_u @ (model.M_V @ rest_u), 0.0))),
    )


def solve_reduced(
    model: TruthModel,
    rb: ReducedBasis,
    mu: float,
    load: AffineLoad,
    x0: StateVector,
    settings: SolverSettings,
) -> tuple[Trajectory, ReducedInitialState]:
    """Reduced Galerkin run from the projection of a truth initial state."""
    initial = project_initial(model, rb, x0.p, x0.u)
    trajectory = integrate(rb, mu, rb.project_load(load), initial.state, settings)
    return trajectory, initial


@dataclass(frozen=True)
class GreedyRecord:
    iteration: int
    mu: float | None
    indicator: float
    dim_q: int
    dim_v: int
    n: int
    compatibility: CompatibilityReport | None = None


def is_stagnating(selections: Sequence[tuple[float, float]], window: int = 3) -> bool:
    """True when the last `window` selections repeat one parameter without improving."""
    recent = list(selections[-window:])
    if len(recent) < window or len({mu for mu, _ in recent}) != 1:
        return False
    return all(a <= b for (_, a), (_, b) in pairwise(recent))


@dataclass
class GreedyState:
    training_set: list[float]
    basis: ReducedBasis
    tolerance: float
    n_max: int
    history: list[GreedyRecord] = field(default_factory=list)
    stop_reason: str = ""


def greedy_train(
    model: TruthModel,
    training_set: Sequence[float],
    data: SourceAndBoundaryData,
    settings: SolverSettings,
    tolerance: float,
    n_max: int,
    constants: ConstantsProvider,
    *,
    indicator: Indicator = "delta",
    energy_cutoff: float = 1e-7,
    modes_per_iteration: int = 10,
    right_inverse: Literal["min_norm", "antiderivative"] = "min_norm",
    max_iterations: int | None = None,
    truth_solver: Callable[[float], Trajectory] | None = None,
    workers: int = 1,
) -> GreedyState:
    """
    POD-greedy training of a compatible reduced basis.

    Every iteration certifies the current basis on all training parameters,
    stops if the worst max-over-time bound meets the tolerance or the size cap
    is reached, and otherwise enriches with the truth snapshots of the worst
    parameter.

    Args:
        model: Truth model
        training_set: Training parameters
        data: Sources, boundary and initial data
        settings: Time stepping (must record every step)
        tolerance: Target for the max-over-training-set indicator
        n_max: Cap on dim(Q_N) + dim(V_N)
        constants: Bound constants per parameter
        indicator: Bound driving the selection ("delta" or "delta_tilde")
        energy_cutoff: PCA truncation per iteration
        modes_per_iteration: Cap on new pressure modes per iteration
        right_inverse: Right-inverse used to lift pressure modes
        max_iterations: Optional cap on enrichment iterations
        truth_solver: Callable producing the truth trajectory for a parameter
        workers: Thread count for the training sweep

    Returns:
        The final GreedyState with its full history

    Raises:
        ValueError: On an empty training set or settings not recording every step
        GreedyStagnationError: When the same parameter keeps being selected
            without the indicator decreasing, or the basis loses compatibility
    """
    if not training_set:
        raise ValueError("Training set must not be empty")
    if not settings.record_every == 1:
        raise ValueError("Greedy training needs trajectories recorded at every step")

    load = assemble_load(model, data)
    x0 = initial_state(model, data)
    lifter = make_right_inverse(model, right_inverse)
    truth_cache: dict[float, Trajectory] = {}

    def truth(mu: float) -> Trajectory:
        if mu not in truth_cache:
            truth_cache[mu] = (
                truth_solver(mu) if truth_solver else integrate(model, mu, load, x0, settings)
            )
        return truth_cache[mu]

    state = GreedyState(
        training_set=[float(m) for m in training_set],
        basis=kernel_only_basis(model),
        tolerance=tolerance,
        n_max=n_max,
    )
    selections: list[tuple[float, float]] = []
    iteration = 0

    while True:
        rb = state.basis
        compatibility = check_compatibility(model, rb)
        if not compatibility.passed():
            raise GreedyStagnationError(
                f"Basis lost compatibility at iteration {iteration}: {compatibility}",
                state,
            )
        offline = prepare_residual_offline(model, rb, load)

        def evaluate(
            mu: float, rb: ReducedBasis = rb, offline: ResidualOfflineData = offline
        ) -> float:
            trajectory, initial = solve_reduced(model, rb, mu, load, x0, settings)
            result = certify(
                model, rb, mu, trajectory, settings, constants.get(mu), offline, initial
            )
            series = result.delta if indicator == "delta" else result.delta_tilde
            return float(np.max(series))

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                indicators = list(pool.map(evaluate, state.training_set))
        else:
            indicators = [evaluate(mu) for mu in state.training_set]

        worst = int(np.argmax(indicators))
        mu_star, worst_value = state.training_set[worst], indicators[worst]
        state.history.append(
            GreedyRecord(
                iteration=iteration,
                mu=mu_star,
                indicator=worst_value,
                dim_q=rb.dim_q,
                dim_v=rb.dim_v,
                n=rb.n,
                compatibility=compatibility,
            )
        )
        logger.info(
            f"Greedy iteration {iteration}: N={rb.n} (dimQ={rb.dim_q}, "
            f"dimV={rb.dim_v}), max {indicator}={worst_value:.3e} at mu={mu_star:.4g}"
        )

        if worst_value <= tolerance:
            state.stop_reason = "tolerance"
            break
        room = (n_max - rb.n) // 2
        if room <= 0:
            state.stop_reason = "n_max"
            break
        if max_iterations is not None and iteration >= max_iterations:
            state.stop_reason = "max_iterations"
            break

        selections.append((mu_star, worst_value))
        if is_stagnating(selections):
            state.stop_reason = "stagnation"
            raise GreedyStagnationError(
                f"Indicator did not decrease over 3 iterations selecting mu={mu_star}",
                state,
            )

        enriched = constrained_pca(
            model,
            [truth(mu_star)],
            energy_cutoff=energy_cutoff,
            max_modes=min(modes_per_iteration, room),
            basis=rb,
            right_inverse=lifter,
        )
        if enriched.dim_q == rb.dim_q:
            logger.info(
                f"Snapshots at mu={mu_star:.4g} add nothing above the energy cutoff "
                f"(indicator {worst_value:.3e})"
            )
            state.stop_reason = "exhausted"
            break
        state.basis = enriched
        iteration += 1

    logger.info(
        f"Greedy finished ({state.stop_reason}) after {iteration} enrichments, N={state.basis.n}"
    )
    return state
