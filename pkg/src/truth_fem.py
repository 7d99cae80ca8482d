"""Mixed P0/P1 finite-element truth discretization on a network.

Pressures are piecewise constant (one coefficient per cell), fluxes are
continuous piecewise linear on every edge. At a junction the flux endpoint
values are tied by one Kirchhoff balance constraint, realized through a sparse
map from flux DOFs to the broken (edgewise) nodal values.
"""

import logging
import threading
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from functools import cached_property
from typing import Literal

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.linalg import splu

from .errors import NumericalError
from .network import KernelBasis, NetworkGraph, kernel_space

logger = logging.getLogger(__name__)

Matrix = np.ndarray | sparse.spmatrix
TimeFunction = Callable[[float], float]
SpaceFunction = Callable[[np.ndarray], np.ndarray]

QUADRATURE_POINTS, QUADRATURE_WEIGHTS = np.polynomial.legendre.leggauss(5)


class LinearSolver:
    """LU factorization of a sparse or dense square matrix, reusable across solves."""

    def __init__(self, matrix: Matrix):
        self._sparse = sparse.issparse(matrix)
        try:
            if self._sparse:
                self._lu = splu(sparse.csc_matrix(matrix))
            else:
                self._factors = linalg.lu_factor(np.asarray(matrix))
        except (RuntimeError, ValueError, linalg.LinAlgError) as e:
            raise NumericalError(f"Factorization failed: {e}") from e
        if not self._sparse and np.any(np.diag(self._factors[0]) == 0.0):
            raise NumericalError("Factorization failed: matrix is exactly singular")

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self._sparse:
            return self._lu.solve(np.asarray(rhs, dtype=float))
        return linalg.lu_solve(self._factors, rhs)


@dataclass(frozen=True)
class EdgeCoefficients:
    """Pipe constants per edge; the damping is ``mu * d_base``."""

    a: np.ndarray
    b: np.ndarray
    d_base: np.ndarray

    def __post_init__(self) -> None:
        for name in ("a", "b", "d_base"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not (self.a.shape == self.b.shape == self.d_base.shape) or self.a.ndim != 1:
            raise ValueError("Coefficient vectors a, b, d_base must have equal length")
        if np.any(self.a <= 0) or np.any(self.b <= 0):
            raise ValueError("Coefficients a and b must be positive on every edge")
        if np.any(self.d_base < 0):
            raise ValueError("Damping coefficients d_base must be nonnegative")

    def damping(self, mu: float) -> np.ndarray:
        return mu * self.d_base

    def bounds(self, mu: float) -> tuple[float, float]:
        """Elementwise min and max over a, b and mu * d_base."""
        values = np.concatenate([self.a, self.b, self.damping(mu)])
        return float(values.min()), float(values.max())

    def fingerprint(self) -> str:
        return ";".join(
            ",".join(repr(float(v)) for v in vec) for vec in (self.a, self.b, self.d_base)
        )


@dataclass(frozen=True)
class SourceTerm:
    """Separable source ``time(t) * space(x)`` on a subset of edges (all if None)."""

    time: TimeFunction
    space: SpaceFunction
    edges: tuple[str, ...] | None = None


@dataclass(frozen=True)
class SourceAndBoundaryData:
    """Right-hand sides, nodal boundary pressures and initial data."""

    f_terms: tuple[SourceTerm, ...] = ()
    g_terms: tuple[SourceTerm, ...] = ()
    boundary: Mapping[str, TimeFunction] = field(default_factory=dict)
    initial_p: SpaceFunction | None = None
    initial_u: SpaceFunction | None = None

    @property
    def is_homogeneous(self) -> bool:
        return not self.f_terms and not self.g_terms and not self.boundary


@dataclass(frozen=True)
class StateVector:
    """Pressure and flux coefficient vectors."""

    p: np.ndarray
    u: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.p, self.u])

    @classmethod
    def zeros(cls, n_p: int, n_u: int) -> "StateVector":
        return cls(p=np.zeros(n_p), u=np.zeros(n_u))


@dataclass(frozen=True)
class AffineLoad:
    """Load vectors as sums ``sum_k theta_k(t) * vector_k``.

    The vectors are functionals (columns tested against the basis functions),
    so a Galerkin projection onto bases Q, V is ``Q.T @ vectors``.
    """

    pressure_vectors: np.ndarray
    flux_vectors: np.ndarray
    pressure_amplitudes: tuple[TimeFunction, ...]
    flux_amplitudes: tuple[TimeFunction, ...]

    def amplitudes(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        theta_p = np.array([amp(t) for amp in self.pressure_amplitudes], dtype=float)
        theta_u = np.array([amp(t) for amp in self.flux_amplitudes], dtype=float)
        return theta_p, theta_u

    def evaluate(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        theta_p, theta_u = self.amplitudes(t)
        return self.pressure_vectors @ theta_p, self.flux_vectors @ theta_u

    def project(self, q_basis: np.ndarray, v_basis: np.ndarray) -> "AffineLoad":
        return AffineLoad(
            pressure_vectors=q_basis.T @ self.pressure_vectors,
            flux_vectors=v_basis.T @ self.flux_vectors,
            pressure_amplitudes=self.pressure_amplitudes,
            flux_amplitudes=self.flux_amplitudes,
        )


@dataclass
class DampedWaveOperators:
    """Matrices of the semi-discrete system.

        mass_p p' + div u             = F(t)
        mass_u u' - div.T p + mu D u  = G(t)

    ``gram_p``/``gram_u`` are the unweighted L2 Gram matrices of the pressure
    and flux bases. Used for both the truth model (sparse) and reduced models
    (dense).
    """

    mass_p: Matrix
    mass_u: Matrix
    damping: Matrix
    div: Matrix
    gram_p: Matrix
    gram_u: Matrix
    _solvers: dict[tuple[float, float], LinearSolver] = field(
        default_factory=dict, repr=False, compare=False
    )
    _lock: threading.Lock = field(
        default_factory=threading.Lock, repr=False, compare=False
    )

    @property
    def n_p(self) -> int:
        return int(self.mass_p.shape[0])

    @property
    def n_u(self) -> int:
        return int(self.mass_u.shape[0])

    @property
    def is_sparse(self) -> bool:
        return sparse.issparse(self.mass_u)

    def step_matrix(self, mu: float, tau: float) -> Matrix:
        """``M + tau K(mu)`` of the implicit Euler step."""
        if self.is_sparse:
            return sparse.bmat(
                [
                    [self.mass_p, tau * self.div],
                    [-tau * self.div.T, self.mass_u + (tau * mu) * self.damping],
                ],
                format="csc",
            )
        n_p, n = self.n_p, self.n_p + self.n_u
        matrix = np.zeros((n, n))
        matrix[:n_p, :n_p] = self.mass_p
        matrix[:n_p, n_p:] = tau * self.div
        matrix[n_p:, :n_p] = -tau * self.div.T
        matrix[n_p:, n_p:] = self.mass_u + (tau * mu) * self.damping
        return matrix

    def step_solver(self, mu: float, tau: float) -> LinearSolver:
        """Factorization of the step matrix, computed once per (mu, tau)."""
        key = (float(mu), float(tau))
        with self._lock:
            solver = self._solvers.get(key)
        if solver is None:
            solver = LinearSolver(self.step_matrix(mu, tau))
            with self._lock:
                self._solvers[key] = solver
        return solver

    def energy(self, p: np.ndarray, u: np.ndarray) -> float:
        return 0.5 * float(p @ (self.mass_p @ p) + u @ (self.mass_u @ u))


@dataclass(frozen=True)
class TruthModel:
    """Assembled truth discretization.

    Flux DOFs relate to the broken nodal values (``n_edges * (cells + 1)``
    entries, edge-major) through ``flux_map``; ``primary[j]`` is the broken
    index carrying coefficient one in flux basis function ``j``.
    """

    graph: NetworkGraph
    coefficients: EdgeCoefficients
    cells_per_edge: int
    cell_width: np.ndarray
    operators: DampedWaveOperators
    boundary_load: sparse.csr_matrix
    flux_map: sparse.csr_matrix
    primary: np.ndarray
    kernel: KernelBasis
    kernel_flux: np.ndarray

    @property
    def n_p(self) -> int:
        return self.operators.n_p

    @property
    def n_u(self) -> int:
        return self.operators.n_u

    @property
    def M_a(self) -> sparse.spmatrix:
        return self.operators.mass_p

    @property
    def M_b(self) -> sparse.spmatrix:
        return self.operators.mass_u

    @property
    def M_Q(self) -> sparse.spmatrix:
        return self.operators.gram_p

    @property
    def M_V(self) -> sparse.spmatrix:
        return self.operators.gram_u

    @property
    def D_base(self) -> sparse.spmatrix:
        return self.operators.damping

    @property
    def G(self) -> sparse.spmatrix:
        return self.operators.div

    @cached_property
    def gram_u_solver(self) -> LinearSolver:
        return LinearSolver(self.M_V)

    def from_broken(self, broken: np.ndarray) -> np.ndarray:
        """Flux coefficients of a broken nodal vector that lies in the flux space."""
        return np.asarray(broken)[self.primary]

    def derivative(self, u: np.ndarray) -> np.ndarray:
        """Pressure-space coefficients of the edgewise derivative of ``u``."""
        return (self.G @ u) / (
            self.cell_width if np.ndim(u) == 1 else self.cell_width[:, None]
        )

    def fingerprint(self) -> str:
        return (
            f"{self.graph.fingerprint()}|{self.coefficients.fingerprint()}"
            f"|{self.cells_per_edge}"
        )


def _p1_block(n: int, h: float, weight: float) -> sparse.spmatrix:
    main = np.full(n + 1, 4.0)
    main[0] = main[-1] = 2.0
    off = np.ones(n)
    return sparse.diags([off, main, off], [-1, 0, 1]) * (weight * h / 6.0)


def _flux_map(graph: NetworkGraph, n: int) -> tuple[sparse.csr_matrix, np.ndarray]:
    n_local = n + 1
    interior = set(graph.interior_nodes)
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    primary: list[int] = []
    references: dict[str, tuple[int, float]] = {}

    for i, edge in enumerate(graph.edges):
        for k in range(n_local):
            idx = i * n_local + k
            node = edge.tail if k == 0 else edge.head if k == n else None
            if node is None or node not in interior:
                rows.append(idx)
                cols.append(len(primary))
                vals.append(1.0)
                primary.append(idx)
                continue
            # u(0) leaves the junction, u(l) enters it
            sign = -1.0 if k == 0 else 1.0
            if node not in references:
                references[node] = (idx, sign)
                continue
            ref_idx, ref_sign = references[node]
            dof = len(primary)
            rows.extend([idx, ref_idx])
            cols.extend([dof, dof])
            vals.extend([1.0, -sign * ref_sign])
            primary.append(idx)

    flux_map = sparse.csr_matrix(
        (vals, (rows, cols)), shape=(graph.n_edges * n_local, len(primary))
    )
    return flux_map, np.asarray(primary, dtype=int)


def assemble_truth(
    graph: NetworkGraph, coeffs: EdgeCoefficients, cells_per_edge: int
) -> TruthModel:
    """
    Assemble the truth model on uniform edge partitions.

    Args:
        graph: Validated network
        coeffs: Pipe constants, one entry per edge in graph order
        cells_per_edge: Number of uniform cells on every edge

    Returns:
        The assembled TruthModel

    Raises:
        ValueError: On a bad cell count, wrong coefficient length or a network
            without boundary nodes
    """
    if cells_per_edge < 1:
        raise ValueError("cells_per_edge must be at least 1")
    if coeffs.a.size != graph.n_edges:
        raise ValueError(
            f"Expected {graph.n_edges} coefficients per field, got {coeffs.a.size}"
        )
    if not graph.boundary_nodes:
        raise ValueError(
            "Network has no boundary node; the divergence is not surjective"
        )

    n = cells_per_edge
    widths = np.array([e.length / n for e in graph.edges])
    cell_width = np.repeat(widths, n)
    a_cell = np.repeat(coeffs.a, n)

    flux_map, primary = _flux_map(graph, n)
    T = flux_map

    def flux_matrix(weights: np.ndarray) -> sparse.csr_matrix:
        broken = sparse.block_diag(
            [_p1_block(n, h, w) for h, w in zip(widths, weights, strict=True)],
            format="csr",
        )
        return sparse.csr_matrix(T.T @ broken @ T)

    local_div = sparse.diags([-np.ones(n), np.ones(n)], [0, 1], shape=(n, n + 1))
    div_broken = sparse.block_diag([local_div] * graph.n_edges, format="csr")
    div = sparse.csr_matrix(div_broken @ T)

    operators = DampedWaveOperators(
        mass_p=sparse.diags(a_cell * cell_width, format="csr"),
        mass_u=flux_matrix(coeffs.b),
        damping=flux_matrix(coeffs.d_base),
        div=div,
        gram_p=sparse.diags(cell_width, format="csr"),
        gram_u=flux_matrix(np.ones(graph.n_edges)),
    )

    # weak pressure boundary term: +p^v v(0) on outgoing, -p^v v(l) on incoming
    rows, cols, vals = [], [], []
    for col, node in enumerate(graph.boundary_nodes):
        for i in graph.outgoing(node):
            rows.append(i * (n + 1))
            cols.append(col)
            vals.append(1.0)
        for i in graph.incoming(node):
            rows.append(i * (n + 1) + n)
            cols.append(col)
            vals.append(-1.0)
    boundary_broken = sparse.csr_matrix(
        (vals, (rows, cols)), shape=(T.shape[0], len(graph.boundary_nodes))
    )
    boundary_load = sparse.csr_matrix(T.T @ boundary_broken)

    kernel = kernel_space(graph)
    kernel_flux = np.repeat(kernel.vectors, n + 1, axis=0)[primary]

    model = TruthModel(
        graph=graph,
        coefficients=coeffs,
        cells_per_edge=n,
        cell_width=cell_width,
        operators=operators,
        boundary_load=boundary_load,
        flux_map=flux_map,
        primary=primary,
        kernel=kernel,
        kernel_flux=kernel_flux,
    )
    logger.info(
        f"Assembled truth model: n_p={model.n_p}, n_u={model.n_u}, "
        f"total={model.n_p + model.n_u}, dim K={kernel.dim}"
    )
    return model


def _quadrature(model: TruthModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Local coordinates, weights and reference positions of all quadrature points.

    Shapes are (n_edges, cells, points); the reference position s in [0, 1]
    locates the point inside its cell.
    """
    n = model.cells_per_edge
    s = 0.5 * (QUADRATURE_POINTS + 1.0)
    x = np.empty((model.graph.n_edges, n, s.size))
    w = np.empty_like(x)
    for i, edge in enumerate(model.graph.edges):
        h = edge.length / n
        left = np.arange(n)[:, None] * h
        x[i] = left + h * s[None, :]
        w[i] = 0.5 * h * QUADRATURE_WEIGHTS[None, :]
    return x, w, np.broadcast_to(s, x.shape)


def _per_edge(
    func: SpaceFunction | Mapping[str, SpaceFunction], model: TruthModel
) -> list[SpaceFunction | None]:
    if isinstance(func, Mapping):
        return [func.get(e.id) for e in model.graph.edges]
    return [func] * model.graph.n_edges


def _cell_integrals(
    model: TruthModel, func: SpaceFunction | Mapping[str, SpaceFunction]
) -> np.ndarray:
    x, w, _ = _quadrature(model)
    funcs = _per_edge(func, model)
    values = np.zeros(x.shape)
    for i, f in enumerate(funcs):
        if f is not None:
            values[i] = f(x[i])
    return np.sum(values * w, axis=2).ravel()


def _hat_integrals(
    model: TruthModel, func: SpaceFunction | Mapping[str, SpaceFunction]
) -> np.ndarray:
    """Flux functional ``<func, phi_j>`` for every flux basis function."""
    x, w, s = _quadrature(model)
    n = model.cells_per_edge
    funcs = _per_edge(func, model)
    broken = np.zeros((model.graph.n_edges, n + 1))
    for i, f in enumerate(funcs):
        if f is None:
            continue
        fw = f(x[i]) * w[i]
        broken[i, :-1] += np.sum(fw * (1.0 - s[i]), axis=1)
        broken[i, 1:] += np.sum(fw * s[i], axis=1)
    return np.asarray(model.flux_map.T @ broken.ravel())


def _restrict(
    profile: SpaceFunction, edges: tuple[str, ...] | None
) -> SpaceFunction | dict[str, SpaceFunction]:
    if edges is None:
        return profile
    return {edge_id: profile for edge_id in edges}


def assemble_load(model: TruthModel, data: SourceAndBoundaryData) -> AffineLoad:
    """Affine time decomposition of the load vectors for the given data."""
    pressure_vectors = [
        _cell_integrals(model, _restrict(term.space, term.edges))
        for term in data.f_terms
    ]
    flux_vectors = [
        _hat_integrals(model, _restrict(term.space, term.edges))
        for term in data.g_terms
    ]
    pressure_amplitudes = [term.time for term in data.f_terms]
    flux_amplitudes = [term.time for term in data.g_terms]

    boundary_index = {node: k for k, node in enumerate(model.graph.boundary_nodes)}
    for node, amplitude in data.boundary.items():
        if node not in boundary_index:
            raise ValueError(f"Boundary data given for non-boundary node '{node}'")
        flux_vectors.append(model.boundary_load[:, boundary_index[node]].toarray().ravel())
        flux_amplitudes.append(amplitude)

    def stack(vectors: Sequence[np.ndarray], size: int) -> np.ndarray:
        return np.column_stack(vectors) if vectors else np.zeros((size, 0))

    return AffineLoad(
        pressure_vectors=stack(pressure_vectors, model.n_p),
        flux_vectors=stack(flux_vectors, model.n_u),
        pressure_amplitudes=tuple(pressure_amplitudes),
        flux_amplitudes=tuple(flux_amplitudes),
    )


def apply_operator(
    model: TruthModel,
    mu: float,
    state: StateVector,
    t: float,
    data: SourceAndBoundaryData | AffineLoad,
) -> StateVector:
    """
    Right-hand side of the semi-discrete system before inverting the masses.

    Returns ``(F(t) - G u, G^T p - mu D_base u + Gbc(t))``.
    """
    load = data if isinstance(data, AffineLoad) else assemble_load(model, data)
    fp, fu = load.evaluate(t)
    return StateVector(
        p=fp - model.G @ state.u,
        u=model.G.T @ state.p - mu * (model.D_base @ state.u) + fu,
    )


def l2_projection(
    model: TruthModel,
    target_space: Literal["Q", "V"],
    samples: SpaceFunction | Mapping[str, SpaceFunction],
) -> np.ndarray:
    """
    L2 projection of a function given in local edge coordinates.

    Args:
        model: Truth model
        target_space: "Q" for the P0 pressure space, "V" for the flux space
        samples: Function of the local coordinate, or a mapping edge id -> function

    Returns:
        Coefficient vector in the requested space
    """
    if target_space == "Q":
        return _cell_integrals(model, samples) / model.cell_width
    if target_space == "V":
        return model.gram_u_solver.solve(_hat_integrals(model, samples))
    raise ValueError(f"Unknown target space '{target_space}'")


def initial_state(model: TruthModel, data: SourceAndBoundaryData) -> StateVector:
    """Truth initial state from the L2 projections of the initial data."""
    p0 = (
        l2_projection(model, "Q", data.initial_p)
        if data.initial_p is not None
        else np.zeros(model.n_p)
    )
    u0 = (
        l2_projection(model, "V", data.initial_u)
        if data.initial_u is not None
        else np.zeros(model.n_u)
    )
    return StateVector(p=p0, u=u0)
