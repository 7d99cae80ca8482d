"""Directed pipe networks, node classification and the constant-flux kernel."""

import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any

import networkx as nx
import numpy as np
from scipy import linalg

from .errors import NetworkError

logger = logging.getLogger(__name__)

KERNEL_RANK_TOLERANCE = 1e-10


@dataclass(frozen=True)
class Edge:
    """A pipe identified with the interval [0, length], oriented tail -> head."""

    id: str
    tail: str
    head: str
    length: float


@dataclass(frozen=True)
class NetworkGraph:
    """Validated directed network.

    Boundary nodes are the nodes incident to exactly one edge, every other node
    is an interior node (junction). Node and edge order is the order given in
    the topology description.
    """

    nodes: tuple[str, ...]
    edges: tuple[Edge, ...]
    boundary_nodes: tuple[str, ...]
    interior_nodes: tuple[str, ...]
    _edge_index: dict[str, int] = field(repr=False, compare=False, default_factory=dict)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def edge_index(self, edge_id: str) -> int:
        return self._edge_index[edge_id]

    def outgoing(self, node: str) -> list[int]:
        """Indices of the edges leaving ``node`` (they start at x = 0 there)."""
        return [i for i, e in enumerate(self.edges) if e.tail == node]

    def incoming(self, node: str) -> list[int]:
        """Indices of the edges entering ``node`` (they end at x = l there)."""
        return [i for i, e in enumerate(self.edges) if e.head == node]

    def degree(self, node: str) -> int:
        return len(self.outgoing(node)) + len(self.incoming(node))

    @cached_property
    def balance_matrix(self) -> np.ndarray:
        """Flux balance at interior nodes: +1 for incoming, -1 for outgoing edges."""
        matrix = np.zeros((len(self.interior_nodes), self.n_edges))
        for row, node in enumerate(self.interior_nodes):
            for i in self.incoming(node):
                matrix[row, i] += 1.0
            for i in self.outgoing(node):
                matrix[row, i] -= 1.0
        return matrix

    def fingerprint(self) -> str:
        """Stable textual description used for hashing."""
        parts = [f"{e.id}:{e.tail}->{e.head}:{e.length!r}" for e in self.edges]
        return ";".join(parts)


@dataclass(frozen=True)
class KernelBasis:
    """Edgewise-constant fluxes satisfying the Kirchhoff flux balance.

    ``vectors`` has one row per edge and orthonormal columns.
    """

    vectors: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


def _field(item: Any, name: str) -> Any:
    if isinstance(item, Mapping):
        return item.get(name)
    return getattr(item, name, None)


def _edge(item: Any, position: int) -> Edge:
    values = {name: _field(item, name) for name in ("id", "tail", "head", "length")}
    missing = [name for name, value in values.items() if value is None]
    if missing:
        raise NetworkError(f"Edge #{position} lacks required fields {missing}")
    try:
        length = float(values["length"])
    except (TypeError, ValueError):
        raise NetworkError(
            f"Edge '{values['id']}' has non-numeric length {values['length']!r}"
        ) from None
    return Edge(
        id=str(values["id"]),
        tail=str(values["tail"]),
        head=str(values["head"]),
        length=length,
    )


def build_graph(spec: Any) -> NetworkGraph:
    """
    Build and validate a network from a topology description.

    Args:
        spec: Mapping or object with ``nodes`` (list of ids), ``edges`` (items
            with ``id``, ``tail``, ``head``, ``length``) and optionally
            ``boundary_nodes`` (checked against the structural classification)

    Returns:
        The validated NetworkGraph

    Raises:
        NetworkError: On missing edge fields, self-loops, nonpositive lengths,
            duplicate ids, unknown nodes, conflicting declarations or a
            disconnected graph
    """
    raw_nodes = _field(spec, "nodes")
    raw_edges = _field(spec, "edges")
    if not raw_nodes:
        raise NetworkError("Topology must list at least one node")
    if not raw_edges:
        raise NetworkError("Topology must list at least one edge")

    nodes = tuple(str(n) for n in raw_nodes)
    if len(set(nodes)) != len(nodes):
        raise NetworkError(f"Duplicate node ids in {list(nodes)}")
    known = set(nodes)

    edges: list[Edge] = []
    seen: set[str] = set()
    for position, item in enumerate(raw_edges):
        edge = _edge(item, position)
        if edge.id in seen:
            raise NetworkError(f"Duplicate edge id '{edge.id}'")
        seen.add(edge.id)
        if edge.tail == edge.head:
            raise NetworkError(f"Edge '{edge.id}' is a self-loop at node '{edge.tail}'")
        if not edge.length > 0:
            raise NetworkError(
                f"Edge '{edge.id}' has nonpositive length {edge.length}"
            )
        for end in (edge.tail, edge.head):
            if end not in known:
                raise NetworkError(f"Edge '{edge.id}' references unknown node '{end}'")
        edges.append(edge)

    multigraph = nx.MultiDiGraph()
    multigraph.add_nodes_from(nodes)
    multigraph.add_edges_from((e.tail, e.head, e.id) for e in edges)
    if not nx.is_weakly_connected(multigraph):
        components = [sorted(c) for c in nx.weakly_connected_components(multigraph)]
        raise NetworkError(f"Network is disconnected; components: {components}")

    degree = {n: 0 for n in nodes}
    for e in edges:
        degree[e.tail] += 1
        degree[e.head] += 1
    boundary = tuple(n for n in nodes if degree[n] == 1)
    interior = tuple(n for n in nodes if degree[n] > 1)

    declared = _field(spec, "boundary_nodes")
    if declared is not None and set(map(str, declared)) != set(boundary):
        raise NetworkError(
            f"Declared boundary nodes {sorted(map(str, declared))} conflict with "
            f"the nodes incident to one edge {sorted(boundary)}"
        )

    graph = NetworkGraph(
        nodes=nodes,
        edges=tuple(edges),
        boundary_nodes=boundary,
        interior_nodes=interior,
        _edge_index={e.id: i for i, e in enumerate(edges)},
    )
    logger.debug(
        f"Built network with {len(edges)} edges, boundary {boundary}, "
        f"{len(interior)} interior nodes"
    )
    return graph


def kernel_space(graph: NetworkGraph) -> KernelBasis:
    """
    Orthonormal basis of the divergence-free, edgewise-constant fluxes.

    The columns span the null space of the interior flux-balance matrix,
    computed from its SVD with a rank cut of 1e-10 times the largest singular
    value.
    """
    balance = graph.balance_matrix
    if balance.shape[0] == 0:
        return KernelBasis(vectors=np.eye(graph.n_edges))
    vectors = linalg.null_space(balance, rcond=KERNEL_RANK_TOLERANCE)
    return KernelBasis(vectors=vectors)

