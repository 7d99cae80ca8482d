"""Tests for network construction and the constant-flux kernel."""

import numpy as np
import pytest

from src.errors import NetworkError
from src.network import build_graph, kernel_space

from .conftest import DIAMOND_TOPOLOGY


def _topology(edges, nodes=None):
    names = nodes or sorted({n for e in edges for n in (e["tail"], e["head"])})
    return {"nodes": names, "edges": edges}


class TestBuildGraph:
    """Test topology validation and node classification."""

    def test_diamond_classification(self, diamond_graph):
        """Boundary nodes are the nodes incident to exactly one edge."""
        assert diamond_graph.boundary_nodes == ("v1", "v2")
        assert diamond_graph.interior_nodes == ("j1", "j2", "j3", "j4")
        assert diamond_graph.n_edges == 7

    def test_edge_orientation(self, diamond_graph):
        """Incoming and outgoing edges follow tail -> head."""
        assert diamond_graph.outgoing("j1") == [1, 2]
        assert diamond_graph.incoming("j1") == [0]
        assert diamond_graph.degree("j2") == 3

    def test_balance_matrix_signs(self, diamond_graph):
        """Balance rows carry +1 for incoming and -1 for outgoing edges."""
        row = diamond_graph.balance_matrix[0]
        np.testing.assert_array_equal(row, [1, -1, -1, 0, 0, 0, 0])

    def test_single_edge(self):
        """A single pipe has two boundary nodes and no junction."""
        graph = build_graph(_topology([{"id": "e", "tail": "a", "head": "b", "length": 2}]))
        assert graph.boundary_nodes == ("a", "b")
        assert graph.interior_nodes == ()

    def test_declared_boundary_must_match(self):
        """Declared boundary nodes must agree with the structure."""
        spec = {**DIAMOND_TOPOLOGY, "boundary_nodes": ["v1", "j1"]}
        with pytest.raises(NetworkError, match="conflict"):
            build_graph(spec)

    def test_rejects_self_loop(self):
        """Self-loops are invalid."""
        spec = _topology([{"id": "e", "tail": "a", "head": "a", "length": 1}], ["a"])
        with pytest.raises(NetworkError, match="self-loop"):
            build_graph(spec)

    def test_rejects_nonpositive_length(self):
        """Edge lengths must be positive."""
        spec = _topology([{"id": "e", "tail": "a", "head": "b", "length": 0}])
        with pytest.raises(NetworkError, match="nonpositive length"):
            build_graph(spec)

    @pytest.mark.parametrize("field", ["id", "tail", "head", "length"])
    def test_rejects_missing_edge_field(self, field):
        """Every edge names its id, ends and length."""
        edge = {"id": "e", "tail": "a", "head": "b", "length": 1}
        del edge[field]
        spec = {"nodes": ["a", "b"], "edges": [edge]}
        with pytest.raises(NetworkError, match=rf"lacks required fields \['{field}'\]"):
            build_graph(spec)

    def test_rejects_non_numeric_length(self):
        spec = _topology([{"id": "e", "tail": "a", "head": "b", "length": "long"}])
        with pytest.raises(NetworkError, match="non-numeric length 'long'"):
            build_graph(spec)

    def test_rejects_duplicate_edge(self):
        """Edge ids are unique."""
        edges = [
            {"id": "e", "tail": "a", "head": "b", "length": 1},
            {"id": "e", "tail": "b", "head": "c", "length": 1},
        ]
        with pytest.raises(NetworkError, match="Duplicate edge id"):
            build_graph(_topology(edges))

    def test_rejects_unknown_node(self):
        """Edges may only reference listed nodes."""
        spec = {"nodes": ["a"], "edges": [{"id": "e", "tail": "a", "head": "b", "length": 1}]}
        with pytest.raises(NetworkError, match="unknown node"):
            build_graph(spec)

    def test_rejects_disconnected(self):
        """Every node must be reachable."""
        edges = [
            {"id": "e1", "tail": "a", "head": "b", "length": 1},
            {"id": "e2", "tail": "c", "head": "d", "length": 1},
        ]
        with pytest.raises(NetworkError, match="disconnected"):
            build_graph(_topology(edges))

    def test_rejects_empty(self):
        """Empty topologies are rejected."""
        with pytest.raises(NetworkError):
            build_graph({"nodes": [], "edges": []})


class TestKernelSpace:
    """Test the divergence-free edgewise-constant fluxes."""

    def test_diamond_kernel_dimension(self, diamond_graph):
        """Seven edges with four independent junction balances leave three."""
        assert kernel_space(diamond_graph).dim == 3

    def test_kernel_satisfies_balance(self, diamond_graph):
        """Kernel vectors satisfy the flux balance at every junction."""
        vectors = kernel_space(diamond_graph).vectors
        np.testing.assert_allclose(diamond_graph.balance_matrix @ vectors, 0.0, atol=1e-12)

    def test_kernel_orthonormal(self, diamond_graph):
        """Kernel columns are orthonormal."""
        vectors = kernel_space(diamond_graph).vectors
        np.testing.assert_allclose(vectors.T @ vectors, np.eye(3), atol=1e-12)

    def test_through_flow_in_kernel(self, diamond_graph):
        """A unit through-flow along v1-j1-j2-j4-v2 lies in the kernel."""
        flow = np.array([1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0])
        vectors = kernel_space(diamond_graph).vectors
        residual = flow - vectors @ (vectors.T @ flow)
        assert np.linalg.norm(residual) < 1e-12

    def test_no_junction_gives_identity(self):
        """Without junctions every constant flux is admissible."""
        graph = build_graph(
            {"nodes": ["a", "b"], "edges": [{"id": "e", "tail": "a", "head": "b", "length": 1}]}
        )
        np.testing.assert_array_equal(kernel_space(graph).vectors, np.eye(1))

    def test_path_of_two_edges(self):
        """One junction between two pipes forces equal constants."""
        graph = build_graph(
            _topology(
                [
                    {"id": "e1", "tail": "a", "head": "m", "length": 1},
                    {"id": "e2", "tail": "m", "head": "b", "length": 2},
                ]
            )
        )
        kernel = kernel_space(graph)
        assert kernel.dim == 1
        np.testing.assert_allclose(np.abs(kernel.vectors[:, 0]), [2**-0.5, 2**-0.5])
        assert kernel.vectors[0, 0] == pytest.approx(kernel.vectors[1, 0])

    def test_span_independent_of_edge_order(self, diamond_graph):
        """Listing the edges in another order spans the same constant fluxes."""
        order = [6, 2, 0, 4, 1, 5, 3]
        shuffled = {**DIAMOND_TOPOLOGY, "edges": [DIAMOND_TOPOLOGY["edges"][i] for i in order]}
        reference = kernel_space(diamond_graph).vectors
        permuted = np.empty_like(reference)
        permuted[order] = kernel_space(build_graph(shuffled)).vectors

        for first, second in ((reference, permuted), (permuted, reference)):
            residual = first - second @ (second.T @ first)
            assert np.linalg.norm(residual) < 1e-12
