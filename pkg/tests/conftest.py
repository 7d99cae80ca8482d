"""Shared fixtures: small networks, models and experiment configurations."""

import copy
from pathlib import Path

import numpy as np
import pytest
import yaml

from src.expressions import time_function
from src.network import NetworkGraph, build_graph
from src.truth_fem import (
    EdgeCoefficients,
    SourceAndBoundaryData,
    TruthModel,
    assemble_truth,
)

DIAMOND_TOPOLOGY = {
    "nodes": ["v1", "j1", "j2", "j3", "j4", "v2"],
    "edges": [
        {"id": "e1", "tail": "v1", "head": "j1", "length": 1.0},
        {"id": "e2", "tail": "j1", "head": "j2", "length": 1.0},
        {"id": "e3", "tail": "j1", "head": "j3", "length": 1.0},
        {"id": "e4", "tail": "j2", "head": "j3", "length": 1.0},
        {"id": "e5", "tail": "j2", "head": "j4", "length": 1.0},
        {"id": "e6", "tail": "j3", "head": "j4", "length": 1.0},
        {"id": "e7", "tail": "j4", "head": "v2", "length": 1.0},
    ],
}

DIAMOND_COEFFICIENTS = {
    "a": [4, 4, 1, 1, 1, 4, 4],
    "b": [0.25, 0.25, 1, 1, 1, 0.25, 0.25],
    "d_base": [0.5, 0.5, 4, 4, 4, 0.5, 0.5],
}

ROOT = Path(__file__).resolve().parent.parent


@pytest.fixture
def diamond_graph() -> NetworkGraph:
    """The seven-pipe diamond network."""
    return build_graph(DIAMOND_TOPOLOGY)


@pytest.fixture
def diamond_coefficients() -> EdgeCoefficients:
    return EdgeCoefficients(**DIAMOND_COEFFICIENTS)


@pytest.fixture
def small_diamond(diamond_graph, diamond_coefficients) -> TruthModel:
    """Diamond with 4 cells per edge (n_p = 28, n_u = 31)."""
    return assemble_truth(diamond_graph, diamond_coefficients, 4)


@pytest.fixture
def single_edge() -> TruthModel:
    """One pipe of unit length, one cell, unit coefficients."""
    graph = build_graph(
        {"nodes": ["a", "b"], "edges": [{"id": "e", "tail": "a", "head": "b", "length": 1.0}]}
    )
    return assemble_truth(graph, EdgeCoefficients(a=[1.0], b=[1.0], d_base=[1.0]), 1)


@pytest.fixture
def diamond_data() -> SourceAndBoundaryData:
    """Boundary pressure 1 - cos(t) at v1, zero elsewhere, zero initial data."""
    return SourceAndBoundaryData(boundary={"v1": time_function("1 - cos(t)")})


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def small_config_data() -> dict:
    """Experiment configuration small enough for end-to-end runs."""
    return {
        "network": copy.deepcopy(DIAMOND_TOPOLOGY),
        "coefficients": copy.deepcopy(DIAMOND_COEFFICIENTS),
        "discretization": {"cells_per_edge": 2},
        "data": {"boundary": {"v1": "1 - cos(t)", "v2": "0"}},
        "parameters": {"mu_min": 0.01, "mu_max": 10.0, "training_count": 3},
        "solver": {"step": 0.05, "t_end": 1.0},
        "greedy": {"tolerance": 1e-12, "n_max": 9, "modes_per_iteration": 2},
        "test": {"count": 2, "seed": 7},
        "output": {"directory": "results", "truth_cache": True, "svg": False},
        "logging": {"level": "INFO", "file": None},
    }


@pytest.fixture
def small_config_file(tmp_path, small_config_data) -> Path:
    """The small configuration written to a temporary YAML file."""
    path = tmp_path / "small.yaml"
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(small_config_data, f)
    return path
