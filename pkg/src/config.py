"""Configuration management for certified reduced-basis experiments."""

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Literal

import numpy as np
import yaml
from pydantic import BaseModel, ValidationError, field_validator, model_validator

from .errors import ConfigError
from .expressions import parse_expression, space_function, tabulated_function, time_function
from .network import NetworkGraph, build_graph
from .time_integration import SolverSettings
from .truth_fem import EdgeCoefficients, SourceAndBoundaryData, SourceTerm, TimeFunction


class EdgeSpec(BaseModel):
    """One pipe of the topology."""

    id: str
    tail: str
    head: str
    length: float

    @field_validator("length")
    @classmethod
    def validate_length(cls, v: float) -> float:
        """Validate edge length."""
        if v <= 0:
            raise ValueError("Edge length must be positive")
        return v


class NetworkConfig(BaseModel):
    """Topology, inline or from a separate YAML file."""

    file: str | None = None
    nodes: list[str] = []
    edges: list[EdgeSpec] = []
    boundary_nodes: list[str] | None = None

    @model_validator(mode="after")
    def validate_topology(self) -> "NetworkConfig":
        if not self.nodes or not self.edges:
            raise ValueError("Network needs nodes and edges (inline or via 'file')")
        return self


class CoefficientsConfig(BaseModel):
    """Pipe constants, one entry per edge in topology order."""

    a: list[float]
    b: list[float]
    d_base: list[float]

    @field_validator("a", "b")
    @classmethod
    def validate_positive(cls, v: list[float]) -> list[float]:
        if any(x <= 0 for x in v):
            raise ValueError("Coefficients must be positive")
        return v

    @field_validator("d_base")
    @classmethod
    def validate_damping(cls, v: list[float]) -> list[float]:
        if any(x < 0 for x in v):
            raise ValueError("Damping coefficients must be nonnegative")
        return v

    @model_validator(mode="after")
    def validate_lengths(self) -> "CoefficientsConfig":
        if not len(self.a) == len(self.b) == len(self.d_base):
            raise ValueError("Coefficient lists a, b, d_base must have equal length")
        return self


class DiscretizationConfig(BaseModel):
    cells_per_edge: int = 100

    @field_validator("cells_per_edge")
    @classmethod
    def validate_cells(cls, v: int) -> int:
        if v < 1:
            raise ValueError("cells_per_edge must be at least 1")
        return v


class SourceTermConfig(BaseModel):
    """Separable source term ``time(t) * space(x)``."""

    time: str = "1"
    space: str = "1"
    edges: list[str] | None = None

    @field_validator("time")
    @classmethod
    def validate_time(cls, v: str) -> str:
        parse_expression(v, ("t",))
        return v

    @field_validator("space")
    @classmethod
    def validate_space(cls, v: str) -> str:
        parse_expression(v, ("x",))
        return v


class TabulatedSeries(BaseModel):
    times: list[float]
    values: list[float]

    @model_validator(mode="after")
    def validate_series(self) -> "TabulatedSeries":
        tabulated_function(self.times, self.values)
        return self


class DataConfig(BaseModel):
    """Sources, boundary pressures and initial data (zero when omitted)."""

    f: list[SourceTermConfig] = []
    g: list[SourceTermConfig] = []
    boundary: dict[str, str | float | TabulatedSeries] = {}
    initial_p: str | None = None
    initial_u: str | None = None

    @field_validator("boundary")
    @classmethod
    def validate_boundary(
        cls, v: dict[str, str | float | TabulatedSeries]
    ) -> dict[str, str | float | TabulatedSeries]:
        for value in v.values():
            if isinstance(value, str):
                parse_expression(value, ("t",))
        return v

    @field_validator("initial_p", "initial_u")
    @classmethod
    def validate_initial(cls, v: str | None) -> str | None:
        if v is not None:
            parse_expression(v, ("x",))
        return v


class ParametersConfig(BaseModel):
    """Damping parameter domain and training sample."""

    mu_min: float = 0.01
    mu_max: float = 10.0
    training_count: int = 12
    training_spacing: Literal["log", "linear"] = "log"

    @field_validator("mu_min", "mu_max")
    @classmethod
    def validate_positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("Parameter bounds must be positive")
        return v

    @field_validator("training_count")
    @classmethod
    def validate_count(cls, v: int) -> int:
        if v < 1:
            raise ValueError("training_count must be at least 1")
        return v

    @model_validator(mode="after")
    def validate_range(self) -> "ParametersConfig":
        if not self.mu_min < self.mu_max:
            raise ValueError("mu_min must be smaller than mu_max")
        return self


class SolverConfig(BaseModel):
    step: float = 0.02
    t_end: float = 20.0

    @model_validator(mode="after")
    def validate_grid(self) -> "SolverConfig":
        SolverSettings(t_end=self.t_end, step=self.step)
        return self


class GreedyConfig(BaseModel):
    tolerance: float = 1e-2
    n_max: int = 200
    modes_per_iteration: int = 10
    energy_cutoff: float = 1e-7
    indicator: Literal["delta", "delta_tilde"] = "delta"
    right_inverse: Literal["min_norm", "antiderivative"] = "min_norm"
    max_iterations: int | None = None
    workers: int = 1

    @field_validator("tolerance", "energy_cutoff")
    @classmethod
    def validate_positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("Must be positive")
        return v

    @field_validator("modes_per_iteration", "workers")
    @classmethod
    def validate_at_least_one(cls, v: int) -> int:
        if v < 1:
            raise ValueError("Must be at least 1")
        return v


class BoundsConfig(BaseModel):
    poincare_convention: Literal["sqrt", "eigenvalue"] = "sqrt"
    constants_mode: Literal["per_mu", "worst_case"] = "per_mu"
    decay_fit_start: float | None = None


class EvaluationConfig(BaseModel):
    """Test sweep: random parameters and basis prefixes."""

    count: int = 20
    seed: int = 0
    prefix_iterations: list[int] | None = None
    tightness_threshold: float = 0.3
    workers: int = 1

    @field_validator("count")
    @classmethod
    def validate_count(cls, v: int) -> int:
        if v < 0:
            raise ValueError("Test sample size must be nonnegative")
        return v


class OutputConfig(BaseModel):
    directory: str = "results"
    truth_cache: bool = True
    svg: bool = False


class LoggingConfig(BaseModel):
    """Configuration for logging."""

    level: str = "INFO"
    format: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    file: str | None = "certified_rb.log"

    @field_validator("level")
    @classmethod
    def validate_level(cls, v: str) -> str:
        """Validate logging level."""
        valid_levels = {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}
        if v.upper() not in valid_levels:
            raise ValueError(f"Invalid logging level. Must be one of: {valid_levels}")
        return v.upper()


class ExperimentConfig(BaseModel):
    """Main configuration model."""

    network: NetworkConfig
    coefficients: CoefficientsConfig
    discretization: DiscretizationConfig = DiscretizationConfig()
    data: DataConfig = DataConfig()
    parameters: ParametersConfig = ParametersConfig()
    solver: SolverConfig = SolverConfig()
    greedy: GreedyConfig = GreedyConfig()
    bounds: BoundsConfig = BoundsConfig()
    test: EvaluationConfig = EvaluationConfig()
    output: OutputConfig = OutputConfig()
    logging: LoggingConfig = LoggingConfig()

    @model_validator(mode="after")
    def validate_consistency(self) -> "ExperimentConfig":
        n_edges = len(self.network.edges)
        if len(self.coefficients.a) != n_edges:
            raise ValueError(
                f"Coefficients list {len(self.coefficients.a)} entries for {n_edges} edges"
            )
        edge_ids = {e.id for e in self.network.edges}
        for term in (*self.data.f, *self.data.g):
            unknown = set(term.edges or ()) - edge_ids
            if unknown:
                raise ValueError(f"Source term references unknown edges {sorted(unknown)}")
        return self

    @property
    def mu_range(self) -> tuple[float, float]:
        return self.parameters.mu_min, self.parameters.mu_max

    def check_mu(self, mu: float) -> float:
        lo, hi = self.mu_range
        if not lo <= mu <= hi:
            raise ValueError(f"mu={mu} outside the parameter domain [{lo}, {hi}]")
        return float(mu)

    def config_hash(self) -> str:
        """SHA-256 over the sections that define the truth model and its data."""
        payload = self.model_dump(
            include={"network", "coefficients", "discretization", "data", "solver"},
            mode="json",
        )
        payload["network"].pop("file", None)
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def training_set(self) -> list[float]:
        p = self.parameters
        if p.training_count == 1:
            return [p.mu_min]
        if p.training_spacing == "log":
            values = np.logspace(np.log10(p.mu_min), np.log10(p.mu_max), p.training_count)
        else:
            values = np.linspace(p.mu_min, p.mu_max, p.training_count)
        return [float(v) for v in values]

    def test_sample(self, seed: int | None = None) -> list[float]:
        """Log-uniform random parameters, reproducible from the seed."""
        rng = np.random.default_rng(self.test.seed if seed is None else seed)
        exponents = rng.uniform(
            np.log10(self.parameters.mu_min), np.log10(self.parameters.mu_max), self.test.count
        )
        return [float(v) for v in 10.0**exponents]

    def solver_settings(self) -> SolverSettings:
        return SolverSettings(t_end=self.solver.t_end, step=self.solver.step)

    def build_graph(self) -> NetworkGraph:
        return build_graph(self.network.model_dump())

    def build_coefficients(self) -> EdgeCoefficients:
        c = self.coefficients
        return EdgeCoefficients(a=c.a, b=c.b, d_base=c.d_base)

    def build_data(self, homogeneous: bool = False) -> SourceAndBoundaryData:
        """Compile the data section; ``homogeneous`` keeps only the initial data."""
        d = self.data

        def terms(specs: list[SourceTermConfig]) -> tuple[SourceTerm, ...]:
            return tuple(
                SourceTerm(
                    time=time_function(s.time),
                    space=space_function(s.space),
                    edges=tuple(s.edges) if s.edges is not None else None,
                )
                for s in specs
            )

        boundary: dict[str, TimeFunction] = {}
        for node, value in d.boundary.items():
            if isinstance(value, TabulatedSeries):
                boundary[node] = tabulated_function(value.times, value.values)
            else:
                boundary[node] = time_function(str(value))

        return SourceAndBoundaryData(
            f_terms=() if homogeneous else terms(d.f),
            g_terms=() if homogeneous else terms(d.g),
            boundary={} if homogeneous else boundary,
            initial_p=space_function(d.initial_p) if d.initial_p else None,
            initial_u=space_function(d.initial_u) if d.initial_u else None,
        )


def _yaml_line(node: yaml.Node | None, loc: tuple[int | str, ...]) -> int | None:
    """1-based line of the YAML node at a validation error location."""
    line = node.start_mark.line + 1 if node is not None else None
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            match = next((v for k, v in node.value if k.value == key), None)
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int):
            match = node.value[key] if key < len(node.value) else None
        else:
            match = None
        if match is None:
            break
        node = match
        line = node.start_mark.line + 1
    return line


def _describe_errors(error: ValidationError, root: yaml.Node | None, path: Path) -> str:
    lines = [f"Invalid configuration {path}:"]
    for item in error.errors():
        loc = tuple(item["loc"])
        where = ".".join(str(part) for part in loc) or "<root>"
        line = _yaml_line(root, loc)
        prefix = f"line {line}: " if line is not None else ""
        lines.append(f"  {prefix}{where}: {item['msg']}")
    return "\n".join(lines)


def load_config(config_path: Path = Path("diamond.yaml")) -> ExperimentConfig:
    """
    Load and validate an experiment configuration.

    Args:
        config_path: YAML file; a ``network.file`` entry is resolved relative to it

    Returns:
        The validated ExperimentConfig

    Raises:
        FileNotFoundError: If the configuration or topology file is missing
        ConfigError: On YAML syntax errors or failed validation
    """
    if not config_path.exists():
        raise FileNotFoundError(f"Configuration file not found: {config_path}")

    text = config_path.read_text(encoding="utf-8")
    try:
        root = yaml.compose(text)
        config_data: Any = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"Invalid YAML in {config_path}: {e}") from None
    if not isinstance(config_data, dict):
        raise ConfigError(f"Configuration {config_path} must be a mapping")

    network = config_data.get("network")
    if isinstance(network, dict) and network.get("file"):
        topology_path = config_path.parent / network["file"]
        if not topology_path.exists():
            raise FileNotFoundError(f"Topology file not found: {topology_path}")
        try:
            topology = yaml.safe_load(topology_path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Invalid YAML in {topology_path}: {e}") from None
        config_data["network"] = {**topology, **network}

    # Override log level from environment variable if set
    if "LOG_LEVEL" in os.environ:
        if "logging" not in config_data or config_data["logging"] is None:
            config_data["logging"] = {}
        config_data["logging"]["level"] = os.environ["LOG_LEVEL"]

    try:
        return ExperimentConfig(**config_data)
    except ValidationError as e:
        raise ConfigError(_describe_errors(e, root, config_path)) from None
