"""Experiment orchestration: truth runs, training, test sweeps and figure data."""

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import pandas as pd

from .certification import (
    CertifiedTrajectory,
    ConstantsProvider,
    PoincareConvention,
    bound_series,
    certify,
    decay_violations,
    gamma_from_simulation,
    prepare_residual_offline,
)
from .config import ExperimentConfig
from .errors import GreedyStagnationError, NumericalError, RigorViolationError
from .plotting import plot_table
from .reduction import (
    ReducedBasis,
    check_compatibility,
    greedy_train,
    solve_reduced,
)
from .storage import (
    SWEEP_COLUMNS,
    TIME_SERIES_COLUMNS,
    TruthCache,
    certified_frame,
    energy_frame,
    history_frame,
    load_basis,
    read_table,
    save_basis,
    trajectory_frame,
    write_table,
)
from .time_integration import Trajectory, integrate
from .truth_fem import (
    AffineLoad,
    SourceAndBoundaryData,
    StateVector,
    TruthModel,
    assemble_load,
    assemble_truth,
    initial_state,
)

logger = logging.getLogger(__name__)

BY_MU_COLUMNS = [
    "mu",
    *SWEEP_COLUMNS,
    "tightness",
    "tightness_alt",
    "flagged",
    "violations",
]
OTHER_CONVENTION: dict[PoincareConvention, PoincareConvention] = {
    "sqrt": "eigenvalue",
    "eigenvalue": "sqrt",
}


def _label(mu: float) -> str:
    return f"{mu:.6g}"


class Experiment:
    """Truth model, data and caches shared by all commands of one config."""

    def __init__(self, config: ExperimentConfig, output_dir: Path | None = None):
        self.config = config
        self.output_dir = output_dir or Path(config.output.directory)
        self.config_hash = config.config_hash()
        self._truth_locks: dict[float, threading.Lock] = {}
        self._truth_locks_guard = threading.Lock()

    @cached_property
    def model(self) -> TruthModel:
        return assemble_truth(
            self.config.build_graph(),
            self.config.build_coefficients(),
            self.config.discretization.cells_per_edge,
        )

    @cached_property
    def data(self) -> SourceAndBoundaryData:
        return self.config.build_data()

    @cached_property
    def load(self) -> AffineLoad:
        return assemble_load(self.model, self.data)

    @cached_property
    def x0(self) -> StateVector:
        return initial_state(self.model, self.data)

    @cached_property
    def constants(self) -> ConstantsProvider:
        bounds = self.config.bounds
        return ConstantsProvider(
            self.model,
            convention=bounds.poincare_convention,
            mode=bounds.constants_mode,
            mu_range=self.config.mu_range,
        )

    @cached_property
    def alternate_constants(self) -> ConstantsProvider:
        """Constants under the Poincare convention the config did not choose."""
        bounds = self.config.bounds
        return ConstantsProvider(
            self.model,
            convention=OTHER_CONVENTION[bounds.poincare_convention],
            mode=bounds.constants_mode,
            mu_range=self.config.mu_range,
        )

    @cached_property
    def truth_cache(self) -> TruthCache | None:
        if not self.config.output.truth_cache:
            return None
        return TruthCache(self.output_dir / "cache", self.config_hash)

    def truth(self, mu: float) -> Trajectory:
        """
        Truth trajectory for mu, from the disk cache when available.

        Concurrent calls for the same mu wait for one another, so a cached
        trajectory is computed and written once.
        """
        with self._truth_locks_guard:
            lock = self._truth_locks.setdefault(float(mu), threading.Lock())
        with lock:
            cache = self.truth_cache
            if cache is not None:
                cached = cache.get(mu)
                if cached is not None:
                    return cached
            trajectory = integrate(
                self.model, mu, self.load, self.x0, self.config.solver_settings()
            )
            if cache is not None:
                cache.put(mu, trajectory)
            return trajectory


def cmd_truth(
    config: ExperimentConfig,
    mu: float,
    homogeneous: bool = False,
    output_dir: Path | None = None,
    states: bool = False,
) -> list[Path]:
    """
    Solve the truth problem for one parameter and write its trajectory.

    Args:
        config: Experiment configuration
        mu: Damping parameter (must lie in the parameter domain)
        homogeneous: Drop sources and boundary pressures
        output_dir: Overrides the configured output directory
        states: Also export every pressure and flux coefficient

    Returns:
        Paths of the trajectory and energy tables
    """
    mu = config.check_mu(mu)
    experiment = Experiment(config, output_dir)
    model = experiment.model
    data = config.build_data(homogeneous=homogeneous)
    trajectory = integrate(
        model,
        mu,
        assemble_load(model, data),
        initial_state(model, data),
        config.solver_settings(),
    )
    suffix = f"mu{_label(mu)}" + ("_homogeneous" if homogeneous else "")
    paths = [
        write_table(
            experiment.output_dir / f"truth_{suffix}.csv", trajectory_frame(trajectory, states)
        ),
        write_table(experiment.output_dir / f"energy_{suffix}.csv", energy_frame(trajectory)),
    ]
    logger.info(f"Truth run mu={mu}: {len(trajectory)} records written to {paths[0]}")
    return paths


def cmd_train(config: ExperimentConfig, output_dir: Path | None = None) -> tuple[Path, Path]:
    """
    Run the greedy training and persist the basis and its history.

    Returns:
        Paths of the basis archive and the history table

    Raises:
        GreedyStagnationError: After writing the partial history
    """
    experiment = Experiment(config, output_dir)
    g = config.greedy
    started = time.perf_counter()
    history_path = experiment.output_dir / "greedy_history.csv"
    try:
        state = greedy_train(
            experiment.model,
            config.training_set(),
            experiment.data,
            config.solver_settings(),
            g.tolerance,
            g.n_max,
            experiment.constants,
            indicator=g.indicator,
            energy_cutoff=g.energy_cutoff,
            modes_per_iteration=g.modes_per_iteration,
            right_inverse=g.right_inverse,
            max_iterations=g.max_iterations,
            truth_solver=experiment.truth,
            workers=g.workers,
        )
    except GreedyStagnationError as e:
        if e.state is not None:
            write_table(history_path, history_frame(e.state))
            logger.error(f"Greedy stagnated; partial history written to {history_path}")
        raise

    write_table(history_path, history_frame(state))
    metadata = {
        "config_hash": experiment.config_hash,
        "model": experiment.model.fingerprint(),
        "stop_reason": state.stop_reason,
        "indicator": g.indicator,
        "history": history_frame(state).to_dict(orient="list"),
    }
    basis_path = save_basis(experiment.output_dir / "basis.npz", state.basis, metadata)
    logger.info(
        f"Training finished in {time.perf_counter() - started:.1f}s "
        f"({state.stop_reason}), N={state.basis.n}"
    )
    return basis_path, history_path


@dataclass(frozen=True)
class SweepRow:
    """Maxima over time of one certified run."""

    mu: float
    n: int
    max_err_sq: float
    max_delta: float
    max_delta_tilde: float
    max_eta: float
    max_eta_tilde: float
    tightness: float
    tightness_alt: float
    flagged: bool
    violations: int


@dataclass
class RunReport:
    rows: list[SweepRow] = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def violations(self) -> int:
        return sum(r.violations for r in self.rows)

    def by_mu(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            [
                {
                    "mu": r.mu,
                    "N": r.n,
                    "max_err_sq": r.max_err_sq,
                    "max_delta": r.max_delta,
                    "max_delta_tilde": r.max_delta_tilde,
                    "max_eta": r.max_eta,
                    "max_eta_tilde": r.max_eta_tilde,
                    "tightness": r.tightness,
                    "tightness_alt": r.tightness_alt,
                    "flagged": r.flagged,
                    "violations": r.violations,
                }
                for r in self.rows
            ],
            columns=BY_MU_COLUMNS,
        )
        return frame.sort_values(["N", "mu"], kind="stable").reset_index(drop=True)

    def by_n(self) -> pd.DataFrame:
        """Maxima over the test sample per basis size, sorted by N."""
        frame = self.by_mu()
        if frame.empty:
            return pd.DataFrame(columns=SWEEP_COLUMNS)
        grouped = frame.groupby("N", sort=True)[SWEEP_COLUMNS[1:]].max()
        return grouped.reset_index()[SWEEP_COLUMNS]


def _nanmax(values: np.ndarray | None) -> float:
    if values is None or not np.any(np.isfinite(values)):
        return float("nan")
    return float(np.nanmax(values))


def _exceeds(ratio: float, threshold: float) -> bool:
    return bool(np.isfinite(ratio) and ratio > threshold)


def _test_row(
    certified: CertifiedTrajectory, n: int, threshold: float, tightness_alt: float
) -> SweepRow:
    tightness = certified.tightness_ratio
    return SweepRow(
        mu=certified.mu,
        n=n,
        max_err_sq=_nanmax(certified.err_sq),
        max_delta=float(np.max(certified.delta)),
        max_delta_tilde=float(np.max(certified.delta_tilde)),
        max_eta=_nanmax(certified.eta),
        max_eta_tilde=_nanmax(certified.eta_tilde),
        tightness=tightness,
        tightness_alt=tightness_alt,
        flagged=_exceeds(tightness, threshold) and _exceeds(tightness_alt, threshold),
        violations=certified.rigor_violations(),
    )


def cmd_test(
    config: ExperimentConfig,
    basis_path: Path,
    seed: int | None = None,
    output_dir: Path | None = None,
) -> RunReport:
    """
    Certify a trained basis and its prefixes on a random test sample.

    Writes one per-time table per (mu, N), ``report_by_mu.csv`` and
    ``report_by_n.csv``.

    Raises:
        BasisMismatchError: If the basis belongs to another configuration
        RigorViolationError: After writing the reports, if any bound fell below the error
    """
    experiment = Experiment(config, output_dir)
    model = experiment.model
    basis, _ = load_basis(basis_path, model, experiment.config_hash)
    iterations = config.test.prefix_iterations
    if iterations is None:
        iterations = list(range(len(basis.blocks) + 1))
    prefixes: list[ReducedBasis] = []
    for count in sorted(set(iterations)):
        prefix = basis.prefix(model, count)
        if not check_compatibility(model, prefix).passed():
            raise NumericalError(f"Basis prefix of {count} iterations is not compatible")
        prefixes.append(prefix)

    sample = config.test_sample(seed)
    settings = config.solver_settings()
    offline = [prepare_residual_offline(model, rb, experiment.load) for rb in prefixes]
    threshold = config.test.tightness_threshold
    series_dir = experiment.output_dir / "timeseries"
    constants, alternate = experiment.constants, experiment.alternate_constants
    started = time.perf_counter()

    def run(i: int) -> list[SweepRow]:
        mu = sample[i]
        truth = experiment.truth(mu)
        rows: list[SweepRow] = []
        for rb, prefix_offline in zip(prefixes, offline, strict=True):
            reduced, initial = solve_reduced(
                model, rb, mu, experiment.load, experiment.x0, settings
            )
            certified = certify(
                model,
                rb,
                mu,
                reduced,
                settings,
                constants.get(mu),
                prefix_offline,
                initial,
                truth,
            )
            write_table(series_dir / f"mu{i:03d}_N{rb.n:04d}.csv", certified_frame(certified))
            delta, delta_tilde = bound_series(
                certified.times,
                settings.step,
                certified.rp_norm_sq,
                certified.ru_norm_sq,
                alternate.get(mu),
                initial.error_p,
                initial.error_u,
            )
            tightness_alt = (
                float(delta[-1] / delta_tilde[-1]) if delta_tilde[-1] else float("nan")
            )
            row = _test_row(certified, rb.n, threshold, tightness_alt)
            if row.flagged:
                logger.warning(
                    f"Delta(T)/Delta~(T) = {row.tightness:.3g} "
                    f"({row.tightness_alt:.3g} under the other Poincare convention) "
                    f"exceeds {threshold} (mu={mu:.4g}, N={rb.n})"
                )
            if row.violations:
                logger.error(f"{row.violations} rigor violations at mu={mu:.4g}, N={rb.n}")
            rows.append(row)
        return rows

    if config.test.workers > 1:
        with ThreadPoolExecutor(max_workers=config.test.workers) as pool:
            per_mu = list(pool.map(run, range(len(sample))))
    else:
        per_mu = [run(i) for i in range(len(sample))]
    rows = [row for group in per_mu for row in group]

    report = RunReport(rows=rows, elapsed=time.perf_counter() - started)
    write_table(experiment.output_dir / "report_by_mu.csv", report.by_mu())
    write_table(experiment.output_dir / "report_by_n.csv", report.by_n())
    logger.info(
        f"Tested {len(sample)} parameters x {len(prefixes)} basis sizes "
        f"in {report.elapsed:.1f}s"
    )
    if report.violations:
        raise RigorViolationError(
            f"{report.violations} instants where a bound falls below the true error"
        )
    return report


def cmd_plotdata(report_dir: Path, svg: bool = False) -> list[Path]:
    """
    Turn test reports into per-figure tables, optionally with SVG plots.

    Returns:
        Paths of all files written

    Raises:
        FileNotFoundError: If report_by_n.csv is missing
        ValueError: If a report table is malformed
    """
    by_n = read_table(report_dir / "report_by_n.csv", SWEEP_COLUMNS)
    figures = report_dir / "figures"
    written: list[Path] = []

    maxima = by_n[["N", "max_err_sq", "max_delta", "max_delta_tilde"]]
    effectivity = by_n[["N", "max_eta", "max_eta_tilde"]]
    written.append(write_table(figures / "maxima_vs_n.csv", maxima))
    written.append(write_table(figures / "effectivity_vs_n.csv", effectivity))
    if svg and not by_n.empty:
        written.append(
            plot_table(
                maxima,
                "N",
                list(maxima.columns[1:]),
                figures / "maxima_vs_n.svg",
                "Maximal error and bounds over the test sample",
            )
        )
        written.append(
            plot_table(
                effectivity,
                "N",
                list(effectivity.columns[1:]),
                figures / "effectivity_vs_n.svg",
                "Maximal effectivities",
            )
        )

    for path in sorted((report_dir / "timeseries").glob("*.csv")):
        series = read_table(path, TIME_SERIES_COLUMNS)
        bounds = series[["t", "err_sq", "delta", "delta_tilde"]]
        written.append(write_table(figures / f"bounds_{path.stem}.csv", bounds))
        if svg:
            written.append(
                plot_table(
                    bounds,
                    "t",
                    list(bounds.columns[1:]),
                    figures / f"bounds_{path.stem}.svg",
                    f"Error and bounds ({path.stem})",
                )
            )
    logger.info(f"Wrote {len(written)} figure files to {figures}")
    return written


def cmd_constants(
    config: ExperimentConfig,
    mus: list[float] | None = None,
    output_dir: Path | None = None,
) -> pd.DataFrame:
    """
    Tabulate the bound constants per parameter.

    With ``bounds.decay_fit_start`` set, a homogeneous truth run per parameter
    adds the decay rate fitted to the simulated energy, together with the
    number of decay-certificate violations of that run.
    """
    experiment = Experiment(config, output_dir)
    model = experiment.model
    values = [config.check_mu(mu) for mu in mus] if mus else config.training_set()
    start = config.bounds.decay_fit_start

    homogeneous = config.build_data(homogeneous=True)
    x0 = initial_state(model, homogeneous)
    if start is not None and not (np.any(x0.p) or np.any(x0.u)):
        rng = np.random.default_rng(config.test.seed)
        x0 = StateVector(p=rng.standard_normal(model.n_p), u=rng.standard_normal(model.n_u))

    rows = []
    for mu in values:
        constants = experiment.constants.get(mu)
        row: dict[str, float | int] = dict(constants.as_dict())
        if start is not None:
            trajectory = integrate(model, mu, None, x0, config.solver_settings())
            row["gamma_fit"] = gamma_from_simulation(trajectory, start)
            row["decay_violations"] = decay_violations(model, trajectory, constants)
        logger.info(
            f"mu={mu:.4g}: C0={constants.C0:.4g}, C1={constants.C1:.4g}, "
            f"C_P={constants.C_P:.6g}, gamma={constants.gamma:.4g}, "
            f"C'={constants.Cprime:.4g}, C~={constants.Ctilde:.4g}"
        )
        rows.append(row)

    frame = pd.DataFrame(rows)
    write_table(experiment.output_dir / "constants.csv", frame)
    return frame
