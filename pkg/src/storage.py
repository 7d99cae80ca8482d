"""CSV tables, persisted reduced bases and the on-disk truth cache."""

import json
import logging
import os
import tempfile
import threading
import zipfile
from collections.abc import Iterable, Mapping
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from .certification import CertifiedTrajectory
from .errors import BasisMismatchError
from .reduction import GreedyState, ReducedBasis, build_reduced_basis
from .time_integration import Trajectory
from .truth_fem import TruthModel

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"

TIME_SERIES_COLUMNS = ["t", "err_sq", "delta", "delta_tilde", "eta", "eta_tilde"]
HISTORY_COLUMNS = ["iter", "mu", "indicator", "dimQ", "dimV", "N"]
SWEEP_COLUMNS = [
    "N",
    "max_err_sq",
    "max_delta",
    "max_delta_tilde",
    "max_eta",
    "max_eta_tilde",
]


def write_table(path: Path, frame: pd.DataFrame) -> Path:
    """Write a table with round-trip float precision and no index."""
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.debug(f"Wrote {len(frame)} rows to {path}")
    return path


def read_table(path: Path, required: Iterable[str]) -> pd.DataFrame:
    """
    Read a CSV table and check its columns.

    Raises:
        FileNotFoundError: If the file does not exist
        ValueError: If the file cannot be parsed or lacks a required column
    """
    if not path.exists():
        raise FileNotFoundError(f"Table not found: {path}")
    try:
        frame = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ValueError(f"Malformed table {path}: {e}") from None
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise ValueError(f"Table {path} lacks columns {missing}")
    return frame


def trajectory_frame(trajectory: Trajectory, states: bool = False) -> pd.DataFrame:
    """One row per recorded instant: t, energy and optionally all p and u coefficients."""
    columns: dict[str, Any] = {"t": trajectory.times}
    if trajectory.energies is not None:
        columns["energy"] = trajectory.energies
    if not states:
        return pd.DataFrame(columns)
    p = pd.DataFrame(trajectory.p, columns=[f"p_{i}" for i in range(trajectory.p.shape[1])])
    u = pd.DataFrame(trajectory.u, columns=[f"u_{i}" for i in range(trajectory.u.shape[1])])
    return pd.concat([pd.DataFrame(columns), p, u], axis=1)


def energy_frame(trajectory: Trajectory) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "t": trajectory.times,
            "energy": trajectory.energies,
            "derivative_energy": trajectory.derivative_energies,
        }
    )


def certified_frame(certified: CertifiedTrajectory) -> pd.DataFrame:
    """Per-time errors, bounds, effectivities and residual norms."""
    nan = np.full(certified.times.shape, np.nan)
    return pd.DataFrame(
        {
            "t": certified.times,
            "err_sq": certified.err_sq if certified.err_sq is not None else nan,
            "delta": certified.delta,
            "delta_tilde": certified.delta_tilde,
            "eta": certified.eta if certified.eta is not None else nan,
            "eta_tilde": certified.eta_tilde if certified.eta_tilde is not None else nan,
            "rp_norm_sq": certified.rp_norm_sq,
            "ru_norm_sq": certified.ru_norm_sq,
        }
    )


def history_frame(state: GreedyState) -> pd.DataFrame:
    rows = [
        {
            "iter": r.iteration,
            "mu": r.mu,
            "indicator": r.indicator,
            "dimQ": r.dim_q,
            "dimV": r.dim_v,
            "N": r.n,
        }
        for r in state.history
    ]
    return pd.DataFrame(rows, columns=HISTORY_COLUMNS)


def save_basis(path: Path, rb: ReducedBasis, metadata: Mapping[str, Any]) -> Path:
    """Persist a basis with JSON metadata (hashes, greedy history) in one .npz."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(
            f,
            q_basis=rb.q_basis,
            v_basis=rb.v_basis,
            kernel_dim=np.array(rb.kernel_dim),
            blocks=np.array(rb.blocks, dtype=np.int64),
            metadata=np.array(json.dumps(dict(metadata), sort_keys=True)),
        )
    logger.info(f"Saved basis N={rb.n} (dimQ={rb.dim_q}, dimV={rb.dim_v}) to {path}")
    return path


def load_basis(
    path: Path, model: TruthModel, expected_hash: str | None = None
) -> tuple[ReducedBasis, dict[str, Any]]:
    """
    Load a persisted basis and rebuild its projected operators.

    Raises:
        FileNotFoundError: If the basis file does not exist
        BasisMismatchError: If the config hash or the truth dimensions differ
    """
    if not path.exists():
        raise FileNotFoundError(f"Basis file not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        metadata = json.loads(str(archive["metadata"]))
        q_basis = archive["q_basis"]
        v_basis = archive["v_basis"]
        kernel_dim = int(archive["kernel_dim"])
        blocks = tuple(int(b) for b in archive["blocks"])

    if expected_hash is not None and metadata.get("config_hash") != expected_hash:
        raise BasisMismatchError(
            f"Basis {path} was trained for config {metadata.get('config_hash')}, "
            f"current config is {expected_hash}"
        )
    if q_basis.shape[0] != model.n_p or v_basis.shape[0] != model.n_u:
        raise BasisMismatchError(
            f"Basis {path} has truth dimensions ({q_basis.shape[0]}, {v_basis.shape[0]}), "
            f"model has ({model.n_p}, {model.n_u})"
        )
    return build_reduced_basis(model, q_basis, v_basis, kernel_dim, blocks), metadata


class TruthCache:
    """Truth trajectories on disk, keyed by config hash and parameter value."""

    def __init__(self, directory: Path, config_hash: str):
        self.directory = directory
        self.config_hash = config_hash
        self._lock = threading.Lock()

    def path(self, mu: float) -> Path:
        return self.directory / f"truth_{self.config_hash[:16]}_{float(mu).hex()}.npz"

    def get(self, mu: float) -> Trajectory | None:
        """Cached trajectory for mu, or None on a miss or an unreadable file."""
        path = self.path(mu)
        if not path.exists():
            return None
        try:
            with np.load(path, allow_pickle=False) as archive:
                if str(archive["config_hash"]) != self.config_hash:
                    return None
                trajectory = Trajectory(
                    times=archive["times"],
                    p=archive["p"],
                    u=archive["u"],
                    step=float(archive["step"]),
                    record_every=int(archive["record_every"]),
                    energies=archive["energies"],
                    derivative_energies=archive["derivative_energies"],
                )
        except (OSError, ValueError, KeyError, EOFError, zipfile.BadZipFile) as e:
            logger.warning(f"Ignoring unreadable truth cache file {path}: {e}")
            return None
        logger.debug(f"Truth cache hit for mu={mu}")
        return trajectory

    def put(self, mu: float, trajectory: Trajectory) -> None:
        path = self.path(mu)
        with self._lock:
            self.directory.mkdir(parents=True, exist_ok=True)
            with tempfile.NamedTemporaryFile(
                dir=self.directory, prefix=f".{path.stem}.", suffix=".tmp", delete=False
            ) as f:
                staging = Path(f.name)
                try:
                    np.savez(
                        f,
                        config_hash=np.array(self.config_hash),
                        times=trajectory.times,
                        p=trajectory.p,
                        u=trajectory.u,
                        step=np.array(trajectory.step),
                        record_every=np.array(trajectory.record_every),
                        energies=trajectory.energies,
                        derivative_energies=trajectory.derivative_energies,
                    )
                except BaseException:
                    f.close()
                    staging.unlink(missing_ok=True)
                    raise
            os.replace(staging, path)
