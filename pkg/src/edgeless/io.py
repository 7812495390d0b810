"""CSV ingestion, result serialisation and run manifests."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .distributions import DirichletParams, GammaParams, MvNormalParams, WishartParams
from .model import Dataset, Hyperparameters, PosteriorState, ValidationError


# -- CSV -------------------------------------------------------------------------


def read_csv(path) -> Dataset:
    """Read a matrix CSV: header of series ids, first column timestamps.

    Empty cells are missing; anything else must parse as a finite float.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2 or len(rows[0]) < 2:
        raise ValidationError(f"{path}: need a header row and at least one data row and column")
    series_ids = [s.strip() for s in rows[0][1:]]
    if len(set(series_ids)) != len(series_ids):
        raise ValidationError(f"{path}: duplicate series identifiers")
    n = len(series_ids)
    values = np.zeros((len(rows) - 1, n))
    mask = np.ones(values.shape, dtype=bool)
    timestamps = []
    for r, row in enumerate(rows[1:]):
        if len(row) != n + 1:
            raise ValidationError(f"{path}: row {r + 2} has {len(row)} cells, expected {n + 1}")
        timestamps.append(row[0])
        for c, cell in enumerate(row[1:]):
            cell = cell.strip()
            if not cell:
                mask[r, c] = False
                continue
            try:
                value = float(cell)
            except ValueError:
                raise ValidationError(f"{path}: non-numeric cell {cell!r} at row {r + 2}, column {c + 2}") from None
            if not math.isfinite(value):
                raise ValidationError(f"{path}: non-finite cell {cell!r} at row {r + 2}, column {c + 2}")
            values[r, c] = value
    return Dataset(values, mask, series_ids, timestamps)


def write_csv(path, dataset: Dataset) -> None:
    """Inverse of :func:`read_csv`; missing cells are written empty."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp", *dataset.series_ids])
        for t in range(dataset.T):
            cells = [repr(float(v)) if m else "" for v, m in zip(dataset.values[t], dataset.mask[t])]
            writer.writerow([dataset.timestamps[t], *cells])


def compute_log_returns(dataset: Dataset) -> Dataset:
    """Per-series log returns; a missing price masks both adjacent returns."""
    observed = dataset.values[dataset.mask]
    if np.any(observed <= 0):
        raise ValidationError("log returns need strictly positive prices")
    if dataset.T < 2:
        raise ValidationError("log returns need at least two time points")
    logs = np.log(np.where(dataset.mask, dataset.values, 1.0))
    mask = dataset.mask[1:] & dataset.mask[:-1]
    values = np.where(mask, logs[1:] - logs[:-1], 0.0)
    return Dataset(values, mask, dataset.series_ids, dataset.timestamps[1:])


def standardize_series(dataset: Dataset) -> Dataset:
    """Shift and scale each series to zero mean and unit variance over its observed cells."""
    counts = dataset.mask.sum(axis=0)
    if np.any(counts == 0):
        raise ValidationError("cannot standardise a series without observations")
    filled = dataset.filled()
    mean = filled.sum(axis=0) / counts
    std = np.sqrt((dataset.mask * (filled - mean) ** 2).sum(axis=0) / counts)
    constant = np.flatnonzero(std == 0)
    if constant.size:
        names = ", ".join(dataset.series_ids[i] for i in constant)
        raise ValidationError(f"zero-variance series cannot be standardised: {names}")
    values = np.where(dataset.mask, (filled - mean) / std, 0.0)
    return Dataset(values, dataset.mask.copy(), dataset.series_ids, dataset.timestamps)


def transpose_dataset(dataset: Dataset) -> Dataset:
    """Swap the roles of rows and columns (attributes become observations)."""
    return Dataset(dataset.values.T.copy(), dataset.mask.T.copy(), list(dataset.timestamps), list(dataset.series_ids))


def ingest(path, log_returns: bool = False, standardize: bool = False, transpose: bool = False) -> Dataset:
    """Read a CSV and apply the optional preprocessing in the order
    transpose, log returns, standardisation."""
    dataset = read_csv(path)
    if transpose:
        dataset = transpose_dataset(dataset)
    if log_returns:
        dataset = compute_log_returns(dataset)
    if standardize:
        dataset = standardize_series(dataset)
    return dataset


# -- posterior serialisation -------------------------------------------------------


def _array(x) -> list:
    return np.asarray(x, dtype=float).tolist()


def state_to_dict(state: PosteriorState) -> dict:
    """JSON-ready posterior; floats round-trip exactly through ``json``."""
    return {
        "x": {"mean": _array(state.q_x.mean), "precision": _array(state.q_x.precision)},
        "tau": {"shape": _array(state.q_tau.shape), "rate": _array(state.q_tau.rate)},
        "A": {"mean": _array(state.q_A.mean), "precision": _array(state.q_A.precision)},
        "mu": {"mean": _array(state.q_mu.mean), "precision": _array(state.q_mu.precision)},
        "Lambda": {"nu": _array(state.q_Lambda.nu), "scale": _array(state.q_Lambda.scale)},
        "z": _array(state.q_z),
        "rho": {"concentration": _array(state.q_rho.concentration)},
        "lambda": {"shape": _array(state.q_lambda.shape), "rate": _array(state.q_lambda.rate)},
    }


def state_from_dict(data: dict) -> PosteriorState:
    a = lambda v: np.asarray(v, dtype=float)
    try:
        return PosteriorState(
            q_x=MvNormalParams(a(data["x"]["mean"]), a(data["x"]["precision"])),
            q_tau=GammaParams(a(data["tau"]["shape"]), a(data["tau"]["rate"])),
            q_A=MvNormalParams(a(data["A"]["mean"]), a(data["A"]["precision"])),
            q_mu=MvNormalParams(a(data["mu"]["mean"]), a(data["mu"]["precision"])),
            q_Lambda=WishartParams(a(data["Lambda"]["nu"]), a(data["Lambda"]["scale"])),
            q_z=a(data["z"]),
            q_rho=DirichletParams(a(data["rho"]["concentration"])),
            q_lambda=GammaParams(a(data["lambda"]["shape"]), a(data["lambda"]["rate"])),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed posterior document: {exc}") from None


def dump_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None


def write_labels(path, series_ids, labels) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["series_id", "label"])
        writer.writerows(zip(series_ids, (int(v) for v in labels)))


def read_labels(path) -> dict:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["series_id", "label"]:
        raise ValidationError(f"{path}: expected a series_id,label header")
    return {sid: int(label) for sid, label in rows[1:]}


def write_table(path, rows: list, columns: Optional[list] = None) -> None:
    columns = columns or list(rows[0])
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, columns, lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# -- manifests ---------------------------------------------------------------------


def file_digest(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    """Provenance record written next to every command's outputs."""

    command: str
    config: dict
    seed: Optional[int]
    input_digests: dict = field(default_factory=dict)
    software_version: str = __version__
    python_version: str = field(default_factory=platform.python_version)
    numpy_version: str = np.__version__
    wall_clock_seconds: dict = field(default_factory=dict)
    exit_code: int = 0
    error: Optional[str] = None

    def add_inputs(self, *paths) -> None:
        for path in paths:
            if path is not None:
                self.input_digests[str(path)] = file_digest(path)

    def verify(self) -> bool:
        """True when every recorded input still has its recorded digest."""
        return all(Path(p).exists() and file_digest(p) == d for p, d in self.input_digests.items())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunManifest":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})

    def write(self, path) -> None:
        dump_json(path, self.to_dict())


def hyper_to_dict(hyper: Hyperparameters) -> dict:
    return asdict(hyper)
