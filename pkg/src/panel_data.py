from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np
import pandas as pd

from errors import ConfigError, PanelDataError

PanelSource = str | os.PathLike | IO | pd.DataFrame

logger = logging.getLogger("panel_data")


@dataclass(frozen=True)
class PanelSchema:
    unit: str
    time: str
    y: str
    d: str
    z: tuple[str, ...]
    x: tuple[str, ...] = ()
    cluster: str | None = None

    def required_columns(self) -> list[str]:
        columns = [self.unit, self.time, self.y, self.d, *self.z, *self.x]
        if self.cluster is not None:
            columns.append(self.cluster)
        return columns


@dataclass(frozen=True, eq=False)
class PanelDataset:
    units: np.ndarray
    times: np.ndarray
    y: np.ndarray
    d: np.ndarray
    z: np.ndarray
    x: np.ndarray
    cluster: np.ndarray
    z_names: tuple[str, ...]
    x_names: tuple[str, ...]
    dropped: int = 0

    @property
    def n_rows(self) -> int:
        return len(self.y)

    @property
    def n_instruments(self) -> int:
        return self.z.shape[1]

    @property
    def unit_ids(self) -> np.ndarray:
        return pd.unique(self.units)

    @classmethod
    def from_arrays(
        cls,
        units: Sequence,
        times: Sequence[int],
        y: Sequence[float],
        d: Sequence[float],
        z: np.ndarray,
        x: np.ndarray | None = None,
        cluster: Sequence | None = None,
        z_names: Sequence[str] | None = None,
        x_names: Sequence[str] | None = None,
    ) -> PanelDataset:
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        n_rows = z.shape[0]
        x = np.empty((n_rows, 0)) if x is None else np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]

        frame = pd.DataFrame(
            {
                "unit": np.asarray(units),
                "time": np.asarray(times),
                "y": np.asarray(y, dtype=float),
                "d": np.asarray(d, dtype=float),
                "cluster": np.asarray(units if cluster is None else cluster),
            }
        )
        z_names = tuple(z_names or (f"z{j + 1}" for j in range(z.shape[1])))
        x_names = tuple(x_names or (f"x{j + 1}" for j in range(x.shape[1])))
        for j, name in enumerate(z_names):
            frame[f"z:{name}"] = z[:, j]
        for j, name in enumerate(x_names):
            frame[f"x:{name}"] = x[:, j]

        schema = PanelSchema(
            unit="unit",
            time="time",
            y="y",
            d="d",
            z=tuple(f"z:{name}" for name in z_names),
            x=tuple(f"x:{name}" for name in x_names),
            cluster="cluster",
        )
        dataset = load_panel(frame, schema)
        return _rename(dataset, z_names, x_names)


@dataclass(frozen=True, eq=False)
class DifferencedSample:
    units: np.ndarray
    times: np.ndarray
    ytilde: np.ndarray
    dtilde: np.ndarray
    ztilde: np.ndarray
    xpair: np.ndarray
    cluster: np.ndarray
    z_names: tuple[str, ...] = ()
    x_names: tuple[str, ...] = ()

    @property
    def n_rows(self) -> int:
        return len(self.ytilde)

    @property
    def n_instruments(self) -> int:
        return self.ztilde.shape[1]

    @property
    def unit_ids(self) -> np.ndarray:
        return pd.unique(self.units)

    @property
    def xpair_names(self) -> tuple[str, ...]:
        return tuple(self.x_names) + tuple(f"{name}_lag" for name in self.x_names)

    def subset(self, mask: np.ndarray) -> DifferencedSample:
        return DifferencedSample(
            units=self.units[mask],
            times=self.times[mask],
            ytilde=self.ytilde[mask],
            dtilde=self.dtilde[mask],
            ztilde=self.ztilde[mask],
            xpair=self.xpair[mask],
            cluster=self.cluster[mask],
            z_names=self.z_names,
            x_names=self.x_names,
        )


@dataclass(frozen=True)
class FoldAssignment:
    folds: dict = field(default_factory=dict)
    n_folds: int = 2
    seed: int = 0

    def fold_of(self, units: np.ndarray) -> np.ndarray:
        return np.array([self.folds[unit] for unit in units], dtype=int)

    def units_in(self, fold: int) -> list:
        return [unit for unit, assigned in self.folds.items() if assigned == fold]

    def sizes(self) -> dict[int, int]:
        return {k: len(self.units_in(k)) for k in range(1, self.n_folds + 1)}


def load_panel(
    source: PanelSource, schema: PanelSchema, logger: logging.Logger = logger
) -> PanelDataset:
    if not schema.z:
        raise PanelDataError("at least one instrument column is required")

    frame = source.copy() if isinstance(source, pd.DataFrame) else read_csv(source)

    for column in schema.required_columns():
        if column not in frame.columns:
            raise PanelDataError(f"missing column: {column}")

    numeric_columns = [schema.time, schema.y, schema.d, *schema.z, *schema.x]
    for column in numeric_columns:
        converted = pd.to_numeric(frame[column], errors="coerce")
        if converted.isna().sum() > frame[column].isna().sum():
            raise PanelDataError(f"non-numeric values in column: {column}")
        frame[column] = converted.astype(float)

    total = len(frame)
    frame = frame.dropna(subset=schema.required_columns())
    numeric = frame[numeric_columns].to_numpy(dtype=float)
    frame = frame[np.isfinite(numeric).all(axis=1)]
    dropped = total - len(frame)
    if dropped:
        logger.info("Dropped %s rows with missing values", dropped)

    times = frame[schema.time].to_numpy()
    if not np.all(times == np.floor(times)):
        raise PanelDataError(f"time column {schema.time} must hold integer periods")
    frame[schema.time] = times.astype(int)

    duplicated = frame.duplicated([schema.unit, schema.time], keep=False)
    if duplicated.any():
        first = frame.loc[duplicated, [schema.unit, schema.time]].iloc[0]
        raise PanelDataError(
            f"duplicate key ({first[schema.unit]}, t={first[schema.time]})"
        )

    frame = frame.sort_values([schema.unit, schema.time], kind="mergesort")
    if frame.empty or frame.groupby(schema.unit).size().max() < 2:
        raise PanelDataError("panel too short: no unit has two periods")

    cluster_column = schema.cluster or schema.unit
    dataset = PanelDataset(
        units=frame[schema.unit].to_numpy(),
        times=frame[schema.time].to_numpy(dtype=int),
        y=frame[schema.y].to_numpy(dtype=float),
        d=frame[schema.d].to_numpy(dtype=float),
        z=frame[list(schema.z)].to_numpy(dtype=float),
        x=frame[list(schema.x)].to_numpy(dtype=float).reshape(len(frame), len(schema.x)),
        cluster=frame[cluster_column].to_numpy(),
        z_names=tuple(schema.z),
        x_names=tuple(schema.x),
        dropped=dropped,
    )
    logger.info(
        "Loaded panel: %s rows, %s units, %s instruments, %s covariates",
        dataset.n_rows,
        len(dataset.unit_ids),
        dataset.n_instruments,
        len(dataset.x_names),
    )
    return dataset


def first_difference(
    data: PanelDataset, logger: logging.Logger = logger
) -> DifferencedSample:
    same_unit = data.units[1:] == data.units[:-1]
    consecutive = (data.times[1:] - data.times[:-1]) == 1
    pairs = np.flatnonzero(same_unit & consecutive)
    current, previous = pairs + 1, pairs

    if len(pairs) == 0:
        raise PanelDataError("no differentiable pairs")

    sample = DifferencedSample(
        units=data.units[current],
        times=data.times[current],
        ytilde=data.y[current] - data.y[previous],
        dtilde=data.d[current] - data.d[previous],
        ztilde=data.z[current] - data.z[previous],
        xpair=np.hstack([data.x[current], data.x[previous]]),
        cluster=data.cluster[current],
        z_names=data.z_names,
        x_names=data.x_names,
    )

    silent = len(data.unit_ids) - len(sample.unit_ids)
    if silent:
        logger.info("%s units have no consecutive periods and contribute no rows", silent)
    return sample


def block_kfold(units: Sequence, n_folds: int, seed: int) -> FoldAssignment:
    unique_units = list(pd.unique(np.asarray(units)))

    if n_folds < 2:
        raise ConfigError("K ≥ 2 required")

    if n_folds > len(unique_units):
        raise ConfigError(
            f"cannot split {len(unique_units)} units into {n_folds} folds"
        )

    order = np.random.default_rng(seed).permutation(len(unique_units))
    folds = {
        unique_units[unit_index]: position % n_folds + 1
        for position, unit_index in enumerate(order)
    }
    return FoldAssignment(folds=folds, n_folds=n_folds, seed=seed)


def build_shift_share(
    shares: np.ndarray, shifts: np.ndarray, pop: np.ndarray
) -> np.ndarray:
    shares = np.asarray(shares, dtype=float)
    shifts = np.asarray(shifts, dtype=float)
    pop = np.asarray(pop, dtype=float)

    if shares.ndim != 2 or shifts.ndim != 2 or pop.ndim != 1:
        raise PanelDataError("shares and shifts must be matrices, pop a vector")

    if shares.shape[1] != shifts.shape[0] or shares.shape[0] != pop.shape[0]:
        raise PanelDataError(
            f"non-conformable shift-share inputs: shares {shares.shape}, "
            f"shifts {shifts.shape}, pop {pop.shape}"
        )

    if np.any(shares < 0):
        raise PanelDataError("shares must be non-negative")

    if np.any(pop <= 0):
        raise PanelDataError("population must be positive for every region")

    return (shares @ shifts) / pop[:, None]


def shift_share_frame(
    shares_source: PanelSource, shifts_source: PanelSource, pop_source: PanelSource
) -> pd.DataFrame:
    shares = _read_indexed(shares_source)
    shifts = _read_indexed(shifts_source)
    pop = _read_indexed(pop_source).iloc[:, 0]

    missing = set(shares.columns) - set(shifts.index.astype(str))
    if missing:
        raise PanelDataError(f"origins without shifts: {sorted(missing)}")

    shifts = shifts.set_axis(shifts.index.astype(str)).loc[list(shares.columns)]
    pop = pop.reindex(shares.index)
    if pop.isna().any():
        raise PanelDataError("population missing for some regions")

    instrument = build_shift_share(
        shares.to_numpy(), shifts.to_numpy(), pop.to_numpy()
    )
    wide = pd.DataFrame(instrument, index=shares.index, columns=shifts.columns)
    long = wide.rename_axis(index="region", columns="time").stack()
    return long.rename("instrument").reset_index()


def read_csv(source) -> pd.DataFrame:
    try:
        return pd.read_csv(source)
    except FileNotFoundError as error:
        raise PanelDataError(f"data file not found: {source}") from error
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as error:
        raise PanelDataError(f"unreadable CSV {source}: {error}") from error


def _read_indexed(source: PanelSource) -> pd.DataFrame:
    frame = source if isinstance(source, pd.DataFrame) else read_csv(source)
    frame = frame.set_index(frame.columns[0])
    frame.columns = frame.columns.astype(str)
    try:
        return frame.apply(pd.to_numeric, errors="raise")
    except ValueError as error:
        raise PanelDataError(f"non-numeric shift-share input: {error}") from error


def _rename(
    dataset: PanelDataset, z_names: tuple[str, ...], x_names: tuple[str, ...]
) -> PanelDataset:
    return PanelDataset(
        units=dataset.units,
        times=dataset.times,
        y=dataset.y,
        d=dataset.d,
        z=dataset.z,
        x=dataset.x,
        cluster=dataset.cluster,
        z_names=z_names,
        x_names=x_names,
        dropped=dataset.dropped,
    )
