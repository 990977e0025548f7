"""Unbalanced panel container, CSV ingestion, and descriptive statistics.

A :class:`PanelDataset` stores one entity-by-period value matrix per
variable together with a boolean presence mask. Periods are contiguous
integer labels; missing years inside an entity's run stay in the grid as
masked-out cells so that lags remain calendar lags.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import AlignmentError, DataError

DEFAULT_MISSING_TOKENS = frozenset({"", "-", "NA", "na"})


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PanelSeries:
    """One variable on the panel grid: values plus presence mask."""

    values: np.ndarray  # (n_entities, n_periods) float64, NaN where absent
    mask: np.ndarray    # (n_entities, n_periods) bool, True where present

    def __post_init__(self):
        if self.values.shape != self.mask.shape:
            raise DataError("series values and mask shapes differ")


@dataclass(frozen=True)
class PanelDataset:
    """Immutable unbalanced panel of named numeric series.

    Parameters
    ----------
    entities : tuple of str
        Entity identifiers in first-appearance order.
    periods : tuple of int
        Strictly increasing, contiguous integer time labels.
    series : mapping of str to PanelSeries
        One entity-by-period matrix per variable.
    units : mapping of str to str
        Optional per-variable unit tags.
    checksums : mapping of str to ndarray
        Per-variable totals row captured during wide ingestion, if any.
    """

    entities: tuple[str, ...]
    periods: tuple[int, ...]
    series: dict[str, PanelSeries]
    units: dict[str, str] = field(default_factory=dict)
    checksums: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.entities:
            raise DataError("dataset has no entities")
        periods = np.asarray(self.periods)
        if len(periods) == 0:
            raise DataError("dataset has no periods")
        if np.any(np.diff(periods) != 1):
            raise DataError("periods must be contiguous increasing integers")
        shape = (len(self.entities), len(self.periods))
        for name, s in self.series.items():
            if s.values.shape != shape:
                raise DataError(
                    f"series {name!r} has shape {s.values.shape}, expected {shape}"
                )
            _freeze(s.values)
            _freeze(s.mask)
        present_any = np.zeros(shape[0], dtype=bool)
        for s in self.series.values():
            present_any |= s.mask.any(axis=1)
        if not present_any.all():
            dead = [self.entities[i] for i in np.flatnonzero(~present_any)]
            raise DataError(f"entities with no present cells: {dead}")

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_periods(self) -> int:
        return len(self.periods)

    @property
    def variables(self) -> tuple[str, ...]:
        return tuple(self.series)

    def entity_index(self, name: str) -> int:
        try:
            return self.entities.index(name)
        except ValueError:
            raise DataError(f"unknown entity {name!r}") from None

    def period_index(self, period: int) -> int:
        if period < self.periods[0] or period > self.periods[-1]:
            raise DataError(f"period {period} outside {self.periods[0]}..{self.periods[-1]}")
        return period - self.periods[0]

    def require(self, variable: str) -> PanelSeries:
        try:
            return self.series[variable]
        except KeyError:
            raise DataError(
                f"unknown variable {variable!r}; have {list(self.series)}"
            ) from None

    def counts(self, variable: str) -> int:
        """Number of present cells for one variable."""
        return int(self.require(variable).mask.sum())

    def entity_period_counts(self) -> np.ndarray:
        """Per-entity count of periods present in at least one series."""
        any_mask = np.zeros((self.n_entities, self.n_periods), dtype=bool)
        for s in self.series.values():
            any_mask |= s.mask
        return any_mask.sum(axis=1)

    def subset(self, entities: Sequence[str]) -> "PanelDataset":
        """New dataset restricted to the given entities (given order)."""
        idx = [self.entity_index(e) for e in entities]
        series = {
            name: PanelSeries(s.values[idx].copy(), s.mask[idx].copy())
            for name, s in self.series.items()
        }
        return PanelDataset(tuple(entities), self.periods, series, dict(self.units))

    def to_long_csv(self, path) -> None:
        """Write the long-format CSV (entity,period,var1,...); absent cells empty.

        Values are written with ``repr`` so a round-trip through
        :func:`ingest_long_csv` reproduces them bit for bit.
        """
        names = list(self.series)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["entity", "period", *names])
            for i, entity in enumerate(self.entities):
                for j, period in enumerate(self.periods):
                    if not any(self.series[n].mask[i, j] for n in names):
                        continue
                    row = [entity, str(period)]
                    for n in names:
                        s = self.series[n]
                        row.append(repr(float(s.values[i, j])) if s.mask[i, j] else "")
                    writer.writerow(row)


def from_arrays(
    entities: Sequence[str],
    periods: Sequence[int],
    variables: Mapping[str, np.ndarray],
    units: Mapping[str, str] | None = None,
) -> PanelDataset:
    """Build a dataset from dense arrays, treating NaN as absent."""
    series = {}
    for name, arr in variables.items():
        values = np.asarray(arr, dtype=float)
        mask = ~np.isnan(values)
        series[name] = PanelSeries(values.copy(), mask)
    return PanelDataset(
        tuple(entities), tuple(int(p) for p in periods), series, dict(units or {})
    )


def _parse_cell(token: str, missing_tokens: frozenset[str]) -> tuple[float, bool]:
    text = token.strip()
    if text in missing_tokens:
        return np.nan, False
    # tolerate thousands separators as printed in source tables
    return float(text.replace(",", "")), True


def ingest_long_csv(
    path,
    missing_tokens: Iterable[str] = DEFAULT_MISSING_TOKENS,
    units: Mapping[str, str] | None = None,
) -> PanelDataset:
    """Read a long-format CSV with header ``entity,period,<var1>,...``.

    Entity order is first appearance; the period axis spans the observed
    min..max range. Duplicate (entity, period) rows and unparseable cells
    are rejected with their location.
    """
    missing = frozenset(missing_tokens)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) < 3 or header[0].strip().lower() != "entity" or header[1].strip().lower() != "period":
            raise DataError(f"{path}: expected header 'entity,period,<var>,...', got {header}")
        var_names = [h.strip() for h in header[2:]]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            entity = row[0].strip()
            try:
                period = int(row[1].strip())
            except ValueError:
                raise DataError(f"{path}:{lineno}: period {row[1]!r} is not an integer") from None
            rows.append((lineno, entity, period, row[2:]))
    if not rows:
        raise DataError(f"{path}: no data rows")

    entities: list[str] = []
    entity_pos: dict[str, int] = {}
    for _, entity, _, _ in rows:
        if entity not in entity_pos:
            entity_pos[entity] = len(entities)
            entities.append(entity)
    pmin = min(r[2] for r in rows)
    pmax = max(r[2] for r in rows)
    periods = tuple(range(pmin, pmax + 1))

    shape = (len(entities), len(periods))
    values = {v: np.full(shape, np.nan) for v in var_names}
    masks = {v: np.zeros(shape, dtype=bool) for v in var_names}
    seen: dict[tuple[str, int], int] = {}
    for lineno, entity, period, cells in rows:
        key = (entity, period)
        if key in seen:
            raise DataError(
                f"{path}:{lineno}: duplicate row for ({entity}, {period}), "
                f"first seen at line {seen[key]}"
            )
        seen[key] = lineno
        i = entity_pos[entity]
        j = period - pmin
        for v, token in zip(var_names, cells):
            try:
                val, present = _parse_cell(token, missing)
            except ValueError:
                raise DataError(
                    f"{path}:{lineno}: cell ({entity}, {period}, {v}) "
                    f"value {token!r} is not numeric"
                ) from None
            if present:
                values[v][i, j] = val
                masks[v][i, j] = True

    series = {v: PanelSeries(values[v], masks[v]) for v in var_names}
    return PanelDataset(tuple(entities), periods, series, dict(units or {}))


def ingest_wide_csv(
    path,
    variable_name: str,
    total_label: str = "TOTAL",
    missing_tokens: Iterable[str] = DEFAULT_MISSING_TOKENS,
    unit: str | None = None,
) -> PanelDataset:
    """Read a wide-format CSV: header ``name,<year1>,<year2>,...``.

    One row per entity. Rows whose name starts with ``total_label``
    (case-insensitive) are excluded from the entities and kept as a
    checksum vector on the result.
    """
    missing = frozenset(missing_tokens)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) < 2:
            raise DataError(f"{path}: header needs a name column and at least one year")
        year_labels = []
        for h in header[1:]:
            try:
                year_labels.append(int(h.strip()))
            except ValueError:
                raise DataError(f"{path}: non-numeric year header {h!r}") from None
        if any(b - a != 1 for a, b in zip(year_labels, year_labels[1:])):
            raise DataError(f"{path}: year headers must be consecutive, got {year_labels}")

        entities: list[str] = []
        data_rows: list[list[str]] = []
        checksum = None
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}:{lineno}: ragged row ({len(row)} fields, expected {len(header)})"
                )
            name = row[0].strip()
            if name.upper().startswith(total_label.upper()):
                checksum = np.array([float(c.strip().replace(",", "")) for c in row[1:]])
                continue
            if name in entities:
                raise DataError(f"{path}:{lineno}: duplicate entity {name!r}")
            entities.append(name)
            data_rows.append(row[1:])
    if not entities:
        raise DataError(f"{path}: no entity rows")

    shape = (len(entities), len(year_labels))
    values = np.full(shape, np.nan)
    mask = np.zeros(shape, dtype=bool)
    for i, cells in enumerate(data_rows):
        for j, token in enumerate(cells):
            try:
                val, present = _parse_cell(token, missing)
            except ValueError:
                raise DataError(
                    f"{path}: cell ({entities[i]}, {year_labels[j]}) "
                    f"value {token!r} is not numeric"
                ) from None
            if present:
                values[i, j] = val
                mask[i, j] = True

    units = {variable_name: unit} if unit else {}
    checksums = {variable_name: _freeze(checksum)} if checksum is not None else {}
    return PanelDataset(
        tuple(entities),
        tuple(year_labels),
        {variable_name: PanelSeries(values, mask)},
        units,
        checksums,
    )


@dataclass(frozen=True)
class DescriptiveStats:
    """Pooled summary statistics over the present cells of one variable.

    Skewness and kurtosis use population central moments (m3/m2^1.5 and
    m4/m2^2, so kurtosis is about 3 for normal data); the standard
    deviation uses the sample (n-1) denominator.
    """

    mean: float
    median: float
    max: float
    min: float
    standard_deviation: float
    skewness: float
    kurtosis: float
    observations: int

    def to_json_dict(self) -> dict:
        return {
            "mean": self.mean,
            "median": self.median,
            "max": self.max,
            "min": self.min,
            "sd": self.standard_deviation,
            "skewness": self.skewness,
            "kurtosis": self.kurtosis,
            "n": self.observations,
        }


def describe(data: PanelDataset, variable: str) -> DescriptiveStats:
    """Descriptive statistics over all present cells of ``variable``."""
    s = data.require(variable)
    x = s.values[s.mask]
    n = x.size
    if n < 2:
        raise DataError(f"insufficient data for {variable!r}: {n} observation(s)")
    mean = float(x.mean())
    centered = x - mean
    m2 = float(np.mean(centered**2))
    if m2 == 0.0:
        raise DataError(f"zero variance in {variable!r}; moments undefined")
    m3 = float(np.mean(centered**3))
    m4 = float(np.mean(centered**4))
    return DescriptiveStats(
        mean=mean,
        median=float(np.median(x)),
        max=float(x.max()),
        min=float(x.min()),
        standard_deviation=float(x.std(ddof=1)),
        skewness=m3 / m2**1.5,
        kurtosis=m4 / m2**2,
        observations=n,
    )


@dataclass(frozen=True)
class AlignedSample:
    """Estimation-ready rows: every required (variable, lag) cell present.

    ``matrix[:, c]`` holds the level value of ``columns[c] = (variable, lag)``
    at each row's (entity, period). Rows are entity-contiguous, ordered by
    entity first-appearance and period.
    """

    entities: tuple[str, ...]
    entity_ids: np.ndarray   # (n,) int index into entities
    periods: np.ndarray      # (n,) int period labels
    columns: tuple[tuple[str, int], ...]
    matrix: np.ndarray       # (n, n_columns)

    def __post_init__(self):
        _freeze(self.entity_ids)
        _freeze(self.periods)
        _freeze(self.matrix)

    @property
    def n_rows(self) -> int:
        return self.entity_ids.size

    def column(self, variable: str, lag: int = 0) -> np.ndarray:
        try:
            c = self.columns.index((variable, lag))
        except ValueError:
            raise DataError(f"no aligned column for ({variable}, lag {lag})") from None
        return self.matrix[:, c]

    def n_cross_sections(self) -> int:
        return int(np.unique(self.entity_ids).size)


def lagged_grid(data: PanelDataset, variable: str, lag: int) -> PanelSeries:
    """Level series shifted back ``lag`` calendar periods on the grid."""
    s = data.require(variable)
    if lag == 0:
        return s
    values = np.full_like(s.values, np.nan)
    mask = np.zeros_like(s.mask)
    values[:, lag:] = s.values[:, :-lag]
    mask[:, lag:] = s.mask[:, :-lag]
    return PanelSeries(values, mask)


def align(
    data: PanelDataset,
    variables: Sequence[str],
    required_lags: Mapping[str, int] | None = None,
) -> AlignedSample:
    """Select rows where every variable is present at lags 0..k.

    ``required_lags`` maps variable name to the deepest lag required for
    it (default 0). The first variable is the regressand by convention.
    Lags are calendar lags: a gap inside an entity's run breaks the lag
    chain instead of bridging it.
    """
    required_lags = dict(required_lags or {})
    columns: list[tuple[str, int]] = []
    grids: list[PanelSeries] = []
    for v in variables:
        data.require(v)
        k = int(required_lags.get(v, 0))
        if k < 0:
            raise DataError(f"negative lag count for {v!r}")
        for lag in range(k + 1):
            columns.append((v, lag))
            grids.append(lagged_grid(data, v, lag))

    keep = np.ones((data.n_entities, data.n_periods), dtype=bool)
    for g in grids:
        keep &= g.mask
    ent_idx, per_idx = np.nonzero(keep)
    if ent_idx.size == 0:
        raise AlignmentError("no estimable observations after alignment")
    matrix = np.column_stack([g.values[ent_idx, per_idx] for g in grids])
    periods = np.asarray(data.periods)[per_idx]
    return AlignedSample(
        entities=data.entities,
        entity_ids=ent_idx.astype(np.int64),
        periods=periods.astype(np.int64),
        columns=tuple(columns),
        matrix=matrix,
    )
