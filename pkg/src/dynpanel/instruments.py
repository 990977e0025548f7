"""GMM instrument matrix construction.

Two kinds of columns feed the instrument matrix:

* static blocks: lags of a variable valued at the sample rows, plus an
  optional intercept column. These are transformed like the equation
  (demeaned, quasi-demeaned, differenced or deviated) so that the moment
  conditions refer to the same transformed errors.
* dynamic blocks: period-specific level lags in the style of
  Holtz-Eakin/Arellano-Bond. Each equation period gets one column per
  available level lag, from the starting lag back to the entity's first
  observation or an optional bound; the column is zero outside its
  period block. Collapsed mode stacks all periods into one column per
  lag depth.

Missing level lags are zero-filled inside blocks rather than dropping
the observation. Columns that come out identically zero are pruned with
a warning so weighting matrices stay invertible.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass

import numpy as np

from .errors import DataError, EstimationError, UnderIdentifiedError
from .panel import AlignedSample, PanelDataset, lagged_grid
from .transforms import TransformKind, apply_grid

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StaticInstrument:
    """Lags ``lag_from..lag_to`` of one variable as instrument columns."""

    variable: str
    lag_from: int = 0
    lag_to: int = 0

    def __post_init__(self):
        if self.lag_from < 0 or self.lag_to < self.lag_from:
            raise ValueError(f"bad static lag range {self.lag_from}..{self.lag_to}")


@dataclass(frozen=True)
class DynamicInstrument:
    """Arellano-Bond style dynamic block for one variable.

    ``start_lag`` is the shallowest level lag used (2 for the dependent
    variable of a differenced or deviated equation); ``max_lag`` bounds
    the depth, None meaning all the way back to the first observation.
    """

    variable: str
    start_lag: int = 2
    max_lag: int | None = None
    collapsed: bool = False

    def __post_init__(self):
        if self.start_lag < 1:
            raise ValueError("dynamic instrument starting lag must be >= 1")
        if self.max_lag is not None and self.max_lag < self.start_lag:
            raise ValueError("deepest lag bound must be >= starting lag")


@dataclass(frozen=True)
class InstrumentSpec:
    """Declared instrument set: dynamic blocks, static lags, intercept."""

    dynamic: tuple[DynamicInstrument, ...] = ()
    static: tuple[StaticInstrument, ...] = ()
    include_intercept: bool = False

    def is_empty(self) -> bool:
        return not (self.dynamic or self.static or self.include_intercept)


_DYN_RE = re.compile(
    r"^dyn\(\s*(?P<var>\w+)\s*,\s*(?P<start>\d+)\s*(?:,\s*(?P<bound>\d+)\s*)?\)"
    r"(?P<collapse>:collapse)?$"
)
_STATIC_RE = re.compile(
    r"^static\(\s*(?P<var>\w+)\s*,\s*(?P<from>\d+)\s*(?:\.\.\s*(?P<to>\d+)\s*)?\)$"
)


def parse_instruments(text: str) -> InstrumentSpec:
    """Parse the CLI instrument grammar.

    Comma-separated terms: ``dyn(VAR,START[,BOUND])[:collapse]``,
    ``static(VAR,FROM..TO)``, ``static(VAR,LAG)``, ``intercept``.
    """
    dynamic: list[DynamicInstrument] = []
    static: list[StaticInstrument] = []
    intercept = False
    # split on commas not inside parentheses
    terms, depth, cur = [], 0, []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            terms.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    terms.append("".join(cur))
    for raw in terms:
        term = raw.strip()
        if not term:
            continue
        if term.lower() == "intercept":
            intercept = True
            continue
        m = _DYN_RE.match(term)
        if m:
            bound = m.group("bound")
            dynamic.append(
                DynamicInstrument(
                    variable=m.group("var"),
                    start_lag=int(m.group("start")),
                    max_lag=int(bound) if bound else None,
                    collapsed=bool(m.group("collapse")),
                )
            )
            continue
        m = _STATIC_RE.match(term)
        if m:
            lag_from = int(m.group("from"))
            lag_to = int(m.group("to")) if m.group("to") else lag_from
            static.append(StaticInstrument(m.group("var"), lag_from, lag_to))
            continue
        raise DataError(f"cannot parse instrument term {term!r}")
    return InstrumentSpec(tuple(dynamic), tuple(static), intercept)


@dataclass(frozen=True)
class InstrumentMatrix:
    """Assembled per-observation instrument columns."""

    matrix: np.ndarray           # (n_rows, n_columns)
    labels: tuple[str, ...]
    rank: int
    pruned: tuple[str, ...] = ()

    def __post_init__(self):
        self.matrix.setflags(write=False)

    @property
    def n_columns(self) -> int:
        return self.matrix.shape[1]


def build_dynamic_block(
    data: PanelDataset, sample: AlignedSample, dyn: DynamicInstrument
) -> tuple[np.ndarray, list[str]]:
    """Period-block level-lag columns for one variable.

    For each equation period t appearing in the sample, one column per
    lag j = start..depth(t), valued x_{a,t-j} on rows of period t (zero
    when the level cell is absent) and zero elsewhere. Collapsed mode
    returns one column per lag depth with all periods stacked.
    """
    series = data.require(dyn.variable)
    p0 = data.periods[0]
    eq_periods = np.unique(sample.periods)
    n = sample.n_rows

    def level(rows: np.ndarray, periods: np.ndarray, j: int) -> np.ndarray:
        col = np.zeros(rows.size)
        src = periods - j - p0
        ok = src >= 0
        ents = sample.entity_ids[rows[ok]]
        vals = series.values[ents, src[ok]]
        present = series.mask[ents, src[ok]]
        col[ok] = np.where(present, vals, 0.0)
        return col

    cols: list[np.ndarray] = []
    labels: list[str] = []
    if dyn.collapsed:
        deepest = max(int(t) - p0 for t in eq_periods)
        if dyn.max_lag is not None:
            deepest = min(deepest, dyn.max_lag)
        all_rows = np.arange(n)
        for j in range(dyn.start_lag, deepest + 1):
            full = np.zeros(n)
            full[all_rows] = level(all_rows, sample.periods, j)
            cols.append(full)
            labels.append(f"dyn({dyn.variable},{j})")
    else:
        for t in eq_periods:
            deepest = int(t) - p0
            if dyn.max_lag is not None:
                deepest = min(deepest, dyn.max_lag)
            rows = np.flatnonzero(sample.periods == t)
            for j in range(dyn.start_lag, deepest + 1):
                full = np.zeros(n)
                full[rows] = level(rows, sample.periods[rows], j)
                cols.append(full)
                labels.append(f"dyn({dyn.variable},{j})@{int(t)}")
    if not cols:
        raise EstimationError(
            f"empty instrument block for dyn({dyn.variable},{dyn.start_lag}): "
            "no usable lags at any equation period"
        )
    return np.column_stack(cols), labels


def build_static_block(
    data: PanelDataset,
    sample: AlignedSample,
    static: StaticInstrument,
    transform: TransformKind = TransformKind.NONE,
    theta: float | np.ndarray | None = None,
) -> tuple[np.ndarray, list[str]]:
    """Lag columns of one variable valued at the sample rows.

    The column is transformed like the equation: calendar transforms
    (FD/OD) are applied on the grid before reading the rows; demeaning
    transforms use per-entity means over the sample rows themselves.
    Absent cells are zero-filled after transforming.
    """
    cols: list[np.ndarray] = []
    labels: list[str] = []
    for j in range(static.lag_from, static.lag_to + 1):
        if j >= data.n_periods:
            raise DataError(
                f"static instrument lag {j} of {static.variable!r} exceeds panel depth"
            )
        grid = lagged_grid(data, static.variable, j)
        if transform in (
            TransformKind.FIRST_DIFFERENCE,
            TransformKind.ORTHOGONAL_DEVIATION,
        ):
            values, mask = apply_grid(transform, grid.values, grid.mask)
        else:
            values, mask = grid.values, grid.mask
        per_idx = sample.periods - data.periods[0]
        col = values[sample.entity_ids, per_idx]
        present = mask[sample.entity_ids, per_idx]
        if transform in (TransformKind.WITHIN, TransformKind.QUASI_DEMEAN):
            scale = 1.0 if transform is TransformKind.WITHIN else theta
            if scale is None:
                raise ValueError("quasi_demean static instruments need theta")
            thetas = np.broadcast_to(np.asarray(scale, dtype=float), (data.n_entities,))
            col = col.copy()
            for e in np.unique(sample.entity_ids):
                rows = (sample.entity_ids == e) & present
                if rows.any():
                    col[rows] = col[rows] - thetas[e] * col[rows].mean()
        col = np.where(present, col, 0.0)
        if not np.any(present):
            raise DataError(
                f"static instrument {static.variable!r} lag {j} has no present values"
            )
        cols.append(col)
        labels.append(static.variable if j == 0 else f"{static.variable}(-{j})")
    return np.column_stack(cols), labels


def intercept_column(
    sample: AlignedSample,
    transform: TransformKind,
    theta: float | np.ndarray | None = None,
) -> np.ndarray:
    """Intercept instrument under the equation transform.

    Ones for level equations, (1 - theta_a) under quasi-demeaning, and
    identically zero under within/FD/OD (annihilated, pruned later).
    """
    n = sample.n_rows
    if transform is TransformKind.QUASI_DEMEAN:
        thetas = np.broadcast_to(
            np.asarray(theta if theta is not None else 0.0, dtype=float),
            (len(sample.entities),),
        )
        return 1.0 - thetas[sample.entity_ids]
    if transform in (
        TransformKind.WITHIN,
        TransformKind.FIRST_DIFFERENCE,
        TransformKind.ORTHOGONAL_DEVIATION,
    ):
        return np.zeros(n)
    return np.ones(n)


def assemble(
    spec: InstrumentSpec,
    data: PanelDataset,
    sample: AlignedSample,
    transform: TransformKind = TransformKind.NONE,
    theta: float | np.ndarray | None = None,
    n_regressors: int | None = None,
) -> InstrumentMatrix:
    """Concatenate static and dynamic blocks into one instrument matrix.

    Identically-zero columns are pruned with a warning. When
    ``n_regressors`` is given the order condition is checked and an
    :class:`UnderIdentifiedError` raised if violated.
    """
    if spec.is_empty():
        raise EstimationError("instrument specification is empty")
    blocks: list[np.ndarray] = []
    labels: list[str] = []
    if spec.include_intercept:
        blocks.append(intercept_column(sample, transform, theta)[:, None])
        labels.append("const")
    for st in spec.static:
        block, names = build_static_block(data, sample, st, transform, theta)
        blocks.append(block)
        labels.extend(names)
    for dyn in spec.dynamic:
        block, names = build_dynamic_block(data, sample, dyn)
        blocks.append(block)
        labels.extend(names)
    matrix = np.hstack(blocks)

    scale = max(1.0, float(np.max(np.abs(matrix))) if matrix.size else 1.0)
    alive = np.max(np.abs(matrix), axis=0) > 1e-12 * scale
    pruned = tuple(lab for lab, keep in zip(labels, alive) if not keep)
    if pruned:
        logger.warning("pruned %d identically-zero instrument column(s): %s",
                       len(pruned), ", ".join(pruned))
        matrix = matrix[:, alive]
        labels = [lab for lab, keep in zip(labels, alive) if keep]
    if matrix.shape[1] == 0:
        raise EstimationError("all instrument columns were pruned")

    rank = int(np.linalg.matrix_rank(matrix))
    if n_regressors is not None and matrix.shape[1] < n_regressors:
        raise UnderIdentifiedError(
            f"{matrix.shape[1]} instrument column(s) for {n_regressors} regressors"
        )
    return InstrumentMatrix(matrix=matrix, labels=tuple(labels), rank=rank, pruned=pruned)
