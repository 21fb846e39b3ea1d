"""Shared data model: unit marginals, joint tables, proportions, validation."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Optional, Sequence

import numpy as np


class ValidationError(ValueError):
    """Raised when input data break a structural invariant."""


def _frozen(a, dtype=None) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DatasetMeta:
    R: int
    C: int
    row_labels: tuple = ()
    col_labels: tuple = ()
    N: int = 1
    seat_of_unit: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.R < 2 or self.C < 2:
            raise ValidationError(f"need R >= 2 and C >= 2, got R={self.R}, C={self.C}")
        if self.N < 1:
            raise ValidationError(f"need N >= 1, got {self.N}")
        if not self.row_labels:
            object.__setattr__(self, "row_labels", tuple(f"x{i + 1}" for i in range(self.R)))
        if not self.col_labels:
            object.__setattr__(self, "col_labels", tuple(f"y{j + 1}" for j in range(self.C)))
        if len(self.row_labels) != self.R or len(self.col_labels) != self.C:
            raise ValidationError("label count does not match R/C")
        object.__setattr__(self, "row_labels", tuple(self.row_labels))
        object.__setattr__(self, "col_labels", tuple(self.col_labels))
        object.__setattr__(self, "seat_of_unit", dict(self.seat_of_unit))

    @property
    def seats(self) -> list:
        return sorted(set(self.seat_of_unit.values()))


@dataclass(frozen=True, eq=False)
class UnitAggregate:
    """Marginal counts of one polling station: ``x`` (rows) and ``y`` (columns)."""

    unit_id: str
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = _frozen(self.x, dtype=np.int64)
        y = _frozen(self.y, dtype=np.int64)
        if x.ndim != 1 or y.ndim != 1:
            raise ValidationError(f"unit {self.unit_id}: x and y must be vectors")
        if (x < 0).any() or (y < 0).any():
            raise ValidationError(f"unit {self.unit_id}: negative counts")
        if x.sum() != y.sum():
            raise ValidationError(
                f"unit {self.unit_id}: row total {x.sum()} != column total {y.sum()}"
            )
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return int(self.x.sum())

    @property
    def R(self) -> int:
        return len(self.x)

    @property
    def C(self) -> int:
        return len(self.y)

    @property
    def has_empty_row(self) -> bool:
        return bool((self.x == 0).any())

    def __eq__(self, other):
        if not isinstance(other, UnitAggregate):
            return NotImplemented
        return (
            self.unit_id == other.unit_id
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
        )

    def __hash__(self):
        return hash((self.unit_id, self.x.tobytes(), self.y.tobytes()))


@dataclass(frozen=True, eq=False)
class IndividualTable:
    """Joint R x C counts n_uij of one unit."""

    unit_id: str
    counts: np.ndarray

    def __post_init__(self):
        c = _frozen(self.counts, dtype=np.int64)
        if c.ndim != 2:
            raise ValidationError(f"unit {self.unit_id}: counts must be an R x C matrix")
        if (c < 0).any():
            raise ValidationError(f"unit {self.unit_id}: negative counts")
        object.__setattr__(self, "counts", c)

    @property
    def row_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def within_row_proportions(self) -> np.ndarray:
        """p_uij = n_uij / x_ui; rows with x_ui = 0 are NaN."""
        rt = self.row_totals[:, None].astype(float)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rt > 0, self.counts / rt, np.nan)

    def __eq__(self, other):
        if not isinstance(other, IndividualTable):
            return NotImplemented
        return self.unit_id == other.unit_id and np.array_equal(self.counts, other.counts)

    def __hash__(self):
        return hash((self.unit_id, self.counts.tobytes()))


@dataclass(frozen=True)
class Proportions:
    t: np.ndarray
    v: np.ndarray


class TransitionMatrix:
    """Row-stochastic R x C matrix of transition probabilities."""

    def __init__(self, pi, atol: float = 1e-10):
        pi = _frozen(pi, dtype=float)
        if pi.ndim != 2:
            raise ValidationError("transition matrix must be 2-D")
        if np.isnan(pi).any():
            raise ValidationError("transition matrix has undefined entries")
        if (pi < -atol).any() or (pi > 1 + atol).any():
            raise ValidationError("transition probabilities outside [0, 1]")
        if not np.allclose(pi.sum(axis=1), 1.0, rtol=0, atol=atol):
            raise ValidationError("rows of transition matrix do not sum to 1")
        self.pi = pi

    @property
    def shape(self):
        return self.pi.shape

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.pi, dtype=dtype)

    def __repr__(self):
        return f"TransitionMatrix({self.pi.tolist()!r})"


def proportions(unit: UnitAggregate) -> Proportions:
    n = unit.n
    if n <= 0:
        raise ValidationError(f"unit {unit.unit_id}: zero total, proportions undefined")
    return Proportions(t=_frozen(unit.x / n), v=_frozen(unit.y / n))


def aggregate(table: IndividualTable) -> UnitAggregate:
    c = table.counts
    return UnitAggregate(table.unit_id, c.sum(axis=1), c.sum(axis=0))


def accounting_identity_holds(table: IndividualTable) -> bool:
    """Check v_j = sum_i t_i p_ij in exact rational arithmetic."""
    c = table.counts
    n = int(c.sum())
    if n == 0:
        return True
    R, C = c.shape
    x = c.sum(axis=1)
    for j in range(C):
        lhs = Fraction(int(c[:, j].sum()), n)
        rhs = sum(
            (Fraction(int(x[i]), n) * Fraction(int(c[i, j]), int(x[i])) for i in range(R) if x[i] > 0),
            Fraction(0),
        )
        if lhs != rhs:
            return False
    return True


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok


def validate_dataset(
    units: Sequence[UnitAggregate],
    tables: Optional[Sequence[IndividualTable]],
    meta: DatasetMeta,
) -> ValidationReport:
    """Collect every structural violation instead of stopping at the first.

    Units with a zero total or an empty row category are kept and listed in
    ``flags``; estimators decide how to treat them.
    """
    rep = ValidationReport()
    if len(units) != meta.N:
        rep.violations.append(f"meta.N={meta.N} but {len(units)} units given")
    seen = set()
    for u in units:
        if u.unit_id in seen:
            rep.violations.append(f"unit {u.unit_id}: duplicated")
        seen.add(u.unit_id)
        if u.R != meta.R or u.C != meta.C:
            rep.violations.append(
                f"unit {u.unit_id}: dimension {u.R}x{u.C} does not match dataset {meta.R}x{meta.C}"
            )
        if meta.seat_of_unit and u.unit_id not in meta.seat_of_unit:
            rep.violations.append(f"unit {u.unit_id}: unknown seat")
        if u.n == 0:
            rep.flags.append(f"unit {u.unit_id}: zero total")
        elif u.has_empty_row:
            empty = [meta.row_labels[i] for i in np.flatnonzero(u.x == 0) if i < meta.R]
            rep.flags.append(f"unit {u.unit_id}: empty rows {empty}")
    extra = set(meta.seat_of_unit) - seen
    for uid in sorted(extra):
        rep.violations.append(f"unit {uid}: listed in seat map but has no data")

    if tables is not None:
        by_id = {u.unit_id: u for u in units}
        for tab in tables:
            u = by_id.get(tab.unit_id)
            if u is None:
                rep.violations.append(f"table {tab.unit_id}: no matching unit aggregate")
                continue
            if tab.counts.shape != (meta.R, meta.C):
                rep.violations.append(
                    f"table {tab.unit_id}: dimension {tab.counts.shape} does not match "
                    f"dataset {(meta.R, meta.C)}"
                )
                continue
            if u.R != meta.R or u.C != meta.C:
                continue
            rs = tab.counts.sum(axis=1)
            for i in np.flatnonzero(rs != u.x):
                rep.violations.append(
                    f"table {tab.unit_id}: row {meta.row_labels[i]} sums to {rs[i]}, "
                    f"marginal says {u.x[i]}"
                )
            cs = tab.counts.sum(axis=0)
            for j in np.flatnonzero(cs != u.y):
                rep.violations.append(
                    f"table {tab.unit_id}: column {meta.col_labels[j]} sums to {cs[j]}, "
                    f"marginal says {u.y[j]}"
                )
    return rep


@dataclass
class Dataset:
    """Everything one estimation run may see.

    ``covariates`` is an N x q array aligned with ``units``; ``tables`` is
    present only for synthetic or matched data.
    """

    meta: DatasetMeta
    units: list
    tables: Optional[list] = None
    covariates: Optional[np.ndarray] = None
    covariate_names: tuple = ()

    def __post_init__(self):
        if self.covariates is not None:
            z = np.asarray(self.covariates, dtype=float)
            if z.ndim == 1:
                z = z[:, None]
            if z.shape[0] != len(self.units):
                raise ValidationError("covariate rows do not match units")
            if not np.isfinite(z).all():
                raise ValidationError("covariates must be finite")
            self.covariates = z
            if not self.covariate_names:
                self.covariate_names = tuple(f"z{k + 1}" for k in range(z.shape[1]))

    def validate(self) -> ValidationReport:
        return validate_dataset(self.units, self.tables, self.meta)

    def seat_index(self) -> np.ndarray:
        """Integer seat code per unit, ordered by first appearance of each seat."""
        codes: dict = {}
        out = []
        for u in self.units:
            s = self.meta.seat_of_unit.get(u.unit_id, "_")
            out.append(codes.setdefault(s, len(codes)))
        return np.asarray(out, dtype=np.int64)


def margins(units: Sequence[UnitAggregate]):
    """Stack units into (T, V, n): N x R row shares, N x C column shares, totals."""
    X = np.array([u.x for u in units], dtype=float)
    Y = np.array([u.y for u in units], dtype=float)
    n = X.sum(axis=1)
    if (n <= 0).any():
        bad = [units[k].unit_id for k in np.flatnonzero(n <= 0)]
        raise ValidationError(f"units with zero total: {bad}")
    return X / n[:, None], Y / n[:, None], n


def as_array(pi) -> np.ndarray:
    return np.asarray(pi.pi if isinstance(pi, TransitionMatrix) else pi, dtype=float)
