"""Synthetic populations with known transition structure.

Cell logits for unit u in seat s:

    eta_uij = log(pi0_ij / pi0_iC) + sum_k B_ijk (t_uk - 1/R) + slopes_ij . (z_u - zbar) + a_s + b_u

for j < C (the last column is the reference), and n_ui. ~ Multinomial(x_ui, softmax(eta_ui.)).
B = 0 gives within-row propensities that do not depend on the row shares.
Covariates are centred at their configured means (zbar), so pi0 remains the
propensity of a unit with average covariates.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .core import Dataset, DatasetMeta, IndividualTable, UnitAggregate, ValidationError, aggregate

AGE_GROUPS = ("18-25", "25-30", "30-45", "45-65", "65-75", "over 75")
PALERMO_ROWS = tuple(f"M {a}" for a in AGE_GROUPS) + tuple(f"F {a}" for a in AGE_GROUPS)

# eligible voters and voters by sex and age, Palermo 2012
PALERMO_ELIGIBLE = np.array(
    [
        [32417, 22015, 70091, 89798, 29725, 21586],
        [30490, 21109, 73397, 99564, 36201, 38012],
    ]
)
PALERMO_VOTERS = np.array(
    [
        [1434, 986, 3351, 6179, 1945, 745],
        [1327, 986, 3268, 6438, 1545, 592],
    ]
)
PALERMO_VOTE_SHARE = np.array(
    [
        [0.0442, 0.0448, 0.0478, 0.0688, 0.0654, 0.0345],
        [0.0435, 0.0467, 0.0445, 0.0647, 0.0427, 0.0156],
    ]
)


@dataclass
class GeneratorConfig:
    N: int
    pi0: np.ndarray
    S: int = 1
    concentration: Optional[np.ndarray] = None
    size_mean: float = 950.0
    size_sd: Optional[float] = None
    bias: Optional[np.ndarray] = None
    cov_means: tuple = ()
    cov_concentration: float = 200.0
    cov_slopes: Optional[np.ndarray] = None
    cov_names: tuple = ()
    sigma_station: float = 0.0
    sigma_seat: float = 0.0
    per_group_effects: bool = False
    seed: int = 0
    row_labels: tuple = ()
    col_labels: tuple = ()

    def __post_init__(self):
        self.pi0 = np.asarray(self.pi0, dtype=float)
        R, C = self.pi0.shape
        if self.concentration is None:
            self.concentration = np.full(R, 2.0)
        self.concentration = np.asarray(self.concentration, dtype=float)
        if self.bias is None:
            self.bias = np.zeros((R, C - 1, R))
        self.bias = np.asarray(self.bias, dtype=float)
        q = len(self.cov_means)
        if self.cov_slopes is None:
            self.cov_slopes = np.zeros((R, C - 1, q))
        self.cov_slopes = np.asarray(self.cov_slopes, dtype=float)
        if q and not self.cov_names:
            self.cov_names = tuple(f"z{k + 1}" for k in range(q))
        self.cov_means = tuple(float(m) for m in self.cov_means)
        self.cov_names = tuple(self.cov_names)
        self.row_labels = tuple(self.row_labels)
        self.col_labels = tuple(self.col_labels)
        self.validate()

    @property
    def R(self):
        return self.pi0.shape[0]

    @property
    def C(self):
        return self.pi0.shape[1]

    def validate(self):
        R, C = self.pi0.shape
        if self.N < 1 or self.S < 1 or self.S > self.N:
            raise ValidationError("need 1 <= S <= N")
        if (self.pi0 <= 0).any() or not np.allclose(self.pi0.sum(axis=1), 1.0):
            raise ValidationError("pi0 must be strictly positive and row-stochastic")
        if self.concentration.shape != (R,) or (self.concentration <= 0).any():
            raise ValidationError("concentration must be R positive values")
        if self.size_mean < 1 or (self.size_sd is not None and self.size_sd < 0):
            raise ValidationError("unit sizes must be >= 1")
        if self.bias.shape != (R, C - 1, R):
            raise ValidationError("bias must be R x (C-1) x R")
        if self.cov_slopes.shape != (R, C - 1, len(self.cov_means)):
            raise ValidationError("cov_slopes must be R x (C-1) x q")
        if any(not 0 < m < 1 for m in self.cov_means) or self.cov_concentration <= 0:
            raise ValidationError("covariate means must lie in (0, 1)")
        if self.sigma_station < 0 or self.sigma_seat < 0:
            raise ValidationError("random-effect SDs must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, np.ndarray):
                d[k] = v.tolist()
            elif isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        for k in ("cov_means", "cov_names", "row_labels", "col_labels"):
            if k in d and d[k] is not None:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class SyntheticPopulation:
    meta: DatasetMeta
    units: list
    tables: list
    covariates: Optional[np.ndarray]
    truth: dict = field(default_factory=dict)
    covariate_names: tuple = ()

    def dataset(self) -> Dataset:
        return Dataset(
            self.meta, self.units, self.tables, self.covariates, self.covariate_names
        )

    def true_pi_bar(self) -> np.ndarray:
        """Unit-averaged true propensities, the estimand of the unit-averaged estimators."""
        return np.asarray(self.truth["pi_units"]).mean(axis=0)

    def pooled_pi(self) -> np.ndarray:
        tot = np.sum([t.counts for t in self.tables], axis=0).astype(float)
        return tot / tot.sum(axis=1, keepdims=True)


def _seat_of(k: int, N: int, S: int) -> int:
    return k * S // N


def generate(config: GeneratorConfig) -> SyntheticPopulation:
    config.validate()
    R, C, N, S = config.R, config.C, config.N, config.S
    q = len(config.cov_means)
    root = np.random.SeedSequence(config.seed)
    seat_ss, *unit_ss = root.spawn(N + 1)
    seat_rng = np.random.Generator(np.random.Philox(seat_ss))
    n_eff = C - 1 if config.per_group_effects else 1
    shape = (S, R, n_eff) if config.per_group_effects else (S, 1, 1)
    seat_eff = seat_rng.normal(0.0, 1.0, size=shape) * config.sigma_seat

    base = np.log(config.pi0[:, :-1]) - np.log(config.pi0[:, -1:])
    a_m = np.asarray(config.cov_means)
    units, tables, Z, P, stat_eff = [], [], [], [], []
    for k in range(N):
        rng = np.random.Generator(np.random.Philox(unit_ss[k]))
        if config.size_sd is None:
            n = rng.poisson(config.size_mean)
        else:
            # gamma-Poisson with the requested mean and SD
            var = max(config.size_sd**2, config.size_mean + 1e-9)
            shape_k = config.size_mean**2 / (var - config.size_mean)
            n = rng.poisson(rng.gamma(shape_k, config.size_mean / shape_k))
        n = max(int(n), 1)
        t_draw = rng.dirichlet(config.concentration)
        x = rng.multinomial(n, t_draw)
        t = x / n
        z = rng.beta(a_m * config.cov_concentration, (1 - a_m) * config.cov_concentration) if q else np.zeros(0)
        b = rng.normal(0.0, 1.0, size=(R, n_eff) if config.per_group_effects else (1, 1))
        b = b * config.sigma_station
        s = _seat_of(k, N, S)
        eta = (
            base
            + np.einsum("ijk,k->ij", config.bias, t - 1.0 / R)
            + (np.einsum("ijk,k->ij", config.cov_slopes, z - a_m) if q else 0.0)
            + seat_eff[s]
            + b
        )
        full = np.concatenate([eta, np.zeros((R, 1))], axis=1)
        full -= full.max(axis=1, keepdims=True)
        p = np.exp(full)
        p /= p.sum(axis=1, keepdims=True)
        counts = np.array([rng.multinomial(x[i], p[i]) for i in range(R)])
        uid = f"u{k + 1:04d}"
        tab = IndividualTable(uid, counts)
        tables.append(tab)
        units.append(aggregate(tab))
        Z.append(z)
        P.append(p)
        stat_eff.append(b)

    row_labels = config.row_labels or tuple(f"x{i + 1}" for i in range(R))
    col_labels = config.col_labels or tuple(f"y{j + 1}" for j in range(C))
    meta = DatasetMeta(
        R, C, row_labels, col_labels, N,
        {u.unit_id: f"s{_seat_of(k, N, S) + 1:03d}" for k, u in enumerate(units)},
    )
    truth = {
        "pi0": config.pi0,
        "pi_units": np.array(P),
        "sigma_station": config.sigma_station,
        "sigma_seat": config.sigma_seat,
        "bias": config.bias,
        "cov_slopes": config.cov_slopes,
        "seat_effects": seat_eff,
        "station_effects": np.array(stat_eff),
    }
    return SyntheticPopulation(
        meta, units, tables, np.array(Z) if q else None, truth, config.cov_names
    )


TABLE1 = np.array(
    [
        [[0.25, 0.55], [0.05, 0.15]],
        [[0.30, 0.10], [0.30, 0.30]],
    ]
)


def table1_fixture(scale: int = 20) -> SyntheticPopulation:
    """Two stations, rows (F, M), columns (No, Yes), with the paradox joint shares."""
    if int(scale) != scale or scale < 20 or scale % 20:
        raise ValidationError(f"scale {scale} does not give integer counts; use a multiple of 20")
    counts = np.rint(TABLE1 * scale).astype(np.int64)
    tables = [IndividualTable(f"station{k + 1}", counts[k]) for k in range(2)]
    units = [aggregate(t) for t in tables]
    meta = DatasetMeta(2, 2, ("F", "M"), ("No", "Yes"), 2, {"station1": "seat1", "station2": "seat1"})
    p = TABLE1 / TABLE1.sum(axis=2, keepdims=True)
    return SyntheticPopulation(meta, units, tables, None, {"pi_units": p})


def palermo_pi0() -> np.ndarray:
    p = PALERMO_VOTE_SHARE.ravel()
    return np.column_stack([1 - p, p])


def palermo_like_config(seed: int = 0, **overrides) -> GeneratorConfig:
    """Palermo-scale configuration: 593 stations in 31 seats, weak association, strong bias.

    Rows are sex x age (males first), columns (non voter, voter).  Row shares
    vary around the city-wide eligible-voter shares; voting propensity rises
    with the local share of 45-75 year olds and falls with the 25-45 share.
    Covariates are ``pd`` and ``idv`` party shares.
    """
    shares = PALERMO_ELIGIBLE.ravel() / PALERMO_ELIGIBLE.sum()
    R = 12
    bias = np.zeros((R, 1, R))
    age_of = np.tile(np.arange(6), 2)
    older = np.flatnonzero((age_of == 3) | (age_of == 4))
    younger = np.flatnonzero((age_of == 1) | (age_of == 2))
    # effects differ in sign across groups so they partly cancel in aggregate
    for i in range(R):
        sign = 1.0 if age_of[i] in (3, 4, 5) else -0.5
        bias[i, 0, older] = 14.0 * sign
        bias[i, 0, younger] = -8.0 * sign
    cov_slopes = np.zeros((R, 1, 2))
    pd_slope = np.array([13.1, 14.8, 8.8, 12.4, 8.0, 7.1])
    idv_slope = np.array([4.6, 0.0, 4.3, 5.2, 4.0, 10.4])
    cov_slopes[:, 0, 0] = np.tile(pd_slope, 2)
    cov_slopes[:, 0, 1] = np.tile(idv_slope, 2)
    pi0 = palermo_pi0()
    means = (0.038, 0.051)
    kw = dict(
        N=593,
        S=31,
        pi0=pi0,
        concentration=shares * 150.0,
        size_mean=564405 / 593,
        size_sd=250.0,
        bias=bias,
        cov_means=means,
        cov_concentration=150.0,
        cov_slopes=cov_slopes,
        cov_names=("pd", "idv"),
        sigma_station=0.2311,
        sigma_seat=0.2547,
        seed=seed,
        row_labels=PALERMO_ROWS,
        col_labels=("non voter", "voter"),
    )
    kw.update(overrides)
    return GeneratorConfig(**kw)
