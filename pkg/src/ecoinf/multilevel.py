"""Individual-data baselines: pooled proportions and multilevel logistic models.

Binomial cells (voters out of eligible, per row category and station) with
random intercepts for stations nested in seats:

    logit p_o = x_o' beta + a_seat(o) + b_station(o)
    b ~ N(0, sigma_station^2),  a ~ N(0, sigma_seat^2)

The station integral is computed by adaptive Gauss-Hermite quadrature and
the seat integral by a Laplace approximation around the seat mode.  Modes
are found by Newton iterations under ``stop_gradient`` followed by a few
differentiable Newton steps, so jax gradients are derivatives of the
computed approximation (implicit-function theorem at the mode).

With ``per_group_sigmas`` every row category gets its own pair of SDs and
independent random intercepts (diagonal covariance across groups).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import jax
import jax.numpy as jnp
import numpy as np
from scipy import stats
from scipy.optimize import minimize
from scipy.special import expit, gammaln

from .core import DatasetMeta, IndividualTable, TransitionMatrix, ValidationError

jax.config.update("jax_enable_x64", True)

LOG_SIGMA_BOUNDS = (np.log(1e-4), np.log(5.0))
INNER_NEWTON = 50
OUTER_NEWTON = 50
DIFF_STEPS = 3


@dataclass(frozen=True)
class CellObservation:
    unit_id: str
    seat_id: str
    group: int
    trials: int
    successes: int

    def __post_init__(self):
        if not 0 <= self.successes <= self.trials:
            raise ValidationError(
                f"unit {self.unit_id} group {self.group}: successes {self.successes} "
                f"outside [0, {self.trials}]"
            )


def raw_estimates(tables: Sequence[IndividualTable]) -> np.ndarray:
    """Pooled proportions sum_u n_uij / sum_u x_ui; undefined rows are NaN."""
    if not tables:
        raise ValidationError("need at least one table")
    tot = np.sum([t.counts for t in tables], axis=0).astype(float)
    rt = tot.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(rt > 0, tot / rt, np.nan)


def cell_observations(tables, meta: DatasetMeta, success_col: int = -1) -> list:
    if meta.C != 2:
        raise ValidationError("multilevel models need a binary outcome (C = 2)")
    out = []
    for tab in tables:
        seat = meta.seat_of_unit.get(tab.unit_id, "_")
        rows = tab.counts.sum(axis=1)
        for g in range(meta.R):
            out.append(CellObservation(tab.unit_id, seat, g, int(rows[g]), int(tab.counts[g, success_col])))
    return out


@dataclass
class _Arrays:
    station_ids: list
    seat_ids: list
    station: np.ndarray  # obs -> station index
    seat_of_station: np.ndarray
    group: np.ndarray
    x: np.ndarray
    y: np.ndarray


def _arrays(obs: Sequence[CellObservation]) -> _Arrays:
    st_codes: dict = {}
    seat_codes: dict = {}
    seat_of = {}
    station, group, x, y = [], [], [], []
    for o in obs:
        s = st_codes.setdefault(o.unit_id, len(st_codes))
        seat_of[s] = seat_codes.setdefault(o.seat_id, len(seat_codes))
        station.append(s)
        group.append(o.group)
        x.append(o.trials)
        y.append(o.successes)
    sos = np.array([seat_of[k] for k in range(len(st_codes))], dtype=np.int64)
    return _Arrays(
        list(st_codes), list(seat_codes), np.array(station), sos,
        np.array(group), np.array(x, dtype=float), np.array(y, dtype=float),
    )


@dataclass
class _Design:
    X: np.ndarray
    names: list
    n_int: int
    ones_combo: np.ndarray
    zmean: Optional[np.ndarray]
    zsd: Optional[np.ndarray]
    groups: tuple
    contrast: bool


def _design(arr: _Arrays, Z: Optional[np.ndarray], groups: Sequence[int], contrast: bool,
            group_names=None, cov_names=None) -> _Design:
    groups = tuple(groups)
    gname = (lambda g: group_names[g]) if group_names else (lambda g: f"g{g}")
    cols, names = [], []
    if contrast:
        cols.append(np.ones(len(arr.group)))
        names.append(gname(groups[0]))
        for g in groups[1:]:
            cols.append((arr.group == g).astype(float))
            names.append(f"{gname(g)}-{gname(groups[0])}")
        combo = np.zeros(len(groups))
        combo[0] = 1.0
    else:
        for g in groups:
            cols.append((arr.group == g).astype(float))
            names.append(gname(g))
        combo = np.ones(len(groups))
    zm = zs = None
    if Z is not None and Z.shape[1]:
        zm = Z.mean(axis=0)
        zs = Z.std(axis=0)
        zs = np.where(zs > 0, zs, 1.0)
        Zs = (Z - zm) / zs
        for k in range(Z.shape[1]):
            cols.append(Zs[arr.station, k])
            names.append(cov_names[k] if cov_names else f"z{k + 1}")
    X = np.column_stack(cols)
    return _Design(X, names, len(groups), combo, zm, zs, groups, contrast)


def _to_raw(d: _Design, beta: np.ndarray, cov: Optional[np.ndarray] = None):
    """Linear map from standardized-covariate coefficients to raw-scale ones."""
    p = len(beta)
    M = np.eye(p)
    if d.zmean is not None:
        q = len(d.zmean)
        M[d.n_int:, d.n_int:] = np.diag(1.0 / d.zsd)
        M[: d.n_int, d.n_int:] = -np.outer(d.ones_combo, d.zmean / d.zsd)
    b = M @ beta
    return b, (None if cov is None else M @ cov @ M.T)


def _segsum(v, idx, n):
    return jax.ops.segment_sum(v, idx, num_segments=n)


@lru_cache(maxsize=32)
def _build(n_st: int, n_seat: int, K: int, levels: int, st_zero: bool, seat_zero: bool):
    """Jitted marginal log-likelihood for a given problem shape."""
    z, w = np.polynomial.hermite.hermgauss(K)
    z = jnp.asarray(z)
    logw = jnp.asarray(np.log(w))

    def station_logl(eta, y, x, st, a_st, sig_st):
        # a_st: offset per station (its seat effect); sig_st: SD per station
        lin = eta + a_st[st]
        if st_zero:
            ll = y * lin - x * jnp.logaddexp(0.0, lin)
            return _segsum(ll, st, n_st)
        s2 = sig_st**2

        def newton(b):
            p = jax.nn.sigmoid(lin + b[st])
            g = _segsum(y - x * p, st, n_st) - b / s2
            H = _segsum(x * p * (1 - p), st, n_st) + 1.0 / s2
            return b, g, H

        def body(c):
            b, _, k = c
            _, g, H = newton(b)
            step = jnp.clip(g / H, -1.0, 1.0)
            return b + step, jnp.abs(step).max(), k + 1

        def cond(c):
            return (c[1] > 1e-11) & (c[2] < INNER_NEWTON)

        b0 = jax.lax.stop_gradient(
            jax.lax.while_loop(cond, body, (jnp.zeros(n_st), jnp.inf, 0))[0]
        )
        # unrolled steps make the mode's higher derivatives (needed by the
        # Laplace curvature term) exact as well
        def polish(_, b):
            _, g, H = newton(b)
            return b + g / H

        bhat = jax.lax.fori_loop(0, DIFF_STEPS, polish, b0)
        p = jax.nn.sigmoid(lin + bhat[st])
        H = _segsum(x * p * (1 - p), st, n_st) + 1.0 / s2
        sc = jnp.sqrt(2.0 / H)
        nodes = bhat[None, :] + sc[None, :] * z[:, None]  # K x n_st
        linK = lin[None, :] + nodes[:, st]
        llK = _segsum((y * linK - x * jnp.logaddexp(0.0, linK)).T, st, n_st).T
        prior = -0.5 * nodes**2 / s2 - 0.5 * jnp.log(2 * jnp.pi * s2)
        terms = logw[:, None] + z[:, None] ** 2 + llK + prior
        return jax.scipy.special.logsumexp(terms, axis=0) + jnp.log(sc)

    def total(eta, y, x, st, sos, sig_st_of_station, sig_seat_of_seat):
        if levels == 2 or seat_zero:
            return station_logl(eta, y, x, st, jnp.zeros(n_st), sig_st_of_station).sum()

        s2 = sig_seat_of_seat**2

        def g_of(a):
            lst = station_logl(eta, y, x, st, a[sos], sig_st_of_station)
            return _segsum(lst, sos, n_seat) - 0.5 * a**2 / s2 - 0.5 * jnp.log(2 * jnp.pi * s2)

        # seats are separable, so forward mode along ones gives each seat's
        # own first and second derivative
        def d1(a):
            return jax.jvp(g_of, (a,), (jnp.ones_like(a),))[1]

        def derivs(a):
            return jax.jvp(d1, (a,), (jnp.ones_like(a),))

        def body(c):
            a, _, k = c
            g1, g2 = derivs(a)
            step = jnp.clip(-g1 / jnp.minimum(g2, -1e-12), -1.0, 1.0)
            return a + step, jnp.abs(step).max(), k + 1

        def cond(c):
            return (c[1] > 1e-11) & (c[2] < OUTER_NEWTON)

        a0 = jax.lax.stop_gradient(
            jax.lax.while_loop(cond, body, (jnp.zeros(n_seat), jnp.inf, 0))[0]
        )
        def polish(_, a):
            g1, g2 = derivs(a)
            return a - g1 / g2

        ahat = jax.lax.fori_loop(0, DIFF_STEPS, polish, a0)
        _, h2 = derivs(ahat)
        return (g_of(ahat) + 0.5 * jnp.log(2 * jnp.pi) - 0.5 * jnp.log(-h2)).sum()

    def value(beta, log_sig_st, log_sig_seat, X, y, x, st, sos, st_sig_idx, seat_sig_idx):
        eta = X @ beta
        sst = jnp.exp(log_sig_st)[st_sig_idx]
        sse = jnp.exp(log_sig_seat)[seat_sig_idx]
        return total(eta, y, x, st, sos, sst, sse)

    return jax.jit(value), jax.jit(jax.value_and_grad(value, argnums=(0, 1, 2)))


class _Problem:
    """Packs data and parameter layout for one multilevel fit."""

    def __init__(self, arr: _Arrays, design: _Design, levels: int, per_group: bool, K: int):
        if levels not in (2, 3):
            raise ValidationError("levels must be 2 or 3")
        self.arr, self.design, self.levels, self.per_group, self.K = arr, design, levels, per_group, K
        g = arr.group
        if per_group:
            # clusters are (station, group) and (seat, group)
            gl = sorted(set(g.tolist()))
            gpos = {gg: k for k, gg in enumerate(gl)}
            st_keys = {}
            seat_keys = {}
            st = np.empty(len(g), dtype=np.int64)
            sos = []
            st_sig, seat_sig = [], []
            for o in range(len(g)):
                key = (arr.station[o], g[o])
                if key not in st_keys:
                    st_keys[key] = len(st_keys)
                    skey = (arr.seat_of_station[arr.station[o]], g[o])
                    if skey not in seat_keys:
                        seat_keys[skey] = len(seat_keys)
                        seat_sig.append(gpos[g[o]])
                    sos.append(seat_keys[skey])
                    st_sig.append(gpos[g[o]])
                st[o] = st_keys[key]
            self.st = st
            self.sos = np.array(sos)
            self.st_sig_idx = np.array(st_sig)
            self.seat_sig_idx = np.array(seat_sig)
            self.n_sig = len(gl)
            self.sig_groups = gl
        else:
            self.st = arr.station
            self.sos = arr.seat_of_station
            self.st_sig_idx = np.zeros(len(arr.seat_of_station), dtype=np.int64)
            self.seat_sig_idx = np.zeros(int(arr.seat_of_station.max()) + 1, dtype=np.int64)
            self.n_sig = 1
            self.sig_groups = [None]
        self.n_st = len(self.sos)
        self.n_seat = int(self.sos.max()) + 1
        self.p = design.X.shape[1]
        self.const = float((gammaln(arr.x + 1) - gammaln(arr.y + 1) - gammaln(arr.x - arr.y + 1)).sum())
        self._data = tuple(jnp.asarray(a) for a in (design.X, arr.y, arr.x, self.st, self.sos,
                                                      self.st_sig_idx, self.seat_sig_idx))

    @property
    def n_params(self):
        return self.p + self.n_sig * (2 if self.levels == 3 else 1)

    def split(self, theta):
        beta = theta[: self.p]
        ls_st = theta[self.p: self.p + self.n_sig]
        ls_seat = theta[self.p + self.n_sig:] if self.levels == 3 else np.full(self.n_sig, -np.inf)
        return beta, ls_st, ls_seat

    def loglik(self, theta, K=None, exact_zero=True) -> float:
        beta, ls_st, ls_seat = self.split(np.asarray(theta, dtype=float))
        st_zero = exact_zero and bool(np.all(np.exp(ls_st) == 0))
        seat_zero = self.levels == 2 or (exact_zero and bool(np.all(np.exp(ls_seat) == 0)))
        val, _ = _build(self.n_st, self.n_seat, K or self.K, self.levels, st_zero, seat_zero)
        ls_st = np.where(np.isfinite(ls_st), ls_st, 0.0)
        ls_seat = np.where(np.isfinite(ls_seat), ls_seat, 0.0)
        return float(val(jnp.asarray(beta), jnp.asarray(ls_st), jnp.asarray(ls_seat), *self._data)) + self.const

    def value_and_grad(self, theta):
        beta, ls_st, ls_seat = self.split(np.asarray(theta, dtype=float))
        _, vg = _build(self.n_st, self.n_seat, self.K, self.levels, False, self.levels == 2)
        if self.levels == 2:
            ls_seat = np.zeros(self.n_sig)
        v, (gb, gs, gse) = vg(jnp.asarray(beta), jnp.asarray(ls_st), jnp.asarray(ls_seat), *self._data)
        parts = [np.asarray(gb), np.asarray(gs)]
        if self.levels == 3:
            parts.append(np.asarray(gse))
        return float(v) + self.const, np.concatenate(parts)

    def grad(self, theta) -> np.ndarray:
        return self.value_and_grad(theta)[1]


@dataclass
class MLFit:
    beta: np.ndarray
    beta_se: np.ndarray
    names: list
    sigma_station: np.ndarray
    sigma_seat: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    history: list = field(default_factory=list, repr=False)
    notes: list = field(default_factory=list)
    design: Optional[_Design] = field(default=None, repr=False)
    levels: int = 3

    @property
    def method(self) -> str:
        return "multilevel"

    @property
    def pvalues(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            zval = self.beta / self.beta_se
        return 2 * stats.norm.sf(np.abs(zval))

    def coef_table(self) -> list:
        from .diagnostics import significance_code

        return [
            {"name": n, "estimate": float(b), "se": float(s), "p": float(p), "code": significance_code(p)}
            for n, b, s, p in zip(self.names, self.beta, self.beta_se, self.pvalues)
        ]

    def diagnostics(self) -> dict:
        return {
            "coefficients": self.coef_table(),
            "sigma_station": self.sigma_station.tolist(),
            "sigma_seat": self.sigma_seat.tolist(),
            "loglik": self.loglik,
            "converged": self.converged,
            "iterations": self.iterations,
            "notes": list(self.notes),
        }

    def linear_predictor(self, Z: Optional[np.ndarray], group: int) -> np.ndarray:
        """Fixed-part logit for ``group`` at every station row of ``Z`` (random effects at 0)."""
        d = self.design
        if group not in d.groups:
            raise ValidationError(f"group {group} not in this model")
        k = d.groups.index(group)
        if d.contrast:
            icpt = self.beta[0] + (self.beta[k] if k > 0 else 0.0)
        else:
            icpt = self.beta[k]
        slopes = self.beta[d.n_int:]
        n = 1 if Z is None else len(Z)
        eta = np.full(n, icpt)
        if len(slopes):
            eta = eta + np.asarray(Z, dtype=float) @ slopes
        return eta


def _logistic_start(prob: _Problem) -> np.ndarray:
    X, y, x = prob.design.X, prob.arr.y, prob.arr.x
    beta = np.zeros(X.shape[1])
    rate = (y.sum() + 0.5) / (x.sum() + 1.0)
    beta[: prob.design.n_int] = 0.0
    if prob.design.contrast:
        beta[0] = np.log(rate / (1 - rate))
    else:
        beta[: prob.design.n_int] = np.log(rate / (1 - rate))
    for _ in range(50):
        p = expit(X @ beta)
        g = X.T @ (y - x * p)
        H = (X * (x * p * (1 - p))[:, None]).T @ X + 1e-9 * np.eye(len(beta))
        step = np.linalg.solve(H, g)
        beta += step
        if np.abs(step).max() < 1e-12:
            break
    return beta


def _fit(obs, covariates, levels, per_group_sigmas, groups, contrast, K, group_names, cov_names,
         maxiter=200, compute_se=True) -> MLFit:
    if not obs:
        raise ValidationError("no observations")
    arr = _arrays(obs)
    present = sorted(set(arr.group.tolist()))
    groups = list(groups) if groups is not None else present
    if not set(groups) <= set(present):
        raise ValidationError(f"groups {sorted(set(groups) - set(present))} have no observations")
    Z = None
    if covariates is not None:
        Z = np.asarray(covariates, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        if Z.shape[0] != len(arr.station_ids):
            raise ValidationError(f"covariates for {Z.shape[0]} stations, expected {len(arr.station_ids)}")
        if not np.isfinite(Z).all():
            raise ValidationError("covariates must be finite")
    if K < 9:
        raise ValidationError("use at least 9 quadrature nodes")
    design = _design(arr, Z, groups, contrast, group_names, cov_names)
    prob = _Problem(arr, design, levels, per_group_sigmas, K)
    beta0 = _logistic_start(prob)
    theta0 = np.concatenate([beta0, np.full(prob.n_params - prob.p, np.log(0.2))])
    bounds = [(None, None)] * prob.p + [LOG_SIGMA_BOUNDS] * (prob.n_params - prob.p)
    scale = 1.0 / max(arr.x.sum(), 1.0)
    history = []
    last = {}

    def fun(th):
        v, g = prob.value_and_grad(th)
        last[th.tobytes()] = v
        return -v * scale, -g * scale

    def cb(xk):
        v = last.get(xk.tobytes())
        history.append(v if v is not None else prob.loglik(xk, exact_zero=False))
        last.clear()

    history.append(prob.loglik(theta0, exact_zero=False))
    res = minimize(fun, theta0, jac=True, method="L-BFGS-B", bounds=bounds, callback=cb,
                   options={"maxiter": maxiter, "ftol": 1e-12, "gtol": 1e-7 * scale})
    theta = res.x
    notes = []
    # observed information by central differences of the exact gradient
    p = prob.n_params
    Hm = np.zeros((p, p))
    for k in range(p if compute_se else 0):
        h = 1e-5 * max(1.0, abs(theta[k]))
        e = np.zeros(p)
        e[k] = h
        Hm[:, k] = (prob.grad(theta + e) - prob.grad(theta - e)) / (2 * h)
    Hm = 0.5 * (Hm + Hm.T)
    beta_std = theta[: prob.p]
    try:
        covb = np.linalg.inv(-Hm)[: prob.p, : prob.p] if compute_se else np.full((prob.p, prob.p), np.nan)
    except np.linalg.LinAlgError:
        covb = np.full((prob.p, prob.p), np.nan)
        notes.append("singular information matrix")
    beta, covb = _to_raw(design, beta_std, covb)
    _, ls_st, ls_seat = prob.split(theta)
    sig_st = np.exp(ls_st)
    sig_seat = np.exp(ls_seat) if levels == 3 else np.zeros(prob.n_sig)
    lo = np.exp(LOG_SIGMA_BOUNDS[0]) * 1.0001
    if (sig_st <= lo).any() or (levels == 3 and (sig_seat <= lo).any()):
        notes.append("random-effect SD at boundary 0")
    fit = MLFit(
        beta=beta,
        beta_se=np.sqrt(np.clip(np.diag(covb), 0, None)),
        names=design.names,
        sigma_station=sig_st,
        sigma_seat=sig_seat,
        loglik=float(-res.fun / scale),
        converged=bool(res.success),
        iterations=int(res.nit),
        history=history,
        notes=notes,
        design=design,
        levels=levels,
    )
    fit._problem = prob
    fit._theta = theta
    return fit


def fit_multilevel(obs: Sequence[CellObservation], covariates=None, levels: int = 3,
                   per_group_sigmas: bool = False, K: int = 9, group_names=None,
                   cov_names=None, maxiter: int = 200, compute_se: bool = True) -> MLFit:
    """Random-intercept logistic model with one intercept per group and shared slopes.

    ``covariates`` is a stations x q array ordered by first appearance of
    each station in ``obs``.
    """
    return _fit(obs, covariates, levels, per_group_sigmas, None, False, K, group_names,
                cov_names, maxiter, compute_se)


def fit_per_group(obs: Sequence[CellObservation], covariates, groups: Sequence[int], levels: int = 3,
                  K: int = 9, group_names=None, cov_names=None, maxiter: int = 200,
                  compute_se: bool = True) -> MLFit:
    """Separate model for one set of cells (e.g. the male and female rows of an age group).

    The first entry of ``groups`` is the baseline intercept; the others enter
    as contrasts (e.g. M - F).
    """
    groups = list(np.atleast_1d(groups))
    if not groups:
        raise ValidationError("empty group")
    sel = [o for o in obs if o.group in set(groups)]
    if not sel:
        raise ValidationError(f"group {groups} has no observations")
    return _fit(sel, covariates, levels, False, groups, True, K, group_names, cov_names, maxiter,
                compute_se)


def averaged_probabilities(fits, covariates, R: Optional[int] = None, n_stations: Optional[int] = None):
    """Station-averaged fixed-part probabilities per group, as an R x 2 matrix.

    ``fits`` is one MLFit or a list of per-group fits covering all groups.
    """
    fits = fits if isinstance(fits, (list, tuple)) else [fits]
    groups = sorted({g for f in fits for g in f.design.groups})
    R = R or (max(groups) + 1)
    Z = None if covariates is None else np.atleast_2d(np.asarray(covariates, dtype=float))
    if Z is not None and Z.shape[0] == 1 and n_stations:
        Z = np.repeat(Z, n_stations, axis=0)
    p = np.full(R, np.nan)
    for f in fits:
        Zf = Z if len(f.beta) > f.design.n_int else None
        for g in f.design.groups:
            eta = f.linear_predictor(Zf, g)
            p[g] = expit(eta).mean()
    if np.isnan(p).any():
        raise ValidationError(f"no model for groups {np.flatnonzero(np.isnan(p)).tolist()}")
    return TransitionMatrix(np.column_stack([1 - p, p])).pi


def predict_cells(fits, X_counts: np.ndarray, covariates) -> np.ndarray:
    """Expected successes x_ui * p_ui (random effects at 0), N x R."""
    fits = fits if isinstance(fits, (list, tuple)) else [fits]
    X_counts = np.asarray(X_counts, dtype=float)
    N, R = X_counts.shape
    Z = None if covariates is None else np.asarray(covariates, dtype=float).reshape(N, -1)
    out = np.full((N, R), np.nan)
    for f in fits:
        Zf = Z if len(f.beta) > f.design.n_int else None
        for g in f.design.groups:
            out[:, g] = X_counts[:, g] * expit(f.linear_predictor(Zf, g) * np.ones(N))
    return out


def glm_loglik(obs: Sequence[CellObservation], eta: np.ndarray) -> float:
    """Ordinary binomial log-likelihood at linear predictor ``eta``."""
    arr = _arrays(obs)
    x, y = arr.x, arr.y
    const = gammaln(x + 1) - gammaln(y + 1) - gammaln(x - y + 1)
    return float((const + y * eta - x * np.logaddexp(0.0, eta)).sum())
