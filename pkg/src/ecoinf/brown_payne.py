"""Revised Brown-Payne estimator.

Column shares of unit u have mean mu_u = sum_i t_ui pi_ui(theta) and working
covariance

    V_u = c_u / n_u * (diag(mu_u) - mu_u mu_u')
    c_u = 1 + (phi + tau) (n_u - 1) w_u,   w_u = (n_u sum_i t_ui^2 - 1) / (n_u - 1)

c_u is the exact variance inflation of a sum of R independent
Dirichlet-multinomial rows with intra-class correlation phi and common
mean, so phi has the usual Dirichlet meaning.  tau is the extra
within-cluster component; it enters c_u only through phi + tau, so the
two are not separately identified and only one of them is estimated at a
time (phi unless phi is held fixed).

Estimation maximizes the extended quasi-likelihood

    Q = -1/2 sum_u [ (C-1) log c_u + n_u / c_u * D_u ],
    D_u = 2 sum_j v_uj log(v_uj / mu_uj)

whose theta-score is the quasi-score sum_u J_u' V_u^- (v_u - mu_u) for the
covariance above, so a saturated mean model reproduces the observed
shares exactly.  theta is updated by damped Fisher scoring (Levenberg-Marquardt),
and phi (or tau) by a bounded one-dimensional search; Q never decreases.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .core import DatasetMeta, UnitAggregate, ValidationError, margins, proportions
from .king import default_init
from .links import (
    LinkLayout,
    LinkParams,
    backprop_mean,
    check_covariates,
    destandardize,
    mean_shares,
    restandardize,
    standardize,
    unit_probabilities,
)

MAXITER = 500
RTOL = 1e-10
GTOL = 1e-8
KAPPA_MAX = 1.0 - 1e-6
DIVERGE = 30.0  # standardized-scale coefficient size taken as divergence


@dataclass
class BPVarianceSpec:
    phi: float = 0.0
    tau: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.phi < 1.0:
            raise ValidationError(f"phi must lie in [0, 1), got {self.phi}")
        if self.tau < 0.0:
            raise ValidationError(f"tau must be >= 0, got {self.tau}")

    @property
    def kappa(self) -> float:
        return self.phi + self.tau


@dataclass
class BPFit:
    params: LinkParams
    variance: BPVarianceSpec
    pi_hat: np.ndarray
    se: LinkParams
    converged: bool
    iterations: int
    loglik: float
    history: list = field(default_factory=list, repr=False)
    notes: list = field(default_factory=list)

    @property
    def method(self) -> str:
        return "brown-payne"

    def diagnostics(self) -> dict:
        return {
            "phi": self.variance.phi,
            "tau": self.variance.tau,
            "quasi_loglik": self.loglik,
            "converged": self.converged,
            "iterations": self.iterations,
            "params": self.params.to_dict(),
            "se_params": self.se.to_dict(),
            "notes": list(self.notes),
        }


def mixing_weight(t: np.ndarray, n) -> np.ndarray:
    """w_u; equals 1 when the unit has a single row category (t = e_i)."""
    t = np.atleast_2d(t)
    n = np.atleast_1d(np.asarray(n, dtype=float))
    s2 = (t**2).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(n > 1, (n * s2 - 1.0) / np.where(n > 1, n - 1.0, 1.0), 0.0)
    return w


def inflation(kappa: float, t, n) -> np.ndarray:
    n = np.atleast_1d(np.asarray(n, dtype=float))
    return 1.0 + kappa * (n - 1.0) * mixing_weight(t, n)


def bp_mean(theta: LinkParams, unit: UnitAggregate, z=None) -> np.ndarray:
    """Expected column shares of one unit."""
    pr = proportions(unit)
    Z = None if z is None or theta.q == 0 else np.asarray(z, dtype=float)[None, :]
    P = unit_probabilities(theta, Z, 1)
    return mean_shares(P, pr.t[None, :])[0]


def bp_covariance(theta: LinkParams, variance: BPVarianceSpec, unit: UnitAggregate, z=None,
                  diagnostics: Optional[dict] = None) -> np.ndarray:
    """Working covariance of the column shares of one unit (C x C, singular)."""
    if unit.n <= 0:
        raise ValidationError(f"unit {unit.unit_id}: zero total")
    mu = bp_mean(theta, unit, z)
    t = proportions(unit).t
    c = inflation(variance.kappa, t, unit.n)[0]
    V = (np.diag(mu) - np.outer(mu, mu)) * c / unit.n
    V = 0.5 * (V + V.T)
    if np.linalg.eigvalsh(V).min() < -1e-12:
        V = V + 1e-10 * np.eye(len(mu))
        if diagnostics is not None:
            diagnostics["jitter"] = diagnostics.get("jitter", 0) + 1
    return V


class _Problem:
    def __init__(self, T, V, n, Z, layout):
        self.T, self.V, self.n, self.Z, self.layout = T, V, n, Z, layout

    def loglik(self, theta, kappa):
        P = unit_probabilities(self.layout.unpack(theta), self.Z, len(self.n))
        mu = np.clip(mean_shares(P, self.T), 1e-300, None)
        return self._ll(mu, kappa), P, mu

    def _ll(self, mu, kappa):
        c = inflation(kappa, self.T, self.n)
        C = mu.shape[1]
        Vp = self.V
        with np.errstate(divide="ignore", invalid="ignore"):
            dev = 2.0 * np.where(Vp > 0, Vp * np.log(Vp / mu), 0.0).sum(axis=1)
        return -0.5 * float(((C - 1) * np.log(c) + self.n / c * dev).sum())

    def grad(self, P, mu, kappa):
        c = inflation(kappa, self.T, self.n)
        G = (self.n / c)[:, None] * self.V / mu
        gg, gd, _ = backprop_mean(G, P, self.T, self.Z)
        return self.layout.pack_grad(gg, gd)

    def jacobian(self, P):
        """d mu_uj / d theta as N x C x p."""
        T, Z, lay = self.T, self.Z, self.layout
        N, R, C = P.shape
        eye = np.eye(C)[:, : C - 1]
        # dmu_uj/deta_uik
        D = T[:, :, None, None] * P[:, :, :, None] * (eye[None, None] - P[:, :, None, : C - 1])
        Jg = D.transpose(0, 2, 1, 3).reshape(N, C, R * (C - 1))
        if lay.q:
            Jd = np.einsum("ujik,ul->ujikl", D.transpose(0, 2, 1, 3), Z)
            Jd = Jd[:, :, lay.delta_mask]
            return np.concatenate([Jg, Jd], axis=2)
        return Jg

    def weights(self, mu, kappa):
        c = inflation(kappa, self.T, self.n)
        return (self.n / c)[:, None] / mu

    def bread_meat(self, theta, kappa):
        _, P, mu = self.loglik(theta, kappa)
        J = self.jacobian(P)
        W = self.weights(mu, kappa)
        WJ = W[:, :, None] * J
        bread = np.einsum("ujp,ujq->pq", J, WJ)
        s = np.einsum("ujp,uj->up", WJ, self.V - mu)
        meat = s.T @ s
        return bread, meat


def fit_brown_payne(
    units: Sequence[UnitAggregate],
    meta: Optional[DatasetMeta] = None,
    covariates: Optional[np.ndarray] = None,
    fix_phi: Optional[float] = None,
    fix_tau: Optional[float] = None,
    init: Optional[LinkParams] = None,
    row_mask=None,
    maxiter: int = MAXITER,
) -> BPFit:
    """Maximum quasi-likelihood fit, alternating scoring steps and overdispersion updates."""
    T, V, n = margins(units)
    N, R = T.shape
    C = V.shape[1]
    Z = check_covariates(covariates, N)
    q = 0 if Z is None else Z.shape[1]
    layout = LinkLayout(R, C, q, row_mask)
    if N * (C - 1) < layout.size:
        raise ValidationError(f"{N * (C - 1)} observations cannot identify {layout.size} parameters")
    Zs, zm, zs = standardize(Z)
    prob = _Problem(T, V, n, Zs, layout)
    if init is None:
        init = default_init(units, q)
    theta = layout.pack(restandardize(init, zm, zs))

    tau = 0.0 if fix_tau is None else float(fix_tau)
    phi = 0.0 if fix_phi is None else float(fix_phi)
    BPVarianceSpec(phi, tau)
    # which component absorbs the estimated overdispersion
    free = "phi" if fix_phi is None else ("tau" if fix_tau is None else None)
    notes = []

    def kappa_of(val):
        return (val + tau) if free == "phi" else (phi + val) if free == "tau" else phi + tau

    cur = {"phi": phi, "tau": tau}
    kappa = cur["phi"] + cur["tau"]
    ll, P, mu = prob.loglik(theta, kappa)
    history = [ll]
    scale = 1.0 / n.sum()
    converged = False
    damping = 1e-3
    it = 0
    for it in range(1, maxiter + 1):
        ll_old = ll
        # scoring step for theta, Levenberg-Marquardt damped; the damping
        # floor keeps saturated directions (pi -> 0 or 1) from stalling it
        g = prob.grad(P, mu, kappa)
        J = prob.jacobian(P)
        W = prob.weights(mu, kappa)
        info = np.einsum("ujp,uj,ujq->pq", J, W, J)
        dg = np.diag(info)
        D = np.maximum(dg, 1e-6 * dg.max())
        stalled = True
        while damping <= 1e12:
            try:
                step = np.linalg.solve(info + damping * np.diag(D), g)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            ll_c, P_c, mu_c = prob.loglik(theta + step, kappa)
            if np.isfinite(ll_c) and ll_c >= ll:
                theta, ll, P, mu = theta + step, ll_c, P_c, mu_c
                damping = max(damping / 10.0, 1e-12)
                stalled = False
                break
            damping *= 10.0
        damping = min(damping, 1e6)
        # overdispersion update
        if free is not None:
            other = tau if free == "phi" else phi
            upper = KAPPA_MAX - other if free == "phi" else 1e6
            res = minimize_scalar(
                lambda v: -prob._ll(mu, kappa_of(v)),
                bounds=(0.0, max(upper, 0.0)),
                method="bounded",
                options={"xatol": 1e-12},
            )
            if -res.fun > ll:
                cur[free] = float(res.x)
                kappa = cur["phi"] + cur["tau"]
                ll = -res.fun
        history.append(ll)
        gnorm = np.abs(prob.grad(P, mu, kappa)).max() * scale
        # a small change only signals convergence after a near-Newton step
        small = abs(ll - ll_old) <= RTOL * max(abs(ll_old), 1.0) and damping <= 1e-2
        if small or gnorm < GTOL:
            converged = True
            break
        if stalled and free is None:
            notes.append("no ascent step found")
            break
    if free == "phi" and cur["phi"] < 1e-8:
        notes.append("phi at boundary 0")
    if not converged and np.abs(theta).max() > DIVERGE:
        # the quasi-likelihood keeps rising along a ridge to infinity
        notes.append("coefficients diverging; the maximum is on the boundary")

    bread, meat = prob.bread_meat(theta, kappa)
    binv = np.linalg.pinv(bread)
    cov = binv @ meat @ binv
    # map to raw covariate scale: theta_raw = M theta_std (linear)
    M = np.column_stack([
        layout.pack(destandardize(layout.unpack(e), zm, zs)) for e in np.eye(layout.size)
    ])
    cov_raw = M @ cov @ M.T
    se_vec = np.sqrt(np.clip(np.diag(cov_raw), 0.0, None))

    params = destandardize(layout.unpack(theta), zm, zs)
    Pr = unit_probabilities(params, Z, N)
    return BPFit(
        params=params,
        variance=BPVarianceSpec(cur["phi"], cur["tau"]),
        pi_hat=Pr.mean(axis=0),
        se=layout.unpack(se_vec),
        converged=converged,
        iterations=it,
        loglik=float(ll),
        history=history,
        notes=notes,
    )


def bp_predict_cells(fit: BPFit, units: Sequence[UnitAggregate], covariates=None) -> np.ndarray:
    """Expected joint counts x_ui * pi_uij, N x R x C."""
    X = np.array([u.x for u in units], dtype=float)
    Z = check_covariates(covariates, len(units)) if fit.params.q else None
    P = unit_probabilities(fit.params, Z, len(units))
    return X[:, :, None] * P
