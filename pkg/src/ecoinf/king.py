"""Least-squares variant of King's model.

Nonlinear least squares on the accounting identity with transition
probabilities on the multinomial-logit scale, so every estimate lies in
(0, 1) without truncation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .core import DatasetMeta, UnitAggregate, ValidationError, margins
from .goodman import fit_goodman
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
FTOL = 1e-10
GTOL = 1e-8


@dataclass
class KingFit:
    params: LinkParams
    pi_hat: np.ndarray
    objective: float
    converged: bool
    iterations: int
    history: list = field(default_factory=list, repr=False)
    weighted: bool = False

    @property
    def method(self) -> str:
        return "king-ols"

    def diagnostics(self) -> dict:
        return {
            "objective": self.objective,
            "converged": self.converged,
            "iterations": self.iterations,
            "weighted": self.weighted,
            "params": self.params.to_dict(),
        }


def _objective_and_grad(theta, layout, T, V, Z, w):
    p = layout.unpack(theta)
    P = unit_probabilities(p, Z, T.shape[0])
    mu = mean_shares(P, T)
    r = V - mu
    r[:, -1] = 0.0
    f = float((w[:, None] * r**2).sum())
    G = -2.0 * w[:, None] * r
    gg, gd, _ = backprop_mean(G, P, T, Z)
    return f, layout.pack_grad(gg, gd)


def king_objective(theta: LinkParams, units, covariates=None, weighted=False) -> float:
    T, V, n = margins(units)
    Z = check_covariates(covariates, T.shape[0])
    layout = LinkLayout(theta.R, theta.C, theta.q)
    w = n if weighted else np.ones(len(n))
    return _objective_and_grad(layout.pack(theta), layout, T, V, Z, w)[0]


def king_gradient(theta: LinkParams, units, covariates=None, weighted=False) -> LinkParams:
    """Analytic gradient of the least-squares objective, shaped like ``theta``."""
    T, V, n = margins(units)
    Z = check_covariates(covariates, T.shape[0])
    layout = LinkLayout(theta.R, theta.C, theta.q)
    w = n if weighted else np.ones(len(n))
    _, g = _objective_and_grad(layout.pack(theta), layout, T, V, Z, w)
    return layout.unpack(g)


def default_init(units, q: int = 0) -> LinkParams:
    T, _, _ = margins(units)
    if T.shape[1] == 1 or T.shape[0] < T.shape[1]:
        R = T.shape[1]
        C = len(units[0].y)
        return LinkParams.zeros(R, C, q)
    try:
        g = fit_goodman(units, truncate=True)
        return LinkParams.from_pi(g.pi_hat, q=q)
    except ValidationError:
        return LinkParams.zeros(T.shape[1], len(units[0].y), q)


def fit_king_ols(
    units: Sequence[UnitAggregate],
    meta: Optional[DatasetMeta] = None,
    covariates: Optional[np.ndarray] = None,
    init: Optional[LinkParams] = None,
    weighted: bool = False,
    row_mask=None,
    maxiter: int = MAXITER,
) -> KingFit:
    T, V, n = margins(units)
    N, R = T.shape
    C = V.shape[1]
    Z = check_covariates(covariates, N)
    q = 0 if Z is None else Z.shape[1]
    layout = LinkLayout(R, C, q, row_mask)
    if N * (C - 1) < layout.size:
        raise ValidationError(
            f"{N * (C - 1)} observations cannot identify {layout.size} parameters"
        )
    Zs, zm, zs = standardize(Z)
    if init is None:
        init = default_init(units, q)
    theta0 = layout.pack(restandardize(init, zm, zs))
    w = n if weighted else np.ones(N)
    # rescale so tolerances do not depend on N
    scale = 1.0 / w.sum()

    def fun(th):
        f, g = _objective_and_grad(th, layout, T, V, Zs, w)
        return f * scale, g * scale

    f0 = fun(theta0)[0]
    history = [f0 / scale]

    def cb(xk):
        history.append(fun(xk)[0] / scale)

    res = minimize(
        fun,
        theta0,
        jac=True,
        method="L-BFGS-B",
        callback=cb,
        options={"maxiter": maxiter, "ftol": FTOL, "gtol": GTOL * scale, "maxcor": 20},
    )
    theta = res.x if res.fun <= f0 else theta0
    fbest = min(res.fun, f0) / scale
    params = destandardize(layout.unpack(theta), zm, zs)
    P = unit_probabilities(params, Z, N)
    pi_hat = P.mean(axis=0)
    return KingFit(
        params=params,
        pi_hat=pi_hat,
        objective=float(fbest),
        converged=bool(res.success),
        iterations=int(res.nit),
        history=history,
        weighted=weighted,
    )
