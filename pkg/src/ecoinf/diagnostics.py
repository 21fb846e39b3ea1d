"""Checks of the no-aggregation-bias condition and comparisons between estimators."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import statsmodels.api as sm
from statsmodels.tools.sm_exceptions import PerfectSeparationWarning

from .core import IndividualTable, ValidationError, as_array

SEPARATION_ETA = 25.0


def significance_code(p: float) -> str:
    """Legend: bullet p < 0.001, asterisk p < 0.01, star p < 0.05, circle otherwise."""
    if not np.isfinite(p):
        return "?"
    if p < 0.001:
        return "•"
    if p < 0.01:
        return "∗"
    if p < 0.05:
        return "⋆"
    return "∘"


@dataclass
class BiasTestReport:
    """One logistic regression per (row i, outcome j); index [i][j] into the arrays."""

    coef: np.ndarray  # R x (C-1) x k, intercept first
    se: np.ndarray
    pvalues: np.ndarray
    names: list
    separated: np.ndarray  # R x (C-1) bool
    alpha: float = 0.01
    outcomes: list = field(default_factory=list)

    @property
    def slope_pvalues(self) -> np.ndarray:
        return self.pvalues[:, :, 1:]

    @property
    def violated(self) -> bool:
        p = self.slope_pvalues
        return bool(np.nanmin(p) < self.alpha) if np.isfinite(p).any() else False

    @property
    def verdict(self) -> str:
        return "violated" if self.violated else "holds"

    def rejection_fraction(self, level: float = 0.05) -> float:
        p = self.slope_pvalues
        ok = np.isfinite(p)
        return float((p[ok] < level).mean()) if ok.any() else float("nan")

    def to_frame(self) -> pd.DataFrame:
        rows = []
        R, J, k = self.coef.shape
        for i in range(R):
            for jj in range(J):
                for m in range(k):
                    rows.append({
                        "row": i, "outcome": self.outcomes[jj] if self.outcomes else jj,
                        "term": self.names[m], "coef": self.coef[i, jj, m],
                        "se": self.se[i, jj, m], "p": self.pvalues[i, jj, m],
                        "code": significance_code(self.pvalues[i, jj, m]),
                        "separated": bool(self.separated[i, jj]),
                    })
        return pd.DataFrame(rows)

    def to_dict(self) -> dict:
        return {"verdict": self.verdict, "alpha": self.alpha,
                "cells": self.to_frame().replace({np.inf: None}).to_dict(orient="records")}


def bias_condition_test(
    tables: Sequence[IndividualTable],
    extra_covariates: Optional[np.ndarray] = None,
    ref_col: int = -1,
    alpha: float = 0.01,
) -> BiasTestReport:
    """Regress within-row outcome shares on the unit's row shares.

    For every row i and outcome j other than ``ref_col``, fits a binomial
    logit of n_uij successes out of x_ui trials on t_u1..t_u,R-1 (plus any
    extra covariates).  Units with x_ui = 0 carry no information for row i
    and are dropped from that regression.
    """
    if len(tables) < 2:
        raise ValidationError("need individual tables for at least two units")
    counts = np.array([t.counts for t in tables], dtype=float)
    N, R, C = counts.shape
    ref = ref_col % C
    outcomes = [j for j in range(C) if j != ref]
    X = counts.sum(axis=2)
    T = X / X.sum(axis=1, keepdims=True)
    design = [np.ones(N)] + [T[:, i] for i in range(R - 1)]
    names = ["const"] + [f"t{i + 1}" for i in range(R - 1)]
    if extra_covariates is not None:
        E = np.asarray(extra_covariates, dtype=float).reshape(N, -1)
        design += [E[:, k] for k in range(E.shape[1])]
        names += [f"z{k + 1}" for k in range(E.shape[1])]
    D = np.column_stack(design)
    k = D.shape[1]
    coef = np.full((R, len(outcomes), k), np.nan)
    se = np.full_like(coef, np.nan)
    pv = np.full_like(coef, np.nan)
    sep = np.zeros((R, len(outcomes)), dtype=bool)
    for i in range(R):
        keep = X[:, i] > 0
        for jj, j in enumerate(outcomes):
            succ = counts[keep, i, j]
            fail = X[keep, i] - succ
            if keep.sum() <= k:
                continue
            with warnings.catch_warnings():
                # statsmodels' own separation warning also fires on exact fits
                warnings.simplefilter("ignore", PerfectSeparationWarning)
                res = sm.GLM(np.column_stack([succ, fail]), D[keep],
                             family=sm.families.Binomial()).fit(maxiter=100)
            coef[i, jj] = res.params
            if np.abs(D[keep] @ res.params).max() > SEPARATION_ETA:
                # fitted probabilities pinned at 0 or 1: the MLE does not exist
                sep[i, jj] = True
                se[i, jj] = np.inf
                pv[i, jj] = 1.0
                continue
            se[i, jj] = res.bse
            pv[i, jj] = res.pvalues
    return BiasTestReport(coef, se, pv, names, sep, alpha, outcomes)


def quartile_summary(
    tables: Sequence[IndividualTable],
    grouping,
    outcome: int = -1,
    weighted: bool = False,
) -> pd.DataFrame:
    """Per-quartile means of a grouping variable and of each row's outcome share.

    ``grouping`` is a row index (units grouped by that row's share t_ui) or
    an array with one value per unit.  Units are ordered by (value, unit_id),
    so the result does not depend on input order.  Quartiles hold equal unit
    counts, or equal total size when ``weighted``.
    """
    N = len(tables)
    if N < 4:
        raise ValidationError("quartiles need at least 4 units")
    counts = np.array([t.counts for t in tables], dtype=float)
    X = counts.sum(axis=2)
    n = X.sum(axis=1)
    if np.isscalar(grouping) or isinstance(grouping, (int, np.integer)):
        g = X[:, int(grouping)] / n
        gname = f"t{int(grouping) + 1}"
    else:
        g = np.asarray(grouping, dtype=float)
        gname = "covariate"
        if g.shape != (N,):
            raise ValidationError("one grouping value per unit required")
    ids = [t.unit_id for t in tables]
    order = sorted(range(N), key=lambda k: (g[k], ids[k]))
    if weighted:
        cum = np.cumsum(n[order]) / n.sum()
        q_of = np.minimum((cum * 4 - 1e-12).astype(int), 3)
        parts = [np.array(order)[q_of == q] for q in range(4)]
    else:
        parts = np.array_split(np.array(order), 4)
    with np.errstate(invalid="ignore", divide="ignore"):
        P = counts[:, :, outcome] / X
    rows = []
    R = X.shape[1]
    for q, idx in enumerate(parts):
        for i in range(R):
            rows.append({
                "quartile": q + 1,
                "row": i,
                "grouping": gname,
                "mean_grouping": float(g[idx].mean()),
                "mean_proportion": float(np.nanmean(P[idx, i])) if len(idx) else np.nan,
                "units": int(len(idx)),
            })
    return pd.DataFrame(rows)


@dataclass
class ErrorSDReport:
    overall_sd: dict
    cell_sd: dict

    def to_dict(self) -> dict:
        return {"overall_sd": {k: float(v) for k, v in self.overall_sd.items()},
                "cell_sd": {k: [float(x) for x in v] for k, v in self.cell_sd.items()}}


def prediction_error_sd(predicted: dict, observed_totals, observed_cells) -> ErrorSDReport:
    """SD over units of prediction errors, per method.

    ``predicted`` maps method -> (totals [N], cells [N x R]).  SDs are of
    centred errors (ddof = 1), so a constant offset contributes nothing.
    """
    ot = np.asarray(observed_totals, dtype=float)
    oc = np.asarray(observed_cells, dtype=float)
    if oc.ndim != 2 or oc.shape[0] != ot.shape[0]:
        raise ValidationError("observed totals and cells cover different unit sets")
    overall, cells = {}, {}
    for method, (pt, pc) in predicted.items():
        pt = np.asarray(pt, dtype=float)
        pc = np.asarray(pc, dtype=float)
        if pt.shape != ot.shape or pc.shape != oc.shape:
            raise ValidationError(f"{method}: predictions cover a different unit set")
        overall[method] = float(np.std(pt - ot, ddof=1))
        cells[method] = np.std(pc - oc, axis=0, ddof=1)
    return ErrorSDReport(overall, cells)


def compare_estimates(estimates, truth, unit_truth=None, col: Optional[int] = None) -> dict:
    """Error summaries against ``truth`` plus detection of row-ordering reversals.

    A reversal for column j and rows (i, k) is reported when the estimate
    orders pi_ij and pi_kj opposite to ``truth`` and, if ``unit_truth``
    (N x R x C within-unit proportions) is given, opposite to every unit.
    """
    T = as_array(truth)
    out = {"methods": [], "grid": {}, "reversals": []}
    cols = range(T.shape[1]) if col is None else [col]
    for method, est in estimates:
        E = as_array(est)
        if E.shape != T.shape:
            raise ValidationError(f"{method}: shape {E.shape} does not match truth {T.shape}")
        err = np.abs(E - T)
        out["methods"].append({"method": method, "max_abs_error": float(err.max()),
                               "mean_abs_error": float(err.mean())})
        out["grid"][method] = E.tolist()
        R = T.shape[0]
        for j in cols:
            for i in range(R):
                for k in range(i + 1, R):
                    se = np.sign(E[i, j] - E[k, j])
                    st = np.sign(T[i, j] - T[k, j])
                    if se == 0 or st == 0 or se == st:
                        continue
                    if unit_truth is not None:
                        U = np.asarray(unit_truth)
                        su = np.sign(U[:, i, j] - U[:, k, j])
                        if not (su == st).all():
                            continue
                    out["reversals"].append({"method": method, "col": j, "rows": [i, k],
                                             "estimate_diff": float(E[i, j] - E[k, j]),
                                             "truth_diff": float(T[i, j] - T[k, j])})
    out["grid"]["truth"] = T.tolist()
    return out
