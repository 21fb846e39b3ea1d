"""Goodman ecological regression.

Each non-reference column share v_uj is regressed on an intercept and the
contrasts (t_ui - t_uR), i < R.  Because the row shares sum to one, the
fitted surface a + sum_i b_i (t_ui - t_uR) equals sum_i t_ui pi_ij with

    pi_ij = a + b_i        (i < R)
    pi_Rj = a - sum_i b_i

which is the mapping used below.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import DatasetMeta, UnitAggregate, ValidationError, margins


class RankDeficientError(ValidationError):
    pass


@dataclass
class GoodmanFit:
    pi_hat: np.ndarray
    pi_raw: np.ndarray
    se: np.ndarray
    residuals: np.ndarray
    weighted: bool = False
    truncated: bool = True
    coef: np.ndarray = field(repr=False, default=None)
    design: np.ndarray = field(repr=False, default=None)

    @property
    def method(self) -> str:
        return "goodman"

    def diagnostics(self) -> dict:
        return {
            "weighted": self.weighted,
            "truncated": self.truncated,
            "pi_raw": self.pi_raw.tolist(),
            "residual_sd": self.residuals.std(axis=0, ddof=0).tolist(),
            "n_outside_unit_interval": int(((self.pi_raw < 0) | (self.pi_raw > 1)).sum()),
        }


def goodman_design(T: np.ndarray) -> np.ndarray:
    """Intercept plus (t_i - t_R) contrasts; for R = 1 the intercept alone."""
    N, R = T.shape
    cols = [np.ones(N)] + [T[:, i] - T[:, R - 1] for i in range(R - 1)]
    return np.column_stack(cols)


def _coef_to_pi_map(R: int) -> np.ndarray:
    # pi = L @ coef, coef = (a, b_1..b_{R-1})
    L = np.zeros((R, R))
    L[:, 0] = 1.0
    for i in range(R - 1):
        L[i, i + 1] = 1.0
        L[R - 1, i + 1] = -1.0
    return L


def _check_rank(X: np.ndarray, labels) -> None:
    _, s, vt = np.linalg.svd(X, full_matrices=False)
    tol = s.max() * max(X.shape) * np.finfo(float).eps * 1e3
    if (s <= tol).any():
        null = vt[s <= tol][0]
        names = ["intercept"] + [f"{labels[i]}-{labels[-1]}" for i in range(len(labels) - 1)]
        involved = [names[k] for k in np.flatnonzero(np.abs(null) > 1e-8)]
        raise RankDeficientError(f"collinear design columns: {involved}")


def truncate_rows(pi: np.ndarray) -> np.ndarray:
    """Clip to [0, 1] and renormalise each row."""
    p = np.clip(pi, 0.0, 1.0)
    s = p.sum(axis=1, keepdims=True)
    out = np.where(s > 0, p / np.where(s > 0, s, 1.0), 1.0 / p.shape[1])
    return out


def fit_goodman(
    units: Sequence[UnitAggregate],
    meta: Optional[DatasetMeta] = None,
    weighted: bool = False,
    truncate: bool = True,
) -> GoodmanFit:
    """OLS (or n_u-weighted LS) of column shares on row-share contrasts.

    ``meta`` only supplies labels for error messages; R and C come from the
    data, which also allows the intercept-only R = 1 case.
    """
    T, V, n = margins(units)
    N, R = T.shape
    C = V.shape[1]
    if N < R:
        raise ValidationError(f"underdetermined: {N} units for {R} row categories")
    labels = meta.row_labels if meta is not None else tuple(f"x{i + 1}" for i in range(R))
    X = goodman_design(T)
    _check_rank(X, labels)

    w = n if weighted else np.ones(N)
    sw = np.sqrt(w)
    Xw = X * sw[:, None]
    Vw = V * sw[:, None]
    # all C columns at once; the last one is 1 - sum of the others by linearity
    coef, *_ = np.linalg.lstsq(Xw, Vw, rcond=None)
    L = _coef_to_pi_map(R)
    pi_raw = L @ coef
    pi_raw[:, C - 1] = 1.0 - pi_raw[:, : C - 1].sum(axis=1)

    fitted = X @ coef
    resid = V - fitted
    dof = N - X.shape[1]
    xtx_inv = np.linalg.inv(Xw.T @ Xw)
    se = np.full((R, C), np.nan)
    if dof > 0:
        s2 = (w[:, None] * resid**2).sum(axis=0) / dof
        for j in range(C):
            cov = s2[j] * L @ xtx_inv @ L.T
            se[:, j] = np.sqrt(np.clip(np.diag(cov), 0, None))
    pi_hat = truncate_rows(pi_raw) if truncate else pi_raw.copy()
    return GoodmanFit(
        pi_hat=pi_hat,
        pi_raw=pi_raw,
        se=se,
        residuals=resid[:, : C - 1],
        weighted=weighted,
        truncated=truncate,
        coef=coef,
        design=X,
    )


def goodman_residuals(fit: GoodmanFit, units: Sequence[UnitAggregate]) -> np.ndarray:
    """v_uj minus the untruncated fitted share, for j < C."""
    T, V, _ = margins(units)
    fitted = T @ fit.pi_raw
    return (V - fitted)[:, :-1]
