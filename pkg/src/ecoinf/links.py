"""Multinomial-logit parameterization of unit-varying transition probabilities.

pi_uij = softmax_j(gamma_ij + delta_ij . z_u), with the last column as the
reference category (its logit is fixed at 0).  ``row_mask`` switches the
covariate slopes of a row off, so a caller can let covariates act only on
the rows where individual-level diagnostics found an effect.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import ValidationError


@dataclass
class LinkParams:
    gamma: np.ndarray  # R x (C-1)
    delta: np.ndarray  # R x (C-1) x q

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=float)
        R, Cm1 = self.gamma.shape
        if self.delta is None:
            self.delta = np.zeros((R, Cm1, 0))
        self.delta = np.asarray(self.delta, dtype=float)
        if self.delta.shape[:2] != (R, Cm1):
            raise ValidationError("delta must be R x (C-1) x q")
        if not (np.isfinite(self.gamma).all() and np.isfinite(self.delta).all()):
            raise ValidationError("link parameters must be finite")

    @property
    def R(self):
        return self.gamma.shape[0]

    @property
    def C(self):
        return self.gamma.shape[1] + 1

    @property
    def q(self):
        return self.delta.shape[2]

    @classmethod
    def zeros(cls, R, C, q=0):
        return cls(np.zeros((R, C - 1)), np.zeros((R, C - 1, q)))

    @classmethod
    def from_pi(cls, pi, q=0, clip=(0.01, 0.99)):
        """Logit-scale intercepts reproducing ``pi`` (after clipping and renormalising)."""
        p = np.clip(np.asarray(pi, dtype=float), *clip)
        p = p / p.sum(axis=1, keepdims=True)
        gamma = np.log(p[:, :-1]) - np.log(p[:, -1:])
        return cls(gamma, np.zeros(gamma.shape + (q,)))

    def to_dict(self):
        return {"gamma": self.gamma.tolist(), "delta": self.delta.tolist()}


class LinkLayout:
    """Packs LinkParams into a flat vector, skipping masked-out slopes."""

    def __init__(self, R: int, C: int, q: int, row_mask: Optional[np.ndarray] = None):
        self.R, self.C, self.q = R, C, q
        if row_mask is None:
            row_mask = np.ones((R, q), dtype=bool)
        row_mask = np.asarray(row_mask, dtype=bool)
        if row_mask.ndim == 1:
            row_mask = np.repeat(row_mask[:, None], q, axis=1)
        if row_mask.shape != (R, q):
            raise ValidationError(f"row_mask must be R x q = {(R, q)}")
        self.row_mask = row_mask
        # slope mask over (i, j, k)
        self.delta_mask = np.repeat(row_mask[:, None, :], C - 1, axis=1)
        self.n_gamma = R * (C - 1)
        self.size = self.n_gamma + int(self.delta_mask.sum())

    def pack(self, p: LinkParams) -> np.ndarray:
        return np.concatenate([p.gamma.ravel(), p.delta[self.delta_mask]])

    def unpack(self, theta: np.ndarray) -> LinkParams:
        gamma = theta[: self.n_gamma].reshape(self.R, self.C - 1)
        delta = np.zeros((self.R, self.C - 1, self.q))
        delta[self.delta_mask] = theta[self.n_gamma:]
        return LinkParams(gamma.copy(), delta)

    def pack_grad(self, g_gamma: np.ndarray, g_delta: np.ndarray) -> np.ndarray:
        return np.concatenate([g_gamma.ravel(), g_delta[self.delta_mask]])


def unit_probabilities(p: LinkParams, Z: Optional[np.ndarray], N: int) -> np.ndarray:
    """N x R x C array of pi_uij."""
    eta = np.broadcast_to(p.gamma, (N,) + p.gamma.shape).copy()
    if p.q:
        eta += np.einsum("ijk,uk->uij", p.delta, Z)
    full = np.concatenate([eta, np.zeros((N, p.R, 1))], axis=2)
    full -= full.max(axis=2, keepdims=True)
    e = np.exp(full)
    return e / e.sum(axis=2, keepdims=True)


def mean_shares(P: np.ndarray, T: np.ndarray) -> np.ndarray:
    """mu_uj = sum_i t_ui pi_uij."""
    return np.einsum("ui,uij->uj", T, P)


def backprop_mean(G: np.ndarray, P: np.ndarray, T: np.ndarray, Z: Optional[np.ndarray]):
    """Chain dL/dmu (N x C) back to gradients on gamma and delta.

    d mu_uj / d eta_uik = t_ui pi_uij (1[j=k] - pi_uik), k < C.
    """
    # A_ui = sum_j G_uj pi_uij
    A = np.einsum("uj,uij->ui", G, P)
    # dL/deta_uik = t_ui pi_uik (G_uk - A_ui)
    D = T[:, :, None] * P[:, :, :-1] * (G[:, None, :-1] - A[:, :, None])
    g_gamma = D.sum(axis=0)
    if Z is not None and Z.shape[1]:
        g_delta = np.einsum("uik,ul->ikl", D, Z)
    else:
        g_delta = np.zeros(g_gamma.shape + (0,))
    return g_gamma, g_delta, D


def standardize(Z: Optional[np.ndarray]):
    """Center and scale covariate columns; returns (Zs, mean, sd)."""
    if Z is None or Z.shape[1] == 0:
        return None, None, None
    m = Z.mean(axis=0)
    s = Z.std(axis=0)
    s = np.where(s > 0, s, 1.0)
    return (Z - m) / s, m, s


def destandardize(p: LinkParams, m, s) -> LinkParams:
    """Map parameters fitted on standardized covariates back to the raw scale."""
    if m is None:
        return p
    delta = p.delta / s
    gamma = p.gamma - np.einsum("ijk,k->ij", delta, m)
    return LinkParams(gamma, delta)


def restandardize(p: LinkParams, m, s) -> LinkParams:
    if m is None:
        return p
    gamma = p.gamma + np.einsum("ijk,k->ij", p.delta, m)
    return LinkParams(gamma, p.delta * s)


def check_covariates(Z: Optional[np.ndarray], N: int) -> Optional[np.ndarray]:
    if Z is None:
        return None
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.shape[0] != N:
        raise ValidationError(f"covariates given for {Z.shape[0]} units, expected {N}")
    if not np.isfinite(Z).all():
        raise ValidationError("covariates must be finite")
    if Z.shape[1] == 0:
        return None
    A = np.column_stack([np.ones(N), Z])
    if np.linalg.matrix_rank(A) < A.shape[1]:
        raise ValidationError("covariates are rank deficient (collinear with each other or constant)")
    return Z
