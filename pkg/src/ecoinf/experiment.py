"""Estimation entry point shared by the CLI, and the replicated experiment pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import io as eio
from .brown_payne import bp_predict_cells, fit_brown_payne
from .core import Dataset, ValidationError
from .diagnostics import bias_condition_test, compare_estimates, prediction_error_sd
from .goodman import fit_goodman
from .king import fit_king_ols
from .multilevel import (
    averaged_probabilities,
    cell_observations,
    fit_multilevel,
    fit_per_group,
    predict_cells,
    raw_estimates,
)
from .synth import GeneratorConfig, generate, palermo_like_config

METHODS = ("goodman", "king-ols", "brown-payne", "multilevel", "raw")
COVARIATE_SETS = ("none", "data", "margins")


class ExperimentError(RuntimeError):
    def __init__(self, msg, manifest):
        super().__init__(msg)
        self.manifest = manifest


def covariate_matrix(ds: Dataset, which: str) -> Optional[np.ndarray]:
    """'none', 'data' (the dataset's covariates) or 'margins' (t_1..t_{R-1})."""
    if which == "none":
        return None
    if which == "data":
        if ds.covariates is None:
            raise ValidationError("dataset has no covariates")
        return np.asarray(ds.covariates, dtype=float)
    if which == "margins":
        X = np.array([u.x for u in ds.units], dtype=float)
        return (X / X.sum(axis=1, keepdims=True))[:, :-1]
    raise ValidationError(f"unknown covariate set {which!r}")


def group_pairs(labels) -> list:
    """Rows sharing a label after the leading token (e.g. 'M 45-65', 'F 45-65') form one group."""
    keys = {}
    for i, lab in enumerate(labels):
        parts = str(lab).split(None, 1)
        keys.setdefault(parts[1] if len(parts) == 2 else f"#{i}", []).append(i)
    groups = list(keys.values())
    return groups if len(groups) < len(labels) else [[i] for i in range(len(labels))]


def estimate(ds: Dataset, method: str, covariates: Optional[np.ndarray] = None, weighted=False,
             truncate=True, fix_phi=None, fix_tau=None, per_group=False, levels=3,
             compute_se=True):
    """Fit one method; returns (report dict, fitted object, converged flag)."""
    units, meta = ds.units, ds.meta
    if method == "goodman":
        fit = fit_goodman(units, meta, weighted=weighted, truncate=truncate)
        return eio.make_report(method, fit.pi_hat, fit.se, fit.diagnostics()), fit, True
    if method == "king-ols":
        fit = fit_king_ols(units, meta, covariates=covariates, weighted=weighted)
        return eio.make_report(method, fit.pi_hat, None, fit.diagnostics()), fit, fit.converged
    if method == "brown-payne":
        fit = fit_brown_payne(units, meta, covariates=covariates, fix_phi=fix_phi, fix_tau=fix_tau)
        return eio.make_report(method, fit.pi_hat, None, fit.diagnostics()), fit, fit.converged
    if ds.tables is None:
        raise ValidationError(f"{method} needs individual-level tables")
    if method == "raw":
        return eio.make_report(method, raw_estimates(ds.tables), None, {}), None, True
    if method == "multilevel":
        obs = cell_observations(ds.tables, meta)
        names = list(meta.row_labels) or None
        cov_names = None
        if covariates is not None and len(ds.covariate_names) == np.asarray(covariates).reshape(len(units), -1).shape[1]:
            cov_names = list(ds.covariate_names)
        if per_group:
            fits = [
                fit_per_group(obs, covariates, g, levels=levels, group_names=names,
                              cov_names=cov_names, compute_se=compute_se)
                for g in group_pairs(meta.row_labels or range(meta.R))
            ]
        else:
            fits = [fit_multilevel(obs, covariates, levels=levels, group_names=names,
                                   cov_names=cov_names, compute_se=compute_se)]
        pi = averaged_probabilities(fits, covariates, meta.R, len(ds.units))
        diag = {"models": [f.diagnostics() for f in fits]}
        return eio.make_report(method, pi, None, diag), fits, all(f.converged for f in fits)
    raise ValidationError(f"unknown method {method!r}")


@dataclass
class ExperimentConfig:
    generator: dict = field(default_factory=lambda: {"preset": "palermo"})
    methods: tuple = METHODS
    covariates: dict = field(default_factory=dict)
    replications: int = 1
    seed: int = 0
    out: Optional[str] = None
    per_group: bool = False

    def __post_init__(self):
        self.methods = tuple(self.methods)
        if not self.methods:
            raise ValidationError("methods must be nonempty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValidationError(f"unknown methods {bad}")
        if self.replications < 1:
            raise ValidationError("replications must be >= 1")
        for m, c in self.covariates.items():
            if c not in COVARIATE_SETS:
                raise ValidationError(f"{m}: covariate set must be one of {COVARIATE_SETS}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return {"generator": self.generator, "methods": list(self.methods),
                "covariates": dict(self.covariates), "replications": self.replications,
                "seed": self.seed, "out": self.out, "per_group": self.per_group}

    def generator_config(self, seed: int) -> GeneratorConfig:
        g = dict(self.generator)
        preset = g.pop("preset", None)
        g["seed"] = seed
        if preset == "palermo":
            return palermo_like_config(**g)
        if preset is not None:
            raise ValidationError(f"unknown generator preset {preset!r}")
        return GeneratorConfig.from_dict(g)


def _label(method, cov):
    return method if cov == "none" else f"{method}+{cov}"


def _replication(cfg: ExperimentConfig, seed: int) -> dict:
    pop = generate(cfg.generator_config(seed))
    ds = pop.dataset()
    truth = pop.true_pi_bar()
    rep = {"seed": seed, "estimates": {}, "converged": {}}
    preds = {}
    X = np.array([u.x for u in ds.units], dtype=float)
    for m in cfg.methods:
        cov = cfg.covariates.get(m, "none")
        Z = covariate_matrix(ds, cov) if m in ("king-ols", "brown-payne", "multilevel") else None
        report, fit, ok = estimate(ds, m, covariates=Z, per_group=cfg.per_group, compute_se=False)
        lab = _label(m, cov)
        rep["estimates"][lab] = report["pi"]
        rep["converged"][lab] = bool(ok)
        if m == "brown-payne":
            cells = bp_predict_cells(fit, ds.units, Z)[:, :, -1]
            preds[lab] = (cells.sum(axis=1), cells)
        elif m == "multilevel" and pop.meta.C == 2:
            cells = predict_cells(fit, X, Z)
            preds[lab] = (cells.sum(axis=1), cells)
    cmp = compare_estimates(list(rep["estimates"].items()), truth,
                            unit_truth=np.asarray(pop.truth["pi_units"]))
    rep["errors"] = cmp["methods"]
    rep["reversals"] = cmp["reversals"]
    rep["truth"] = truth.tolist()
    rep["raw"] = raw_estimates(pop.tables).tolist()
    bt = bias_condition_test(pop.tables)
    rep["bias_test"] = {"verdict": bt.verdict, "min_p": float(np.nanmin(bt.slope_pvalues)),
                        "rejection_fraction_5pct": bt.rejection_fraction(0.05)}
    if preds:
        obs_cells = np.array([t.counts[:, -1] for t in pop.tables], dtype=float)
        sd = prediction_error_sd(preds, obs_cells.sum(axis=1), obs_cells)
        rep["error_sd"] = sd.to_dict()
    return rep


def _summary(reps: list) -> dict:
    labels = list(reps[0]["estimates"])
    grid = {lab: np.mean([r["estimates"][lab] for r in reps], axis=0).tolist() for lab in labels}
    grid["truth"] = np.mean([r["truth"] for r in reps], axis=0).tolist()
    err = {
        lab: {
            "max_abs_error_mean": float(np.mean([e["max_abs_error"] for r in reps for e in r["errors"]
                                                 if e["method"] == lab])),
            "bias": (np.mean([r["estimates"][lab] for r in reps], axis=0)
                     - np.mean([r["truth"] for r in reps], axis=0)).tolist(),
        }
        for lab in labels
    }
    out = {"grid": grid, "errors": err,
           "bias_test_violated_fraction": float(np.mean([r["bias_test"]["verdict"] == "violated"
                                                         for r in reps]))}
    sds = [r["error_sd"] for r in reps if "error_sd" in r]
    if sds:
        out["error_sd"] = {
            "overall_sd": {k: float(np.mean([s["overall_sd"][k] for s in sds])) for k in sds[0]["overall_sd"]},
            "cell_sd": {k: np.mean([s["cell_sd"][k] for s in sds], axis=0).tolist() for k in sds[0]["cell_sd"]},
        }
    return out


def replication_seeds(seed: int, n: int) -> list:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run all replications; writes report.json and manifest.json when ``cfg.out`` is set.

    On failure the manifest records completed replications and the error,
    and ExperimentError is raised.
    """
    out = Path(cfg.out) if cfg.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    manifest = {"config": cfg.to_dict(), "completed": [], "status": "running", "files": []}
    reps = []
    try:
        for r, s in enumerate(replication_seeds(cfg.seed, cfg.replications)):
            rep = _replication(cfg, s)
            reps.append(rep)
            manifest["completed"].append(r)
            if out:
                name = f"replication_{r:04d}.json"
                eio.write_json(out / name, rep)
                manifest["files"].append(name)
        # the output path is not part of the result, so reruns elsewhere compare equal
        conf = {k: v for k, v in cfg.to_dict().items() if k != "out"}
        report = {"config": conf, "replications": reps, "summary": _summary(reps)}
        manifest["status"] = "ok"
    except Exception as e:
        manifest["status"] = "failed"
        manifest["error"] = f"{type(e).__name__}: {e}"
        if out:
            eio.write_json(out / "manifest.json", manifest)
        raise ExperimentError(str(e), manifest) from e
    report["converged"] = all(all(r["converged"].values()) for r in reps)
    if out:
        eio.write_json(out / "report.json", report)
        manifest["files"].append("report.json")
        eio.write_json(out / "manifest.json", manifest)
    return report

