import numpy as np
import pytest

from ecoinf.core import IndividualTable, ValidationError
from ecoinf.diagnostics import (
    bias_condition_test,
    compare_estimates,
    prediction_error_sd,
    quartile_summary,
    significance_code,
)
from ecoinf.goodman import fit_goodman
from ecoinf.synth import GeneratorConfig, generate

from conftest import constant_p_units


def test_significance_legend():
    assert [significance_code(p) for p in (0.0005, 0.005, 0.03, 0.2)] == ["•", "∗", "⋆", "∘"]


def test_constant_p_holds():
    _, tables = constant_p_units([[0.6, 0.4], [0.25, 0.75]], N=30)
    rep = bias_condition_test(tables)
    assert rep.verdict == "holds"
    assert np.abs(rep.coef[:, :, 1:]).max() < 1e-6
    assert ((rep.pvalues >= 0) & (rep.pvalues <= 1)).all()


def test_strong_violation_detected():
    B = np.zeros((2, 1, 2))
    B[0, 0, 0] = 3.0
    pop = generate(GeneratorConfig(N=100, pi0=[[0.5, 0.5], [0.4, 0.6]], size_mean=300, bias=B, seed=1))
    rep = bias_condition_test(pop.tables)
    assert rep.violated
    df = rep.to_frame()
    assert set(df.columns) >= {"row", "outcome", "term", "coef", "se", "p", "code"}
    assert rep.to_dict()["verdict"] == "violated"


def test_extra_covariates_and_errors(small_pop):
    Z = np.random.default_rng(0).normal(size=len(small_pop.tables))
    rep = bias_condition_test(small_pop.tables, extra_covariates=Z)
    assert rep.names[-1] == "z1" and rep.coef.shape[-1] == 4
    with pytest.raises(ValidationError):
        bias_condition_test(small_pop.tables[:1])


def test_separation_flagged():
    # row 0 outcome 0 is perfectly predicted by t_1
    tables = [IndividualTable(f"u{k}", [[a, b], [5, 5]]) for k, (a, b) in
              enumerate([(0, 2), (0, 3), (0, 4), (10, 0), (12, 0), (14, 0)])]
    rep = bias_condition_test(tables)
    assert rep.separated[0, 0] and not rep.separated[1, 0]
    assert np.isinf(rep.se[0, 0]).all()


def _monotone_pop(seed=0):
    B = np.zeros((2, 1, 2))
    B[0, 0, 0] = -4.0  # success is the reference column, so this raises the success share with t_1
    return generate(GeneratorConfig(N=200, pi0=[[0.6, 0.4], [0.5, 0.5]], size_mean=400, bias=B, seed=seed))


def test_quartiles_increasing_and_order_invariant():
    pop = _monotone_pop()
    df = quartile_summary(pop.tables, 0)
    q = df[df.row == 0].sort_values("quartile")
    assert (np.diff(q.mean_grouping) > 0).all()
    assert (np.diff(q.mean_proportion) > 0).all()
    perm = np.random.default_rng(1).permutation(len(pop.tables))
    df2 = quartile_summary([pop.tables[k] for k in perm], 0)
    assert df.equals(df2)
    w = quartile_summary(pop.tables, 0, weighted=True)
    assert w.units.sum() == 2 * len(pop.tables)


def test_quartiles_small_and_flat():
    tabs = [IndividualTable(f"u{k}", [[k + 1, 1], [1, k + 2]]) for k in range(4)]
    df = quartile_summary(tabs, 0)
    r0 = df[df.row == 0].sort_values("quartile")
    assert r0.units.tolist() == [1, 1, 1, 1]
    expected = [t.within_row_proportions()[0, -1] for t in tabs]
    order = np.argsort([t.counts[0].sum() / t.counts.sum() for t in tabs], kind="stable")
    assert np.allclose(r0.mean_proportion, np.array(expected)[order])
    with pytest.raises(ValidationError):
        quartile_summary(tabs[:3], 0)
    _, flat = constant_p_units([[0.6, 0.4], [0.5, 0.5]], N=40)
    f = quartile_summary(flat, 0)
    assert np.ptp(f[f.row == 0].mean_proportion) < 1e-12


def test_prediction_error_sd_examples():
    obs_t = np.array([10.0, 20.0, 30.0, 25.0])
    obs_c = np.array([[4.0, 6.0], [10.0, 10.0], [12.0, 18.0], [5.0, 20.0]])
    rep = prediction_error_sd({"same": (obs_t, obs_c), "shift": (obs_t + 7, obs_c)}, obs_t, obs_c)
    assert rep.overall_sd["same"] == 0 and rep.overall_sd["shift"] == 0
    assert (rep.cell_sd["same"] == 0).all()
    rep = prediction_error_sd({"m": (obs_t + [1, -1, 1, -1], obs_c)}, obs_t, obs_c)
    assert np.isclose(rep.overall_sd["m"], np.std([1, -1, 1, -1], ddof=1))
    with pytest.raises(ValidationError):
        prediction_error_sd({"m": (obs_t[:3], obs_c[:3])}, obs_t, obs_c)


def test_compare_identical_and_permuted():
    T = np.array([[0.2, 0.8], [0.7, 0.3], [0.5, 0.5]])
    out = compare_estimates([("same", T)], T)
    assert out["methods"][0]["max_abs_error"] == 0 and not out["reversals"]
    P = T[[1, 0, 2]]
    out = compare_estimates([("perm", P)], T)
    assert np.isclose(out["methods"][0]["max_abs_error"], 0.5)
    with pytest.raises(ValidationError):
        compare_estimates([("bad", T[:2])], T)


def test_compare_symmetric_under_relabeling():
    rng = np.random.default_rng(0)
    T = rng.dirichlet([1, 1, 1], size=3)
    E = rng.dirichlet([1, 1, 1], size=3)
    perm_r, perm_c = [2, 0, 1], [1, 2, 0]
    a = compare_estimates([("e", E)], T)
    b = compare_estimates([("e", E[perm_r][:, perm_c])], T[perm_r][:, perm_c])
    assert np.isclose(a["methods"][0]["max_abs_error"], b["methods"][0]["max_abs_error"])
    assert len(a["reversals"]) == len(b["reversals"])


def test_table1_reversal(table1_units):
    pop = table1_units
    fit = fit_goodman(pop.units, pop.meta)
    unit_truth = np.array([t.within_row_proportions() for t in pop.tables])
    assert np.allclose(unit_truth[:, :, 1], [[0.6875, 0.75], [0.25, 0.50]])
    truth = pop.pooled_pi()
    out = compare_estimates([("goodman", fit.pi_hat)], truth, unit_truth=unit_truth, col=1)
    assert out["reversals"] and out["reversals"][0]["rows"] == [0, 1]
