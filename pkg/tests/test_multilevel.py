import numpy as np
import pytest
import statsmodels.api as sm
from scipy.special import expit

from ecoinf.core import IndividualTable, ValidationError
from ecoinf.multilevel import (
    CellObservation,
    averaged_probabilities,
    cell_observations,
    fit_multilevel,
    fit_per_group,
    glm_loglik,
    predict_cells,
    raw_estimates,
)
from ecoinf.synth import PALERMO_ELIGIBLE, PALERMO_VOTERS, GeneratorConfig, generate

PI0 = [[0.8, 0.2], [0.6, 0.4], [0.9, 0.1]]


def _pop(sig_st, sig_seat, N=80, S=16, seed=0, **kw):
    cfg = GeneratorConfig(N=N, S=S, pi0=PI0, size_mean=300, sigma_station=sig_st,
                          sigma_seat=sig_seat, seed=seed, **kw)
    return generate(cfg)


# every population here has 80 stations in 16 seats, so the jitted
# likelihoods compile once per model configuration

@pytest.fixture(scope="module")
def re_pop():
    return _pop(0.3, 0.3, seed=1)


@pytest.fixture(scope="module")
def re_fit(re_pop):
    return fit_multilevel(cell_observations(re_pop.tables, re_pop.meta), compute_se=True)


def test_raw_estimates_examples():
    # Palermo margins as single-column tables: males 45-65
    t = IndividualTable("city", np.column_stack([
        (PALERMO_ELIGIBLE - PALERMO_VOTERS).ravel(), PALERMO_VOTERS.ravel()]))
    raw = raw_estimates([t])
    assert round(raw[3, 1], 4) == 0.0688
    one = IndividualTable("a", [[3, 1], [2, 2]])
    assert np.allclose(raw_estimates([one]), one.within_row_proportions())
    two = IndividualTable("b", [[1, 3], [4, 0]])
    assert np.allclose(raw_estimates([one, two]),
                       (one.within_row_proportions() + two.within_row_proportions()) / 2)
    assert np.isnan(raw_estimates([IndividualTable("c", [[0, 0], [1, 1]])])[0]).all()
    with pytest.raises(ValidationError):
        raw_estimates([])


def test_cell_observation_invariants():
    with pytest.raises(ValidationError):
        CellObservation("u", "s", 0, 3, 4)
    pop = generate(GeneratorConfig(N=4, pi0=[[0.5, 0.3, 0.2], [0.2, 0.3, 0.5]], seed=0))
    with pytest.raises(ValidationError, match="binary"):
        cell_observations(pop.tables, pop.meta)


def test_degenerate_model_matches_logistic():
    pop = _pop(0.0, 0.0, seed=2)
    obs = cell_observations(pop.tables, pop.meta)
    fit = fit_multilevel(obs)
    assert fit.sigma_station[0] < 0.02 and fit.sigma_seat[0] < 0.02
    x = np.array([o.trials for o in obs], float)
    y = np.array([o.successes for o in obs], float)
    G = np.eye(3)[[o.group for o in obs]]
    ref = sm.GLM(np.column_stack([y, x - y]), G, family=sm.families.Binomial()).fit()
    assert np.abs(fit.beta - ref.params).max() < 1e-3


def test_zero_sigma_loglik_is_glm(re_pop, re_fit):
    obs = cell_observations(re_pop.tables, re_pop.meta)
    fit = re_fit
    prob = fit._problem
    theta = fit._theta.copy()
    theta[prob.p:] = -np.inf
    eta = fit.design.X @ theta[: prob.p]
    assert abs(prob.loglik(theta) - glm_loglik(obs, eta)) < 1e-9


def test_gradient_matches_finite_differences(re_pop):
    obs = cell_observations(re_pop.tables, re_pop.meta)
    Z = np.random.default_rng(0).normal(size=(len(re_pop.tables), 1))
    for per_group in (False, True):
        fit = fit_multilevel(obs, Z, per_group_sigmas=per_group, compute_se=False, maxiter=3)
        prob = fit._problem
        rng = np.random.default_rng(5)
        theta = fit._theta + rng.normal(scale=0.1, size=fit._theta.size)
        g = prob.grad(theta)
        h = 1e-5
        fd = np.array([(prob.loglik(theta + h * e, exact_zero=False)
                        - prob.loglik(theta - h * e, exact_zero=False)) / (2 * h)
                       for e in np.eye(theta.size)])
        rel = np.abs(g - fd) / np.maximum(np.abs(fd), 1.0)
        assert rel.max() < 1e-4


def test_quadrature_converged(re_pop, re_fit):
    obs = cell_observations(re_pop.tables, re_pop.meta)
    fit = re_fit
    prob = fit._problem
    assert abs(prob.loglik(fit._theta, K=9) - prob.loglik(fit._theta, K=15)) < 1e-4
    with pytest.raises(ValidationError):
        fit_multilevel(obs, K=5)


def test_history_monotone_and_sigmas(re_pop, re_fit):
    obs = cell_observations(re_pop.tables, re_pop.meta)
    fit = re_fit
    h = np.array(fit.history)
    assert (np.diff(h) >= -1e-6).all()
    assert fit.converged and (fit.beta_se > 0).all()
    assert 0.1 < fit.sigma_station[0] < 0.5
    assert fit.loglik >= h[0]
    two = fit_multilevel(obs, levels=2, compute_se=False)
    assert (two.sigma_seat == 0).all() and two.loglik <= fit.loglik + 1e-6


def test_averaged_probabilities_and_raw(re_pop, re_fit):
    fit = re_fit
    pi = averaged_probabilities(fit, None, 3)
    assert np.allclose(pi[:, 1], expit(fit.beta))
    assert np.allclose(pi.sum(axis=1), 1)
    nore = fit_multilevel(cell_observations(_pop(0.0, 0.0, seed=4).tables, re_pop.meta), compute_se=False)
    assert np.allclose(averaged_probabilities(nore, None, 3)[:, 1], expit(nore.beta))


def test_agrees_with_raw_on_nobias_data():
    pop = _pop(0.0, 0.0, seed=9)
    obs = cell_observations(pop.tables, pop.meta)
    fit = fit_multilevel(obs, compute_se=False)
    pi = averaged_probabilities(fit, None, 3)
    assert np.abs(pi - raw_estimates(pop.tables)).max() < 0.01


def test_per_group_models(re_pop):
    obs = cell_observations(re_pop.tables, re_pop.meta)
    with pytest.raises(ValidationError):
        fit_per_group(obs, None, [])
    with pytest.raises(ValidationError):
        fit_per_group(obs, None, [7])
    fits = [fit_per_group(obs, None, [g], compute_se=False) for g in range(3)]
    assert all(len(f.beta) == 1 for f in fits)
    pi = averaged_probabilities(fits, None, 3)
    assert np.abs(pi - raw_estimates(re_pop.tables)).max() < 0.03
    X = np.array([u.x for u in re_pop.units], float)
    cells = predict_cells(fits, X, None)
    assert cells.shape == X.shape and (cells <= X).all()


def test_covariate_slope_recovered():
    slopes = np.zeros((3, 1, 1))
    slopes[:, 0, 0] = -6.0  # the success column is the reference, so eta_nonvote rises
    pop = generate(GeneratorConfig(N=80, S=16, pi0=PI0, size_mean=300, cov_means=(0.3,),
                                   cov_concentration=30, cov_slopes=slopes, sigma_station=0.2,
                                   sigma_seat=0.2, seed=3))
    obs = cell_observations(pop.tables, pop.meta)
    fit = fit_multilevel(obs, pop.covariates, cov_names=["z"])
    k = fit.names.index("z")
    assert abs(fit.beta[k] - 6.0) < 3 * fit.beta_se[k]
    table = fit.coef_table()
    assert table[k]["code"] in ("•", "∗", "⋆", "∘")
