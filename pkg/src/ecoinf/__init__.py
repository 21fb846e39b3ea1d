"""Ecological inference for R x C voter-transition tables."""

from .brown_payne import BPFit, BPVarianceSpec, bp_covariance, bp_mean, bp_predict_cells, fit_brown_payne
from .core import (
    Dataset,
    DatasetMeta,
    IndividualTable,
    TransitionMatrix,
    UnitAggregate,
    ValidationError,
    accounting_identity_holds,
    aggregate,
    proportions,
    validate_dataset,
)
from .diagnostics import (
    bias_condition_test,
    compare_estimates,
    prediction_error_sd,
    quartile_summary,
    significance_code,
)
from .goodman import RankDeficientError, fit_goodman, goodman_residuals
from .king import fit_king_ols, king_gradient, king_objective
from .links import LinkParams
from .multilevel import (
    averaged_probabilities,
    cell_observations,
    fit_multilevel,
    fit_per_group,
    raw_estimates,
)
from .synth import GeneratorConfig, generate, palermo_like_config, table1_fixture

__version__ = "0.1.0"
