"""Multi-study l2 boosting with merge-vs-ensemble transition analysis.

The package fits l2 boosting with full linear (ridge) or component-wise
least-squares learners on collections of studies, either pooled ("merged")
or study-by-study with weighted averaging ("ensembled"). It computes the
analytic prediction-error comparison between the two strategies, the
heterogeneity transition point/interval where the preference flips, and the
path-conditional error of selected component-wise coefficients via truncated
normal moments. A simulation harness and CLI drive the standard experiment
protocols.
"""

__version__ = "0.1.0"

from .cw_boost import (
    CwBoostFit,
    SelectionPath,
    boost_componentwise,
    build_selection_path,
    cw_aicc_stop,
    cw_closed_form,
    cw_ensemble,
)
from .dataset import (
    BasisSpec,
    ExpandedDesigns,
    ExpandedMatrix,
    Linear,
    MultiStudyDataset,
    Study,
    TruncatedPowerCubic,
    expand_basis,
    load_studies_csv,
    standardize,
)
from .linear_boost import (
    BoostFit,
    LinearLearner,
    aicc_stop,
    boost_linear,
    boosting_operator,
    ensemble_estimator,
    merged_estimator,
    ridge_operators,
)
from .selective import (
    GaussianModel,
    Polyhedron,
    TruncatedNormalParams,
    conditional_mse_ensemble,
    conditional_mse_merged,
    fourier_motzkin_eliminate,
    truncation_limits,
    truncation_region_sequence,
    truncnorm_moments,
)
from .simulate import (
    ExperimentResult,
    GeneratorSpec,
    LearnerConfig,
    MeanFunction,
    build_design,
    export_results,
    generate,
    benchmark_mean_function,
    run_conditional_mse_curve,
    run_transition_sweep,
)
from .transition import (
    MspeBreakdown,
    Recommendation,
    TransitionInputs,
    TransitionReport,
    analytic_mspe_ensemble,
    analytic_mspe_merged,
    compute_r,
    mspe_asymptote,
    recommend,
    transition_interval,
    transition_point,
)
