"""Signal cancellation factor analysis."""

from .cancellation import (
    CancellationResult,
    cancel_multi,
    cancel_pair,
    minimize_maxabs,
    multifactor_loadings,
    pair_loadings,
)
from .clustering import (
    ClusterSet,
    Dendrogram,
    DistanceMatrix,
    build_distances,
    complete_linkage,
    coplanarity_scan,
    gate_clusters,
    render_dendrogram,
)
from .datagen import (
    FactorStructureSpec,
    PopulationModel,
    builtin_challenge_spec,
    population_model,
    sample_data,
)
from .exceptions import (
    DegenerateCombinationError,
    EmptyModelError,
    InconsistentCancellationError,
    InvalidStructureError,
    NotCorrelationError,
    SCFAError,
)
from .solution import (
    FactorSolution,
    MergedIndicator,
    ResidualReport,
    detect_orphans,
    explain_multifactorial,
    factor_correlations,
    implied_correlations,
    merge_indicators,
    residual_report,
    run_scfa,
    unifactorial_loadings,
)
from .stat_core import (
    CholeskyBasis,
    CorrelationInput,
    SignificanceConfig,
    chi2_figure,
    chi_square_cdf,
    chi_square_inv,
    cholesky_basis,
    correlation_from_data,
    normal_quantile,
    project_combination,
    residual_z,
    sidak_level,
)

__version__ = "0.1.0"
