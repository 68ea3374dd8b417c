"""coverbias: audit population coverage bias in device-derived counts.

The toolkit measures how far digital trace populations (GPS home
locations, tile-aggregated active users, geolocated posts) fall short of
a census benchmark at small-area level, tests the resulting bias
surface for spatial clustering, and explains it with boosted regression
trees plus exact per-area attributions. Brute-force oracles for the
statistical machinery ship in :mod:`coverbias.synth` so every fast path
can be audited.
"""

from .bias import (
    BiasRow,
    BiasTable,
    ComparisonRow,
    CoverageSummary,
    coverage_bias,
    national_summary,
    survey_comparison,
)
from .boost import (
    BoostParams,
    Dataset,
    FitReport,
    TreeEnsemble,
    default_grid,
    evaluate,
    fit,
    grid_search_cv,
    make_dataset,
    predict,
    split_train_test,
)
from .errors import (
    CoverageBiasError,
    DegenerateDenominator,
    DegenerateInput,
    DomainError,
    DuplicateKey,
    EmptySelection,
    GeometryError,
    ParseError,
    SchemaError,
)
from .explain import (
    ImportanceProfile,
    ShapMatrix,
    beeswarm_export,
    dependence_export,
    importance_profile,
    loess_curve,
    tree_shap,
)
from .homeloc import HomeRule, TileKey, aggregate_homes, detect_home, detect_homes
from .ingest import (
    Area,
    AreaSet,
    CountTable,
    CovariateTable,
    Feature,
    PingStream,
    load_area_geometries,
    load_count_table,
    load_covariates,
    load_pings,
    validate_alignment,
)
from .spatial import (
    MoranResult,
    SpatialWeights,
    build_weights,
    morans_i,
    pearson,
    permutation_test,
    scheme_range,
)
from .synth import (
    ScenarioSpec,
    generate_counts,
    generate_world,
    load_scenario,
    morans_naive,
    shapley_bruteforce,
)

__version__ = "0.1.0"
