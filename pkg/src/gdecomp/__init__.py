"""Density-based decomposition of stochastic control problems with multiple defaults."""

from .model import (
    ControlProblemSpec,
    ControlSet,
    EvalContext,
    FiniteTree,
    GOptionalTuple,
    Layout,
    MarkSpace,
    MonteCarloRegression,
    NumericalError,
    OrderedScenario,
    RegimeSpec,
    StateGrid,
    TimeGrid,
    TWO_NAMES,
    ValidationReport,
    ordered_layout,
    orderize,
    validate_spec,
)
from .density import (
    DensityFamily,
    ThetaRule,
    IndexedDensity,
    exponential_pmf,
    grid_index,
    independent_product,
    marginalize,
    martingale_check,
    partition_check,
    pmf_density,
    pmf_from_entries,
    poisson_density,
    reduce_to_ordered,
    survival_prob,
)

__version__ = "0.1.0"
