"""finescale: constrained statistical downscaling of gridded fields.

Converts a coarse-resolution field into ensembles of fine-resolution fields
by conditional simulation under an exact aggregation constraint, using
low-rank basis-function covariances optionally fused with a sparse-precision
Markov random field, and a forward data-driven basis selection loop.
"""

__version__ = "0.1.0"

from .basis import BasisFunction, BasisSet, eval_basis_matrix, place_equally_spaced, wendland
from .downscale import (
    ConditionalField,
    Ensemble,
    conditional_moments,
    conditional_sample,
    ensemble,
    unconditional_sample,
    verify_proposition1,
)
from .estimation import EmConfig, FittedModel, compute_bic, fit_em
from .geometry import (
    AggregationMatrix,
    BAUGrid,
    CoarseGrid,
    ProximityMatrix,
    aggregate,
    build_aggregation_matrix,
    build_coarse_partition,
    build_proximity,
    build_regular_lattice,
    distance,
    load_bau_grid,
)
from .model import FGP, FRK, FastSolver, ModelParams, build_solver
from .selection import SelectionConfig, SelectionTrace, forward_select
from .variogram import SemivariogramFit, effective_range, empirical_semivariogram, fit_exponential_wls
