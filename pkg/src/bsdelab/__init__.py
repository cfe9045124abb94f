"""Monte Carlo laboratory for BSDEs with stochastic Lipschitz generators."""

from .paths import (
    AdaptedProcess,
    BrownianLattice,
    CumulativeBudget,
    PartitionSpec,
    TimeGrid,
    build_partition,
    generate_lattice,
    pathwise_ito_integral,
    pathwise_lebesgue_integral,
    required_subintervals,
)
from .generators import Assumption, GeneratorSpec, Problem, build_problem, catalog
from .solver import RegressionBasis, SolutionPair, SolverConfig, solve
from .norms import mp_norm, sp_norm

__version__ = "0.1.0"
