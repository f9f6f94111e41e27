"""Multi-TransNet: transferable neural networks with domain decomposition for
elliptic interface problems."""

from .assembly import (
    AssembledSystem,
    Condition,
    EquationBlock,
    ModelLayout,
    OperatorRowSpec,
    SolutionModel,
    Term,
    WeightMode,
    assemble,
    assemble_and_solve,
    build_block,
    compute_weights,
    evaluate,
    posterior_indicator,
    solve,
)
from .benchmarks import BenchmarkProblem, ErrorReport, error_metrics, exact_values, make_problem
from .geometry import BallCover, DomainPartition, PointCloud, classify, latin_hypercube_test_points
from .neuronbank import NeuronBank, basis_derivative, basis_eval, density, generate_bank
from .shapes import allocate_neurons, golden_section, link_shapes, optimize_multinet_shape, predict_shape

__version__ = "0.1.0"
