"""koopbound: data-driven bilinear optimal control with deviation certificates.

Pipeline: lift states through a monomial dictionary, identify a bilinear
model from trajectory data by least squares, solve the nominal optimal
control problem with a state-dependent Riccati equation, and bound / measure
how far the resulting controller and value function deviate from the true
optimum under the identified error envelope.
"""

__version__ = "0.1.0"

from .control import (
    CareSolution,
    CareSolverError,
    NominalSolution,
    SdreController,
    gradient_energy,
    input_matrix,
    nominal_solution,
    simulate_nominal,
    solve_care,
)
from .deviation import (
    DeviationReport,
    adversarial_error_sweep,
    controller_deviation_bound,
    grid_sweep,
    measure_controller_deviation,
    measure_value_deviation,
    value_deviation_bound,
)
from .dynamics import (
    ControlAffineSystem,
    DivergenceError,
    OcpWeights,
    Trajectory,
    analytic_controller,
    analytic_value,
    benchmark_system,
    hjb_residual,
    integrate,
    make_weights,
    quadratic_cost,
)
from .edmd import (
    DataSet,
    LiftedBilinearModel,
    assemble_matrices,
    collect_data,
    fit_error_coefficients,
    identify,
    identify_model,
    residuals,
)
from .lifting import (
    DictionaryBasis,
    LipschitzEstimate,
    build_monomial_basis,
    jacobian,
    lift,
    lipschitz_constant,
    projection_matrix,
)

__all__ = [
    "__version__",
    "CareSolution",
    "CareSolverError",
    "NominalSolution",
    "SdreController",
    "gradient_energy",
    "input_matrix",
    "nominal_solution",
    "simulate_nominal",
    "solve_care",
    "DeviationReport",
    "adversarial_error_sweep",
    "controller_deviation_bound",
    "grid_sweep",
    "measure_controller_deviation",
    "measure_value_deviation",
    "value_deviation_bound",
    "ControlAffineSystem",
    "DivergenceError",
    "OcpWeights",
    "Trajectory",
    "analytic_controller",
    "analytic_value",
    "benchmark_system",
    "hjb_residual",
    "integrate",
    "make_weights",
    "quadratic_cost",
    "DataSet",
    "LiftedBilinearModel",
    "assemble_matrices",
    "collect_data",
    "fit_error_coefficients",
    "identify",
    "identify_model",
    "residuals",
    "DictionaryBasis",
    "LipschitzEstimate",
    "build_monomial_basis",
    "jacobian",
    "lift",
    "lipschitz_constant",
    "projection_matrix",
]
