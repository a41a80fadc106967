"""Random matching with mutation, directed matching and break-up.

Mean-field recursion, per-agent transition matrices and a finite-population
simulator for the same discrete-time dynamics.
"""

from .agentsim import (
    EmpiricalSnapshot,
    Population,
    SimulationResult,
    empirical_distribution,
    init_population,
    run_simulation,
    step_breakup,
    step_matching,
    step_mutation,
)
from .harness import ComparisonReport, compare, linf_distance, total_variation
from .markov import TransitionMatrix, build_transition_matrix, evolve, simulate_agent_path
from .meanfield import (
    GammaResult,
    MeanfieldTrajectory,
    breakup_step,
    gamma,
    gamma_closed_form,
    iterate_meanfield,
    matching_step,
    mutation_step,
)
from .scenario import (
    EnvironmentProcess,
    IntensitySpec,
    ScenarioConfig,
    evaluate_intensities,
    load_scenario,
    parse_scenario,
    save_scenario,
    serialize_scenario,
)
from .types import (
    J,
    ExtendedTypeDistribution,
    InfeasibleRounding,
    InputMatrices,
    InvalidInputs,
    MatchfieldError,
    MatchingInfeasible,
    ParseError,
    TypeSpace,
    ValidationReport,
    validate_distribution,
    validate_inputs,
)

__version__ = "0.1.0"
