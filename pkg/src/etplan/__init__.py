"""Event-triggered measurement planning for waypoint navigation.

The pipeline: describe a linear-Gaussian agent and its waypoint course in a
:class:`~etplan.scenario.Scenario`; abstract the closed-loop belief dynamics
into a finite MDP (:func:`~etplan.abstraction.build_mdp`); trace the Pareto
front over reach probability, collision probability, and communication
energy (:func:`~etplan.mo_solver.pareto_front`); pick a strategy off the
front (:func:`~etplan.mo_solver.select_point`); and validate it by
closed-loop Monte Carlo (:func:`~etplan.harness.simulate_strategy`).
"""
from .abstraction import (
    AbstractionConfig,
    BuildResult,
    build_mdp,
    calibrate_regions,
    refinement_probe,
)
from .errors import (
    CalibrationError,
    ConvergenceError,
    EtplanError,
    FileFormatError,
    InfeasibleQueryError,
    InputError,
    InternalError,
    NumericalError,
    ScenarioError,
)
from .harness import (
    EmpiricalObjectives,
    SimulationResult,
    compare_theory_empirical,
    full_kf_baseline,
    simulate_strategy,
)
from .mdp import MOMDP, AbstractState, read_mdp, write_mdp
from .mo_solver import (
    MaxPtar,
    MinCollGivenEnergy,
    MinEnergyGivenPtar,
    ObjectivePoint,
    ParetoFront,
    Strategy,
    evaluate_strategy,
    pareto_front,
    scalarized_value_iteration,
    select_point,
)
from .numerics import GaussianBelief, RngStream
from .prism import export_prism
from .scenario import (
    HyperRect,
    Scenario,
    builtin_scenario_names,
    classify_point,
    load_builtin_scenario,
    load_scenario,
    save_scenario,
)

__version__ = "0.1.0"

__all__ = [
    "AbstractState",
    "AbstractionConfig",
    "BuildResult",
    "CalibrationError",
    "ConvergenceError",
    "EmpiricalObjectives",
    "EtplanError",
    "FileFormatError",
    "GaussianBelief",
    "HyperRect",
    "InfeasibleQueryError",
    "InputError",
    "InternalError",
    "MOMDP",
    "MaxPtar",
    "MinCollGivenEnergy",
    "MinEnergyGivenPtar",
    "NumericalError",
    "ObjectivePoint",
    "ParetoFront",
    "RngStream",
    "Scenario",
    "ScenarioError",
    "SimulationResult",
    "Strategy",
    "build_mdp",
    "builtin_scenario_names",
    "calibrate_regions",
    "classify_point",
    "compare_theory_empirical",
    "evaluate_strategy",
    "export_prism",
    "full_kf_baseline",
    "load_builtin_scenario",
    "load_scenario",
    "pareto_front",
    "read_mdp",
    "refinement_probe",
    "save_scenario",
    "scalarized_value_iteration",
    "select_point",
    "simulate_strategy",
    "write_mdp",
    "__version__",
]
