"""Simulation and numerical analysis of controlled mean-field interacting particle systems."""

__version__ = "0.1.0"

from .core import (ControlSet, NumericalError, PayoffFamily, PopulationState, PrincipalSpec,
                   RateFamily, SimplexState, Trajectory, ValidationError, constant_rates,
                   imitation_rates, pressure_resistance_rates, validate_q_matrix, zero_rates)
from .chain import (LatticeIndex, ensemble_ctmc, exact_transition_expectation, generator_matrix,
                    simulate_ctmc, stationary_distribution)
from .kinetic import integrate_kinetic, integrate_replicator, solve_ode
from .principal import BestResponseMap, best_response, integrate_controlled
from .models import build_model, load_model
from .equilibria import find_rest_points, hawk_dove_equilibria, verify_epsilon_nash
from .control import (ControlProblemSpec, SimplexLattice, ValueField, shapley_step_chain,
                      shapley_step_limit, value_iterate, zero_sum_values)
from .growth import CoalitionState, GrowthRates, integrate_growth, smoluchowski_rhs

__all__ = [name for name in dir() if not name.startswith("_")]
