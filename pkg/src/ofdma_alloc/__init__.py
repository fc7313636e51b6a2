"""Joint subcarrier, power, CPU-frequency and compression-rate allocation for
federated learning with semantic uploads over OFDMA."""
from .alternating import AllocateConfig, SolveReport, allocate, feasible_init
from .baselines import (GridSpec, comm_only, comp_only, equal_allocation, exhaustive_search, kkt_residuals,
                        random_allocation)
from .cpu_compression import solve_cpu_compression
from .errors import BudgetError, ConfigError, DomainError, InfeasibleError, SamplingError
from .metrics import Allocation, CostBreakdown, Weights, objective
from .power_assignment import round_and_polish, solve_power_assignment
from .scenario import Scenario, SystemConstants, generate_scenario

__all__ = [
    "AllocateConfig", "SolveReport", "allocate", "feasible_init",
    "GridSpec", "comm_only", "comp_only", "equal_allocation", "exhaustive_search", "kkt_residuals",
    "random_allocation", "solve_cpu_compression",
    "BudgetError", "ConfigError", "DomainError", "InfeasibleError", "SamplingError",
    "Allocation", "CostBreakdown", "Weights", "objective",
    "round_and_polish", "solve_power_assignment",
    "Scenario", "SystemConstants", "generate_scenario",
]
