"""Trace-driven cluster simulation."""
from __future__ import annotations
from .apps import BagOfTasksApp, BatchCheckpointApp, RigidApp, apportion, checkpoint_interval
from .engine import Simulator, run
from .experiments import (
    DIVERSITY_TIERS,
    black_swan,
    compare_policies,
    diversity_portfolios,
    diversity_sweep,
    load_matrix,
    policy_cells,
    rows_csv,
    with_spike,
)
from .report import AppResult, SimReport
from .scenario import (
    ApplicationSpec,
    Scenario,
    app_from_mapping,
    fixed_portfolio,
    load_jobs,
    load_scenario,
    synthetic_jobs,
    write_jobs,
)
