import os

import pytest

from srecmfg import base_scenario_config, solve_fixed_point
from srecmfg.config import load_config

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
BASE_CFG = os.path.join(ROOT, "configs", "paper_base.cfg")
PENALTY_FREE_CFG = os.path.join(ROOT, "configs", "penalty_free.cfg")


@pytest.fixture(scope="session")
def base_config():
    return load_config(BASE_CFG)


@pytest.fixture(scope="session")
def base_solution():
    """Two-class base scenario at the default resolution."""
    return solve_fixed_point(base_scenario_config())


@pytest.fixture(scope="session")
def fine_solution():
    """Same scenario on a 1601-node inventory grid (first-order optimality checks)."""
    return solve_fixed_point(base_scenario_config(x_nodes=1601))


@pytest.fixture(scope="session")
def base_solution_dir(base_solution, tmp_path_factory):
    from srecmfg.io import emit_solution

    out = tmp_path_factory.mktemp("base_solution")
    emit_solution(base_solution, out)
    return str(out)
