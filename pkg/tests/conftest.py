"""
Pytest Configuration and Shared Fixtures

This module provides shared fixtures for testing the off-policy estimation framework.
"""

import copy
import json
from pathlib import Path

import numpy as np
import pytest

from modules.module0_data_loader import Policy, ReferencePoint, load_estimation_config, make_builtin_policy
from modules.module1_kernel import KernelSpec
from modules.module5_simulator import LuckettModelConfig, load_finite_mdp, simulate_luckett

REPO_ROOT = Path(__file__).parent.parent


def _table_row(state, table):
    return table[int(np.argmax(state))]


def _table_rows(states, table):
    return table[np.argmax(np.asarray(states, dtype=float), axis=1)]


def tabular_policy(table, label='tabular'):
    """Policy over one-hot states given as an (S, A) probability table."""
    table = np.asarray(table, dtype=float)
    return Policy(prob=lambda s: _table_row(s, table), label=label,
                  batch_prob=lambda states: _table_rows(states, table))


@pytest.fixture
def make_tabular_policy():
    """Factory for policies on one-hot finite-MDP states."""
    return tabular_policy


@pytest.fixture
def luckett_data():
    """Small benchmark dataset: 6 trajectories of length 5."""
    return simulate_luckett(LuckettModelConfig(seed=3), n=6, T=5)


@pytest.fixture
def luckett_data_other():
    """A second benchmark dataset drawn with a different seed."""
    return simulate_luckett(LuckettModelConfig(seed=4), n=6, T=5)


@pytest.fixture
def always_policy():
    return make_builtin_policy('always', 2)


@pytest.fixture
def never_policy():
    return make_builtin_policy('never', 2)


@pytest.fixture
def kernel_unit():
    """Delta-action Gaussian kernel with unit bandwidth."""
    return KernelSpec(bandwidth=1.0)


@pytest.fixture
def origin_anchor():
    """Anchor at the origin of the 2-d benchmark state space with action 0."""
    return ReferencePoint(s_star=np.zeros(2), a_star=0)


@pytest.fixture
def two_state_mdp():
    """Two states, uniform transitions, r(0,1)=1, r(1,1)=3, zero for action 0."""
    return load_finite_mdp(REPO_ROOT / 'data' / 'mdp' / 'mdp_two_state.json')


@pytest.fixture
def small_estimation_config():
    """Estimator defaults with a 2 x 2 tuning grid."""
    config = copy.deepcopy(load_estimation_config())
    config['tuning']['grid_size'] = 2
    return config


@pytest.fixture
def smoke_run_config():
    """Run configuration for a 2-replication coverage study with frozen oracle values."""
    return {
        'description': 'test run',
        'command': 'coverage',
        'n_values': [6],
        'T_values': [5],
        'num_replications': 2,
        'policies': ['always', 'never'],
        'cases': ['pi1', 'pi2', 'contrast'],
        'ci_level': 0.95,
        'base_seed': 11,
        'oracle_eta': {'always': 0.3, 'never': -0.2},
        'tuning': {'grid_size': 2},
    }


@pytest.fixture
def smoke_run_config_file(tmp_path, smoke_run_config):
    """The smoke run configuration written to a JSON file."""
    path = tmp_path / 'run_config.json'
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(smoke_run_config, f)
    return path
