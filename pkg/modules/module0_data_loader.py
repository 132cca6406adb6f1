"""
Module 0: Data Model and Loader

PURPOSE:
- Define the immutable data model: Trajectory, Dataset, Policy, ReferencePoint, TuningParams
- Validate datasets against the trajectory invariants
- Read and write the transition-per-row CSV schema
- Build target policies (built-in names, probability tables, threshold rules)
- Load the estimator defaults from data/config/config_estimation.json

INPUTS:
- CSV files with header  id,t,s_1..s_d,a,r,sp_1..sp_d  (one row per transition)
- Policy definition JSON files (data/policies/*.json)
- data/config/config_estimation.json

OUTPUTS:
- Dataset objects shared read-only by every downstream module
"""

import hashlib
import json
import re
from dataclasses import dataclass, field
from functools import cached_property, partial
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import pandas as pd

from modules.errors import (
    ActionOutOfRange,
    AdjacencyViolation,
    DimensionMismatch,
    EmptyDataset,
    InvalidPolicyOutput,
    MissingColumn,
    NonContiguousTime,
    NonFiniteInput,
    RaggedTrajectories,
)

# ====================
# CONSTANTS AND CONFIGURATION
# ====================

# Directory paths
BASE_DIR = Path(__file__).parent.parent
DEFAULT_CONFIG_DIR = BASE_DIR / 'data' / 'config'

# Configuration filenames
CONFIG_ESTIMATION_FILE = 'config_estimation.json'
REQUIRED_ESTIMATION_SECTIONS = ['kernel', 'inference', 'tuning']

# CSV schema
COL_ID = 'id'
COL_T = 't'
COL_ACTION = 'a'
COL_REWARD = 'r'
STATE_PREFIX = 's_'
NEXT_STATE_PREFIX = 'sp_'
STATE_COLUMN_PATTERN = re.compile(r'^s_(\d+)$')
CSV_FLOAT_FORMAT = '%.17g'
ADJACENCY_TOLERANCE = 1e-9

# JSON outputs
SCHEMA_VERSION = '1.0'

# Policy checks
PROB_SUM_TOLERANCE = 1e-10

# Built-in policy names
POLICY_ALWAYS = 'always'
POLICY_NEVER = 'never'
POLICY_UNIFORM = 'uniform'
DEFAULT_TREATMENT_ACTION = 1

# Policy file keys
POLICY_TYPE_THRESHOLD = 'threshold'
POLICY_TYPE_TABLE = 'table'


# ====================
# 1. DATA MODEL
# ====================

def _frozen_array(values, dtype):
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Trajectory:
    """
    One unit's record: states (T+1, d), actions (T,), rewards (T,).

    rewards[t] belongs to the transition (states[t], actions[t], states[t+1]).
    """
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    unit_id: str = ''

    def __post_init__(self):
        states = np.array(self.states, dtype=float)
        if states.ndim == 1:
            states = states.reshape(-1, 1)
        states.setflags(write=False)
        object.__setattr__(self, 'states', states)
        object.__setattr__(self, 'actions', _frozen_array(self.actions, int).reshape(-1))
        object.__setattr__(self, 'rewards', _frozen_array(self.rewards, float).reshape(-1))
        object.__setattr__(self, 'unit_id', str(self.unit_id))

    @property
    def length(self):
        return len(self.actions)


@dataclass(frozen=True)
class Dataset:
    """n trajectories with common length T, state dimension d and K_a actions."""
    trajectories: tuple
    d: int
    num_actions: int

    def __post_init__(self):
        object.__setattr__(self, 'trajectories', tuple(self.trajectories))

    @property
    def n(self):
        return len(self.trajectories)

    @property
    def T(self):
        return self.trajectories[0].length if self.trajectories else 0

    @property
    def num_transitions(self):
        return self.n * self.T

    # Transition arrays are stacked trajectory-major: sample j = i*T + t
    @cached_property
    def current_states(self):
        return _frozen_array(np.concatenate([tr.states[:-1] for tr in self.trajectories]), float)

    @cached_property
    def next_states(self):
        return _frozen_array(np.concatenate([tr.states[1:] for tr in self.trajectories]), float)

    @cached_property
    def actions(self):
        return _frozen_array(np.concatenate([tr.actions for tr in self.trajectories]), int)

    @cached_property
    def rewards(self):
        return _frozen_array(np.concatenate([tr.rewards for tr in self.trajectories]), float)

    @cached_property
    def trajectory_index(self):
        return _frozen_array(np.repeat(np.arange(self.n), self.T), int)

    @cached_property
    def all_states(self):
        """Every observed state, including the final next-state of each unit."""
        return _frozen_array(np.concatenate([tr.states for tr in self.trajectories]), float)

    def subset(self, indices):
        """Dataset made of the trajectories at the given indices (order kept)."""
        return Dataset(
            trajectories=tuple(self.trajectories[i] for i in indices),
            d=self.d,
            num_actions=self.num_actions,
        )

    @cached_property
    def fingerprint(self):
        """SHA-256 over the transition arrays; identifies the data a fit was trained on."""
        digest = hashlib.sha256()
        digest.update(np.array([self.n, self.T, self.d, self.num_actions], dtype=np.int64).tobytes())
        for arr in (self.current_states, self.actions, self.rewards, self.next_states):
            digest.update(np.ascontiguousarray(arr).tobytes())
        return digest.hexdigest()


@dataclass(frozen=True)
class Policy:
    """
    Time-invariant Markov target policy.

    prob maps one state vector to a probability vector over the K_a actions.
    batch_prob, when given, maps an (m, d) state array to an (m, K_a) matrix and is
    used for speed; it must agree with prob row by row.
    """
    prob: Callable
    label: str
    batch_prob: Optional[Callable] = field(default=None, compare=False)


@dataclass(frozen=True)
class ReferencePoint:
    """Anchor (s*, a*) at which every member of the Q-class vanishes."""
    s_star: np.ndarray
    a_star: int

    def __post_init__(self):
        object.__setattr__(self, 's_star', _frozen_array(self.s_star, float).reshape(-1))
        object.__setattr__(self, 'a_star', int(self.a_star))


@dataclass(frozen=True)
class TuningParams:
    """(lambda, mu) for the value fit and (lambda_tilde, mu_tilde) for the direction fit."""
    lam: float
    mu: float
    lam_tilde: Optional[float] = None
    mu_tilde: Optional[float] = None

    def __post_init__(self):
        if self.lam_tilde is None:
            object.__setattr__(self, 'lam_tilde', self.lam)
        if self.mu_tilde is None:
            object.__setattr__(self, 'mu_tilde', self.mu)
        for name in ('lam', 'mu', 'lam_tilde', 'mu_tilde'):
            value = float(getattr(self, name))
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"Tuning parameter '{name}' must be strictly positive, got {value}")
            object.__setattr__(self, name, value)

    def to_dict(self):
        return {'lambda': self.lam, 'mu': self.mu,
                'lambda_tilde': self.lam_tilde, 'mu_tilde': self.mu_tilde}


def default_reference_point(data):
    """Anchor at the coordinate-wise mean of observed current states with action 0."""
    return ReferencePoint(s_star=data.current_states.mean(axis=0), a_star=0)


def validate_reference_point(anchor, data):
    if anchor.s_star.shape[0] != data.d:
        raise DimensionMismatch(
            f"Reference state has dimension {anchor.s_star.shape[0]}, dataset has d={data.d}"
        )
    if not 0 <= anchor.a_star < data.num_actions:
        raise ActionOutOfRange(
            f"Reference action {anchor.a_star} outside 0..{data.num_actions - 1}"
        )


# ====================
# 2. VALIDATION
# ====================

def validate_dataset(raw):
    """
    Check every Trajectory/Dataset invariant and return the dataset unchanged.

    Raises the error for the first violated invariant, naming the trajectory index.

    Raises:
        EmptyDataset, DimensionMismatch, RaggedTrajectories, ActionOutOfRange, NonFiniteInput
    """
    if raw.n == 0:
        raise EmptyDataset("Dataset contains no trajectories")

    common_t = raw.trajectories[0].length
    for i, tr in enumerate(raw.trajectories):
        if tr.states.ndim != 2 or tr.states.shape[1] != raw.d:
            raise DimensionMismatch(
                f"Trajectory {i}: state dimension {tr.states.shape[-1]} != d={raw.d}"
            )
        if not (len(tr.states) == len(tr.actions) + 1 == len(tr.rewards) + 1):
            raise RaggedTrajectories(
                f"Trajectory {i}: {len(tr.states)} states, {len(tr.actions)} actions, "
                f"{len(tr.rewards)} rewards (need states = actions + 1 = rewards + 1)"
            )
        if tr.length == 0:
            raise RaggedTrajectories(f"Trajectory {i}: no transitions")
        if tr.length != common_t:
            raise RaggedTrajectories(
                f"Trajectory {i}: length T={tr.length} differs from T={common_t} of trajectory 0"
            )
        bad = (tr.actions < 0) | (tr.actions >= raw.num_actions)
        if bad.any():
            t = int(np.flatnonzero(bad)[0])
            raise ActionOutOfRange(
                f"Trajectory {i}, t={t}: action {tr.actions[t]} outside 0..{raw.num_actions - 1}"
            )
        if not np.isfinite(tr.rewards).all():
            raise NonFiniteInput(f"Trajectory {i}: non-finite reward")
        if not np.isfinite(tr.states).all():
            raise NonFiniteInput(f"Trajectory {i}: non-finite state value")

    return raw


def dataset_from_arrays(states, actions, rewards, num_actions, unit_ids=None):
    """
    Build a validated Dataset from stacked arrays.

    Args:
        states: (n, T+1, d) array
        actions: (n, T) integer array
        rewards: (n, T) array
        num_actions: K_a
        unit_ids: optional list of n identifiers (defaults to '1'..'n')
    """
    states = np.asarray(states, dtype=float)
    if states.ndim == 2:
        states = states[:, :, None]
    n = states.shape[0]
    if unit_ids is None:
        unit_ids = [str(i + 1) for i in range(n)]
    trajectories = tuple(
        Trajectory(states=states[i], actions=actions[i], rewards=rewards[i], unit_id=unit_ids[i])
        for i in range(n)
    )
    return validate_dataset(Dataset(trajectories=trajectories, d=states.shape[2], num_actions=num_actions))


# ====================
# 3. CSV INGESTION / EXPORT
# ====================

def _state_columns(prefix, d):
    return [f'{prefix}{k}' for k in range(1, d + 1)]


def infer_state_dimension(columns):
    """Count the s_k columns of a CSV header."""
    return sum(1 for col in columns if STATE_COLUMN_PATTERN.match(str(col)))


def load_csv(path, d=None, num_actions=None):
    """
    Read a transition-per-row CSV into a validated Dataset.

    Rows are grouped by unit id (first-appearance order) and sorted by t. Within a unit,
    t must run 1..T without gaps and the next-state of row t must equal the state of
    row t+1 within 1e-9.

    Args:
        path: CSV file path
        d: state dimension (inferred from the s_k columns when None)
        num_actions: K_a (max observed action + 1 when None)

    Raises:
        FileNotFoundError, MissingColumn, NonContiguousTime, AdjacencyViolation
    """
    csv_path = Path(path)
    if not csv_path.exists():
        raise FileNotFoundError(
            f"Dataset CSV not found at {csv_path}\n"
            f"Expected header: {COL_ID},{COL_T},s_1..s_d,{COL_ACTION},{COL_REWARD},sp_1..sp_d"
        )

    df = pd.read_csv(csv_path, dtype={COL_ID: str}, float_precision='round_trip')

    if d is None:
        d = infer_state_dimension(df.columns)
        if d == 0:
            raise MissingColumn(f"{csv_path}: no state columns '{STATE_PREFIX}1..' in header")

    state_cols = _state_columns(STATE_PREFIX, d)
    next_cols = _state_columns(NEXT_STATE_PREFIX, d)
    required = [COL_ID, COL_T] + state_cols + [COL_ACTION, COL_REWARD] + next_cols
    for col in required:
        if col not in df.columns:
            raise MissingColumn(f"{csv_path}: missing column '{col}'")

    if df.empty:
        raise EmptyDataset(f"{csv_path}: no transition rows")

    if num_actions is None:
        num_actions = int(df[COL_ACTION].max()) + 1

    trajectories = []
    for unit_id in pd.unique(df[COL_ID]):
        unit = df[df[COL_ID] == unit_id].sort_values(COL_T)
        times = unit[COL_T].to_numpy()
        if not np.array_equal(times, np.arange(1, len(unit) + 1)):
            raise NonContiguousTime(
                f"{csv_path}: unit '{unit_id}' has time indices {times.tolist()}, expected 1..{len(unit)}"
            )

        states = unit[state_cols].to_numpy(dtype=float)
        next_states = unit[next_cols].to_numpy(dtype=float)
        gaps = np.abs(next_states[:-1] - states[1:])
        if gaps.size and gaps.max() > ADJACENCY_TOLERANCE:
            t = int(np.flatnonzero(gaps.max(axis=1) > ADJACENCY_TOLERANCE)[0]) + 1
            raise AdjacencyViolation(
                f"{csv_path}: unit '{unit_id}' row t={t + 1} state differs from row t={t} next-state"
            )

        trajectories.append(Trajectory(
            states=np.vstack([states, next_states[-1:]]),
            actions=unit[COL_ACTION].to_numpy(dtype=int),
            rewards=unit[COL_REWARD].to_numpy(dtype=float),
            unit_id=unit_id,
        ))

    return validate_dataset(Dataset(trajectories=tuple(trajectories), d=d, num_actions=num_actions))


def dataset_to_frame(data):
    """Flatten a dataset to the transition-per-row schema."""
    state_cols = _state_columns(STATE_PREFIX, data.d)
    next_cols = _state_columns(NEXT_STATE_PREFIX, data.d)
    frame = pd.DataFrame({
        COL_ID: np.repeat([tr.unit_id for tr in data.trajectories], data.T),
        COL_T: np.tile(np.arange(1, data.T + 1), data.n),
    })
    frame[state_cols] = data.current_states
    frame[COL_ACTION] = data.actions
    frame[COL_REWARD] = data.rewards
    frame[next_cols] = data.next_states
    return frame


def write_csv(data, path):
    """Write a dataset with round-trip float formatting."""
    out_path = Path(path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    dataset_to_frame(data).to_csv(out_path, index=False, float_format=CSV_FLOAT_FORMAT)
    return out_path


# ====================
# 4. POLICIES
# ====================

def _check_prob_rows(matrix, num_actions, context):
    if matrix.ndim != 2 or (num_actions is not None and matrix.shape[1] != num_actions):
        raise InvalidPolicyOutput(
            f"{context}: expected probability rows of length {num_actions}, got shape {matrix.shape}"
        )
    if not np.isfinite(matrix).all() or (matrix < 0).any():
        raise InvalidPolicyOutput(f"{context}: probabilities must be finite and nonnegative")
    sums = matrix.sum(axis=1)
    worst = np.abs(sums - 1.0)
    if (worst > PROB_SUM_TOLERANCE).any():
        row = int(np.argmax(worst))
        raise InvalidPolicyOutput(f"{context}: row {row} sums to {sums[row]!r}, not 1")


def policy_prob_matrix(policy, states, num_actions=None):
    """
    Evaluate a policy on a list of states.

    Returns:
        np.ndarray: (num_states, K_a) matrix, row i = policy.prob(states[i])

    Raises:
        ValueError: if states is empty
        InvalidPolicyOutput: if a row is not a probability vector
    """
    states = np.asarray(states, dtype=float)
    if states.ndim == 1:
        states = states.reshape(-1, 1) if num_actions is None else states.reshape(1, -1)
    if len(states) == 0:
        raise ValueError("policy_prob_matrix needs at least one state")

    if policy.batch_prob is not None:
        matrix = np.asarray(policy.batch_prob(states), dtype=float)
    else:
        matrix = np.array([np.asarray(policy.prob(s), dtype=float) for s in states])

    _check_prob_rows(matrix, num_actions, f"Policy '{policy.label}'")
    return matrix


def _constant_prob(state, probs):
    return probs.copy()


def _constant_batch(states, probs):
    return np.tile(probs, (len(states), 1))


def make_constant_policy(probs, label):
    """Policy that ignores the state."""
    probs = np.asarray(probs, dtype=float)
    _check_prob_rows(probs.reshape(1, -1), len(probs), f"Policy '{label}'")
    return Policy(prob=partial(_constant_prob, probs=probs), label=label,
                  batch_prob=partial(_constant_batch, probs=probs))


def make_builtin_policy(name, num_actions):
    """
    Built-in policies: 'always:a', 'always' (= always:1), 'never' (= always:0), 'uniform'.
    """
    if name == POLICY_UNIFORM:
        return make_constant_policy(np.full(num_actions, 1.0 / num_actions), POLICY_UNIFORM)
    if name == POLICY_NEVER:
        action = 0
    elif name == POLICY_ALWAYS:
        action = DEFAULT_TREATMENT_ACTION
    elif name.startswith(f'{POLICY_ALWAYS}:'):
        try:
            action = int(name.split(':', 1)[1])
        except ValueError:
            raise InvalidPolicyOutput(f"Unknown built-in policy '{name}'")
    else:
        raise InvalidPolicyOutput(
            f"Unknown built-in policy '{name}' (use always:a, always, never, uniform or a JSON file)"
        )
    if not 0 <= action < num_actions:
        raise ActionOutOfRange(f"Policy '{name}': action {action} outside 0..{num_actions - 1}")
    probs = np.zeros(num_actions)
    probs[action] = 1.0
    return make_constant_policy(probs, name)


def _coordinate_index(coordinate, d):
    """Accept 's_k' names (1-based, as in the CSV header) or 0-based integers."""
    if isinstance(coordinate, str):
        match = STATE_COLUMN_PATTERN.match(coordinate)
        if not match:
            raise InvalidPolicyOutput(f"Unknown state coordinate '{coordinate}'")
        index = int(match.group(1)) - 1
    else:
        index = int(coordinate)
    if not 0 <= index < d:
        raise DimensionMismatch(f"State coordinate {coordinate} outside a {d}-dimensional state")
    return index


def _threshold_batch(states, index, threshold, above, below):
    mask = np.asarray(states, dtype=float)[:, index] >= threshold
    return np.where(mask[:, None], above, below)


def _threshold_prob(state, index, threshold, above, below):
    return _threshold_batch(np.asarray(state, dtype=float).reshape(1, -1), index, threshold, above, below)[0]


def make_threshold_policy(label, coordinate, threshold, above, below, num_actions, d):
    """Use `above` when state[coordinate] >= threshold, otherwise `below`."""
    index = _coordinate_index(coordinate, d)
    above = np.asarray(above, dtype=float)
    below = np.asarray(below, dtype=float)
    _check_prob_rows(np.vstack([above, below]), num_actions, f"Policy '{label}'")
    kwargs = dict(index=index, threshold=float(threshold), above=above, below=below)
    return Policy(prob=partial(_threshold_prob, **kwargs), label=label,
                  batch_prob=partial(_threshold_batch, **kwargs))


def _table_batch(states, indices, edges, table, default):
    states = np.asarray(states, dtype=float)
    bins = np.column_stack([
        np.searchsorted(edge, states[:, idx], side='right') for idx, edge in zip(indices, edges)
    ])
    rows = []
    for key in map(tuple, bins):
        probs = table.get(key, default)
        if probs is None:
            raise InvalidPolicyOutput(f"Probability table has no entry for bin {key} and no default")
        rows.append(probs)
    return np.array(rows)


def _table_prob(state, indices, edges, table, default):
    return _table_batch(np.asarray(state, dtype=float).reshape(1, -1), indices, edges, table, default)[0]


def make_table_policy(label, bins, probs, num_actions, d, default=None):
    """
    Probability table keyed by discretized state bins.

    Args:
        bins: list of {'coordinate': 's_k', 'edges': [...]} ; bin index = searchsorted(edges, value, 'right')
        probs: {'i,j,...': [p_0, ..., p_{K-1}]} keyed by comma-joined bin indices
        default: probability row for bins missing from the table
    """
    indices = tuple(_coordinate_index(b['coordinate'], d) for b in bins)
    edges = tuple(np.sort(np.asarray(b['edges'], dtype=float)) for b in bins)
    table = {}
    for key, row in probs.items():
        parsed = tuple(int(part) for part in str(key).split(','))
        if len(parsed) != len(indices):
            raise InvalidPolicyOutput(f"Policy '{label}': table key '{key}' does not match {len(indices)} bins")
        table[parsed] = np.asarray(row, dtype=float)
    check_rows = list(table.values()) + ([np.asarray(default, dtype=float)] if default is not None else [])
    if not check_rows:
        raise InvalidPolicyOutput(f"Policy '{label}': empty probability table")
    _check_prob_rows(np.vstack(check_rows), num_actions, f"Policy '{label}'")
    kwargs = dict(indices=indices, edges=edges, table=table,
                  default=None if default is None else np.asarray(default, dtype=float))
    return Policy(prob=partial(_table_prob, **kwargs), label=label,
                  batch_prob=partial(_table_batch, **kwargs))


def load_policy_file(path, num_actions, d):
    """
    Load a threshold-rule or probability-table policy from JSON.

    Raises:
        FileNotFoundError, json.JSONDecodeError, InvalidPolicyOutput
    """
    policy_path = Path(path)
    if not policy_path.exists():
        raise FileNotFoundError(f"Policy file not found at {policy_path}")
    try:
        with open(policy_path, 'r', encoding='utf-8') as f:
            spec = json.load(f)
    except json.JSONDecodeError as e:
        raise json.JSONDecodeError(f"Invalid JSON in {policy_path}: {e.msg}", e.doc, e.pos)

    label = spec.get('label', policy_path.stem)
    kind = spec.get('type')
    try:
        if kind == POLICY_TYPE_THRESHOLD:
            return make_threshold_policy(label, spec['coordinate'], spec['threshold'],
                                         spec['above'], spec['below'], num_actions, d)
        if kind == POLICY_TYPE_TABLE:
            return make_table_policy(label, spec['bins'], spec['probs'], num_actions, d,
                                     default=spec.get('default'))
    except KeyError as e:
        raise InvalidPolicyOutput(f"Policy file {policy_path} missing key {e}")
    raise InvalidPolicyOutput(
        f"Policy file {policy_path}: type must be '{POLICY_TYPE_THRESHOLD}' or '{POLICY_TYPE_TABLE}'"
    )


def resolve_policy(spec, num_actions, d):
    """A CLI policy argument: a built-in name or a path to a policy JSON file."""
    if str(spec).endswith('.json') or Path(spec).is_file():
        return load_policy_file(spec, num_actions, d)
    return make_builtin_policy(spec, num_actions)


# ====================
# 5. CONFIGURATION
# ====================

def load_estimation_config(config_dir=DEFAULT_CONFIG_DIR):
    """
    Load estimator defaults from config_estimation.json.

    Returns:
        dict: sections kernel, inference, tuning

    Raises:
        FileNotFoundError: If the config file doesn't exist
        ValueError: If required sections are missing
        json.JSONDecodeError: If the JSON is malformed
    """
    config_path = Path(config_dir) / CONFIG_ESTIMATION_FILE

    if not config_path.exists():
        raise FileNotFoundError(
            f"Estimation config not found at {config_path}\n"
            f"Please ensure {CONFIG_ESTIMATION_FILE} exists in {config_dir}/"
        )

    try:
        with open(config_path, 'r', encoding='utf-8') as f:
            config = json.load(f)
    except json.JSONDecodeError as e:
        raise json.JSONDecodeError(
            f"Invalid JSON in {config_path}: {e.msg}",
            e.doc, e.pos
        )

    missing_sections = [section for section in REQUIRED_ESTIMATION_SECTIONS if section not in config]
    if missing_sections:
        raise ValueError(
            f"Missing required sections in {config_path}: {', '.join(missing_sections)}\n"
            f"Required sections: {', '.join(REQUIRED_ESTIMATION_SECTIONS)}"
        )

    return config
