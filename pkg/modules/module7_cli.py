"""
Module 7: Command-Line Interface

PURPOSE:
- `simulate`: draw a dataset from the benchmark model or a finite MDP and write the CSV
- `evaluate`: tune, fit, build Sigma_hat and write CIs / contrasts as JSON
- `coverage`: run the Monte-Carlo coverage table from a run-configuration file

INPUTS:
- Command-line flags; run configurations are JSON (.json) or TOML (.toml) documents

OUTPUTS:
- Files at the declared --out paths only
- Exit codes: 0 success, 1 runtime failure, 2 bad flags or invalid configuration

USAGE:
    python main.py simulate --model luckett --n 25 --t 50 --seed 7 --out data.csv
    python main.py evaluate --data data.csv --policy always --policy never --seed 1 --out result.json
    python main.py coverage --config data/config/config_coverage_smoke.json --out output/coverage
"""

import argparse
import copy
import json
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError

from modules.errors import ConfigError, OffPolicyError
from modules.module0_data_loader import load_csv, resolve_policy, write_csv
from modules.module1_kernel import ACTION_RULE_DELTA
from modules.module4_inference import run_evaluation, save_inference
from modules.module5_simulator import (
    DEFAULT_BEHAVIOR_PROB,
    DEFAULT_NOISE_SD,
    LuckettModelConfig,
    load_finite_mdp,
    simulate_finite_mdp,
    simulate_luckett,
)
from modules.module6_coverage import ALL_CASES, DEFAULT_FAILURE_TOLERANCE, DEFAULT_REPLICATIONS, run_coverage_table

# ====================
# CONSTANTS AND CONFIGURATION
# ====================

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

MODEL_LUCKETT = 'luckett'
MODEL_MDP_PREFIX = 'mdp:'

# Run-configuration schema: key -> (accepted types, default); REQUIRED has no default
REQUIRED = object()
NUMBER = (int, float)
RUN_CONFIG_SCHEMA = {
    'description': ((str,), ''),
    'command': ((str,), 'coverage'),
    'n_values': ((list,), REQUIRED),
    'T_values': ((list,), REQUIRED),
    'base_seed': ((int,), REQUIRED),
    'num_replications': ((int,), DEFAULT_REPLICATIONS),
    'policies': ((list,), ['always', 'never']),
    'cases': ((list,), list(ALL_CASES)),
    'ci_level': (NUMBER, 0.95),
    'noise_sd': (NUMBER, DEFAULT_NOISE_SD),
    'behavior_prob': (NUMBER, DEFAULT_BEHAVIOR_PROB),
    'failure_tolerance': (NUMBER, DEFAULT_FAILURE_TOLERANCE),
    'oracle_eta': ((dict,), {}),
    'oracle_eta_se': ((dict,), {}),
    'oracle': ((dict,), {}),
    'kernel': ((dict,), {}),
    'tuning': ((dict,), {}),
}
SECTION_SCHEMA = {
    'oracle': {'horizon': (int,), 'num_rollouts': (int,), 'seed': (int,)},
    'kernel': {'max_centers': (int,), 'median_max_points': (int,), 'median_seed': (int,),
               'center_seed': (int,), 'action_rule': (str,)},
    'tuning': {'grid_size': (int,), 'grid_low': NUMBER, 'grid_high': NUMBER,
               'split_fraction': NUMBER, 'validation_ridge': NUMBER},
}
SUPPORTED_COMMANDS = ('coverage',)

MSG_ERROR_PREFIX = "[ERROR]"


# ====================
# 1. RUN CONFIGURATION
# ====================

@dataclass(frozen=True)
class RunConfig:
    n_values: list
    T_values: list
    base_seed: int
    description: str = ''
    command: str = 'coverage'
    num_replications: int = DEFAULT_REPLICATIONS
    policies: list = field(default_factory=lambda: ['always', 'never'])
    cases: list = field(default_factory=lambda: list(ALL_CASES))
    ci_level: float = 0.95
    noise_sd: float = DEFAULT_NOISE_SD
    behavior_prob: float = DEFAULT_BEHAVIOR_PROB
    failure_tolerance: float = DEFAULT_FAILURE_TOLERANCE
    oracle_eta: dict = field(default_factory=dict)
    oracle_eta_se: dict = field(default_factory=dict)
    oracle: dict = field(default_factory=dict)
    kernel: dict = field(default_factory=dict)
    tuning: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _check_type(key, value, types):
    # bool is an int subclass but never a valid count or level
    if isinstance(value, bool) or not isinstance(value, types):
        names = ' or '.join(t.__name__ for t in types)
        raise ConfigError(f"Config key '{key}' must be {names}, got {type(value).__name__}", key=key)


def validate_run_config(raw):
    """
    Check a parsed run-configuration document against the schema.

    Raises:
        ConfigError: unknown key, wrong type, missing required key or invalid value
    """
    if not isinstance(raw, dict):
        raise ConfigError("Run configuration must be a key/value document")

    values = {}
    for key, value in raw.items():
        if key not in RUN_CONFIG_SCHEMA:
            raise ConfigError(f"Unknown config key '{key}'", key=key)
        _check_type(key, value, RUN_CONFIG_SCHEMA[key][0])
        values[key] = value

    for key, (_, default) in RUN_CONFIG_SCHEMA.items():
        if key in values:
            continue
        if default is REQUIRED:
            raise ConfigError(f"Missing required config key '{key}'", key=key)
        values[key] = copy.deepcopy(default)

    for section, allowed in SECTION_SCHEMA.items():
        for key, value in values[section].items():
            dotted = f"{section}.{key}"
            if key not in allowed:
                raise ConfigError(f"Unknown config key '{dotted}'", key=dotted)
            _check_type(dotted, value, allowed[key])

    if values['kernel'].get('action_rule', ACTION_RULE_DELTA) != ACTION_RULE_DELTA:
        raise ConfigError(f"Config key 'kernel.action_rule' must be '{ACTION_RULE_DELTA}'", key='kernel.action_rule')
    if values['command'] not in SUPPORTED_COMMANDS:
        raise ConfigError(f"Unsupported command '{values['command']}'", key='command')
    for key in ('n_values', 'T_values'):
        if not values[key] or any(isinstance(v, bool) or not isinstance(v, int) or v < 1 for v in values[key]):
            raise ConfigError(f"Config key '{key}' must be a non-empty list of positive integers", key=key)
    if values['num_replications'] < 1:
        raise ConfigError("Config key 'num_replications' must be >= 1", key='num_replications')
    if len(values['policies']) != 2 or not all(isinstance(p, str) for p in values['policies']):
        raise ConfigError("Config key 'policies' must list two built-in policy names", key='policies')
    unknown_cases = [case for case in values['cases'] if case not in ALL_CASES]
    if not values['cases'] or unknown_cases:
        raise ConfigError(f"Config key 'cases' must be a subset of {list(ALL_CASES)}", key='cases')
    if not 0 < values['ci_level'] < 1:
        raise ConfigError("Config key 'ci_level' must lie in (0, 1)", key='ci_level')
    for section in ('oracle_eta', 'oracle_eta_se'):
        for name, value in values[section].items():
            dotted = f"{section}.{name}"
            if name not in values['policies']:
                raise ConfigError(f"Unknown config key '{dotted}' (not a configured policy)", key=dotted)
            if value is not None:
                _check_type(dotted, value, NUMBER)
    for name, se in values['oracle_eta_se'].items():
        if se is not None and se < 0:
            dotted = f"oracle_eta_se.{name}"
            raise ConfigError(f"Config key '{dotted}' must be nonnegative", key=dotted)

    return RunConfig(**values)


def load_run_config(path):
    """
    Parse and validate a run configuration (.toml via tomllib, anything else as JSON).

    Raises:
        FileNotFoundError: config file missing
        ConfigError: unparsable document or schema violation
    """
    config_path = Path(path)
    if not config_path.exists():
        raise FileNotFoundError(f"Run configuration not found at {config_path}")

    try:
        if config_path.suffix.lower() == '.toml':
            with open(config_path, 'rb') as f:
                raw = tomllib.load(f)
        else:
            with open(config_path, 'r', encoding='utf-8') as f:
                raw = json.load(f)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"Cannot parse run configuration {config_path}: {e}")

    return validate_run_config(raw)


# ====================
# 2. COMMANDS
# ====================

def cmd_simulate(args):
    """simulate --model luckett|mdp:<file> --n --t --seed --out"""
    if args.model == MODEL_LUCKETT:
        config = LuckettModelConfig(noise_sd=args.noise_sd, behavior_prob=args.behavior_prob, seed=args.seed)
        data = simulate_luckett(config, args.n, args.t)
    elif args.model.startswith(MODEL_MDP_PREFIX):
        mdp = load_finite_mdp(args.model[len(MODEL_MDP_PREFIX):])
        behavior = np.full((mdp.num_states, mdp.num_actions), 1.0 / mdp.num_actions)
        data = simulate_finite_mdp(mdp, behavior, args.n, args.t, seed=args.seed)
    else:
        raise ConfigError(f"Unknown model '{args.model}' (expected '{MODEL_LUCKETT}' or '{MODEL_MDP_PREFIX}<file>')",
                          key='--model')

    out_path = write_csv(data, args.out)
    print(f"[OK] Wrote {data.num_transitions} transitions ({data.n} trajectories x {data.T} steps) to {out_path}")
    return EXIT_OK


def cmd_evaluate(args):
    """evaluate --data --policy [--policy ...] --level --seed --out"""
    data = load_csv(args.data)
    policies = [resolve_policy(spec, data.num_actions, data.d) for spec in args.policy]
    result, _, _ = run_evaluation(data, policies, seed=args.seed, ci_level=args.level,
                                  jobs=args.jobs, scores_dir=args.scores_dir)
    out_path = save_inference(result, args.out)
    print(f"[OK] Saved {result.num_policies} evaluations to {out_path}")
    return EXIT_OK


def cmd_coverage(args):
    """coverage --config --out [--jobs]"""
    run_config = load_run_config(args.config)
    run_coverage_table(run_config.to_dict(), args.out, jobs=args.jobs)
    return EXIT_OK


# ====================
# 3. ARGUMENT PARSING
# ====================

def build_parser():
    parser = argparse.ArgumentParser(
        prog='main.py',
        description='Off-policy average-reward estimation with kernel Bellman-error fits and confidence intervals',
    )
    subparsers = parser.add_subparsers(dest='command', required=True)

    simulate = subparsers.add_parser('simulate', help='Simulate a trajectory dataset')
    simulate.add_argument('--model', required=True, help="'luckett' or 'mdp:<file.json>'")
    simulate.add_argument('--n', type=int, required=True, help='Number of trajectories')
    simulate.add_argument('--t', type=int, required=True, help='Trajectory length')
    simulate.add_argument('--seed', type=int, required=True, help='Random seed')
    simulate.add_argument('--out', required=True, help='Output CSV path')
    simulate.add_argument('--behavior-prob', type=float, default=DEFAULT_BEHAVIOR_PROB,
                          help='Treatment probability of the benchmark behavior policy')
    simulate.add_argument('--noise-sd', type=float, default=DEFAULT_NOISE_SD,
                          help='Transition noise standard deviation of the benchmark model')
    simulate.set_defaults(handler=cmd_simulate)

    evaluate = subparsers.add_parser('evaluate', help='Estimate average rewards with confidence intervals')
    evaluate.add_argument('--data', required=True, help='Input CSV path')
    evaluate.add_argument('--policy', action='append', required=True,
                          help="Built-in name ('always:a', 'always', 'never', 'uniform') or policy JSON file; repeatable")
    evaluate.add_argument('--level', type=float, default=None, help='Confidence level (default from config)')
    evaluate.add_argument('--seed', type=int, required=True, help='Seed for the tuning split')
    evaluate.add_argument('--out', required=True, help='Output JSON path')
    evaluate.add_argument('--jobs', type=int, default=1, help='Worker count')
    evaluate.add_argument('--scores-dir', default=None, help='Directory for tuning score tables')
    evaluate.set_defaults(handler=cmd_evaluate)

    coverage = subparsers.add_parser('coverage', help='Run the Monte-Carlo coverage study')
    coverage.add_argument('--config', required=True, help='Run configuration (.json or .toml)')
    coverage.add_argument('--out', required=True, help='Output directory')
    coverage.add_argument('--jobs', type=int, default=1, help='Worker count over replications')
    coverage.set_defaults(handler=cmd_coverage)

    return parser


def main(argv=None):
    """Parse flags, dispatch the subcommand and map failures to exit codes."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    if getattr(args, 'level', None) is not None and not 0 < args.level < 1:
        parser.print_usage(sys.stderr)
        print(f"{MSG_ERROR_PREFIX} --level must lie in (0, 1), got {args.level}", file=sys.stderr)
        return EXIT_USAGE

    try:
        return args.handler(args)
    except ConfigError as e:
        print(f"{MSG_ERROR_PREFIX} {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OffPolicyError, OSError, ValueError, LinAlgError, RuntimeError, KeyError) as e:
        print(f"{MSG_ERROR_PREFIX} {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE
