"""
Module 6: Coverage Study Harness

PURPOSE:
- Repeat simulate -> tune -> refit -> direction fits -> Sigma_hat -> CIs on the benchmark model
- Aggregate coverage probability, MAD and mean SE per case (pi1, pi2, contrast)
- Run the full (n, T) table from a run configuration and write JSON / CSV / text reports

INPUTS:
- StudyConfig (one (n, T) cell) or a validated run-configuration dict (all cells)
- Oracle eta values (frozen in the run config or computed by long rollouts)

OUTPUTS:
- StudyResult per cell
- <out>/study_results.json, <out>/coverage_table.csv, <out>/replications.csv,
  <out>/study_summary.txt, and <out>/oracle_eta.json when oracles were computed
"""

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd
from joblib import Parallel, delayed

from modules.errors import StudyFailed
from modules.module0_data_loader import SCHEMA_VERSION, load_estimation_config, make_builtin_policy
from modules.module4_inference import confidence_interval, contrast_interval, contrast_standard_error, run_evaluation
from modules.module5_simulator import (
    DEFAULT_BEHAVIOR_PROB,
    DEFAULT_NOISE_SD,
    LUCKETT_NUM_ACTIONS,
    LuckettModelConfig,
    oracle_eta_luckett,
    simulate_luckett,
)

# ====================
# CONSTANTS AND CONFIGURATION
# ====================

CASE_PI1 = 'pi1'
CASE_PI2 = 'pi2'
CASE_CONTRAST = 'contrast'
ALL_CASES = (CASE_PI1, CASE_PI2, CASE_CONTRAST)
DEFAULT_POLICIES = ('always', 'never')
DEFAULT_REPLICATIONS = 500
DEFAULT_FAILURE_TOLERANCE = 0.01

STATUS_OK = 'ok'
STATUS_FAILED = 'failed'

# Output filenames
STUDY_JSON_FILE = 'study_results.json'
COVERAGE_CSV_FILE = 'coverage_table.csv'
REPLICATIONS_CSV_FILE = 'replications.csv'
SUMMARY_TXT_FILE = 'study_summary.txt'
ORACLE_JSON_FILE = 'oracle_eta.json'

# Console message prefixes
MSG_WARNING_PREFIX = "[WARNING]"
MSG_OK_PREFIX = "[OK]"

RECORD_COLUMNS = ['replication', 'seed', 'case', 'status', 'estimate', 'se', 'lo', 'hi',
                  'oracle', 'covered', 'abs_dev', 'error']


# ====================
# 1. STUDY TYPES
# ====================

@dataclass(frozen=True)
class StudyConfig:
    n: int
    T: int
    num_replications: int = DEFAULT_REPLICATIONS
    policies: tuple = DEFAULT_POLICIES
    cases: tuple = ALL_CASES
    ci_level: float = 0.95
    base_seed: int = 0
    noise_sd: float = DEFAULT_NOISE_SD
    behavior_prob: float = DEFAULT_BEHAVIOR_PROB
    oracle_eta: tuple = None
    failure_tolerance: float = DEFAULT_FAILURE_TOLERANCE
    estimation: dict = field(default=None, compare=False, hash=False)

    def __post_init__(self):
        if self.num_replications < 1:
            raise ValueError(f"num_replications must be >= 1, got {self.num_replications}")
        object.__setattr__(self, 'policies', tuple(self.policies))
        object.__setattr__(self, 'cases', tuple(self.cases))
        unknown = [case for case in self.cases if case not in ALL_CASES]
        if unknown:
            raise ValueError(f"Unknown study cases: {', '.join(unknown)}")
        if len(self.policies) < 2 and (CASE_PI2 in self.cases or CASE_CONTRAST in self.cases):
            raise ValueError("Cases pi2 and contrast need two policies")
        if self.oracle_eta is not None:
            object.__setattr__(self, 'oracle_eta', tuple(float(v) for v in self.oracle_eta))


@dataclass(frozen=True)
class StudyResult:
    """summary: one row per case (coverage, mad, mean_se, replications); records: per replication."""
    config: StudyConfig
    summary: pd.DataFrame
    records: pd.DataFrame
    failures: int

    def coverage(self, case):
        return float(self.summary.loc[case, 'coverage'])

    def mad(self, case):
        return float(self.summary.loc[case, 'mad'])


def replication_seed(base_seed, replication):
    return int(base_seed) ^ int(replication)


def _case_oracle(case, oracle_eta):
    if case == CASE_PI1:
        return oracle_eta[0]
    if case == CASE_PI2:
        return oracle_eta[1]
    return oracle_eta[0] - oracle_eta[1]


# ====================
# 2. REPLICATIONS
# ====================

def run_replication(config, replication):
    """One simulate -> evaluate cycle; failures are returned as records, not raised."""
    seed = replication_seed(config.base_seed, replication)
    try:
        data = simulate_luckett(
            LuckettModelConfig(noise_sd=config.noise_sd, behavior_prob=config.behavior_prob, seed=seed),
            config.n, config.T)
        policies = [make_builtin_policy(name, LUCKETT_NUM_ACTIONS) for name in config.policies]
        result, _, _ = run_evaluation(data, policies, seed=seed, ci_level=config.ci_level,
                                      config=config.estimation, jobs=1, verbose=False)
    except Exception as e:
        print(f"  {MSG_WARNING_PREFIX} Replication {replication} (seed {seed}) failed: {e}")
        return [{'replication': replication, 'seed': seed, 'case': case, 'status': STATUS_FAILED,
                 'error': f"{type(e).__name__}: {e}"} for case in config.cases]

    records = []
    for case in config.cases:
        if case == CASE_CONTRAST:
            estimate, lo, hi = contrast_interval(result, 0, 1)
            se = contrast_standard_error(result, 0, 1)
        else:
            j = 0 if case == CASE_PI1 else 1
            estimate = float(result.eta_hats[j])
            lo, hi = confidence_interval(result, j)
            se = result.standard_error(j)
        oracle = _case_oracle(case, config.oracle_eta)
        records.append({
            'replication': replication, 'seed': seed, 'case': case, 'status': STATUS_OK,
            'estimate': estimate, 'se': se, 'lo': lo, 'hi': hi, 'oracle': oracle,
            'covered': bool(lo <= oracle <= hi), 'abs_dev': abs(estimate - oracle), 'error': '',
        })
    return records


def run_study(config, jobs=1):
    """
    Monte-Carlo coverage study for one (n, T) cell.

    Replication r uses seed base_seed XOR r; results are sorted by replication before
    aggregation so the outcome does not depend on the worker count.

    Raises:
        ValueError: oracle values missing
        StudyFailed: failed replications reach the failure tolerance
    """
    if config.oracle_eta is None:
        raise ValueError("Study needs oracle eta values for its policies")

    batches = Parallel(n_jobs=jobs)(
        delayed(run_replication)(config, r) for r in range(config.num_replications)
    )
    records = pd.DataFrame([rec for batch in batches for rec in batch], columns=RECORD_COLUMNS)
    records['case_order'] = records['case'].map({case: k for k, case in enumerate(config.cases)})
    records = records.sort_values(['replication', 'case_order']).drop(columns='case_order').reset_index(drop=True)

    failures = int(records.loc[records['status'] == STATUS_FAILED, 'replication'].nunique())
    if failures == config.num_replications or (failures > 0 and failures >= config.failure_tolerance * config.num_replications):
        raise StudyFailed(
            f"{failures}/{config.num_replications} replications failed at n={config.n}, T={config.T} "
            f"(tolerance {config.failure_tolerance:.0%})"
        )
    if failures:
        print(f"  {MSG_WARNING_PREFIX} Excluded {failures} failed replications at n={config.n}, T={config.T}")

    ok = records[records['status'] == STATUS_OK].copy()
    ok['covered'] = ok['covered'].astype(float)
    summary = ok.groupby('case').agg(
        coverage=('covered', 'mean'),
        mad=('abs_dev', 'mean'),
        mean_se=('se', 'mean'),
        replications=('covered', 'size'),
    ).reindex(list(config.cases))

    return StudyResult(config=config, summary=summary, records=records, failures=failures)


# ====================
# 3. FULL TABLE FROM A RUN CONFIGURATION
# ====================

def estimation_config_for(run_config):
    """Estimator defaults with the run configuration's kernel / tuning overrides applied."""
    estimation = copy.deepcopy(load_estimation_config())
    for section in ('kernel', 'tuning'):
        estimation[section].update(run_config.get(section) or {})
    return estimation


def resolve_oracle_eta(run_config, out_dir):
    """
    Oracle eta per policy: frozen values from the run config, else long rollouts
    (written to <out_dir>/oracle_eta.json together with their standard errors).
    """
    policies = list(run_config['policies'])
    frozen = run_config.get('oracle_eta') or {}
    frozen_se = run_config.get('oracle_eta_se') or {}
    if all(frozen.get(name) is not None for name in policies):
        return tuple(float(frozen[name]) for name in policies)

    oracle_cfg = run_config.get('oracle') or {}
    horizon = oracle_cfg.get('horizon', 1_000_000)
    rollouts = oracle_cfg.get('num_rollouts', 50)
    seed = oracle_cfg.get('seed', 0)
    print(f"  Computing oracle eta values (horizon {horizon}, {rollouts} rollouts)...")

    values, payload = [], {'spec_version': SCHEMA_VERSION, 'horizon': horizon,
                           'num_rollouts': rollouts, 'seed': seed, 'policies': {}}
    for index, name in enumerate(policies):
        if frozen.get(name) is not None:
            values.append(float(frozen[name]))
            payload['policies'][name] = {'eta': values[-1], 'se': frozen_se.get(name), 'frozen': True}
            continue
        eta, se = oracle_eta_luckett(make_builtin_policy(name, LUCKETT_NUM_ACTIONS), horizon=horizon,
                                     num_rollouts=rollouts, seed=seed + index,
                                     noise_sd=run_config.get('noise_sd', DEFAULT_NOISE_SD))
        values.append(eta)
        payload['policies'][name] = {'eta': eta, 'se': se, 'frozen': False}
        print(f"  {MSG_OK_PREFIX} Oracle eta[{name}] = {eta:.6f} (MC SE {se:.2e})")

    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    with open(out_path / ORACLE_JSON_FILE, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2)
    return tuple(values)


def study_configs_from_run_config(run_config, oracle_eta):
    estimation = estimation_config_for(run_config)
    return [
        StudyConfig(
            n=int(n), T=int(T),
            num_replications=int(run_config['num_replications']),
            policies=tuple(run_config['policies']),
            cases=tuple(run_config['cases']),
            ci_level=float(run_config['ci_level']),
            base_seed=int(run_config['base_seed']),
            noise_sd=float(run_config['noise_sd']),
            behavior_prob=float(run_config['behavior_prob']),
            oracle_eta=oracle_eta,
            failure_tolerance=float(run_config['failure_tolerance']),
            estimation=estimation,
        )
        for n in run_config['n_values'] for T in run_config['T_values']
    ]


def coverage_table(results):
    """Table with one row per (case, n, T): coverage, MAD, mean SE."""
    rows = []
    for result in results:
        for case, row in result.summary.iterrows():
            rows.append({'case': case, 'n': result.config.n, 'T': result.config.T,
                         'coverage': row['coverage'], 'MAD': row['mad'], 'mean_se': row['mean_se']})
    table = pd.DataFrame(rows, columns=['case', 'n', 'T', 'coverage', 'MAD', 'mean_se'])
    return table.sort_values(['case', 'n', 'T'], kind='stable').reset_index(drop=True)


def generate_summary_statistics(results, oracle_eta):
    """Text report of the coverage study."""
    lines = ["=" * 80, "COVERAGE STUDY SUMMARY", "=" * 80, ""]
    if results:
        config = results[0].config
        lines.append(f"Policies: {', '.join(config.policies)}")
        lines.append("Oracle eta: " + ", ".join(f"{name}={value:.6f}" for name, value in zip(config.policies, oracle_eta)))
        lines.append(f"Replications per cell: {config.num_replications}")
        lines.append(f"Confidence level: {config.ci_level:.2f}")
        lines.append("")
    table = coverage_table(results)
    for case, block in table.groupby('case', sort=False):
        lines.append(f"Case {case}:")
        lines.append(f"  {'n':>4} {'T':>4} {'coverage':>9} {'MAD':>8} {'mean SE':>8}")
        for _, row in block.iterrows():
            lines.append(f"  {row['n']:>4} {row['T']:>4} {row['coverage']:>9.3f} {row['MAD']:>8.4f} {row['mean_se']:>8.4f}")
        lines.append("")
    failures = sum(result.failures for result in results)
    lines.append(f"Excluded replications: {failures}")
    lines.append("=" * 80)
    return "\n".join(lines)


def run_coverage_table(run_config, out_dir, jobs=1):
    """
    Run every (n, T) cell of a validated run configuration and write the reports.

    Returns:
        list of StudyResult (n-major, then T)
    """
    out_path = Path(out_dir)
    print(f"[Module 6] Coverage study: n in {run_config['n_values']}, T in {run_config['T_values']}, "
          f"{run_config['num_replications']} replications per cell")

    oracle_eta = resolve_oracle_eta(run_config, out_path)
    results = []
    for config in study_configs_from_run_config(run_config, oracle_eta):
        result = run_study(config, jobs=jobs)
        results.append(result)
        cells = ", ".join(f"{case}: cov={result.coverage(case):.3f} MAD={result.mad(case):.4f}"
                          for case in config.cases)
        print(f"  {MSG_OK_PREFIX} n={config.n}, T={config.T} -> {cells}")

    out_path.mkdir(parents=True, exist_ok=True)
    table = coverage_table(results)
    table.to_csv(out_path / COVERAGE_CSV_FILE, index=False, float_format='%.6f')

    replications = pd.concat(
        [result.records.assign(n=result.config.n, T=result.config.T) for result in results],
        ignore_index=True,
    )
    replications.to_csv(out_path / REPLICATIONS_CSV_FILE, index=False, float_format='%.17g')

    payload = {
        'spec_version': SCHEMA_VERSION,
        'config': run_config,
        'oracle_eta': dict(zip(run_config['policies'], oracle_eta)),
        'cells': [
            {
                'n': result.config.n,
                'T': result.config.T,
                'failures': result.failures,
                'cases': [
                    {'case': case, 'coverage': float(row['coverage']), 'mad': float(row['mad']),
                     'mean_se': float(row['mean_se']), 'replications': int(row['replications'])}
                    for case, row in result.summary.iterrows()
                ],
            }
            for result in results
        ],
    }
    with open(out_path / STUDY_JSON_FILE, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2)

    summary = generate_summary_statistics(results, oracle_eta)
    with open(out_path / SUMMARY_TXT_FILE, 'w', encoding='utf-8') as f:
        f.write(summary + "\n")
    print(summary)
    print(f"  {MSG_OK_PREFIX} Saved: {STUDY_JSON_FILE}, {COVERAGE_CSV_FILE}, {REPLICATIONS_CSV_FILE}, {SUMMARY_TXT_FILE}")
    return results
