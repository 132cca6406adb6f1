"""
Module 3: Tuning Selection

PURPOSE:
- Split a dataset into training / validation trajectories
- Score a fit by its estimated Bellman error on validation transitions
- Select (lambda, mu) over a log-spaced grid by minimum validation score

INPUTS:
- Validated Dataset, target Policy, KernelSpec, ReferencePoint, TuningGrid

OUTPUTS:
- Selected TuningParams
- Score table (lambda, mu, score), optionally written to CSV

PROCEDURE:
1. Split trajectories into train / validation
2. For each grid cell, fit on train and compute TD errors on validation
3. Regress validation TD errors on (S, A) by kernel ridge regression
4. Score = mean squared fitted value; the minimum-score cell is selected
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.linalg import LinAlgError
from sklearn.kernel_ridge import KernelRidge

from modules.errors import DegenerateStates, EmptyValidation, SingularSystem, TooFewTrajectories
from modules.module0_data_loader import TuningParams
from modules.module1_kernel import KernelSpec, gram, median_heuristic
from modules.module2_estimator import (
    DEFAULT_CENTER_SEED,
    MAX_CENTERS,
    InnerSmoother,
    build_td_components,
    fit_from_components,
    project_components,
    td_residual,
)

# ====================
# CONSTANTS AND CONFIGURATION
# ====================

DEFAULT_GRID_SIZE = 6
DEFAULT_GRID_LOW = 1e-5
DEFAULT_GRID_HIGH = 1.0
DEFAULT_SPLIT_FRACTION = 0.5
DEFAULT_SPLIT_SEED = 0
VALIDATION_RIDGE = 1e-3

# Score table columns
COL_LAMBDA = 'lambda'
COL_MU = 'mu'
COL_SCORE = 'score'

MSG_WARNING_PREFIX = "[WARNING]"


# ====================
# 1. GRID AND SPLIT
# ====================

@dataclass(frozen=True)
class TuningGrid:
    """Candidate penalties, stored in descending order."""
    lambdas: tuple
    mus: tuple
    split_fraction: float = DEFAULT_SPLIT_FRACTION
    seed: int = DEFAULT_SPLIT_SEED

    def __post_init__(self):
        for name in ('lambdas', 'mus'):
            values = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            if values.size == 0:
                raise ValueError(f"Tuning grid '{name}' is empty")
            if not np.isfinite(values).all() or (values <= 0).any():
                raise ValueError(f"Tuning grid '{name}' must contain positive values")
            object.__setattr__(self, name, tuple(float(v) for v in np.sort(values)[::-1]))
        if not 0 < self.split_fraction < 1:
            raise ValueError(f"split_fraction must lie in (0, 1), got {self.split_fraction}")


def default_grid(num_samples, size=DEFAULT_GRID_SIZE, low=DEFAULT_GRID_LOW, high=DEFAULT_GRID_HIGH,
                 split_fraction=DEFAULT_SPLIT_FRACTION, seed=DEFAULT_SPLIT_SEED):
    """size x size log-spaced grid over [low, high], divided by the training sample count."""
    values = np.logspace(np.log10(low), np.log10(high), size) / num_samples
    return TuningGrid(lambdas=tuple(values), mus=tuple(values), split_fraction=split_fraction, seed=seed)


def train_size(n, fraction):
    """floor(fraction * n + 0.5), kept within [1, n - 1]."""
    return int(min(max(np.floor(fraction * n + 0.5), 1), n - 1))


def split_dataset(data, fraction=DEFAULT_SPLIT_FRACTION, seed=DEFAULT_SPLIT_SEED):
    """
    Trajectory-level split into (train, validation).

    Raises:
        TooFewTrajectories: n < 2
    """
    if data.n < 2:
        raise TooFewTrajectories(f"Need at least 2 trajectories to split, got {data.n}")
    if not 0 < fraction < 1:
        raise ValueError(f"Split fraction must lie in (0, 1), got {fraction}")

    order = np.random.Generator(np.random.Philox(seed)).permutation(data.n)
    n_train = train_size(data.n, fraction)
    return data.subset(np.sort(order[:n_train])), data.subset(np.sort(order[n_train:]))


# ====================
# 2. VALIDATION SCORE
# ====================

def validation_score(fit, validation, policy, ridge=VALIDATION_RIDGE):
    """
    Mean squared kernel-ridge fit of the validation TD errors.

    TD errors R + sum_a' pi(a'|S') Q_hat(S', a') - eta_hat - Q_hat(S, A) are regressed on
    (S, A) with a delta-action RBF kernel (median-heuristic bandwidth over validation
    states, fit's bandwidth if those states are all identical).

    Raises:
        EmptyValidation
    """
    if validation.n == 0 or validation.T == 0:
        raise EmptyValidation("Validation set contains no transitions")

    td = build_td_components(validation, policy, fit.kernel, fit.anchor, centers=fit.centers)
    td_errors = td_residual(td, fit.eta_hat, fit.q_coeffs)

    try:
        bandwidth = median_heuristic(validation.current_states)
    except DegenerateStates:
        bandwidth = fit.kernel.bandwidth
    validation_gram = gram(td.points, KernelSpec(bandwidth=bandwidth))

    model = KernelRidge(alpha=ridge, kernel='precomputed')
    model.fit(validation_gram, td_errors)
    fitted = model.predict(validation_gram)
    return float(np.mean(fitted ** 2))


# ====================
# 3. GRID SEARCH
# ====================

def _score_mu_row(td, validation, policy, mu, lambdas, training_hash, ridge):
    """Scores for every lambda at one mu; the inner smoother is shared across the row."""
    try:
        smoother = InnerSmoother(td.points, td.kernel, mu)
        system = project_components(td, smoother)
    except (SingularSystem, LinAlgError) as e:
        print(f"  {MSG_WARNING_PREFIX} Tuning row mu={mu:.3e} failed: {e}")
        return [np.inf] * len(lambdas)

    scores = []
    for lam in lambdas:
        try:
            fit = fit_from_components(td, smoother, lam, system=system,
                                      policy_label=policy.label, training_hash=training_hash)
            score = validation_score(fit, validation, policy, ridge=ridge)
        except (SingularSystem, LinAlgError) as e:
            print(f"  {MSG_WARNING_PREFIX} Tuning cell (lambda={lam:.3e}, mu={mu:.3e}) failed: {e}")
            score = np.inf
        scores.append(score if np.isfinite(score) else np.inf)
    return scores


def select_tuning(data, policy, kernel, anchor, grid=None, jobs=1, ridge=VALIDATION_RIDGE,
                  max_centers=MAX_CENTERS, center_seed=DEFAULT_CENTER_SEED):
    """
    Grid search for (lambda, mu) by validation Bellman error.

    Cells are visited with lambda descending, then mu descending; a cell replaces the
    incumbent only with a strictly smaller score, so ties keep the stronger penalty.
    Failed cells score +inf. The caller refits on the full dataset.

    Args:
        grid: TuningGrid (defaults to default_grid over the training-half sample count)
        jobs: joblib worker count over mu rows

    Returns:
        tuple: (TuningParams, pd.DataFrame with columns lambda, mu, score)

    Raises:
        SingularSystem: every grid cell failed
    """
    split_fraction = DEFAULT_SPLIT_FRACTION if grid is None else grid.split_fraction
    split_seed = DEFAULT_SPLIT_SEED if grid is None else grid.seed
    train, validation = split_dataset(data, split_fraction, split_seed)
    if grid is None:
        grid = default_grid(train.num_transitions, split_fraction=split_fraction, seed=split_seed)

    td = build_td_components(train, policy, kernel, anchor, max_centers=max_centers, seed=center_seed)

    rows = Parallel(n_jobs=jobs)(
        delayed(_score_mu_row)(td, validation, policy, mu, grid.lambdas, train.fingerprint, ridge)
        for mu in grid.mus
    )
    records = []
    best = None
    best_score = np.inf
    for i, lam in enumerate(grid.lambdas):
        for j, mu in enumerate(grid.mus):
            score = rows[j][i]
            records.append({COL_LAMBDA: lam, COL_MU: mu, COL_SCORE: score})
            if score < best_score:
                best_score = score
                best = (lam, mu)

    table = pd.DataFrame(records, columns=[COL_LAMBDA, COL_MU, COL_SCORE])
    if best is None:
        raise SingularSystem(f"Every tuning cell failed for policy '{policy.label}'")
    return TuningParams(lam=best[0], mu=best[1]), table


def save_score_table(table, path):
    out_path = Path(path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out_path, index=False, float_format='%.17g')
    return out_path
