"""
Module 4: Inference

PURPOSE:
- Fit the direction function e^pi (surrogate problem with zero average reward)
- Turn it into self-normalized density-ratio weights d^pi / d_bar_T
- Assemble the plug-in covariance Sigma_hat across K target policies
- Report normal confidence intervals for each eta and every pairwise contrast
- Run the complete evaluation pipeline: tune -> refit -> directions -> Sigma_hat -> CIs

INPUTS:
- Validated Dataset and a list of target Policies
- Estimator defaults from data/config/config_estimation.json

OUTPUTS:
- InferenceResult (eta_hats, Sigma_hat, n, ci_level, labels)
- JSON document: per-policy {label, eta_hat, se, ci}, contrast table, Sigma_hat
"""

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed
from scipy.stats import norm

from modules.errors import IndexOutOfRange, MismatchedFits
from modules.module0_data_loader import (
    SCHEMA_VERSION,
    TuningParams,
    default_reference_point,
    load_estimation_config,
    validate_reference_point,
)
from modules.module1_kernel import ACTION_RULE_DELTA, PointSet, cross_gram, kernel_for_data
from modules.module2_estimator import (
    MAX_CENTERS,
    InnerSmoother,
    build_td_components,
    fit_coupled,
    project_components,
    solve_outer,
)
from modules.module3_tuning import default_grid, save_score_table, select_tuning, train_size

# ====================
# CONSTANTS AND CONFIGURATION
# ====================

RATIO_FLOOR = 1e-6
DEFAULT_CI_LEVEL = 0.95

# Console message prefixes
MSG_OK_PREFIX = "[OK]"

# Output filenames
SCORE_TABLE_TEMPLATE = 'tuning_scores_{index}_{label}.csv'


# ====================
# 1. DIRECTION FUNCTION
# ====================

@dataclass(frozen=True)
class DirectionFit:
    """
    Fitted direction function for one policy.

    q_coeffs: representer coefficients of q_hat over the shifted kernel at `centers`
    e_values: e_hat at every training state-action pair (inner fit at q_hat)
    normalizer: mean over training transitions of max(e_hat, floor)
    """
    q_coeffs: np.ndarray
    e_values: np.ndarray
    normalizer: float
    intercept: float
    g_coeffs: np.ndarray
    training_points: PointSet
    centers: PointSet
    kernel: object
    anchor: object
    tuning: TuningParams
    training_hash: str = ''
    floor: float = RATIO_FLOOR
    policy_label: str = ''

    def __post_init__(self):
        if not self.normalizer > 0:
            raise ValueError(f"Direction normalizer must be positive, got {self.normalizer}")


def fit_direction(data, policy, kernel, anchor, lambda_tilde, mu_tilde, centers=None,
                  max_centers=MAX_CENTERS, seed=0, td=None, smoother=None, floor=RATIO_FLOOR):
    """
    Direction function e_hat = inner fit of 1 - q(x) + sum_a' pi(a'|S') q(S', a') at q_hat.

    q_hat minimizes the projected surrogate error plus lambda_tilde times its shifted-kernel
    norm; the surrogate has no free scalar (its average reward is 0).

    Returns:
        DirectionFit

    Raises:
        SingularSystem
    """
    TuningParams(lam=lambda_tilde, mu=mu_tilde)
    if td is None:
        td = build_td_components(data, policy, kernel, anchor, centers=centers,
                                 max_centers=max_centers, seed=seed)
    if smoother is None:
        smoother = InnerSmoother(td.points, kernel, mu_tilde)

    ones = np.ones(td.num_samples)
    system = project_components(td, smoother, targets=ones, with_eta=False)
    alpha = solve_outer(system, td.center_gram, lambda_tilde)

    surrogate = ones + td.design @ alpha
    intercept, beta = smoother.coefficients(surrogate)
    e_values = surrogate - smoother.shift * beta

    return DirectionFit(
        q_coeffs=alpha,
        e_values=e_values,
        normalizer=float(np.mean(np.maximum(e_values, floor))),
        intercept=float(intercept),
        g_coeffs=beta,
        training_points=td.points,
        centers=td.centers,
        kernel=kernel,
        anchor=anchor,
        tuning=TuningParams(lam=lambda_tilde, mu=mu_tilde),
        training_hash=data.fingerprint,
        floor=floor,
        policy_label=policy.label,
    )


def direction_values(dirfit, points):
    """e_hat at arbitrary state-action points via the inner-fit kernel expansion."""
    return dirfit.intercept + cross_gram(points, dirfit.training_points, dirfit.kernel) @ dirfit.g_coeffs


# ====================
# 2. DENSITY RATIO
# ====================

def density_ratio_values(dirfit):
    """max(e_hat, floor) / normalizer at every training transition; averages to 1."""
    return np.maximum(dirfit.e_values, dirfit.floor) / dirfit.normalizer


def density_ratio(dirfit, x):
    """Estimated d^pi / d_bar_T at one (state, action) pair."""
    value = direction_values(dirfit, [(np.atleast_1d(np.asarray(x[0], dtype=float)), x[1])])[0]
    return float(max(value, dirfit.floor) / dirfit.normalizer)


# ====================
# 3. COVARIANCE AND INTERVALS
# ====================

@dataclass(frozen=True)
class InferenceResult:
    eta_hats: np.ndarray
    sigma_hat: np.ndarray
    n: int
    ci_level: float = DEFAULT_CI_LEVEL
    labels: tuple = ()
    T: int = 0
    tunings: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if not 0 < self.ci_level < 1:
            raise ValueError(f"ci_level must lie in (0, 1), got {self.ci_level}")
        object.__setattr__(self, 'eta_hats', np.asarray(self.eta_hats, dtype=float).reshape(-1))
        object.__setattr__(self, 'sigma_hat', np.atleast_2d(np.asarray(self.sigma_hat, dtype=float)))
        if not self.labels:
            object.__setattr__(self, 'labels', tuple(f'policy_{j}' for j in range(len(self.eta_hats))))

    @property
    def num_policies(self):
        return len(self.eta_hats)

    def standard_error(self, j):
        _check_index(self, j)
        return float(np.sqrt(max(self.sigma_hat[j, j], 0.0) / self.n))


def covariance_matrix(fits, dirfits, data):
    """
    Sigma_hat[i, j] = mean over units of (mean_t eps_i)(mean_t eps_j).

    eps_t = ratio(S_t, A_t) * (R + sum_a' pi(a'|S') Q_hat(S', a') - eta_hat - Q_hat(S_t, A_t)).

    Raises:
        MismatchedFits: a fit or direction fit was trained on other data, or lists differ in length
    """
    if len(fits) != len(dirfits) or not fits:
        raise MismatchedFits(f"Got {len(fits)} fits and {len(dirfits)} direction fits")
    for fit, dirfit in zip(fits, dirfits):
        if fit.training_hash != data.fingerprint or dirfit.training_hash != data.fingerprint:
            raise MismatchedFits(f"Fit for '{fit.policy_label}' was not trained on this dataset")
        if fit.td_residuals is None or len(fit.td_residuals) != data.num_transitions:
            raise MismatchedFits(f"Fit for '{fit.policy_label}' carries no TD residuals for this dataset")

    eps = np.column_stack([
        density_ratio_values(dirfit) * fit.td_residuals for fit, dirfit in zip(fits, dirfits)
    ])
    unit_means = eps.reshape(data.n, data.T, len(fits)).mean(axis=1)
    sigma = unit_means.T @ unit_means / data.n
    return 0.5 * (sigma + sigma.T)


def _check_index(result, j):
    if not 0 <= j < result.num_policies:
        raise IndexOutOfRange(f"Policy index {j} outside 0..{result.num_policies - 1}")


def normal_quantile(level):
    return float(norm.ppf(0.5 * (1.0 + level)))


def confidence_interval(result, j):
    """eta_hat_j -/+ z * sqrt(Sigma_jj / n)."""
    _check_index(result, j)
    half_width = normal_quantile(result.ci_level) * result.standard_error(j)
    eta = float(result.eta_hats[j])
    return eta - half_width, eta + half_width


def contrast_interval(result, i, j):
    """
    (eta_i - eta_j, lo, hi) with SE sqrt((Sigma_ii + Sigma_jj - 2 Sigma_ij) / n).

    Raises:
        IndexOutOfRange: i == j or either index out of range
    """
    se = contrast_standard_error(result, i, j)
    estimate = float(result.eta_hats[i] - result.eta_hats[j])
    half_width = normal_quantile(result.ci_level) * se
    return estimate, estimate - half_width, estimate + half_width


def contrast_standard_error(result, i, j):
    _check_index(result, i)
    _check_index(result, j)
    if i == j:
        raise IndexOutOfRange(f"Contrast needs two different policies, got i = j = {i}")
    s = result.sigma_hat
    variance = max(s[i, i] + s[j, j] - 2.0 * s[i, j], 0.0)
    return float(np.sqrt(variance / result.n))


# ====================
# 4. SERIALIZATION
# ====================

def inference_to_dict(result):
    evaluations = []
    for j, label in enumerate(result.labels):
        lo, hi = confidence_interval(result, j)
        entry = {'label': label, 'eta_hat': float(result.eta_hats[j]),
                 'se': result.standard_error(j), 'ci': [lo, hi]}
        if result.tunings:
            entry['tuning'] = result.tunings[j].to_dict()
        evaluations.append(entry)

    contrasts = []
    for i, j in itertools.combinations(range(result.num_policies), 2):
        estimate, lo, hi = contrast_interval(result, i, j)
        contrasts.append({'first': result.labels[i], 'second': result.labels[j],
                          'estimate': estimate, 'se': contrast_standard_error(result, i, j),
                          'ci': [lo, hi]})

    return {
        'spec_version': SCHEMA_VERSION,
        'ci_level': result.ci_level,
        'n': result.n,
        'T': result.T,
        'evaluations': evaluations,
        'contrasts': contrasts,
        'sigma_hat': result.sigma_hat.tolist(),
    }


def save_inference(result, path):
    out_path = Path(path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, 'w', encoding='utf-8') as f:
        json.dump(inference_to_dict(result), f, indent=2)
    return out_path


# ====================
# 5. EVALUATION PIPELINE
# ====================

def _evaluate_policy(data, policy, kernel, anchor, grid, max_centers, center_seed, ridge, floor, tuning=None):
    """Tuning selection (unless given), full-data refit and direction fit for one policy."""
    table = None
    if tuning is None:
        selected, table = select_tuning(data, policy, kernel, anchor, grid=grid, ridge=ridge,
                                        max_centers=max_centers, center_seed=center_seed)
        tuning = selected
    td = build_td_components(data, policy, kernel, anchor, max_centers=max_centers, seed=center_seed)
    smoother = InnerSmoother(td.points, kernel, tuning.mu)
    fit = fit_coupled(data, policy, kernel, anchor, tuning.lam, tuning.mu, td=td, smoother=smoother)
    if tuning.mu_tilde != tuning.mu:
        smoother = None
    dirfit = fit_direction(data, policy, kernel, anchor, tuning.lam_tilde, tuning.mu_tilde,
                           td=td, smoother=smoother, floor=floor)
    return fit, dirfit, tuning, table


def run_evaluation(data, policies, seed, ci_level=None, config=None, jobs=1, scores_dir=None,
                   anchor=None, bandwidth=None, tunings=None, verbose=True):
    """
    Evaluate K target policies on one dataset.

    Per policy: select (lambda, mu) on a seeded trajectory split, refit on the full
    data, fit the direction function with (lambda_tilde, mu_tilde) = (lambda, mu).
    Then Sigma_hat, all confidence intervals and all pairwise contrasts.

    Args:
        data: validated Dataset
        policies: list of Policy
        seed: split seed for tuning selection
        ci_level: confidence level (config default when None)
        config: estimator config dict (load_estimation_config() when None)
        jobs: joblib workers across policies
        scores_dir: when set, tuning score tables are written there as CSV
        anchor: ReferencePoint (coordinate-wise state mean with action 0 when None)
        bandwidth: kernel bandwidth (median heuristic when None)
        tunings: optional list of TuningParams that skips selection
        verbose: print progress lines

    Returns:
        tuple: (InferenceResult, list of FitResult, list of DirectionFit)
    """
    if config is None:
        config = load_estimation_config()
    kernel_cfg = config['kernel']
    tuning_cfg = config['tuning']
    if ci_level is None:
        ci_level = config['inference']['ci_level']
    ratio_floor = config['inference'].get('ratio_floor', RATIO_FLOOR)

    if verbose:
        print(f"[Module 4] Evaluating {len(policies)} policies on n={data.n}, T={data.T}...")

    kernel = kernel_for_data(data, bandwidth=bandwidth, max_points=kernel_cfg['median_max_points'],
                             seed=kernel_cfg.get('median_seed', 0),
                             action_rule=kernel_cfg.get('action_rule', ACTION_RULE_DELTA))
    if anchor is None:
        anchor = default_reference_point(data)
    validate_reference_point(anchor, data)
    if verbose:
        print(f"  {MSG_OK_PREFIX} Kernel bandwidth h={kernel.bandwidth:.4g}")

    grid = None
    if tunings is None and data.n >= 2:
        n_train = train_size(data.n, tuning_cfg['split_fraction'])
        grid = default_grid(n_train * data.T, size=tuning_cfg['grid_size'], low=tuning_cfg['grid_low'],
                            high=tuning_cfg['grid_high'], split_fraction=tuning_cfg['split_fraction'],
                            seed=seed)
    tunings = list(tunings) if tunings is not None else [None] * len(policies)

    outcomes = Parallel(n_jobs=jobs)(
        delayed(_evaluate_policy)(data, policy, kernel, anchor, grid, kernel_cfg['max_centers'],
                                  kernel_cfg.get('center_seed', 0), tuning_cfg['validation_ridge'],
                                  ratio_floor, tuning)
        for policy, tuning in zip(policies, tunings)
    )

    fits, dirfits, selected = [], [], []
    for index, (policy, (fit, dirfit, tuning, table)) in enumerate(zip(policies, outcomes)):
        fits.append(fit)
        dirfits.append(dirfit)
        selected.append(tuning)
        if verbose:
            print(f"  {MSG_OK_PREFIX} {policy.label}: eta_hat={fit.eta_hat:.4f} "
                  f"(lambda={tuning.lam:.3e}, mu={tuning.mu:.3e})")
        if scores_dir is not None and table is not None:
            safe_label = ''.join(ch if ch.isalnum() else '_' for ch in policy.label)
            save_score_table(table, Path(scores_dir) / SCORE_TABLE_TEMPLATE.format(index=index, label=safe_label))

    sigma = covariance_matrix(fits, dirfits, data)
    result = InferenceResult(
        eta_hats=np.array([fit.eta_hat for fit in fits]),
        sigma_hat=sigma,
        n=data.n,
        ci_level=ci_level,
        labels=tuple(policy.label for policy in policies),
        T=data.T,
        tunings=tuple(selected),
    )
    return result, fits, dirfits
