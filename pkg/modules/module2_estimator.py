"""
Module 2: Coupled Projected-Bellman-Error Estimator

PURPOSE:
- Build the temporal-difference (TD) components of a dataset for one target policy
- Fit the inner projection of the Bellman error (kernel ridge with unpenalized intercept)
- Fit the outer problem over (eta, Q) in closed form
- Predict the anchored Q-function and report Bellman-residual diagnostics
- Save / reload fitted results as JSON

INPUTS:
- Validated Dataset, target Policy, KernelSpec, ReferencePoint, (lambda, mu)

OUTPUTS:
- FitResult: eta_hat, representer coefficients of Q over the shifted kernel, diagnostics

MODEL:
    Q(x) = sum_m alpha_m k~(x, z_m)            (centers z_m = observed state-action pairs)
    residual_j(eta, alpha) = r_j - eta + (B alpha)_j - (C alpha)_j
    g_hat = H_mu residual                       (inner fit, see InnerSmoother)
    (eta_hat, alpha_hat) = argmin (1/N) ||H_mu residual||^2 + lambda alpha' K~ alpha
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, block_diag, cho_factor, cho_solve, lstsq

from modules.errors import NonFiniteInput, SingularSystem
from modules.module0_data_loader import (
    SCHEMA_VERSION,
    ReferencePoint,
    TuningParams,
    policy_prob_matrix,
)
from modules.module1_kernel import (
    KernelSpec,
    PointSet,
    ShiftedKernelSpec,
    cross_gram,
    gram,
    shifted_cross_gram,
    shifted_gram,
)

# ====================
# CONSTANTS AND CONFIGURATION
# ====================

MAX_CENTERS = 1000
DEFAULT_CENTER_SEED = 0
NORMAL_EQUATION_JITTER = 1e-10
CONDITION_LIMIT = 1e14
SANITY_RANGE_MULTIPLIER = 10.0

# Console message prefixes
MSG_WARNING_PREFIX = "[WARNING]"

# Diagnostics keys
DIAG_OBJECTIVE = 'objective'
DIAG_PROJECTED_BE = 'projected_bellman_error'
DIAG_SANITY_EXCEEDED = 'sanity_bound_exceeded'
DIAG_NUM_CENTERS = 'num_centers'
DIAG_SINGLE_STEP = 'single_step_trajectories'


# ====================
# 1. TD COMPONENTS
# ====================

@dataclass(frozen=True)
class TDComponents:
    """
    Affine pieces of the TD residual for Q = sum_m alpha_m k~(., z_m).

    current[j, m] = k~(x_j, z_m)
    next_avg[j, m] = sum_a' pi(a'|S'_j) k~((S'_j, a'), z_m)
    """
    rewards: np.ndarray
    current: np.ndarray
    next_avg: np.ndarray
    points: PointSet
    centers: PointSet
    center_gram: np.ndarray
    kernel: KernelSpec
    anchor: ReferencePoint
    trajectory_index: np.ndarray
    T: int

    @property
    def num_samples(self):
        return len(self.rewards)

    @property
    def design(self):
        """D = B - C, so the residual is r - eta + D alpha."""
        return self.next_avg - self.current


def select_center_indices(num_points, max_centers=MAX_CENTERS, seed=DEFAULT_CENTER_SEED):
    """All indices when num_points <= max_centers, otherwise a seeded uniform subsample."""
    if num_points <= max_centers:
        return np.arange(num_points)
    rng = np.random.Generator(np.random.Philox(seed))
    return np.sort(rng.choice(num_points, size=max_centers, replace=False))


def build_td_components(data, policy, kernel, anchor, centers=None,
                        max_centers=MAX_CENTERS, seed=DEFAULT_CENTER_SEED):
    """
    Assemble {r, B, C} for a dataset and target policy.

    Args:
        centers: representer centers; defaults to the observed current state-action
            pairs (subsampled to max_centers when N is larger)

    Returns:
        TDComponents
    """
    shifted = ShiftedKernelSpec(base=kernel, anchor=anchor)
    points = PointSet(data.current_states, data.actions)
    if centers is None:
        centers = points.take(select_center_indices(len(points), max_centers, seed))

    current = shifted_cross_gram(points, centers, shifted)

    probs = policy_prob_matrix(policy, data.next_states, data.num_actions)
    next_avg = np.zeros_like(current)
    for action in range(data.num_actions):
        weights = probs[:, action]
        if not weights.any():
            continue
        next_points = PointSet.constant_action(data.next_states, action)
        next_avg += weights[:, None] * shifted_cross_gram(next_points, centers, shifted)

    return TDComponents(
        rewards=np.asarray(data.rewards, dtype=float),
        current=current,
        next_avg=next_avg,
        points=points,
        centers=centers,
        center_gram=shifted_gram(centers, shifted),
        kernel=kernel,
        anchor=anchor,
        trajectory_index=np.asarray(data.trajectory_index),
        T=data.T,
    )


def td_residual(td, eta, alpha, targets=None):
    """r - eta + (B - C) alpha, with r replaced by `targets` when given."""
    base = td.rewards if targets is None else targets
    return base - eta + td.design @ np.asarray(alpha, dtype=float)


# ====================
# 2. INNER FIT
# ====================

@dataclass(frozen=True)
class InnerFit:
    """g(x) = intercept + sum_l coefficients_l k(x, x_l); fitted = g at the training points."""
    intercept: float
    coefficients: np.ndarray
    fitted: np.ndarray


class InnerSmoother:
    """
    Solution operator of the inner problem

        min_{c, beta} (1/N) sum_j (y_j - c - (K beta)_j)^2 + mu beta' K beta

    over G = constants + RKHS(k) at the N training points. With W = (K + N mu I)^-1:
    c = 1'W y / 1'W 1, beta = W (y - c 1), fitted = y - N mu beta.
    """

    def __init__(self, points, kernel, mu, condition_limit=CONDITION_LIMIT):
        mu = float(mu)
        if not np.isfinite(mu) or mu <= 0:
            raise ValueError(f"Inner penalty mu must be positive, got {mu}")
        self.points = points
        self.kernel = kernel
        self.mu = mu
        self.gram = gram(points, kernel)

        num_points = len(points)
        self.shift = num_points * mu
        condition_bound = (np.trace(self.gram) + self.shift) / self.shift
        if not np.isfinite(condition_bound) or condition_bound > condition_limit:
            raise SingularSystem(
                f"Inner system ill-conditioned (bound {condition_bound:.3e} > {condition_limit:.0e}) at mu={mu:.3e}"
            )
        try:
            self._factor = cho_factor(self.gram + self.shift * np.eye(num_points), lower=True)
        except LinAlgError as e:
            raise SingularSystem(f"Cholesky factorization of the inner system failed at mu={mu:.3e}: {e}")
        self._w_ones = cho_solve(self._factor, np.ones(num_points))
        self._ones_w_ones = float(self._w_ones.sum())

    @property
    def num_points(self):
        return len(self.points)

    def coefficients(self, targets):
        """(intercept, beta) for a target vector or for each column of a target matrix."""
        targets = np.asarray(targets, dtype=float)
        intercept = self._w_ones @ targets / self._ones_w_ones
        beta = cho_solve(self._factor, targets) - np.multiply.outer(self._w_ones, intercept)
        return intercept, beta

    def apply(self, targets):
        """H_mu targets: inner-fit values at the training points."""
        targets = np.asarray(targets, dtype=float)
        _, beta = self.coefficients(targets)
        return targets - self.shift * beta

    def evaluate(self, intercept, beta, points):
        """Inner-fit function at arbitrary state-action points."""
        return intercept + cross_gram(points, self.points, self.kernel) @ beta


def fit_inner(td, eta, alpha, mu, smoother=None):
    """
    Projection of the Bellman error for a fixed (eta, alpha).

    Returns:
        InnerFit with the fitted values H_mu residual(eta, alpha)
    """
    if smoother is None:
        smoother = InnerSmoother(td.points, td.kernel, mu)
    residual = td_residual(td, eta, alpha)
    intercept, beta = smoother.coefficients(residual)
    return InnerFit(
        intercept=float(intercept),
        coefficients=beta,
        fitted=residual - smoother.shift * beta,
    )


# ====================
# 3. OUTER FIT
# ====================

@dataclass(frozen=True)
class ProjectedSystem:
    """Smoothed design H X and target H y, reusable across outer penalties."""
    design: np.ndarray
    target: np.ndarray
    with_eta: bool


def project_components(td, smoother, targets=None, with_eta=True):
    """
    Apply the inner smoother to the outer design.

    Columns are [-1, D] when with_eta, otherwise D alone.
    """
    columns = td.design
    if with_eta:
        columns = np.column_stack([-np.ones(td.num_samples), columns])
    target = td.rewards if targets is None else np.asarray(targets, dtype=float)
    return ProjectedSystem(design=smoother.apply(columns), target=smoother.apply(target), with_eta=with_eta)


def solve_outer(system, center_gram, lam, jitter=NORMAL_EQUATION_JITTER):
    """
    Minimize (1/N) ||H y + H X theta||^2 + lam alpha' K~ alpha.

    Normal equations with a jitter * trace(A) ridge; scipy's gelsd driver returns the
    minimum-norm solution on flat directions.

    Returns:
        np.ndarray: theta = (eta, alpha) when system.with_eta, else alpha
    """
    num_samples = len(system.target)
    penalty = block_diag(np.zeros((1, 1)), center_gram) if system.with_eta else center_gram
    lhs = system.design.T @ system.design / num_samples + lam * penalty
    lhs = 0.5 * (lhs + lhs.T)
    rhs = -system.design.T @ system.target / num_samples
    lhs = lhs + jitter * np.trace(lhs) * np.eye(lhs.shape[0])

    try:
        theta, _, _, _ = lstsq(lhs, rhs, lapack_driver='gelsd')
    except (LinAlgError, ValueError) as e:
        raise SingularSystem(f"Outer normal equations could not be solved at lambda={lam:.3e}: {e}")
    if not np.isfinite(theta).all():
        raise SingularSystem(f"Outer solution is not finite at lambda={lam:.3e}")
    return theta


# ====================
# 4. FIT RESULT
# ====================

@dataclass(frozen=True)
class FitResult:
    """
    Fitted (eta_hat, Q_hat) for one target policy.

    Q_hat(x) = sum_m q_coeffs[m] k~(x, centers[m]); g_coeffs_map is the inner solution
    operator used in the fit (None after reloading from JSON).
    """
    eta_hat: float
    q_coeffs: np.ndarray
    centers: PointSet
    tuning: TuningParams
    anchor: ReferencePoint
    kernel: KernelSpec
    policy_label: str = ''
    training_hash: str = ''
    td_residuals: Optional[np.ndarray] = field(default=None, repr=False)
    g_coeffs_map: Optional[InnerSmoother] = field(default=None, repr=False, compare=False)
    diagnostics: dict = field(default_factory=dict, compare=False)


def _sanity_bound(rewards):
    rewards = np.asarray(rewards, dtype=float)
    return float(np.abs(rewards).max() + SANITY_RANGE_MULTIPLIER * (rewards.max() - rewards.min()))


def fit_from_components(td, smoother, lam, system=None, policy_label='', training_hash='',
                        jitter=NORMAL_EQUATION_JITTER):
    """Outer fit for one lambda given prepared TD components and inner smoother."""
    if system is None:
        system = project_components(td, smoother)
    theta = solve_outer(system, td.center_gram, lam, jitter=jitter)
    eta_hat = float(theta[0])
    alpha = theta[1:]

    projected = system.target + system.design @ theta
    projected_be = float(np.mean(projected ** 2))
    diagnostics = {
        DIAG_OBJECTIVE: projected_be + lam * float(alpha @ td.center_gram @ alpha),
        DIAG_PROJECTED_BE: projected_be,
        DIAG_SANITY_EXCEEDED: abs(eta_hat) > _sanity_bound(td.rewards),
        DIAG_NUM_CENTERS: len(td.centers),
        DIAG_SINGLE_STEP: td.T == 1,
    }

    return FitResult(
        eta_hat=eta_hat,
        q_coeffs=alpha,
        centers=td.centers,
        tuning=TuningParams(lam=lam, mu=smoother.mu),
        anchor=td.anchor,
        kernel=td.kernel,
        policy_label=policy_label,
        training_hash=training_hash,
        td_residuals=td_residual(td, eta_hat, alpha),
        g_coeffs_map=smoother,
        diagnostics=diagnostics,
    )


def fit_coupled(data, policy, kernel, anchor, lam, mu, max_centers=MAX_CENTERS,
                seed=DEFAULT_CENTER_SEED, td=None, smoother=None):
    """
    Coupled estimator (eta_hat, Q_hat) for one policy and one (lambda, mu).

    Args:
        data: validated Dataset
        policy: target Policy
        kernel: KernelSpec shared by the Q-class (shifted) and the G-class (unshifted)
        anchor: ReferencePoint where Q_hat vanishes
        lam, mu: outer and inner penalties (> 0)
        td, smoother: prebuilt components to reuse (must come from the same data)

    Returns:
        FitResult

    Raises:
        SingularSystem, NonFiniteInput
    """
    TuningParams(lam=lam, mu=mu)
    if not np.isfinite(data.rewards).all():
        raise NonFiniteInput("Rewards must be finite")

    if td is None:
        td = build_td_components(data, policy, kernel, anchor, max_centers=max_centers, seed=seed)
    if smoother is None:
        smoother = InnerSmoother(td.points, kernel, mu)

    fit = fit_from_components(td, smoother, lam, policy_label=policy.label,
                              training_hash=data.fingerprint)

    if fit.diagnostics[DIAG_SINGLE_STEP]:
        print(f"  {MSG_WARNING_PREFIX} Dataset has T=1; every unit contributes a single transition")
    if fit.diagnostics[DIAG_SANITY_EXCEEDED]:
        print(f"  {MSG_WARNING_PREFIX} eta_hat={fit.eta_hat:.4g} for '{policy.label}' exceeds the reward-range sanity bound")
    return fit


# ====================
# 5. PREDICTION AND DIAGNOSTICS
# ====================

def predict_q_values(fit, points):
    """Q_hat at a PointSet (or list of (state, action) pairs)."""
    shifted = ShiftedKernelSpec(base=fit.kernel, anchor=fit.anchor)
    return shifted_cross_gram(points, fit.centers, shifted) @ fit.q_coeffs


def predict_q(fit, s, a):
    """Q_hat(s, a); exactly 0 at the anchor."""
    return float(predict_q_values(fit, [(np.atleast_1d(np.asarray(s, dtype=float)), a)])[0])


def empirical_projected_bellman_error(fit, data, policy):
    """
    (1/N) sum_j g_hat_j^2 at the fitted (eta_hat, alpha_hat), without the penalty.

    Reuses the fit's inner smoother on its own training data; otherwise builds one
    at the fit's mu over the given data.
    """
    td = build_td_components(data, policy, fit.kernel, fit.anchor, centers=fit.centers)
    smoother = fit.g_coeffs_map
    if smoother is None or fit.training_hash != data.fingerprint:
        smoother = InnerSmoother(td.points, fit.kernel, fit.tuning.mu)
    projected = smoother.apply(td_residual(td, fit.eta_hat, fit.q_coeffs))
    return float(np.mean(projected ** 2))


# ====================
# 6. SERIALIZATION
# ====================

def _points_hash(points):
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(points.states).tobytes())
    digest.update(np.ascontiguousarray(points.actions.astype(np.int64)).tobytes())
    return digest.hexdigest()


def fit_to_dict(fit):
    return {
        'spec_version': SCHEMA_VERSION,
        'policy_label': fit.policy_label,
        'eta_hat': fit.eta_hat,
        'tuning': fit.tuning.to_dict(),
        'kernel': fit.kernel.to_dict(),
        'anchor': {'s_star': fit.anchor.s_star.tolist(), 'a_star': fit.anchor.a_star},
        'centers': {'states': fit.centers.states.tolist(), 'actions': fit.centers.actions.tolist()},
        'q_coeffs': fit.q_coeffs.tolist(),
        'training_hash': fit.training_hash,
        'centers_hash': _points_hash(fit.centers),
        'diagnostics': dict(fit.diagnostics),
    }


def save_fit(fit, path):
    """Write a FitResult to JSON (enough to reload and call predict_q)."""
    out_path = Path(path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, 'w', encoding='utf-8') as f:
        json.dump(fit_to_dict(fit), f, indent=2)
    return out_path


def load_fit(path):
    """
    Reload a FitResult saved by save_fit.

    Raises:
        FileNotFoundError, ValueError (center hash mismatch)
    """
    fit_path = Path(path)
    if not fit_path.exists():
        raise FileNotFoundError(f"Fit file not found at {fit_path}")
    with open(fit_path, 'r', encoding='utf-8') as f:
        payload = json.load(f)

    centers = PointSet(np.asarray(payload['centers']['states'], dtype=float),
                       payload['centers']['actions'])
    if _points_hash(centers) != payload['centers_hash']:
        raise ValueError(f"{fit_path}: representer centers do not match the stored hash")

    tuning = payload['tuning']
    return FitResult(
        eta_hat=float(payload['eta_hat']),
        q_coeffs=np.asarray(payload['q_coeffs'], dtype=float),
        centers=centers,
        tuning=TuningParams(lam=tuning['lambda'], mu=tuning['mu'],
                            lam_tilde=tuning['lambda_tilde'], mu_tilde=tuning['mu_tilde']),
        anchor=ReferencePoint(s_star=payload['anchor']['s_star'], a_star=payload['anchor']['a_star']),
        kernel=KernelSpec.from_dict(payload['kernel']),
        policy_label=payload.get('policy_label', ''),
        training_hash=payload.get('training_hash', ''),
        diagnostics=payload.get('diagnostics', {}),
    )
