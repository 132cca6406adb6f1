"""
Tests for Module 4: Inference

Tests cover:
- Direction function recovery of e^pi on tabular MDPs, orthogonality, on-policy data and ratio normalization
- Sigma_hat assembly, symmetry, PSD-ness, constant rewards and repeated policies
- Confidence intervals, contrasts and index errors
- JSON report shape and the evaluation pipeline
"""

import json

import numpy as np
import pytest
from scipy.stats import norm

from modules.errors import IndexOutOfRange, MismatchedFits
from modules.module0_data_loader import ReferencePoint, TuningParams, dataset_from_arrays, make_builtin_policy
from modules.module1_kernel import KernelSpec, kernel_for_data
from modules.module2_estimator import fit_coupled
from modules.module4_inference import (
    InferenceResult,
    confidence_interval,
    contrast_interval,
    contrast_standard_error,
    covariance_matrix,
    density_ratio,
    density_ratio_values,
    fit_direction,
    inference_to_dict,
    normal_quantile,
    run_evaluation,
    save_inference,
)
from modules.module5_simulator import (
    LuckettModelConfig,
    exact_transition_dataset,
    finite_mdp_solve,
    random_finite_mdp,
    simulate_luckett,
)

UNIFORM_BEHAVIOR = 0.5


@pytest.fixture
def manual_result():
    """Two policies with Sigma = [[4, 1], [1, 9]] and n = 100."""
    return InferenceResult(eta_hats=[1.0, 0.5], sigma_hat=[[4.0, 1.0], [1.0, 9.0]], n=100,
                           ci_level=0.95, labels=('first', 'second'))


@pytest.fixture
def fitted_pair(luckett_data, always_policy, never_policy, kernel_unit, origin_anchor):
    """Value fits and direction fits for 'always' and 'never' on the small benchmark dataset."""
    fits, dirfits = [], []
    for policy in (always_policy, never_policy):
        fits.append(fit_coupled(luckett_data, policy, kernel_unit, origin_anchor, lam=1e-2, mu=1e-2))
        dirfits.append(fit_direction(luckett_data, policy, kernel_unit, origin_anchor, 1e-2, 1e-2))
    return fits, dirfits


class TestDirectionFunction:
    """Tests for fit_direction and the density ratio."""

    @pytest.mark.parametrize('seed', range(5))
    def test_recovers_exact_direction(self, seed, make_tabular_policy):
        """Test that e_hat matches the exact e^pi within 0.05 on exact-frequency data."""
        rng = np.random.default_rng(seed)
        mdp = random_finite_mdp(3, 2, seed=50 + seed, row_total=12)
        policy = make_tabular_policy(rng.dirichlet(np.ones(2), size=3))
        anchor = ReferencePoint(mdp.one_hot(0), 0)
        behavior = np.full((3, 2), UNIFORM_BEHAVIOR)
        oracle = finite_mdp_solve(mdp, policy, anchor, behavior=behavior, initial=np.full(3, 1 / 3), T=1)

        data = exact_transition_dataset(mdp, 12)
        dirfit = fit_direction(data, policy, KernelSpec(bandwidth=0.05), anchor, 1e-8, 1e-8)

        states = np.argmax(data.current_states, axis=1)
        expected = oracle.e_pi[states, data.actions]
        assert np.abs(dirfit.e_values - expected).max() < 0.05

    @pytest.mark.parametrize('seed', range(5))
    def test_exact_direction_orthogonality(self, seed):
        """Test that the exact e^pi is orthogonal to (I - P^pi) f and solves its Bellman-like equation."""
        rng = np.random.default_rng(seed)
        num_states = 3 + seed % 3
        mdp = random_finite_mdp(num_states, 2, seed=70 + seed, row_total=12)
        table = rng.dirichlet(np.ones(2), size=num_states)
        oracle = finite_mdp_solve(mdp, table, ReferencePoint(mdp.one_hot(0), 0),
                                  behavior=np.full((num_states, 2), UNIFORM_BEHAVIOR),
                                  initial=np.full(num_states, 1 / num_states), T=1)

        data = exact_transition_dataset(mdp, 12)
        states = np.argmax(data.current_states, axis=1)
        next_states = np.argmax(data.next_states, axis=1)
        f = rng.normal(size=(num_states, 2))
        bellman_gap = f[states, data.actions] - (table[next_states] * f[next_states]).sum(axis=1)
        assert abs(np.mean(oracle.e_pi[states, data.actions] * bellman_gap)) < 1e-9

        next_q = (table * oracle.q_pi).sum(axis=1)
        expected = 1.0 + np.einsum('sat,t->sa', mdp.P, next_q) - oracle.q_pi
        np.testing.assert_allclose(oracle.e_pi, expected, atol=1e-9)

    def test_on_policy_direction_is_one(self, origin_anchor):
        """Test that e_hat is close to 1 when the target policy is the behavior policy on long trajectories."""
        data = simulate_luckett(LuckettModelConfig(seed=17), n=5, T=150)
        policy = make_builtin_policy('uniform', 2)
        dirfit = fit_direction(data, policy, kernel_for_data(data), origin_anchor, 1e-2, 1e-2)
        assert dirfit.e_values.mean() == pytest.approx(1.0, abs=0.05)
        assert np.abs(dirfit.e_values - 1.0).max() < 0.15

    def test_ratio_normalization(self, luckett_data, always_policy, kernel_unit, origin_anchor):
        """Test that the ratio weights average to 1 over training transitions."""
        dirfit = fit_direction(luckett_data, always_policy, kernel_unit, origin_anchor, 1e-2, 1e-2)
        assert density_ratio_values(dirfit).mean() == pytest.approx(1.0, abs=1e-9)
        assert (density_ratio_values(dirfit) > 0).all()

    def test_pointwise_ratio(self, luckett_data, always_policy, kernel_unit, origin_anchor):
        """Test that density_ratio at a training point equals the stored weight."""
        dirfit = fit_direction(luckett_data, always_policy, kernel_unit, origin_anchor, 1e-2, 1e-2)
        j = 7
        x = (luckett_data.current_states[j], luckett_data.actions[j])
        assert density_ratio(dirfit, x) == pytest.approx(density_ratio_values(dirfit)[j], abs=1e-8)

    def test_non_positive_penalties(self, luckett_data, always_policy, kernel_unit, origin_anchor):
        """Test that lambda_tilde <= 0 raises ValueError."""
        with pytest.raises(ValueError):
            fit_direction(luckett_data, always_policy, kernel_unit, origin_anchor, 0.0, 1e-2)


class TestCovariance:
    """Tests for covariance_matrix."""

    def test_symmetric_psd(self, luckett_data, fitted_pair):
        """Test that Sigma_hat is symmetric positive semidefinite."""
        sigma = covariance_matrix(*fitted_pair, luckett_data)
        assert sigma.shape == (2, 2)
        np.testing.assert_array_equal(sigma, sigma.T)
        assert np.linalg.eigvalsh(sigma).min() > -1e-12

    def test_manual_assembly(self, luckett_data, fitted_pair):
        """Test Sigma_hat against per-unit means of ratio-weighted TD residuals."""
        fits, dirfits = fitted_pair
        sigma = covariance_matrix(fits, dirfits, luckett_data)
        eps = [density_ratio_values(d) * f.td_residuals for f, d in zip(fits, dirfits)]
        means = [e.reshape(luckett_data.n, luckett_data.T).mean(axis=1) for e in eps]
        assert sigma[0, 1] == pytest.approx(np.mean(means[0] * means[1]))
        assert sigma[1, 1] == pytest.approx(np.mean(means[1] ** 2))

    def test_constant_reward_is_zero(self, luckett_data, always_policy, kernel_unit, origin_anchor):
        """Test that rewards all equal to 2.5 give zero TD residuals and Sigma_hat near 0."""
        states = np.stack([tr.states for tr in luckett_data.trajectories])
        actions = np.stack([tr.actions for tr in luckett_data.trajectories])
        data = dataset_from_arrays(states, actions, np.full((luckett_data.n, luckett_data.T), 2.5), num_actions=2)
        fit = fit_coupled(data, always_policy, kernel_unit, origin_anchor, lam=1e-3, mu=1e-3)
        dirfit = fit_direction(data, always_policy, kernel_unit, origin_anchor, 1e-3, 1e-3)

        sigma = covariance_matrix([fit], [dirfit], data)
        assert fit.eta_hat == pytest.approx(2.5, abs=1e-6)
        assert abs(sigma[0, 0]) < 1e-10

    def test_identical_policies_rank_one(self, luckett_data, fitted_pair):
        """Test that the same policy listed twice gives a rank-1 Sigma_hat with equal entries."""
        fits, dirfits = fitted_pair
        sigma = covariance_matrix([fits[0], fits[0]], [dirfits[0], dirfits[0]], luckett_data)
        np.testing.assert_allclose(sigma, np.full((2, 2), sigma[0, 0]), atol=1e-10)
        assert np.linalg.eigvalsh(sigma).min() == pytest.approx(0.0, abs=1e-10)

    def test_mismatched_data(self, luckett_data_other, fitted_pair):
        """Test that fits trained on other data raise MismatchedFits."""
        with pytest.raises(MismatchedFits):
            covariance_matrix(*fitted_pair, luckett_data_other)

    def test_mismatched_lengths(self, luckett_data, fitted_pair):
        """Test that unequal fit lists raise MismatchedFits."""
        fits, dirfits = fitted_pair
        with pytest.raises(MismatchedFits):
            covariance_matrix(fits, dirfits[:1], luckett_data)


@pytest.mark.unit
class TestIntervals:
    """Tests for confidence intervals and contrasts."""

    def test_confidence_interval(self, manual_result):
        """Test eta -/+ z sqrt(Sigma_jj / n)."""
        lo, hi = confidence_interval(manual_result, 0)
        z = norm.ppf(0.975)
        assert lo == pytest.approx(1.0 - z * 0.2)
        assert hi == pytest.approx(1.0 + z * 0.2)

    def test_quantile(self):
        """Test the 95% two-sided normal quantile."""
        assert normal_quantile(0.95) == pytest.approx(1.959964, abs=1e-6)

    def test_contrast(self, manual_result):
        """Test the contrast SE sqrt((4 + 9 - 2) / 100)."""
        estimate, lo, hi = contrast_interval(manual_result, 0, 1)
        se = contrast_standard_error(manual_result, 0, 1)
        assert estimate == pytest.approx(0.5)
        assert se == pytest.approx(np.sqrt(0.11))
        assert hi - lo == pytest.approx(2 * norm.ppf(0.975) * np.sqrt(0.11))

    def test_same_index_contrast(self, manual_result):
        """Test that a contrast of a policy with itself raises IndexOutOfRange."""
        with pytest.raises(IndexOutOfRange):
            contrast_interval(manual_result, 1, 1)

    def test_index_out_of_range(self, manual_result):
        """Test that j >= K raises IndexOutOfRange."""
        with pytest.raises(IndexOutOfRange):
            confidence_interval(manual_result, 2)

    def test_invalid_level(self):
        """Test that ci_level outside (0, 1) raises ValueError."""
        with pytest.raises(ValueError):
            InferenceResult(eta_hats=[0.0], sigma_hat=[[1.0]], n=10, ci_level=1.0)

    def test_wider_at_higher_level(self):
        """Test that a 99% interval contains the 95% interval."""
        narrow = InferenceResult(eta_hats=[0.0], sigma_hat=[[1.0]], n=10, ci_level=0.95)
        wide = InferenceResult(eta_hats=[0.0], sigma_hat=[[1.0]], n=10, ci_level=0.99)
        assert confidence_interval(wide, 0)[0] < confidence_interval(narrow, 0)[0]


class TestReport:
    """Tests for the JSON report."""

    def test_shape(self, manual_result):
        """Test evaluations, one contrast, spec_version and Sigma_hat."""
        payload = inference_to_dict(manual_result)
        assert payload['spec_version'] == '1.0'
        assert [e['label'] for e in payload['evaluations']] == ['first', 'second']
        assert len(payload['contrasts']) == 1
        assert payload['contrasts'][0]['first'] == 'first'
        assert payload['sigma_hat'] == [[4.0, 1.0], [1.0, 9.0]]

    def test_three_policies(self):
        """Test that K policies produce K(K-1)/2 contrasts."""
        result = InferenceResult(eta_hats=[0.0, 1.0, 2.0], sigma_hat=np.eye(3), n=5)
        assert len(inference_to_dict(result)['contrasts']) == 3

    def test_save(self, tmp_path, manual_result):
        """Test that the report is written as JSON."""
        path = save_inference(manual_result, tmp_path / 'out' / 'result.json')
        with open(path, 'r', encoding='utf-8') as f:
            assert json.load(f)['n'] == 100


class TestRunEvaluation:
    """Tests for the full evaluation pipeline."""

    def test_two_policies(self, luckett_data, always_policy, never_policy, small_estimation_config):
        """Test the pipeline output shapes and tuning records."""
        result, fits, dirfits = run_evaluation(luckett_data, [always_policy, never_policy], seed=1,
                                               config=small_estimation_config, verbose=False)
        assert result.num_policies == 2
        assert result.labels == ('always', 'never')
        assert len(fits) == 2 and len(dirfits) == 2
        assert all(isinstance(t, TuningParams) for t in result.tunings)
        assert result.tunings[0].lam_tilde == result.tunings[0].lam
        np.testing.assert_allclose(result.sigma_hat, result.sigma_hat.T)

    def test_deterministic(self, luckett_data, always_policy, small_estimation_config):
        """Test that identical inputs and seeds give identical results."""
        first, _, _ = run_evaluation(luckett_data, [always_policy], seed=2, config=small_estimation_config,
                                     verbose=False)
        second, _, _ = run_evaluation(luckett_data, [always_policy], seed=2, config=small_estimation_config,
                                      verbose=False)
        np.testing.assert_array_equal(first.eta_hats, second.eta_hats)
        np.testing.assert_array_equal(first.sigma_hat, second.sigma_hat)

    def test_fixed_tunings_skip_selection(self, luckett_data, always_policy, small_estimation_config):
        """Test that supplied tuning parameters are used as given."""
        tuning = TuningParams(lam=1e-2, mu=1e-2)
        result, fits, _ = run_evaluation(luckett_data, [always_policy], seed=0, config=small_estimation_config,
                                         tunings=[tuning], verbose=False)
        assert result.tunings[0] == tuning
        assert fits[0].tuning.lam == 1e-2

    def test_action_rule_from_config(self, luckett_data, always_policy, small_estimation_config):
        """Test that the configured kernel action rule reaches the kernel."""
        _, fits, _ = run_evaluation(luckett_data, [always_policy], seed=0, config=small_estimation_config,
                                    tunings=[TuningParams(lam=1e-2, mu=1e-2)], verbose=False)
        assert fits[0].kernel.action_rule == 'delta'

        small_estimation_config['kernel']['action_rule'] = 'product'
        with pytest.raises(ValueError):
            run_evaluation(luckett_data, [always_policy], seed=0, config=small_estimation_config, verbose=False)

    def test_score_tables_written(self, tmp_path, luckett_data, small_estimation_config):
        """Test that score tables land in the requested directory."""
        policies = [make_builtin_policy('always:1', 2)]
        run_evaluation(luckett_data, policies, seed=0, config=small_estimation_config,
                       scores_dir=tmp_path, verbose=False)
        assert len(list(tmp_path.glob('tuning_scores_0_*.csv'))) == 1
