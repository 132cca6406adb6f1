"""
Tests for Module 1: Kernels

Tests cover:
- Delta-action Gaussian kernel values and Gram matrix properties
- Shifted kernel vanishing at the anchor
- Median-heuristic bandwidth, its fallbacks and subsampling
"""

import numpy as np
import pytest

from modules.errors import AnchorDegenerate, DegenerateStates
from modules.module0_data_loader import ReferencePoint
from modules.module1_kernel import (
    KernelSpec,
    PointSet,
    ShiftedKernelSpec,
    gram,
    k,
    k_shifted,
    kernel_for_data,
    median_heuristic,
    shifted_gram,
)


@pytest.fixture
def random_points():
    rng = np.random.default_rng(5)
    return PointSet(rng.normal(size=(40, 3)), rng.integers(0, 3, size=40))


@pytest.mark.unit
class TestBaseKernel:
    """Tests for the delta-action Gaussian kernel."""

    def test_value(self):
        """Test k at two states at distance 1 with h = 1."""
        spec = KernelSpec(bandwidth=1.0)
        assert k((np.array([0.0, 0.0]), 1), (np.array([1.0, 0.0]), 1), spec) == pytest.approx(np.exp(-0.5))

    def test_different_actions(self):
        """Test that pairs with different actions have zero kernel."""
        spec = KernelSpec(bandwidth=1.0)
        assert k((np.zeros(2), 0), (np.zeros(2), 1), spec) == 0.0

    def test_gram_symmetric_psd(self, random_points):
        """Test that the Gram matrix is symmetric positive semidefinite."""
        G = gram(random_points, KernelSpec(bandwidth=0.8))
        np.testing.assert_allclose(G, G.T)
        assert np.linalg.eigvalsh(G).min() > -1e-10
        np.testing.assert_allclose(np.diag(G), 1.0)

    def test_invalid_bandwidth(self):
        """Test that a non-positive bandwidth raises ValueError."""
        with pytest.raises(ValueError):
            KernelSpec(bandwidth=0.0)

    def test_unsupported_action_rule(self):
        """Test that only the delta action rule is accepted."""
        with pytest.raises(ValueError):
            KernelSpec(bandwidth=1.0, action_rule='product')

    def test_point_set_lengths(self):
        """Test that mismatched state/action counts raise ValueError."""
        with pytest.raises(ValueError):
            PointSet(np.zeros((3, 2)), [0, 1])


class TestShiftedKernel:
    """Tests for the anchored kernel."""

    def test_zero_at_anchor(self, random_points):
        """Test that k~(x*, y) = 0 for every y."""
        anchor = ReferencePoint(s_star=random_points.states[0], a_star=random_points.actions[0])
        spec = ShiftedKernelSpec(base=KernelSpec(bandwidth=0.8), anchor=anchor)
        for j in range(len(random_points)):
            y = (random_points.states[j], random_points.actions[j])
            assert abs(k_shifted((anchor.s_star, anchor.a_star), y, spec)) < 1e-14

    def test_shifted_gram_psd(self, random_points):
        """Test that the shifted Gram matrix stays PSD."""
        anchor = ReferencePoint(s_star=np.zeros(3), a_star=1)
        G = shifted_gram(random_points, ShiftedKernelSpec(base=KernelSpec(bandwidth=0.8), anchor=anchor))
        np.testing.assert_allclose(G, G.T, atol=1e-14)
        assert np.linalg.eigvalsh(G).min() > -1e-10

    def test_other_action_unchanged(self):
        """Test that pairs with actions other than a* keep the base kernel."""
        base = KernelSpec(bandwidth=1.0)
        spec = ShiftedKernelSpec(base=base, anchor=ReferencePoint(s_star=np.zeros(1), a_star=0))
        x = (np.array([0.3]), 1)
        y = (np.array([-0.2]), 1)
        assert k_shifted(x, y, spec) == pytest.approx(k(x, y, base))

    def test_anchor_degenerate(self):
        """Test that an anchor where the base kernel vanishes raises AnchorDegenerate."""
        # h^2 underflows to 0, so k(x*, x*) is not a positive number
        tiny = KernelSpec(bandwidth=1e-300)
        with pytest.raises(AnchorDegenerate):
            ShiftedKernelSpec(base=tiny, anchor=ReferencePoint(s_star=np.zeros(1), a_star=0))


class TestMedianHeuristic:
    """Tests for median_heuristic and kernel_for_data."""

    def test_median_of_distances(self):
        """Test that states 0, 1, 3 give distances 1, 3, 2 and median 2."""
        assert median_heuristic(np.array([[0.0], [1.0], [3.0]])) == pytest.approx(2.0)

    def test_matches_brute_force(self):
        """Test 500 standard normal states against an explicit loop over all pairs."""
        states = np.random.default_rng(12).standard_normal((500, 2))
        distances = [np.linalg.norm(states[i] - states[j]) for i in range(500) for j in range(i + 1, 500)]
        assert median_heuristic(states) == pytest.approx(np.median(distances), rel=1e-12)

    def test_permutation_invariant(self):
        """Test that reordering the states leaves the bandwidth unchanged."""
        rng = np.random.default_rng(13)
        states = rng.standard_normal((120, 3))
        shuffled = states[rng.permutation(len(states))]
        assert median_heuristic(shuffled) == pytest.approx(median_heuristic(states), rel=1e-14)

    def test_translation_invariant(self):
        """Test that shifting every state by a constant vector leaves the bandwidth unchanged."""
        states = np.random.default_rng(14).standard_normal((120, 2))
        moved = states + np.array([5.0, -3.0])
        assert median_heuristic(moved) == pytest.approx(median_heuristic(states), rel=1e-10)

    def test_zero_median_fallback(self):
        """Test that a zero median falls back to the smallest positive distance."""
        states = np.array([[0.0], [0.0], [0.0], [0.0], [1.0]])
        assert median_heuristic(states) == pytest.approx(1.0)

    def test_identical_states(self):
        """Test that identical states raise DegenerateStates."""
        with pytest.raises(DegenerateStates):
            median_heuristic(np.ones((5, 2)))

    def test_subsampling_is_seeded(self):
        """Test that subsampled medians repeat for a fixed seed."""
        states = np.random.default_rng(1).normal(size=(300, 2))
        first = median_heuristic(states, max_points=50, seed=9)
        second = median_heuristic(states, max_points=50, seed=9)
        assert first == second
        assert first > 0

    def test_kernel_for_data(self, luckett_data):
        """Test that the data kernel uses all observed states, or the given bandwidth."""
        spec = kernel_for_data(luckett_data)
        assert spec.bandwidth == pytest.approx(median_heuristic(luckett_data.all_states))
        assert kernel_for_data(luckett_data, bandwidth=0.3).bandwidth == 0.3

    def test_kernel_for_data_action_rule(self, luckett_data):
        """Test that the action rule is passed through and unknown rules are rejected."""
        assert kernel_for_data(luckett_data, action_rule='delta').action_rule == 'delta'
        with pytest.raises(ValueError):
            kernel_for_data(luckett_data, action_rule='product')
