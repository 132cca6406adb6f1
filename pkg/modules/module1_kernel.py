"""
Module 1: State-Action Kernels

PURPOSE:
- RBF kernel over state-action pairs with an action-delta factor
- Zero-anchored (shifted) kernel for the value-function class
- Gram / cross-Gram assembly and the median-heuristic bandwidth

INPUTS:
- PointSet objects (states (m, d), actions (m,))
- KernelSpec / ShiftedKernelSpec

OUTPUTS:
- Kernel values and Gram matrices consumed by the estimator, tuning and inference modules
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from modules.errors import AnchorDegenerate, DegenerateStates
from modules.module0_data_loader import ReferencePoint

# ====================
# CONSTANTS AND CONFIGURATION
# ====================

ACTION_RULE_DELTA = 'delta'
MEDIAN_MAX_POINTS = 2000
DEFAULT_MEDIAN_SEED = 0


# ====================
# 1. KERNEL SPECIFICATIONS
# ====================

@dataclass(frozen=True)
class KernelSpec:
    """k((s,a),(s',a')) = 1{a = a'} exp(-||s - s'||^2 / (2 h^2))."""
    bandwidth: float
    action_rule: str = ACTION_RULE_DELTA

    def __post_init__(self):
        bandwidth = float(self.bandwidth)
        if not np.isfinite(bandwidth) or bandwidth <= 0:
            raise ValueError(f"Kernel bandwidth must be positive, got {bandwidth}")
        if self.action_rule != ACTION_RULE_DELTA:
            raise ValueError(f"Unsupported action rule '{self.action_rule}' (only '{ACTION_RULE_DELTA}')")
        object.__setattr__(self, 'bandwidth', bandwidth)

    def to_dict(self):
        return {'bandwidth': self.bandwidth, 'action_rule': self.action_rule}

    @classmethod
    def from_dict(cls, payload):
        return cls(bandwidth=payload['bandwidth'], action_rule=payload.get('action_rule', ACTION_RULE_DELTA))


@dataclass(frozen=True)
class PointSet:
    """A batch of state-action pairs."""
    states: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        states = np.array(self.states, dtype=float)
        if states.ndim == 1:
            states = states.reshape(1, -1)
        actions = np.array(self.actions, dtype=int).reshape(-1)
        if len(states) != len(actions):
            raise ValueError(f"PointSet has {len(states)} states but {len(actions)} actions")
        states.setflags(write=False)
        actions.setflags(write=False)
        object.__setattr__(self, 'states', states)
        object.__setattr__(self, 'actions', actions)

    def __len__(self):
        return len(self.actions)

    def take(self, indices):
        return PointSet(self.states[indices], self.actions[indices])

    @classmethod
    def from_pairs(cls, pairs):
        """Build from a list of (state, action) tuples."""
        if isinstance(pairs, cls):
            return pairs
        states = [np.atleast_1d(np.asarray(s, dtype=float)) for s, _ in pairs]
        return cls(np.vstack(states), [a for _, a in pairs])

    @classmethod
    def constant_action(cls, states, action):
        states = np.asarray(states, dtype=float)
        return cls(states, np.full(len(states), int(action)))


@dataclass(frozen=True)
class ShiftedKernelSpec:
    """Base kernel shifted so that every function in its RKHS vanishes at the anchor."""
    base: KernelSpec
    anchor: ReferencePoint

    def __post_init__(self):
        anchor_point = self.anchor_points()
        if not cross_gram(anchor_point, anchor_point, self.base)[0, 0] > 0:
            raise AnchorDegenerate("Base kernel is not positive at (anchor, anchor)")

    def anchor_points(self):
        return PointSet(self.anchor.s_star.reshape(1, -1), [self.anchor.a_star])


def _as_points(points):
    return points if isinstance(points, PointSet) else PointSet.from_pairs(points)


# ====================
# 2. KERNEL EVALUATION
# ====================

def cross_gram(rows, cols, spec):
    """G[i, j] = k(rows[i], cols[j])."""
    rows = _as_points(rows)
    cols = _as_points(cols)
    sq_dist = cdist(rows.states, cols.states, 'sqeuclidean')
    same_action = rows.actions[:, None] == cols.actions[None, :]
    return np.where(same_action, np.exp(-sq_dist / (2.0 * spec.bandwidth ** 2)), 0.0)


def gram(points, spec):
    """Symmetric Gram matrix of k over one point set."""
    return cross_gram(points, points, spec)


def k(x, y, spec):
    """Kernel value for two (state, action) pairs."""
    return float(cross_gram([x], [y], spec)[0, 0])


def shifted_cross_gram(rows, cols, spec):
    """
    Shifted kernel k~(x, y) = k(x, y) - k(x, x*) k(x*, y) / k(x*, x*).

    The anchor row is computed exactly as written so k~(x*, .) is identically zero.
    """
    rows = _as_points(rows)
    cols = _as_points(cols)
    anchor = spec.anchor_points()
    k_rows_anchor = cross_gram(rows, anchor, spec.base)[:, 0]
    k_anchor_cols = cross_gram(anchor, cols, spec.base)[0]
    k_anchor_anchor = cross_gram(anchor, anchor, spec.base)[0, 0]
    return cross_gram(rows, cols, spec.base) - np.outer(k_rows_anchor, k_anchor_cols) / k_anchor_anchor


def shifted_gram(points, spec):
    return shifted_cross_gram(points, points, spec)


def k_shifted(x, y, spec):
    return float(shifted_cross_gram([x], [y], spec)[0, 0])


# ====================
# 3. BANDWIDTH SELECTION
# ====================

def median_heuristic(states, max_points=MEDIAN_MAX_POINTS, seed=DEFAULT_MEDIAN_SEED):
    """
    Median of pairwise Euclidean distances between states.

    Falls back to the smallest nonzero distance when the median is 0. More than
    max_points states are subsampled uniformly without replacement (seeded).

    Raises:
        DegenerateStates: fewer than two distinct states
    """
    states = np.asarray(states, dtype=float)
    if states.ndim == 1:
        states = states.reshape(-1, 1)
    if len(states) > max_points:
        rng = np.random.Generator(np.random.Philox(seed))
        states = states[np.sort(rng.choice(len(states), size=max_points, replace=False))]

    distances = pdist(states, 'euclidean')
    positive = distances[distances > 0]
    if positive.size == 0:
        raise DegenerateStates(f"All {len(states)} states are identical; bandwidth undefined")

    median = float(np.median(distances))
    if median > 0:
        return median
    return float(positive.min())


def kernel_for_data(data, bandwidth=None, max_points=MEDIAN_MAX_POINTS, seed=DEFAULT_MEDIAN_SEED,
                    action_rule=ACTION_RULE_DELTA):
    """KernelSpec with the given bandwidth, or the median heuristic over all observed states."""
    if bandwidth is None:
        bandwidth = median_heuristic(data.all_states, max_points=max_points, seed=seed)
    return KernelSpec(bandwidth=bandwidth, action_rule=action_rule)
