"""
Module 5: Simulators and Exact Oracles

PURPOSE:
- Generate trajectories from the two-dimensional benchmark model (behavior: treat w.p. p)
- Estimate its long-run average reward by on-policy Monte-Carlo rollouts
- Define finite MDPs and solve them exactly: stationary distribution, eta, anchored Q,
  behavior-induced average distribution, direction function e^pi and its q^pi
- Sample finite-MDP trajectories under Markov or history-dependent behavior rules
- Build exact-frequency datasets for tabular identification checks

INPUTS:
- LuckettModelConfig or FiniteMDP (JSON: num_states, num_actions, P, r, reward_noise_sd)
- Target Policy, behavior rule, seeds

OUTPUTS:
- Dataset objects (finite-MDP states are one-hot vectors)
- FiniteMDPSolution with exact oracle quantities

RANDOMNESS:
- Trajectory i of a simulation with seed s draws from
  Generator(Philox(SeedSequence(s).spawn(n)[i])), so results do not depend on scheduling.
"""

import json
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, solve
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from modules.errors import NoStationaryDistribution, NotIrreducible
from modules.module0_data_loader import ReferencePoint, dataset_from_arrays, policy_prob_matrix

# ====================
# CONSTANTS AND CONFIGURATION
# ====================

# Benchmark model
LUCKETT_STATE_DIM = 2
LUCKETT_NUM_ACTIONS = 2
DEFAULT_NOISE_SD = 0.5
DEFAULT_BEHAVIOR_PROB = 0.5
TRANSITION_GAIN = 0.75
INTERACTION_GAIN = 0.25
REWARD_SECOND_WEIGHT = 0.5
REWARD_ACTION_WEIGHT = 0.25

# Oracle rollouts
DEFAULT_ORACLE_HORIZON = 1_000_000
DEFAULT_ORACLE_ROLLOUTS = 50
ORACLE_BLOCK_SIZE = 10_000

# Finite MDPs
PROB_TOLERANCE = 1e-12
DEFAULT_P_MIN = 1e-3
FREQUENCY_TOLERANCE = 1e-9
MDP_KEYS = ['num_states', 'num_actions', 'P', 'r']


def _trajectory_generators(seed, n):
    return [np.random.Generator(np.random.Philox(child)) for child in np.random.SeedSequence(seed).spawn(n)]


def _sample_actions(rng, probs):
    """Inverse-CDF draw of one action per row of a probability matrix."""
    cumulative = np.cumsum(probs, axis=1)
    u = rng.random(len(probs))
    return np.minimum((u[:, None] >= cumulative).sum(axis=1), probs.shape[1] - 1)


# ====================
# 1. BENCHMARK MODEL
# ====================

@dataclass(frozen=True)
class LuckettModelConfig:
    """Two-dimensional benchmark: Gaussian initial states, behavior treats w.p. behavior_prob."""
    noise_sd: float = DEFAULT_NOISE_SD
    behavior_prob: float = DEFAULT_BEHAVIOR_PROB
    seed: int = 0

    def __post_init__(self):
        if not self.noise_sd >= 0:
            raise ValueError(f"noise_sd must be nonnegative, got {self.noise_sd}")
        if not 0 < self.behavior_prob < 1:
            raise ValueError(f"behavior_prob must lie in (0, 1), got {self.behavior_prob}")


def luckett_step(states, actions, noise):
    """
    One transition of the benchmark model for a batch of states.

    S1' = 0.75 (2A - 1) S1 + 0.25 S1 S2 + e1
    S2' = 0.75 (1 - 2A) S2 + 0.25 S1 S2 + e2
    R   = S1' + 0.5 S2' + 0.25 (2A - 1)

    Returns:
        tuple: (next_states (m, 2), rewards (m,))
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    sign = 2.0 * np.asarray(actions, dtype=float).reshape(-1) - 1.0
    noise = np.atleast_2d(np.asarray(noise, dtype=float))
    s1, s2 = states[:, 0], states[:, 1]
    interaction = INTERACTION_GAIN * s1 * s2
    next_states = np.column_stack([
        TRANSITION_GAIN * sign * s1 + interaction + noise[:, 0],
        -TRANSITION_GAIN * sign * s2 + interaction + noise[:, 1],
    ])
    rewards = next_states[:, 0] + REWARD_SECOND_WEIGHT * next_states[:, 1] + REWARD_ACTION_WEIGHT * sign
    return next_states, rewards


def simulate_luckett(config, n, T):
    """
    n trajectories of length T under the fixed-probability behavior policy.

    Each trajectory draws, in order: 2 initial normals, T uniforms for actions,
    T x 2 transition noises.
    """
    if n < 1 or T < 1:
        raise ValueError(f"Need n >= 1 and T >= 1, got n={n}, T={T}")

    states = np.empty((n, T + 1, LUCKETT_STATE_DIM))
    actions = np.empty((n, T), dtype=int)
    rewards = np.empty((n, T))
    for i, rng in enumerate(_trajectory_generators(config.seed, n)):
        states[i, 0] = rng.standard_normal(LUCKETT_STATE_DIM)
        actions[i] = (rng.random(T) < config.behavior_prob).astype(int)
        noise = config.noise_sd * rng.standard_normal((T, LUCKETT_STATE_DIM))
        for t in range(T):
            next_state, reward = luckett_step(states[i, t], actions[i, t:t + 1], noise[t])
            states[i, t + 1] = next_state[0]
            rewards[i, t] = reward[0]

    return dataset_from_arrays(states, actions, rewards, LUCKETT_NUM_ACTIONS)


def oracle_eta_luckett(policy, horizon=DEFAULT_ORACLE_HORIZON, num_rollouts=DEFAULT_ORACLE_ROLLOUTS,
                       seed=0, noise_sd=DEFAULT_NOISE_SD, init_state=None):
    """
    Long-run average reward of a policy on the benchmark model by on-policy rollouts.

    Returns:
        tuple: (eta, Monte-Carlo standard error across rollouts)

    Raises:
        NoStationaryDistribution: a rollout diverged
    """
    horizon = int(horizon)
    if horizon < 1 or num_rollouts < 1:
        raise ValueError("horizon and num_rollouts must be positive")

    rng = np.random.Generator(np.random.Philox(seed))
    if init_state is None:
        states = rng.standard_normal((num_rollouts, LUCKETT_STATE_DIM))
    else:
        states = np.tile(np.asarray(init_state, dtype=float), (num_rollouts, 1))

    totals = np.zeros(num_rollouts)
    done = 0
    while done < horizon:
        block = min(ORACLE_BLOCK_SIZE, horizon - done)
        noise = noise_sd * rng.standard_normal((block, num_rollouts, LUCKETT_STATE_DIM))
        for t in range(block):
            probs = policy_prob_matrix(policy, states, LUCKETT_NUM_ACTIONS)
            actions = _sample_actions(rng, probs)
            states, rewards = luckett_step(states, actions, noise[t])
            totals += rewards
        if not np.isfinite(states).all():
            raise NoStationaryDistribution(f"Rollout diverged after {done + block} steps")
        done += block

    averages = totals / horizon
    se = float(averages.std(ddof=1) / np.sqrt(num_rollouts)) if num_rollouts > 1 else 0.0
    return float(averages.mean()), se


# ====================
# 2. FINITE MDP DEFINITION
# ====================

@dataclass(frozen=True)
class FiniteMDP:
    num_states: int
    num_actions: int
    P: np.ndarray
    r: np.ndarray
    reward_noise_sd: float = 0.0

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        r = np.array(self.r, dtype=float)
        shape = (self.num_states, self.num_actions)
        if P.shape != shape + (self.num_states,):
            raise ValueError(f"P has shape {P.shape}, expected {shape + (self.num_states,)}")
        if r.shape != shape:
            raise ValueError(f"r has shape {r.shape}, expected {shape}")
        if (P < 0).any() or np.abs(P.sum(axis=2) - 1.0).max() > PROB_TOLERANCE:
            raise ValueError("Every P[s][a] must be a probability vector (nonnegative, sums to 1 within 1e-12)")
        if self.reward_noise_sd < 0:
            raise ValueError(f"reward_noise_sd must be nonnegative, got {self.reward_noise_sd}")
        P.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, 'P', P)
        object.__setattr__(self, 'r', r)

    def one_hot(self, state_index):
        return np.eye(self.num_states)[state_index]


def load_finite_mdp(path):
    """
    Load a FiniteMDP from JSON.

    Raises:
        FileNotFoundError, ValueError (missing keys or invalid probabilities)
    """
    mdp_path = Path(path)
    if not mdp_path.exists():
        raise FileNotFoundError(
            f"MDP file not found at {mdp_path}\n"
            f"Expected keys: {', '.join(MDP_KEYS)}, reward_noise_sd"
        )
    with open(mdp_path, 'r', encoding='utf-8') as f:
        payload = json.load(f)
    missing = [key for key in MDP_KEYS if key not in payload]
    if missing:
        raise ValueError(f"Missing required keys in {mdp_path}: {', '.join(missing)}")
    return FiniteMDP(
        num_states=int(payload['num_states']),
        num_actions=int(payload['num_actions']),
        P=payload['P'],
        r=payload['r'],
        reward_noise_sd=float(payload.get('reward_noise_sd', 0.0)),
    )


def random_finite_mdp(num_states, num_actions, seed, row_total=12, reward_scale=1.0, reward_noise_sd=0.0):
    """
    Random MDP whose transition probabilities are multiples of 1/row_total.

    Every entry is at least 1/row_total, so every policy induces an irreducible chain,
    and exact_transition_dataset works with resolution = row_total.
    """
    if row_total < num_states:
        raise ValueError("row_total must be at least num_states")
    rng = np.random.Generator(np.random.Philox(seed))
    extra = rng.multinomial(row_total - num_states, np.full(num_states, 1.0 / num_states),
                            size=(num_states, num_actions))
    P = (1 + extra) / row_total
    r = reward_scale * rng.uniform(-1.0, 1.0, size=(num_states, num_actions))
    return FiniteMDP(num_states, num_actions, P, r, reward_noise_sd)


# ====================
# 3. EXACT SOLVES
# ====================

def policy_table(mdp, policy):
    """(S, A) matrix of pi(a|s) for a Policy on one-hot states, or a table passed through."""
    if hasattr(policy, 'prob'):
        return policy_prob_matrix(policy, np.eye(mdp.num_states), mdp.num_actions)
    table = np.asarray(policy, dtype=float)
    if table.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError(f"Policy table has shape {table.shape}, expected {(mdp.num_states, mdp.num_actions)}")
    return table


def _anchor_index(mdp, anchor):
    if isinstance(anchor, ReferencePoint):
        state = int(np.argmax(anchor.s_star))
        action = anchor.a_star
    else:
        state, action = anchor
    return int(state) * mdp.num_actions + int(action)


def state_transition_matrix(mdp, pi):
    """P^pi[s, s'] = sum_a pi(a|s) P[s, a, s']."""
    return np.einsum('sa,sat->st', pi, mdp.P)


def state_action_transition_matrix(mdp, pi):
    """P_sa[(s,a), (s',a')] = P[s, a, s'] pi(a'|s')."""
    return (mdp.P[:, :, :, None] * pi[None, None, :, :]).reshape(
        mdp.num_states * mdp.num_actions, mdp.num_states * mdp.num_actions)


def check_irreducible(transition):
    """Strong connectivity of the positive-probability graph."""
    num_components, _ = connected_components(csr_matrix(transition > 0), directed=True, connection='strong')
    if num_components != 1:
        raise NotIrreducible(f"Induced chain splits into {num_components} strongly connected classes")


def stationary_distribution(transition):
    """Solve d' P = d', sum(d) = 1 by replacing one balance equation with the normalization."""
    size = transition.shape[0]
    lhs = transition.T - np.eye(size)
    lhs[-1, :] = 1.0
    rhs = np.zeros(size)
    rhs[-1] = 1.0
    try:
        return solve(lhs, rhs)
    except LinAlgError as e:
        raise NoStationaryDistribution(f"Stationary system is singular: {e}")


def anchored_bellman_solve(mdp, pi, reward, anchor_index):
    """
    Solve Q(x) + eta - sum_x' P_sa[x, x'] Q(x') = reward(x) with Q(anchor) = 0.

    Returns:
        tuple: (eta, Q as (S, A) table)
    """
    size = mdp.num_states * mdp.num_actions
    system = np.zeros((size + 1, size + 1))
    system[:size, :size] = np.eye(size) - state_action_transition_matrix(mdp, pi)
    system[:size, size] = 1.0
    system[size, anchor_index] = 1.0
    rhs = np.append(np.asarray(reward, dtype=float).reshape(-1), 0.0)
    try:
        solution = solve(system, rhs)
    except LinAlgError as e:
        raise NoStationaryDistribution(f"Anchored Bellman system is singular: {e}")
    return float(solution[size]), solution[:size].reshape(mdp.num_states, mdp.num_actions)


def markov_behavior_rule(state_index, history, table):
    return table[state_index]


def behavior_average_distribution(mdp, behavior, initial, T):
    """
    d_bar_T(s, a) = (1/T) sum_t P(S_t = s, A_t = a) by exact forward propagation.

    Args:
        behavior: (S, A) Markov behavior table
        initial: initial state distribution (S,)
    """
    behavior = np.asarray(behavior, dtype=float)
    marginal = np.asarray(initial, dtype=float)
    total = np.zeros((mdp.num_states, mdp.num_actions))
    for _ in range(int(T)):
        joint = marginal[:, None] * behavior
        total += joint
        marginal = np.einsum('sa,sat->t', joint, mdp.P)
    return total / T


@dataclass(frozen=True)
class FiniteMDPSolution:
    eta: float
    q_tilde: np.ndarray
    d_state: np.ndarray
    d_pi: np.ndarray
    policy: np.ndarray
    d_bar: Optional[np.ndarray] = None
    e_pi: Optional[np.ndarray] = None
    q_pi: Optional[np.ndarray] = None
    T: Optional[int] = None


def finite_mdp_solve(mdp, policy, anchor, behavior=None, initial=None, T=None):
    """
    Exact (eta, Q_tilde, d^pi) and, given a Markov behavior table with initial
    distribution and horizon, (d_bar_T, e^pi, q^pi).

    e^pi = (d^pi / d_bar_T) / sum d^pi (d^pi / d_bar_T), so that sum e^pi d^pi = 1;
    q^pi solves the anchored Bellman-like system with reward 1 - e^pi (average 0).

    Raises:
        NotIrreducible, NoStationaryDistribution
    """
    pi = policy_table(mdp, policy)
    transition = state_transition_matrix(mdp, pi)
    check_irreducible(transition)
    d_state = stationary_distribution(transition)
    d_pi = d_state[:, None] * pi
    anchor_index = _anchor_index(mdp, anchor)
    eta, q_tilde = anchored_bellman_solve(mdp, pi, mdp.r, anchor_index)

    d_bar = e_pi = q_pi = None
    if behavior is not None:
        if initial is None or T is None:
            raise ValueError("behavior requires an initial distribution and horizon T")
        d_bar = behavior_average_distribution(mdp, policy_table(mdp, behavior), initial, T)
        unsupported = (d_pi > 0) & (d_bar <= 0)
        if unsupported.any():
            raise ValueError("Behavior never visits a state-action pair the target policy visits")
        ratio = np.divide(d_pi, d_bar, out=np.zeros_like(d_pi), where=d_bar > 0)
        e_pi = ratio / float((ratio * d_pi).sum())
        _, q_pi = anchored_bellman_solve(mdp, pi, 1.0 - e_pi, anchor_index)

    return FiniteMDPSolution(eta=eta, q_tilde=q_tilde, d_state=d_state, d_pi=d_pi, policy=pi,
                             d_bar=d_bar, e_pi=e_pi, q_pi=q_pi, T=T)


def bellman_residual(mdp, solution):
    """r + P_sa Q_tilde - eta - Q_tilde at every (s, a); zero at an exact solution."""
    P_sa = state_action_transition_matrix(mdp, solution.policy)
    q = solution.q_tilde.reshape(-1)
    return (mdp.r.reshape(-1) + P_sa @ q - solution.eta - q).reshape(mdp.num_states, mdp.num_actions)


def exact_asymptotic_variance(mdp, solution):
    """
    sigma^2 = (1/T) sum d_bar w^2 v with w = d^pi / d_bar_T and v the conditional TD variance.

    Cross-time terms vanish because TD errors have conditional mean zero.
    """
    if solution.d_bar is None:
        raise ValueError("Solution carries no behavior distribution")
    values = (solution.policy * solution.q_tilde).sum(axis=1)
    expected = np.einsum('sat,t->sa', mdp.P, values)
    spread = np.einsum('sat,sat->sa', mdp.P, (values[None, None, :] - expected[:, :, None]) ** 2)
    td_variance = mdp.reward_noise_sd ** 2 + spread
    ratio = np.divide(solution.d_pi, solution.d_bar, out=np.zeros_like(solution.d_pi),
                      where=solution.d_bar > 0)
    return float((solution.d_bar * ratio ** 2 * td_variance).sum() / solution.T)


def homoskedastic_variance(sigma0_sq, T, ratio, d_bar):
    """(sigma0^2 / T)(1 + ||ratio - 1||^2) with the norm taken in L2(d_bar)."""
    ratio = np.asarray(ratio, dtype=float)
    d_bar = np.asarray(d_bar, dtype=float)
    return float(sigma0_sq / T * (1.0 + (d_bar * (ratio - 1.0) ** 2).sum()))


# ====================
# 4. FINITE MDP SAMPLING
# ====================

def markov_behavior(table):
    """Behavior rule from an (S, A) table, ignoring history."""
    return partial(markov_behavior_rule, table=np.asarray(table, dtype=float))


def simulate_finite_mdp(mdp, behavior, n, T, seed, initial=None, p_min=DEFAULT_P_MIN):
    """
    n trajectories of length T with one-hot state vectors.

    Args:
        behavior: (S, A) table or callable(state_index, history) -> action probabilities;
            history is the list of (state, action, reward) tuples observed so far
        initial: initial state distribution (uniform when None)
        p_min: every action probability is floored at p_min, then renormalized
    """
    if not callable(behavior):
        behavior = markov_behavior(behavior)
    if initial is None:
        initial = np.full(mdp.num_states, 1.0 / mdp.num_states)
    initial = np.asarray(initial, dtype=float)

    state_index = np.empty((n, T + 1), dtype=int)
    actions = np.empty((n, T), dtype=int)
    rewards = np.empty((n, T))
    for i, rng in enumerate(_trajectory_generators(seed, n)):
        state = int(rng.choice(mdp.num_states, p=initial))
        history = []
        state_index[i, 0] = state
        for t in range(T):
            probs = np.maximum(np.asarray(behavior(state, history), dtype=float), p_min)
            probs = probs / probs.sum()
            action = int(rng.choice(mdp.num_actions, p=probs))
            reward = mdp.r[state, action] + mdp.reward_noise_sd * rng.standard_normal()
            next_state = int(rng.choice(mdp.num_states, p=mdp.P[state, action]))
            history.append((state, action, reward))
            actions[i, t] = action
            rewards[i, t] = reward
            state_index[i, t + 1] = next_state
            state = next_state

    states = np.eye(mdp.num_states)[state_index]
    return dataset_from_arrays(states, actions, rewards, mdp.num_actions)


def exact_transition_dataset(mdp, resolution):
    """
    One-step trajectories with exact expected transition frequencies.

    Each (s, a) appears `resolution` times; next state s' appears P[s, a, s'] * resolution
    times among them, and every reward equals r(s, a).

    Raises:
        ValueError: P * resolution is not integral
    """
    counts = mdp.P * resolution
    rounded = np.rint(counts).astype(int)
    if np.abs(counts - rounded).max() > FREQUENCY_TOLERANCE:
        raise ValueError(f"P * {resolution} is not integral; pick a resolution matching P's denominators")

    eye = np.eye(mdp.num_states)
    states, actions, rewards = [], [], []
    for s in range(mdp.num_states):
        for a in range(mdp.num_actions):
            for s_next in range(mdp.num_states):
                for _ in range(rounded[s, a, s_next]):
                    states.append([eye[s], eye[s_next]])
                    actions.append([a])
                    rewards.append([mdp.r[s, a]])
    return dataset_from_arrays(np.array(states), np.array(actions), np.array(rewards), mdp.num_actions)
