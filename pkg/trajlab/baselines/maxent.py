"""
Maximum-Entropy Inverse Reinforcement Learning

Linear rewards over one-hot state features (SVF) or state-action features
(SAVF). Each gradient step runs finite-horizon soft value iteration to get the
soft-optimal policy, propagates visitation frequencies forward from Start and
moves the reward weights by empirical minus expected visitation.
"""
import logging
import math
from typing import Dict, Literal, Tuple

import numpy as np
from scipy.special import logsumexp

from ..data import Dataset, longest_route
from ..errors import ContractViolation
from ..models import MaxEntConfig
from ..network import RoadNetwork
from ..nn import Adam, Parameter
from .mmc import sample_markov_chain, tokens_to_dataset

logger = logging.getLogger(__name__)

Variant = Literal["svf", "savf"]


class MaxEntModel:
    """Reward weights and the induced stochastic policy table"""

    def __init__(
        self,
        variant: Variant,
        weights: np.ndarray,
        policy: np.ndarray,
        horizon: int,
        converged: bool = True,
        iterations: int = 0,
    ):
        self.variant = variant
        self.weights = weights
        self.policy = policy
        self.horizon = horizon
        self.converged = converged
        self.iterations = iterations

    @property
    def kind(self) -> str:
        return f"maxent_{self.variant}"

    def to_tensors(self) -> Dict[str, np.ndarray]:
        return {"weights": self.weights, "policy": self.policy}

    @classmethod
    def from_tensors(cls, tensors: Dict[str, np.ndarray], variant: Variant, horizon: int) -> "MaxEntModel":
        return cls(variant, tensors["weights"], tensors["policy"], horizon)


def _rows(net: RoadNetwork) -> int:
    return net.n_links + 2  # links, Start, End


def _state_action_rewards(net: RoadNetwork, variant: Variant, weights: np.ndarray) -> np.ndarray:
    if variant == "svf":
        return np.repeat(weights[:, None], net.n_actions, axis=1)
    return weights


def _feature_shape(net: RoadNetwork, variant: Variant) -> Tuple[int, ...]:
    return (_rows(net),) if variant == "svf" else (_rows(net), net.n_actions)


def horizon_for(dataset: Dataset, factor: float) -> int:
    """Steps from Start to End of the longest route, scaled by factor"""
    return int(math.ceil(factor * (longest_route(dataset) + 1)))


def soft_value_iteration(net: RoadNetwork, rewards: np.ndarray, horizon: int) -> np.ndarray:
    """
    Stationary soft-optimal policy after horizon backups.

    Args:
        rewards: [rows x A] reward of each state-action pair

    Returns:
        [rows x A] policy; zero outside the mask, End row all zero
    """
    rows = _rows(net)
    mask = net.mask_table
    nxt = np.where(mask, net.next_table, 0)
    value = np.full(rows, -np.inf)
    value[net.end_token] = 0.0
    q = np.full((rows, net.n_actions), -np.inf)
    for _ in range(horizon):
        q = np.where(mask, rewards + value[nxt], -np.inf)
        value = logsumexp(q, axis=1)
        value[net.end_token] = 0.0

    policy = np.zeros((rows, net.n_actions))
    for s in range(rows):
        if s == net.end_token:
            continue
        if np.isfinite(value[s]):
            policy[s] = np.where(mask[s], np.exp(q[s] - value[s]), 0.0)
        else:
            # End unreachable within the horizon
            policy[s] = mask[s] / mask[s].sum()
    return policy


def expected_visitation(net: RoadNetwork, policy: np.ndarray, horizon: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Expected state and state-action visitation counts over horizon steps from Start.

    Returns:
        ([rows] state visitation excluding End, [rows x A] state-action visitation)
    """
    rows = _rows(net)
    nxt = np.where(net.mask_table, net.next_table, 0)
    d = np.zeros(rows)
    d[net.start_token] = 1.0
    svf = np.zeros(rows)
    savf = np.zeros((rows, net.n_actions))
    for _ in range(horizon):
        d[net.end_token] = 0.0
        svf += d
        flow = d[:, None] * policy
        savf += flow
        d = np.zeros(rows)
        np.add.at(d, nxt[net.mask_table], flow[net.mask_table])
    return svf, savf


def empirical_visitation(dataset: Dataset, net: RoadNetwork) -> Tuple[np.ndarray, np.ndarray]:
    """Mean per-trajectory state and state-action visit counts of the experts"""
    rows = _rows(net)
    svf = np.zeros(rows)
    savf = np.zeros((rows, net.n_actions))
    for traj in dataset:
        states = [net.start_token] + [net.token_of(lid) for lid in traj.route]
        actions = net.route_actions(traj.route)
        np.add.at(svf, states, 1.0)
        np.add.at(savf, (states, actions), 1.0)
    return svf / len(dataset), savf / len(dataset)


def monte_carlo_visitation(
    net: RoadNetwork,
    policy: np.ndarray,
    horizon: int,
    n: int,
    seed: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Rollout estimate of state visitation with its standard error.

    Returns:
        ([rows] mean visit count, [rows] standard error)
    """
    rng = np.random.default_rng(seed)
    rows = _rows(net)
    cumulative = np.cumsum(policy, axis=1)
    visits = np.zeros((n, rows))
    current = np.full(n, net.start_token, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    for _ in range(horizon):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        np.add.at(visits, (idx, current[idx]), 1.0)
        cum = cumulative[current[idx]]
        u = rng.random(idx.size) * cum[:, -1]
        action = (cum > u[:, None]).argmax(axis=1)
        current[idx] = net.next_table[current[idx], action]
        active[idx[current[idx] == net.end_token]] = False
    return visits.mean(axis=0), visits.std(axis=0, ddof=1) / math.sqrt(n)


def maxent_gradient(
    net: RoadNetwork,
    variant: Variant,
    weights: np.ndarray,
    empirical: Tuple[np.ndarray, np.ndarray],
    horizon: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """(empirical - expected visitation, policy) at the given weights"""
    policy = soft_value_iteration(net, _state_action_rewards(net, variant, weights), horizon)
    svf, savf = expected_visitation(net, policy, horizon)
    if variant == "svf":
        return empirical[0] - svf, policy
    return empirical[1] - savf, policy


def maxent_train(dataset: Dataset, net: RoadNetwork, variant: Variant, config: MaxEntConfig) -> MaxEntModel:
    """
    Gradient ascent on the expert log-likelihood.

    Stops once max |gradient| < tolerance. Otherwise returns the best-so-far
    weights (smallest max |gradient|) with converged=False and a warning.
    """
    if variant not in ("svf", "savf"):
        raise ContractViolation(f"Unknown MaxEnt variant {variant!r}")
    if len(dataset) == 0:
        raise ContractViolation("maxent_train needs a non-empty dataset")
    horizon = horizon_for(dataset, config.horizon_factor)
    empirical = empirical_visitation(dataset, net)
    theta = Parameter(np.zeros(_feature_shape(net, variant)), name="theta")
    optimizer = Adam({"theta": theta}, lr=config.learning_rate)

    best = (math.inf, theta.data.copy(), None, 0)
    logger.info(f"[MAXENT] {variant.upper()} on {len(dataset)} trajectories, horizon={horizon}")
    for iteration in range(1, config.iterations + 1):
        grad, policy = maxent_gradient(net, variant, theta.data, empirical, horizon)
        size = float(np.abs(grad).max())
        if size < best[0]:
            best = (size, theta.data.copy(), policy, iteration - 1)
        logger.debug(f"[MAXENT] iter {iteration}: max|grad|={size:.3g}")
        if size < config.tolerance:
            logger.info(f"[MAXENT] Converged after {iteration - 1} steps (max|grad|={size:.3g})")
            return MaxEntModel(variant, theta.data.copy(), policy, horizon, converged=True, iterations=iteration - 1)
        theta.grad = -grad  # ascent
        optimizer.step()

    grad, policy = maxent_gradient(net, variant, theta.data, empirical, horizon)
    size = float(np.abs(grad).max())
    if size < best[0]:
        best = (size, theta.data.copy(), policy, config.iterations)
    logger.warning(
        f"[MAXENT] Not converged after {config.iterations} steps; returning best weights "
        f"(max|grad|={best[0]:.3g} at step {best[3]})"
    )
    return MaxEntModel(variant, best[1], best[2], horizon, converged=False, iterations=config.iterations)


def policy_token_transitions(net: RoadNetwork, policy: np.ndarray) -> np.ndarray:
    """[n_tokens x n_tokens] next-token probabilities induced by a policy table"""
    transition = np.zeros((net.n_tokens, net.n_tokens))
    rows = _rows(net)
    mask = net.mask_table
    for s in range(rows):
        for a in np.flatnonzero(mask[s]):
            transition[s, net.next_table[s, a]] += policy[s, a]
    return transition


def maxent_generate(model: MaxEntModel, net: RoadNetwork, n: int, max_len: int, seed: int) -> Dataset:
    """Sample the induced policy from Start"""
    if model.policy.shape != (_rows(net), net.n_actions):
        raise ContractViolation(f"policy table {model.policy.shape} does not match the network")
    transition = policy_token_transitions(net, model.policy)
    chains, truncated = sample_markov_chain(transition, net.start_token, net.end_token, n, max_len, seed)
    return tokens_to_dataset(net, chains, truncated, tag=model.kind)
