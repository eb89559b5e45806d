"""
Adversarial Imitation Trainer

Policy generator, value estimator and discriminator, each with its own
recurrent embedding of the observation history. Each iteration rolls out the
policy, scores every (history, action) pair with the discriminator frozen at
the start of the iteration (reward -log D), alternates value and policy
updates, then updates the discriminator against expert step-pairs.

Discriminator convention: D is the probability that a pair was generated;
generated pairs are labelled 1 and expert pairs 0.
"""
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict
from tqdm import tqdm

from .data import Dataset, longest_route
from .errors import ContractViolation, TrainingDivergence
from .models import ConvergenceRecord, TrainConfig
from .network import RoadNetwork, network_id
from .nn import Adam, Linear, Module, RecurrentStack, Tensor, no_grad, pad_sequences
from .nn.tensor import clip, exp, gather_rows, log, log_softmax, masked_fill, mul, reshape, sigmoid, take_along

logger = logging.getLogger(__name__)

D_EPS = 1e-7
CONVERGENCE_COLUMNS = ["iter", "J_policy", "J_value", "J_discrim", "entropy", "unique_routes"]


# ============================================================================
# STEP PAIRS AND ROLLOUT BATCHES
# ============================================================================

class StepPairs(BaseModel):
    """
    (observation history, action) pairs over a padded token batch.

    Pair k is the history tokens[traj[k], :step[k] + 1] with action actions[k].
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    tokens: np.ndarray      # [N x T] padded observation tokens, Start first
    lengths: np.ndarray     # [N]
    traj: np.ndarray        # [S]
    step: np.ndarray        # [S]
    actions: np.ndarray     # [S]
    masks: np.ndarray       # [S x A] action masks at each pair's last observation

    def __len__(self) -> int:
        return int(self.actions.shape[0])

    @property
    def observations(self) -> np.ndarray:
        return self.tokens[self.traj, self.step]

    @property
    def flat_index(self) -> np.ndarray:
        return self.traj * self.tokens.shape[1] + self.step

    def subset(self, indices: np.ndarray) -> "StepPairs":
        """Pairs at indices, keeping only the trajectories they use"""
        indices = np.asarray(indices, dtype=np.int64)
        used, remap = np.unique(self.traj[indices], return_inverse=True)
        width = int(self.lengths[used].max())
        return StepPairs(
            tokens=self.tokens[used, :width],
            lengths=self.lengths[used],
            traj=remap.astype(np.int64),
            step=self.step[indices],
            actions=self.actions[indices],
            masks=self.masks[indices],
        )

    @classmethod
    def from_dataset(cls, dataset: Dataset, net: RoadNetwork) -> "StepPairs":
        """Every (history, action) pair of complete trajectories, Terminate included"""
        sequences, actions, traj, step = [], [], [], []
        for traj_i, route in enumerate(t.route for t in dataset if not t.truncated):
            tokens = net.encode_route(route)[:-1]
            acts = net.route_actions(route)
            sequences.append(tokens)
            actions.extend(acts)
            traj.extend([len(sequences) - 1] * len(acts))
            step.extend(range(len(acts)))
        if not sequences:
            raise ContractViolation("no complete trajectories to build step pairs from")
        padded, lengths = pad_sequences(sequences, net.pad_token)
        traj = np.asarray(traj, dtype=np.int64)
        step = np.asarray(step, dtype=np.int64)
        return cls(
            tokens=padded,
            lengths=lengths,
            traj=traj,
            step=step,
            actions=np.asarray(actions, dtype=np.int64),
            masks=net.mask_table[padded[traj, step]],
        )


class RolloutBatch(BaseModel):
    """Rolled-out trajectories with per-pair rewards and discounted returns"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    pairs: StepPairs
    next_index: np.ndarray   # [S] pair index of the following step, -1 after End or truncation
    truncated: np.ndarray    # [N]
    rewards: np.ndarray      # [S]
    returns: np.ndarray      # [S]

    def __len__(self) -> int:
        return len(self.pairs)

    def routes(self, net: RoadNetwork) -> List[Tuple[str, ...]]:
        return [
            tuple(net.link_ids[t] for t in self.pairs.tokens[i, 1:self.pairs.lengths[i]])
            for i in range(self.pairs.tokens.shape[0])
        ]

    def to_dataset(self, net: RoadNetwork, tag: str = "trajgail") -> Dataset:
        return Dataset.from_routes(self.routes(net), tag=tag, network_ref=network_id(net),
                                   truncated=self.truncated.tolist())

    def unique_routes(self, net: RoadNetwork) -> int:
        return len({r for r, cut in zip(self.routes(net), self.truncated) if not cut})


def discounted_returns(rewards: np.ndarray, next_index: np.ndarray, gamma: float) -> np.ndarray:
    """G_k = r_k + gamma * G_next(k), with G = 0 after End or truncation"""
    returns = np.zeros_like(rewards)
    for k in range(len(rewards) - 1, -1, -1):
        following = next_index[k]
        returns[k] = rewards[k] + (gamma * returns[following] if following >= 0 else 0.0)
    return returns


# ============================================================================
# MODELS
# ============================================================================

class _HistoryModel(Module):
    """A recurrent embedding with a linear head producing one value per action"""

    def __init__(self, n_tokens: int, n_actions: int, hidden_size: int, num_layers: int, seed):
        rng = np.random.default_rng(seed)
        self.stack = RecurrentStack(n_tokens, hidden_size, num_layers, rng)
        self.head = Linear(hidden_size, n_actions, rng)

    def beliefs(self, pairs: StepPairs) -> Tensor:
        """[S x H] belief state of every pair, from one pass over each trajectory"""
        N, T = pairs.tokens.shape
        states = reshape(self.stack.run(pairs.tokens, pairs.lengths), (N * T, self.stack.hidden_size))
        return gather_rows(states, pairs.flat_index)

    def scores(self, pairs: StepPairs) -> Tensor:
        return self.head(self.beliefs(pairs))


class PolicyGenerator(_HistoryModel):
    """pi(a | s_t): masked softmax over the action head"""

    def log_probs(self, pairs: StepPairs) -> Tensor:
        return log_softmax(self.scores(pairs), mask=pairs.masks)


class ValueEstimator(_HistoryModel):
    """Q(s_t, a) for every action; Q(s_t, a_t) selects the taken action's column"""

    def q_taken(self, pairs: StepPairs) -> Tensor:
        return take_along(self.scores(pairs), pairs.actions)


class Discriminator(_HistoryModel):
    """D(s_t, a_t): probability the pair was generated, clamped to [1e-7, 1 - 1e-7]"""

    def probability(self, pairs: StepPairs) -> Tensor:
        return clip(sigmoid(take_along(self.scores(pairs), pairs.actions)), D_EPS, 1.0 - D_EPS)


def build_models(net: RoadNetwork, config: TrainConfig) -> Tuple[PolicyGenerator, ValueEstimator, Discriminator]:
    args = (net.n_tokens, net.n_actions, config.hidden_size, config.num_layers)
    return (
        PolicyGenerator(*args, seed=[config.seed, 0]),
        ValueEstimator(*args, seed=[config.seed, 1]),
        Discriminator(*args, seed=[config.seed, 2]),
    )


# ============================================================================
# ROLLOUT
# ============================================================================

def rollout(policy: PolicyGenerator, net: RoadNetwork, n: int, max_len: int, seed: int) -> RolloutBatch:
    """
    Sample n trajectories from Start until End or max_len links.

    Rewards and returns are zero until discriminator rewards are assigned.
    """
    if n < 1 or max_len < 1:
        raise ContractViolation(f"n and max_len must be >= 1, got {n}, {max_len}")
    if policy.stack.num_tokens != net.n_tokens or policy.head.bias.shape[0] != net.n_actions:
        raise ContractViolation("policy alphabet does not match the network")
    rng = np.random.default_rng(seed)
    width = max_len + 1
    obs = np.full((n, width), net.pad_token, dtype=np.int64)
    obs[:, 0] = net.start_token
    actions = np.full((n, width), -1, dtype=np.int64)
    lengths = np.ones(n, dtype=np.int64)
    ended = np.zeros((n, width), dtype=bool)
    current = np.full(n, net.start_token, dtype=np.int64)
    rows = np.arange(n)  # still running; the recurrent state holds these rows only

    with no_grad():
        state = policy.stack.initial_state(n)
        for step in range(width):
            if rows.size == 0:
                break
            feed = current[rows]
            state = policy.stack.step(feed, state)
            logp = log_softmax(policy.head(state[-1]), mask=net.mask_table[feed]).data
            cum = np.cumsum(np.exp(logp), axis=1)
            u = rng.random(rows.size) * cum[:, -1]
            choice = (cum > u[:, None]).argmax(axis=1)
            nxt = net.next_table[feed, choice]

            done = nxt == net.end_token
            going = ~done
            finished = rows[done]
            actions[finished, step] = choice[done]
            ended[finished, step] = True
            rows = rows[going]
            if step == max_len:
                break
            actions[rows, step] = choice[going]
            obs[rows, step + 1] = nxt[going]
            lengths[rows] += 1
            current[rows] = nxt[going]
            if done.any():
                state = [Tensor(h.data[going]) for h in state]

    truncated = np.zeros(n, dtype=bool)
    truncated[rows] = True
    traj, steps = np.nonzero(actions >= 0)
    index_of = np.full((n, width), -1, dtype=np.int64)
    index_of[traj, steps] = np.arange(traj.size)
    following = np.full(traj.size, -1, dtype=np.int64)
    has_next = ~ended[traj, steps] & (steps + 1 < width)
    following[has_next] = index_of[traj[has_next], steps[has_next] + 1]

    pairs = StepPairs(
        tokens=obs[:, : int(lengths.max())],
        lengths=lengths,
        traj=traj.astype(np.int64),
        step=steps.astype(np.int64),
        actions=actions[traj, steps],
        masks=net.mask_table[obs[traj, steps]],
    )
    zeros = np.zeros(traj.size)
    return RolloutBatch(pairs=pairs, next_index=following, truncated=truncated, rewards=zeros, returns=zeros.copy())


def generate(policy: PolicyGenerator, net: RoadNetwork, n: int, max_len: int, seed: int) -> Dataset:
    """Roll out n trajectories and keep only the routes"""
    batch = rollout(policy, net, n, max_len, seed)
    if batch.truncated.any():
        logger.info(f"[TRAJGAIL] {int(batch.truncated.sum())} of {n} generated trajectories truncated at {max_len}")
    return batch.to_dataset(net)


# ============================================================================
# REWARDS AND OBJECTIVES
# ============================================================================

def discriminator_reward(discrim: Discriminator, history: Sequence[int], action: int, net: RoadNetwork) -> float:
    """-log D for one (observation history, action) pair"""
    tokens = np.asarray([list(history)], dtype=np.int64)
    pairs = StepPairs(
        tokens=tokens,
        lengths=np.array([len(history)]),
        traj=np.array([0]),
        step=np.array([len(history) - 1]),
        actions=np.array([action]),
        masks=net.mask_table[tokens[:, -1]],
    )
    with no_grad():
        return float(-np.log(discrim.probability(pairs).data[0]))


def assign_rewards(batch: RolloutBatch, discrim: Discriminator, gamma: float) -> RolloutBatch:
    """Rewards -log D from the given discriminator and the matching returns"""
    with no_grad():
        rewards = -np.log(discrim.probability(batch.pairs).data)
    batch.rewards = rewards
    batch.returns = discounted_returns(rewards, batch.next_index, gamma)
    return batch


def discriminator_objective(discrim: Discriminator, generated: StepPairs, expert: StepPairs) -> Tensor:
    """Binary cross-entropy: mean -log D over generated plus mean -log(1 - D) over expert"""
    d_gen = discrim.probability(generated)
    d_exp = discrim.probability(expert)
    return -(log(d_gen).mean() + log(1.0 - d_exp).mean())


def value_targets(
    value: ValueEstimator,
    policy: PolicyGenerator,
    batch: RolloutBatch,
    gamma: float,
) -> np.ndarray:
    """r_t + gamma * sum_a pi(a | s_t+1) Q(s_t+1, a), with 0 after End or truncation"""
    with no_grad():
        q_all = value.scores(batch.pairs).data
        pi_all = np.exp(policy.log_probs(batch.pairs).data)
    expected = (pi_all * q_all).sum(axis=1)
    bootstrap = np.where(batch.next_index >= 0, expected[np.maximum(batch.next_index, 0)], 0.0)
    return batch.rewards + gamma * bootstrap


def value_objective(value: ValueEstimator, pairs: StepPairs, targets: np.ndarray) -> Tensor:
    """Mean squared error of Q(s_t, a_t) against constant targets"""
    residual = value.q_taken(pairs) - Tensor(targets)
    return mul(residual, residual).mean()


def policy_objective(
    policy: PolicyGenerator,
    pairs: StepPairs,
    q_taken: np.ndarray,
    entropy_coef: float,
) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Loss -(J_policy + lambda * H) with J_policy = mean(log pi(a|s) * Q) and H
    the exact masked entropy averaged over visited histories.

    Returns:
        (loss, J_policy, H)
    """
    logp = policy.log_probs(pairs)
    j_policy = mul(take_along(logp, pairs.actions), Tensor(q_taken)).mean()
    safe_logp = masked_fill(logp, ~pairs.masks, 0.0)
    entropy = -mul(exp(logp), safe_logp).sum(axis=1).mean()
    loss = -(j_policy + entropy * entropy_coef)
    return loss, j_policy, entropy


def _checked_backward(loss: Tensor, label: str):
    if not np.isfinite(loss.item()):
        raise TrainingDivergence(f"{label} loss is non-finite ({loss.item()})")
    loss.backward()


# ============================================================================
# UPDATES
# ============================================================================

def update_discriminator(
    discrim: Discriminator,
    optimizer: Adam,
    expert: StepPairs,
    generated: StepPairs,
) -> float:
    """One BCE step; returns the post-step J_Discrim"""
    if len(expert) == 0 or len(generated) == 0:
        raise ContractViolation("update_discriminator needs non-empty expert and generated batches")
    optimizer.zero_grad()
    _checked_backward(discriminator_objective(discrim, generated, expert), "discriminator")
    optimizer.step()
    with no_grad():
        return discriminator_objective(discrim, generated, expert).item()


def update_value(
    value: ValueEstimator,
    optimizer: Adam,
    batch: RolloutBatch,
    policy: PolicyGenerator,
    gamma: float,
) -> float:
    """One step on the bootstrapped MSE; returns the post-step J_Value"""
    targets = value_targets(value, policy, batch, gamma)
    optimizer.zero_grad()
    _checked_backward(value_objective(value, batch.pairs, targets), "value")
    optimizer.step()
    with no_grad():
        return value_objective(value, batch.pairs, targets).item()


def update_policy(
    policy: PolicyGenerator,
    optimizer: Adam,
    pairs: StepPairs,
    q_taken: np.ndarray,
    entropy_coef: float,
) -> Tuple[float, float]:
    """One ascent step on J_policy + lambda * H; returns post-step (J_policy, H)"""
    optimizer.zero_grad()
    loss, _, _ = policy_objective(policy, pairs, q_taken, entropy_coef)
    _checked_backward(loss, "policy")
    optimizer.step()
    with no_grad():
        _, j_policy, entropy = policy_objective(policy, pairs, q_taken, entropy_coef)
    return j_policy.item(), entropy.item()


# ============================================================================
# TRAINING
# ============================================================================

class TrainResult(BaseModel):
    """Trained modules plus the convergence log"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    policy: PolicyGenerator
    value: ValueEstimator
    discrim: Discriminator
    log: List[ConvergenceRecord]
    max_len: int


def train(expert: Dataset, net: RoadNetwork, config: TrainConfig) -> TrainResult:
    """
    Adversarial training loop.

    Per iteration: roll out config.samples trajectories, assign rewards from
    the current discriminator, run generator_updates (value, policy)
    alternations, then discriminator_updates BCE steps against freshly
    resampled expert step-pairs of the same size as the generated set.
    """
    if len(expert) == 0:
        raise ContractViolation("train needs a non-empty expert dataset")
    expert_pairs = StepPairs.from_dataset(expert, net)
    max_len = config.max_len or 3 * longest_route(expert)
    policy, value, discrim = build_models(net, config)
    opt_policy = Adam(policy.parameters(), lr=config.learning_rate)
    opt_value = Adam(value.parameters(), lr=config.learning_rate)
    opt_discrim = Adam(discrim.parameters(), lr=config.learning_rate)
    master = np.random.default_rng(config.seed)

    logger.info(
        f"[TRAJGAIL] Training on {len(expert)} trajectories ({len(expert_pairs)} step-pairs): "
        f"{config.iterations} iterations x {config.samples} samples, max_len={max_len}"
    )
    records: List[ConvergenceRecord] = []
    collapsed = 0
    for iteration in tqdm(range(config.iterations), desc="trajgail", disable=not config.progress):
        batch = rollout(policy, net, config.samples, max_len, seed=int(master.integers(2 ** 62)))
        assign_rewards(batch, discrim, config.gamma)

        j_value = j_policy = entropy = float("nan")
        for _ in range(config.generator_updates):
            j_value = update_value(value, opt_value, batch, policy, config.gamma)
            with no_grad():
                q_taken = value.q_taken(batch.pairs).data
            j_policy, entropy = update_policy(policy, opt_policy, batch.pairs, q_taken, config.entropy_coef)

        j_discrim = float("nan")
        for _ in range(config.discriminator_updates):
            sample = master.integers(0, len(expert_pairs), size=len(batch))
            j_discrim = update_discriminator(discrim, opt_discrim, expert_pairs.subset(sample), batch.pairs)

        unique = batch.unique_routes(net)
        record = ConvergenceRecord(iter=iteration, J_policy=j_policy, J_value=j_value, J_discrim=j_discrim,
                                   entropy=entropy, unique_routes=unique)
        records.append(record)
        logger.debug(f"[TRAJGAIL] {record.model_dump()}")
        if (iteration + 1) % config.log_every == 0 or iteration + 1 == config.iterations:
            logger.info(
                f"[TRAJGAIL] iter {iteration + 1}/{config.iterations}: J_policy={j_policy:.4f} "
                f"J_value={j_value:.4f} J_discrim={j_discrim:.4f} H={entropy:.4f} routes={unique}"
            )

        collapsed = collapsed + 1 if unique < config.collapse_floor else 0
        if collapsed == config.collapse_patience:
            logger.warning(
                f"[TRAJGAIL] Possible mode collapse: fewer than {config.collapse_floor} unique routes "
                f"for {collapsed} consecutive iterations (iter {iteration + 1})"
            )

    return TrainResult(policy=policy, value=value, discrim=discrim, log=records, max_len=max_len)


# ============================================================================
# PERSISTENCE
# ============================================================================

GROUPS = ("policy", "value", "discrim")


def checkpoint_tensors(result: TrainResult) -> Dict[str, np.ndarray]:
    tensors: Dict[str, np.ndarray] = {}
    for group, module in zip(GROUPS, (result.policy, result.value, result.discrim)):
        for name, array in module.state_dict().items():
            tensors[f"{group}.{name}"] = array
    return tensors


def models_from_tensors(
    tensors: Dict[str, np.ndarray],
    net: RoadNetwork,
    config: TrainConfig,
) -> Tuple[PolicyGenerator, ValueEstimator, Discriminator]:
    modules = build_models(net, config)
    for group, module in zip(GROUPS, modules):
        prefix = f"{group}."
        module.load_state_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    return modules


def write_convergence_csv(records: Sequence[ConvergenceRecord], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([r.model_dump() for r in records], columns=CONVERGENCE_COLUMNS)
    frame.to_csv(path, index=False, lineterminator="\n", float_format="%.10g")
    logger.info(f"[TRAJGAIL] Wrote convergence log ({len(records)} rows) to {path}")


def read_convergence_csv(path: Union[str, Path]) -> List[ConvergenceRecord]:
    frame = pd.read_csv(path)
    return [ConvergenceRecord(**row) for row in frame.to_dict(orient="records")]
