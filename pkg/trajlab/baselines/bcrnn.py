"""
Behaviour-cloning recurrent next-observation model.

Trained with teacher forcing on masked next-token cross-entropy; generation
feeds each sampled token back as the next input.
"""
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from ..data import Dataset
from ..errors import ContractViolation, TrainingDivergence
from ..models import BcRnnConfig
from ..network import RoadNetwork
from ..nn import Adam, Linear, Module, RecurrentStack, Tensor, no_grad, pad_sequences
from ..nn.tensor import gather_rows, log_softmax, reshape, take_along
from .mmc import tokens_to_dataset

logger = logging.getLogger(__name__)


class BcRnnModel(Module):
    """Recurrent embedding plus a linear head over the token alphabet"""

    kind = "bcrnn"

    def __init__(self, n_tokens: int, hidden_size: int, num_layers: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.stack = RecurrentStack(n_tokens, hidden_size, num_layers, rng)
        self.head = Linear(hidden_size, n_tokens, rng)

    def next_log_probs(self, belief: Tensor, current: np.ndarray, successor_table: np.ndarray) -> Tensor:
        """Log-probabilities of the next token, zero mass outside the feasible successors"""
        return log_softmax(self.head(belief), mask=successor_table[current])


def _teacher_forcing_batch(net: RoadNetwork, routes: Sequence[Tuple[str, ...]]):
    sequences = [net.encode_route(r) for r in routes]
    inputs = [s[:-1] for s in sequences]
    tokens, lengths = pad_sequences(inputs, net.pad_token)
    B, T = tokens.shape
    targets = np.full((B, T), net.pad_token, dtype=np.int64)
    for i, s in enumerate(sequences):
        targets[i, : len(s) - 1] = s[1:]
    valid = np.arange(T)[None, :] < lengths[:, None]
    flat = np.flatnonzero(valid.reshape(-1))
    return tokens, lengths, flat, tokens.reshape(-1)[flat], targets.reshape(-1)[flat]


def sequence_loss(model: BcRnnModel, net: RoadNetwork, routes: Sequence[Tuple[str, ...]]) -> Tensor:
    """Mean masked next-token cross-entropy over every step of the routes"""
    tokens, lengths, flat, current, targets = _teacher_forcing_batch(net, routes)
    if not net.successor_table[current, targets].all():
        raise ContractViolation("a training transition is infeasible on the network")
    B, T = tokens.shape
    states = reshape(model.stack.run(tokens, lengths), (B * T, model.stack.hidden_size))
    beliefs = gather_rows(states, flat)
    logp = model.next_log_probs(beliefs, current, net.successor_table)
    return -take_along(logp, targets).mean()


def bc_rnn_train(dataset: Dataset, net: RoadNetwork, config: BcRnnConfig) -> Tuple[BcRnnModel, List[float]]:
    """
    Fit the model by minibatch Adam.

    Returns:
        (model, mean training loss per epoch)

    Raises:
        TrainingDivergence: Loss became non-finite
    """
    if len(dataset) == 0:
        raise ContractViolation("bc_rnn_train needs a non-empty dataset")
    model = BcRnnModel(net.n_tokens, config.hidden_size, config.num_layers, seed=config.seed)
    optimizer = Adam(model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    routes = dataset.routes
    history: List[float] = []

    logger.info(f"[BCRNN] Training on {len(routes)} trajectories, {model.num_parameters()} parameters")
    for epoch in tqdm(range(config.epochs), desc="bc-rnn", disable=not config.progress):
        order = rng.permutation(len(routes))
        losses, weights = [], []
        for start in range(0, len(order), config.batch_size):
            batch = [routes[i] for i in order[start:start + config.batch_size]]
            optimizer.zero_grad()
            loss = sequence_loss(model, net, batch)
            if not np.isfinite(loss.item()):
                raise TrainingDivergence(f"BC-RNN loss is {loss.item()} at epoch {epoch}")
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
            weights.append(len(batch))
        history.append(float(np.average(losses, weights=weights)))
        logger.debug(f"[BCRNN] epoch {epoch}: loss={history[-1]:.6f}")

    logger.info(f"[BCRNN] Final training loss {history[-1]:.6f}")
    return model, history


def bc_rnn_generate(model: BcRnnModel, net: RoadNetwork, n: int, max_len: int, seed: int) -> Dataset:
    """Autoregressive sampling through the recurrent state"""
    if n < 1 or max_len < 1:
        raise ContractViolation(f"n and max_len must be >= 1, got {n}, {max_len}")
    if model.stack.num_tokens != net.n_tokens:
        raise ContractViolation(f"model alphabet {model.stack.num_tokens} does not match network {net.n_tokens}")
    rng = np.random.default_rng(seed)
    current = np.full(n, net.start_token, dtype=np.int64)
    chains = np.full((n, max_len), -1, dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    rows = np.arange(n)

    with no_grad():
        state = model.stack.initial_state(n)
        for step in range(max_len + 1):
            if rows.size == 0:
                break
            feed = current[rows]
            state = model.stack.step(feed, state)
            probs = np.exp(model.next_log_probs(state[-1], feed, net.successor_table).data)
            cum = np.cumsum(probs, axis=1)
            u = rng.random(rows.size) * cum[:, -1]
            nxt = (cum > u[:, None]).argmax(axis=1)
            going = nxt != net.end_token
            rows = rows[going]
            if step == max_len:
                break
            chains[rows, step] = nxt[going]
            lengths[rows] += 1
            current[rows] = nxt[going]
            if not going.all():
                state = [Tensor(h.data[going]) for h in state]

    truncated = np.zeros(n, dtype=bool)
    truncated[rows] = True
    return tokens_to_dataset(net, [chains[i, : lengths[i]].tolist() for i in range(n)], truncated, tag="bcrnn")


def step_accuracy(model: BcRnnModel, net: RoadNetwork, dataset: Dataset) -> float:
    """Fraction of teacher-forced steps whose argmax next token is correct"""
    with no_grad():
        tokens, lengths, flat, current, targets = _teacher_forcing_batch(net, dataset.routes)
        B, T = tokens.shape
        states = model.stack.run(tokens, lengths).data.reshape(B * T, -1)[flat]
        logp = model.next_log_probs(Tensor(states), current, net.successor_table).data
    return float((logp.argmax(axis=1) == targets).mean())
