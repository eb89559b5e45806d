"""
Mobility Markov Chain

First-order next-observation model over the token alphabet. Start is prepended
and End appended to every trajectory before counting, so the Start row is the
origin distribution and the End column the termination probability.
"""
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..data import Dataset
from ..errors import ContractViolation
from ..network import RoadNetwork, network_id

logger = logging.getLogger(__name__)


class MmcModel:
    """Transition counts and row-normalized probabilities over tokens"""

    kind = "mmc"

    def __init__(self, counts: np.ndarray, n_links: int):
        self.counts = np.asarray(counts, dtype=np.float64)
        self.n_links = n_links
        totals = self.counts.sum(axis=1, keepdims=True)
        self.probs = np.divide(self.counts, totals, out=np.zeros_like(self.counts), where=totals > 0)

    @property
    def start_token(self) -> int:
        return self.n_links

    @property
    def end_token(self) -> int:
        return self.n_links + 1

    def prob(self, net: RoadNetwork, nxt: str, prev: str) -> float:
        """P(next | prev) for observations (link ids or virtual tokens)"""
        return float(self.probs[net.token_of(prev), net.token_of(nxt)])

    def to_tensors(self) -> Dict[str, np.ndarray]:
        return {"counts": self.counts}

    @classmethod
    def from_tensors(cls, tensors: Dict[str, np.ndarray], n_links: int) -> "MmcModel":
        return cls(tensors["counts"], n_links)


def mmc_fit(dataset: Dataset, net: RoadNetwork) -> MmcModel:
    """
    Count transitions, Start and End included.

    P(next = i | prev = j) = N(i | j) / sum_k N(k | j)
    """
    if len(dataset) == 0:
        raise ContractViolation("mmc_fit needs a non-empty dataset")
    counts = np.zeros((net.n_tokens, net.n_tokens), dtype=np.float64)
    for traj in dataset:
        tokens = np.asarray(net.encode_route(traj.route), dtype=np.int64)
        np.add.at(counts, (tokens[:-1], tokens[1:]), 1.0)
    model = MmcModel(counts, net.n_links)
    logger.info(f"[MMC] Fitted on {len(dataset)} trajectories, {int((counts > 0).sum())} observed transitions")
    return model


# ============================================================================
# SAMPLING
# ============================================================================

def sample_markov_chain(
    transition: np.ndarray,
    start_token: int,
    end_token: int,
    n: int,
    max_len: int,
    seed: int,
) -> Tuple[List[List[int]], np.ndarray]:
    """
    Sample n token chains from Start until End or max_len links.

    Args:
        transition: [n_tokens x n_tokens] row-stochastic matrix (rows that are
            never visited may be zero)

    Returns:
        (link-token lists, truncated flags)
    """
    if n < 1 or max_len < 1:
        raise ContractViolation(f"n and max_len must be >= 1, got {n}, {max_len}")
    cumulative = np.cumsum(transition, axis=1)
    rng = np.random.default_rng(seed)
    current = np.full(n, start_token, dtype=np.int64)
    chains = np.full((n, max_len), -1, dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)

    for step in range(max_len + 1):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        cum = cumulative[current[rows]]
        mass = cum[:, -1]
        if (mass <= 0).any():
            bad = int(current[rows][np.argmax(mass <= 0)])
            raise ContractViolation(f"token {bad} has no outgoing probability mass")
        u = rng.random(rows.size) * mass
        nxt = (cum > u[:, None]).argmax(axis=1)
        finished = nxt == end_token
        active[rows[finished]] = False
        going = rows[~finished]
        if step == max_len:
            break
        chains[going, step] = nxt[~finished]
        lengths[going] += 1
        current[going] = nxt[~finished]

    truncated = active.copy()
    links = [chains[i, : lengths[i]].tolist() for i in range(n)]
    return links, truncated


def tokens_to_dataset(
    net: RoadNetwork,
    chains: Sequence[Sequence[int]],
    truncated: np.ndarray,
    tag: str,
) -> Dataset:
    routes = [tuple(net.link_ids[t] for t in chain) for chain in chains]
    return Dataset.from_routes(routes, tag=tag, network_ref=network_id(net), truncated=truncated.tolist())


def mmc_generate(model: MmcModel, net: RoadNetwork, n: int, max_len: int, seed: int) -> Dataset:
    """
    Sample n trajectories row by row from Start.

    Raises:
        ContractViolation: A visited row has zero mass
    """
    if model.counts.shape != (net.n_tokens, net.n_tokens):
        raise ContractViolation(f"MMC table {model.counts.shape} does not match the network alphabet {net.n_tokens}")
    chains, truncated = sample_markov_chain(model.probs, net.start_token, net.end_token, n, max_len, seed)
    if truncated.any():
        logger.info(f"[MMC] {int(truncated.sum())} of {n} samples truncated at max_len={max_len}")
    return tokens_to_dataset(net, chains, truncated, tag="mmc")


def conditional_entropy(model: MmcModel) -> float:
    """Count-weighted conditional entropy (nats) of next token given the current one"""
    total = model.counts.sum()
    if total <= 0:
        return 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(model.probs > 0, np.log(model.probs), 0.0)
    return float(-(model.counts * logs).sum() / total)
