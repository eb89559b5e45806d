"""
Demand Simulator

Expert-demonstration generator: samples OD pairs under a demand pattern and
routes under a route-choice rule, producing trajectory datasets.
"""
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from typing import List, Sequence, Tuple

import networkx as nx
import numpy as np

from .data import Dataset, Trajectory
from .errors import ContractViolation
from .models import DemandPattern, RouteChoiceRule
from .network import RoadNetwork, Route, network_id, route_length

logger = logging.getLogger(__name__)

ODPair = Tuple[str, str]


# ============================================================================
# OD PAIRS
# ============================================================================

def _heading(net: RoadNetwork, link_id: str) -> Tuple[float, float]:
    link = net.links[link_id]
    a, b = net.nodes[link.from_node], net.nodes[link.to_node]
    return b.x - a.x, b.y - a.y


def canonical_single_od(net: RoadNetwork) -> ODPair:
    """
    The fixed Single-OD pair: the first source, and the southbound sink two
    blocks east and two blocks south of where that source enters the grid.
    """
    origin = net.sources[0]
    entry = net.nodes[net.links[origin].to_node]
    block = net.links[origin].length
    for sink in net.sink_order:
        start = net.nodes[net.links[sink].from_node]
        dx, dy = _heading(net, sink)
        if math.isclose(start.x, entry.x + 2 * block) and math.isclose(start.y, entry.y - 2 * block) \
                and dy < 0 and math.isclose(dx, 0.0, abs_tol=1e-9):
            return origin, sink
    raise ContractViolation(f"{net.name} has no canonical Single-OD pair; set demand origin and dest explicitly")


def _is_u_turn(net: RoadNetwork, origin: str, dest: str) -> bool:
    return net.links[origin].from_node == net.links[dest].to_node


def od_pairs(net: RoadNetwork, pattern: DemandPattern) -> List[Tuple[str, str, float]]:
    """
    Weighted OD pairs of a demand pattern.

    Multi-OD patterns use every source/sink pair except same-approach U-turns;
    major flows (west sources to east sinks, plus the reverse for two-way)
    get major_flow_weight, all others weight 1.
    """
    if pattern.kind == "single_od":
        if pattern.origin is None and pattern.dest is None:
            origin, dest = canonical_single_od(net)
        else:
            origin, dest = pattern.origin, pattern.dest
        if origin not in net.sources:
            raise ContractViolation(f"Demand origin {origin} is not a source link of {net.name}")
        if dest not in net.sinks:
            raise ContractViolation(f"Demand destination {dest} is not a sink link of {net.name}")
        return [(origin, dest, 1.0)]

    xs = [n.x for n in net.nodes.values()]
    west, east = min(xs), max(xs)
    west_sources = {s for s in net.sources if math.isclose(net.nodes[net.links[s].from_node].x, west)}
    east_sources = {s for s in net.sources if math.isclose(net.nodes[net.links[s].from_node].x, east)}
    west_sinks = {s for s in net.sink_order if math.isclose(net.nodes[net.links[s].to_node].x, west)}
    east_sinks = {s for s in net.sink_order if math.isclose(net.nodes[net.links[s].to_node].x, east)}

    pairs = []
    for origin, dest in itertools.product(net.sources, net.sink_order):
        if _is_u_turn(net, origin, dest):
            continue
        major = origin in west_sources and dest in east_sinks
        if pattern.kind == "two_way_multi_od":
            major = major or (origin in east_sources and dest in west_sinks)
        pairs.append((origin, dest, pattern.major_flow_weight if major else 1.0))
    logger.debug(f"[SIM] {pattern.kind}: {len(pairs)} OD pairs")
    return pairs


# ============================================================================
# ROUTE CHOICE
# ============================================================================

def candidate_routes(net: RoadNetwork, origin: str, dest: str, k_max: int = 6) -> List[Route]:
    """
    Shortest routes and next-shortest routes up to k_max candidates.

    Ordered by total length, ties lexicographically by link-id sequence.

    Raises:
        ContractViolation: Invalid or unreachable OD pair
    """
    if k_max < 1:
        raise ContractViolation(f"k_max must be >= 1, got {k_max}")
    if origin not in net.sources or dest not in net.sinks:
        raise ContractViolation(f"Invalid OD pair {origin} -> {dest}")
    found: List[Tuple[float, Route]] = []
    try:
        for path in nx.shortest_simple_paths(net.graph, origin, dest, weight="weight"):
            cost = route_length(net, path)
            # keep pulling until the length tier of the k-th route is complete
            if len(found) >= k_max and cost > found[k_max - 1][0] + 1e-9:
                break
            found.append((cost, tuple(path)))
    except nx.NetworkXNoPath:
        raise ContractViolation(f"{dest} is unreachable from {origin}") from None
    found.sort(key=lambda item: (round(item[0], 9), item[1]))
    return [route for _, route in found[:k_max]]


def _commonality(net: RoadNetwork, routes: Sequence[Route], gamma: float) -> np.ndarray:
    lengths = [route_length(net, r) for r in routes]
    sets = [set(r) for r in routes]
    cf = np.zeros(len(routes))
    for i, ri in enumerate(routes):
        total = 0.0
        for j in range(len(routes)):
            overlap = sum(net.links[lid].length for lid in sets[i] & sets[j])
            total += (overlap / math.sqrt(lengths[i] * lengths[j])) ** gamma
        cf[i] = math.log(total)
    return cf


def route_choice_probs(
    rule: RouteChoiceRule,
    routes: Sequence[Route],
    costs: Sequence[float],
    net: RoadNetwork | None = None,
) -> np.ndarray:
    """
    Choice probabilities of candidate routes.

    Args:
        rule: Route-choice rule
        routes: Candidate routes (used for tie-breaking and C-Logit overlaps)
        costs: Positive route costs
        net: Network supplying link lengths for C-Logit overlaps

    Returns:
        Probability vector aligned with routes
    """
    costs = np.asarray(costs, dtype=np.float64)
    if len(routes) != len(costs) or len(costs) == 0:
        raise ContractViolation(f"need |routes| == |costs| >= 1, got {len(routes)} and {len(costs)}")
    if not np.all(costs > 0):
        raise ContractViolation("route costs must be positive")
    k = len(costs)
    # rank by cost, then by route identity, so results do not depend on input order
    order = sorted(range(k), key=lambda i: (costs[i], tuple(routes[i])))
    scale = costs.mean()

    if rule.kind == "fixed":
        probs = np.zeros(k)
        probs[order[0]] = 1.0
    elif rule.kind == "logit":
        utility = -rule.theta * costs / scale
        probs = np.exp(utility - utility.max())
    elif rule.kind == "proportional":
        probs = (costs / scale) ** (-rule.theta)
    elif rule.kind == "clogit":
        if net is None:
            raise ContractViolation("C-Logit needs the network for route overlaps")
        utility = -rule.theta * costs / scale - rule.beta * _commonality(net, routes, rule.gamma)
        probs = np.exp(utility - utility.max())
    elif rule.kind == "binomial":
        probs = np.zeros(k)
        for rank, i in enumerate(order):
            probs[i] = math.comb(k - 1, rank) * rule.p ** rank * (1.0 - rule.p) ** (k - 1 - rank)
    else:
        raise ContractViolation(f"Unknown route-choice rule {rule.kind}")
    return probs / probs.sum()


# ============================================================================
# DEMAND GENERATION
# ============================================================================

def _sample_indices(
    seed: int,
    start: int,
    stop: int,
    od_weights: np.ndarray,
    route_probs: List[np.ndarray],
) -> List[Tuple[int, int]]:
    """(od, route) choices for trajectories start..stop, one RNG substream per index"""
    picks = []
    for index in range(start, stop):
        rng = np.random.default_rng([seed, index])
        od = int(rng.choice(len(od_weights), p=od_weights))
        route = int(rng.choice(len(route_probs[od]), p=route_probs[od]))
        picks.append((od, route))
    return picks


def generate_demand(
    net: RoadNetwork,
    pattern: DemandPattern,
    rule: RouteChoiceRule,
    n: int,
    seed: int,
    k_max: int = 6,
    workers: int = 1,
) -> Dataset:
    """
    Simulate n expert trajectories.

    Each trajectory draws its OD pair proportionally to the pattern weights and
    its route from route_choice_probs over the OD's candidate routes with
    free-flow (length) costs. Trajectory i uses RNG substream (seed, i), so the
    result does not depend on the worker count.
    """
    if n < 1:
        raise ContractViolation(f"n must be >= 1, got {n}")
    pairs = od_pairs(net, pattern)
    weights = np.array([w for _, _, w in pairs], dtype=np.float64)
    weights /= weights.sum()
    candidates, probs = [], []
    for origin, dest, _ in pairs:
        routes = candidate_routes(net, origin, dest, k_max)
        costs = [route_length(net, r) for r in routes]
        candidates.append(routes)
        probs.append(route_choice_probs(rule, routes, costs, net))

    logger.info(f"[SIM] Generating {n} trajectories: {pattern.kind}/{rule.kind}, {len(pairs)} OD pairs, seed={seed}")
    if workers > 1 and n >= 2 * workers:
        bounds = np.linspace(0, n, workers + 1, dtype=int)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_sample_indices, seed, int(a), int(b), weights, probs)
                for a, b in zip(bounds[:-1], bounds[1:])
            ]
            picks = [p for f in futures for p in f.result()]
    else:
        picks = _sample_indices(seed, 0, n, weights, probs)

    tag = f"{pattern.kind}/{rule.kind}"
    trajectories = tuple(Trajectory(route=candidates[od][r], tag=tag) for od, r in picks)
    return Dataset(trajectories=trajectories, network_ref=network_id(net))
