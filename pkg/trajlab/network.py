"""
Road Network Environment

This module defines the road-network POMDP environment: observations (link ids
plus the virtual Start/End tokens), the masked discrete action set, the
next-observation look-up table and the canonical grid networks used by every
other module.
"""
import hashlib
import logging
import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import ContractViolation, DataFormatError, NetworkLookupError

logger = logging.getLogger(__name__)

# Virtual tokens. Link ids may not start with "<".
START = "<Start>"
END = "<End>"
PAD = "<Pad>"

# Movement action indices; at Start index k means Origin(k)
STRAIGHT = 0
LEFT = 1
RIGHT = 2
TERMINATE = 3
N_MOVES = 4

MOVE_LABELS = ("Straight", "Left", "Right", "Terminate")

# Relative bearing (degrees) within which a successor counts as Straight
STRAIGHT_TOLERANCE = 45.0


class Node(BaseModel):
    """An intersection or boundary stub end with planar coordinates in meters"""
    model_config = ConfigDict(frozen=True)

    node_id: str = Field(..., min_length=1, description="Node identifier")
    x: float = Field(..., description="Easting in meters")
    y: float = Field(..., description="Northing in meters")


class Link(BaseModel):
    """A directed road link"""
    model_config = ConfigDict(frozen=True)

    link_id: str = Field(..., min_length=1, description="Opaque link identifier")
    from_node: str = Field(..., description="Upstream node id")
    to_node: str = Field(..., description="Downstream node id")
    length: float = Field(..., gt=0.0, description="Free-flow length in meters")


class Action(BaseModel):
    """A discrete action: index into the common action set plus its label at a given observation"""
    model_config = ConfigDict(frozen=True)

    index: int = Field(..., ge=0, description="Index in [0, A)")
    label: str = Field(..., description="Straight, Left, Right, Terminate or Origin(k)")


Observation = str
Route = Tuple[str, ...]
ActionLike = Union[Action, int]


def is_link(o: Observation) -> bool:
    """True for link observations, False for the virtual tokens"""
    return not o.startswith("<")


class RoadNetwork:
    """
    Immutable road network with the POMDP look-up tables.

    Token indices: links 0..L-1 in link order, then Start (L), End (L+1), Pad (L+2).
    Action indices: 0 Straight, 1 Left, 2 Right, 3 Terminate; at Start, index k is
    Origin(k). The action count is A = max(4, |sources|).
    """

    def __init__(
        self,
        links: Iterable[Link],
        nodes: Iterable[Node],
        sources: Sequence[str],
        sinks: Sequence[str],
        terminate_anywhere: bool = False,
        name: str = "network",
    ):
        self.name = name
        self.nodes: Dict[str, Node] = {}
        for node in nodes:
            self.nodes[node.node_id] = node
        self.links: Dict[str, Link] = {}
        for link in links:
            if not is_link(link.link_id) or " " in link.link_id:
                raise ContractViolation(f"Invalid link id {link.link_id!r}")
            if link.link_id in self.links:
                raise ContractViolation(f"Duplicate link id {link.link_id!r}")
            for end in (link.from_node, link.to_node):
                if end not in self.nodes:
                    raise NetworkLookupError(f"Link {link.link_id} references unknown node {end}")
            self.links[link.link_id] = link

        for s in list(sources) + list(sinks):
            if s not in self.links:
                raise NetworkLookupError(f"Boundary link {s} is not in the network")
        if not sources:
            raise ContractViolation("Network needs at least one source link")
        self.sources: Tuple[str, ...] = tuple(sources)
        self.sink_order: Tuple[str, ...] = tuple(sinks)
        self.sinks = frozenset(sinks)
        self.terminate_anywhere = terminate_anywhere

        self.link_ids: Tuple[str, ...] = tuple(self.links)
        self.link_index: Dict[str, int] = {lid: i for i, lid in enumerate(self.link_ids)}
        self.n_links = len(self.link_ids)
        self.start_token = self.n_links
        self.end_token = self.n_links + 1
        self.pad_token = self.n_links + 2
        self.n_tokens = self.n_links + 3
        self.n_actions = max(N_MOVES, len(self.sources))

        self._build_tables()
        self.graph = self._build_link_graph()
        self._frozen = True
        logger.info(
            f"[NET] Built {self.name}: {self.n_links} links, {len(self.sources)} sources, "
            f"{len(self.sinks)} sinks, A={self.n_actions}"
        )

    def __setattr__(self, key, value):
        if getattr(self, "_frozen", False):
            raise AttributeError("RoadNetwork is immutable after construction")
        super().__setattr__(key, value)

    # ------------------------------------------------------------------
    # construction helpers
    # ------------------------------------------------------------------

    def _heading(self, link: Link) -> Tuple[float, float]:
        a, b = self.nodes[link.from_node], self.nodes[link.to_node]
        return b.x - a.x, b.y - a.y

    def _classify_turn(self, incoming: Link, outgoing: Link) -> Optional[int]:
        """Turn class by relative bearing; None for a U-turn"""
        hx, hy = self._heading(incoming)
        gx, gy = self._heading(outgoing)
        angle = math.degrees(math.atan2(hx * gy - hy * gx, hx * gx + hy * gy))
        if abs(angle) <= STRAIGHT_TOLERANCE:
            return STRAIGHT
        if abs(angle) >= 180.0 - STRAIGHT_TOLERANCE:
            return None
        return LEFT if angle > 0 else RIGHT

    def _build_tables(self):
        rows = self.n_links + 2  # links, Start, End
        next_table = np.full((rows, self.n_actions), -1, dtype=np.int64)

        outgoing: Dict[str, List[Link]] = {}
        for link in self.links.values():
            outgoing.setdefault(link.from_node, []).append(link)

        for i, lid in enumerate(self.link_ids):
            link = self.links[lid]
            for succ in outgoing.get(link.to_node, []):
                if succ.to_node == link.from_node:
                    continue  # U-turn
                turn = self._classify_turn(link, succ)
                if turn is None:
                    continue
                if next_table[i, turn] >= 0:
                    other = self.link_ids[next_table[i, turn]]
                    raise ContractViolation(
                        f"Ambiguous {MOVE_LABELS[turn]} successor of {lid}: {other} and {succ.link_id}"
                    )
                next_table[i, turn] = self.link_index[succ.link_id]
            if lid in self.sinks or self.terminate_anywhere:
                next_table[i, TERMINATE] = self.end_token

        for k, lid in enumerate(self.sources):
            next_table[self.start_token, k] = self.link_index[lid]

        empty = [self.link_ids[i] for i in range(self.n_links) if (next_table[i] < 0).all()]
        if empty:
            raise ContractViolation(f"Links with no valid action (dead ends): {empty[:5]}")

        next_table.setflags(write=False)
        self.next_table = next_table
        mask_table = next_table >= 0
        mask_table.setflags(write=False)
        self.mask_table = mask_table

        # successor-token feasibility used by next-observation models
        feasible = np.zeros((self.n_tokens, self.n_tokens), dtype=bool)
        for row in range(rows):
            for tok in next_table[row]:
                if tok >= 0:
                    feasible[row, tok] = True
        feasible.setflags(write=False)
        self.successor_table = feasible

    def _build_link_graph(self) -> nx.DiGraph:
        """Line graph: nodes are links, edge (l, m) carries the length of m"""
        graph = nx.DiGraph()
        graph.add_nodes_from(self.link_ids)
        for i, lid in enumerate(self.link_ids):
            for turn in (STRAIGHT, LEFT, RIGHT):
                j = self.next_table[i, turn]
                if j >= 0:
                    succ = self.link_ids[j]
                    graph.add_edge(lid, succ, weight=self.links[succ].length)
        return graph

    # ------------------------------------------------------------------
    # tokens
    # ------------------------------------------------------------------

    def token_of(self, o: Observation) -> int:
        if o == START:
            return self.start_token
        if o == END:
            return self.end_token
        if o == PAD:
            return self.pad_token
        try:
            return self.link_index[o]
        except KeyError:
            raise NetworkLookupError(f"Unknown link id {o!r}") from None

    def observation_of(self, token: int) -> Observation:
        if 0 <= token < self.n_links:
            return self.link_ids[token]
        if token == self.start_token:
            return START
        if token == self.end_token:
            return END
        if token == self.pad_token:
            return PAD
        raise NetworkLookupError(f"Unknown token index {token}")

    def encode_route(self, route: Sequence[str]) -> List[int]:
        """Token sequence Start, links..., End"""
        return [self.start_token] + [self.token_of(lid) for lid in route] + [self.end_token]

    def action_label(self, o: Observation, index: int) -> str:
        if o == START:
            return f"Origin({index})"
        return MOVE_LABELS[index] if index < N_MOVES else f"Action({index})"

    def route_actions(self, route: Sequence[str]) -> List[int]:
        """Action indices reproducing a route from Start, ending with Terminate"""
        if not route:
            raise ContractViolation("Empty route")
        try:
            actions = [self.sources.index(route[0])]
        except ValueError:
            raise ContractViolation(f"Route starts at {route[0]}, which is not a source link") from None
        for prev, nxt in zip(route, route[1:]):
            row = self.next_table[self.token_of(prev)]
            hits = np.flatnonzero(row == self.token_of(nxt))
            if hits.size == 0:
                raise ContractViolation(f"{prev} -> {nxt} is not a masked-valid transition")
            actions.append(int(hits[0]))
        if self.next_table[self.token_of(route[-1]), TERMINATE] != self.end_token:
            raise ContractViolation(f"Route ends at {route[-1]}, where Terminate is not valid")
        actions.append(TERMINATE)
        return actions

    def __repr__(self) -> str:
        return f"RoadNetwork({self.name!r}, links={self.n_links}, sources={len(self.sources)}, sinks={len(self.sinks)})"


# ============================================================================
# POMDP OPERATIONS
# ============================================================================

def _action_index(a: ActionLike) -> int:
    return a.index if isinstance(a, Action) else int(a)


def action_mask(net: RoadNetwork, o: Observation) -> frozenset:
    """
    Valid actions at an observation.

    Args:
        net: Road network
        o: Start, End or a link id

    Returns:
        frozenset of Action; empty for End (rollout termination)

    Raises:
        NetworkLookupError: If o is an unknown link id
    """
    if o == END:
        return frozenset()
    row = net.token_of(o)
    if row >= net.end_token:
        raise NetworkLookupError(f"No mask for token {o!r}")
    return frozenset(
        Action(index=int(a), label=net.action_label(o, int(a)))
        for a in np.flatnonzero(net.mask_table[row])
    )


def next_observation(net: RoadNetwork, o: Observation, a: ActionLike) -> Observation:
    """
    Deterministic next-observation look-up.

    Raises:
        ContractViolation: If (o, a) is not masked-valid
    """
    index = _action_index(a)
    row = net.end_token if o == END else net.token_of(o)
    if o == END or row >= net.end_token or not (0 <= index < net.n_actions) or not net.mask_table[row, index]:
        raise ContractViolation(
            f"Action {net.action_label(o, index) if 0 <= index else index} (index {index}) "
            f"is not valid at observation {o}"
        )
    return net.observation_of(int(net.next_table[row, index]))


def route_length(net: RoadNetwork, route: Sequence[str]) -> float:
    return float(sum(net.links[lid].length for lid in route))


def validate_route(net: RoadNetwork, route: Sequence[str]) -> None:
    """
    Check a route is non-empty, uses known links and is connected.

    Raises:
        NetworkLookupError: Unknown link id
        ContractViolation: Empty route or a disconnected consecutive pair
    """
    if not route:
        raise ContractViolation("Empty route")
    for lid in route:
        if lid not in net.links:
            raise NetworkLookupError(f"Unknown link id {lid!r}")
    for prev, nxt in zip(route, route[1:]):
        if net.links[prev].to_node != net.links[nxt].from_node:
            raise ContractViolation(f"Disconnected links {prev} -> {nxt}")


def enumerate_shortest_routes(net: RoadNetwork, origin: str, dest: str) -> List[Route]:
    """
    All minimum-total-length routes from a source link to a sink link.

    Args:
        net: Road network
        origin: Source link id
        dest: Sink link id

    Returns:
        Routes sorted lexicographically by link-id sequence; empty if unreachable
    """
    if origin not in net.sources:
        raise ContractViolation(f"{origin} is not a source link")
    if dest not in net.sinks:
        raise ContractViolation(f"{dest} is not a sink link")
    try:
        paths = nx.all_shortest_paths(net.graph, origin, dest, weight="weight")
        routes = sorted(tuple(p) for p in paths)
    except nx.NetworkXNoPath:
        return []
    logger.debug(f"[NET] {len(routes)} shortest routes {origin} -> {dest}")
    return routes


# ============================================================================
# CANONICAL NETWORKS
# ============================================================================

def build_grid(rows: int, cols: int, block_length: float, terminate_anywhere: bool = False) -> RoadNetwork:
    """
    Grid of rows x cols four-way intersections with boundary stubs.

    Intersection (r, c) sits at (c * block, -r * block); row 0 is the north edge.
    Every boundary approach gets one inbound and one outbound stub of one block.
    Sources are ordered side-major (west, north, east, south), then by position.

    Args:
        rows: Intersection rows (>= 2)
        cols: Intersection columns (>= 2)
        block_length: Block length in meters (> 0)
        terminate_anywhere: Allow Terminate on every link instead of sinks only

    Returns:
        RoadNetwork
    """
    if rows < 2 or cols < 2:
        raise ContractViolation(f"Grid needs rows >= 2 and cols >= 2, got {rows}x{cols}")
    if block_length <= 0:
        raise ContractViolation(f"block_length must be positive, got {block_length}")

    b = float(block_length)
    nodes = [Node(node_id=f"n{r}_{c}", x=c * b, y=-r * b) for r in range(rows) for c in range(cols)]
    links: List[Link] = []

    def add(u: str, v: str):
        links.append(Link(link_id=f"{u}>{v}", from_node=u, to_node=v, length=b))

    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                add(f"n{r}_{c}", f"n{r}_{c + 1}")
                add(f"n{r}_{c + 1}", f"n{r}_{c}")
            if r + 1 < rows:
                add(f"n{r}_{c}", f"n{r + 1}_{c}")
                add(f"n{r + 1}_{c}", f"n{r}_{c}")

    # (side, boundary node id, intersection id) in side-major order
    approaches = (
        [("W", f"W{r}", f"n{r}_0", -b, -r * b) for r in range(rows)]
        + [("N", f"N{c}", f"n0_{c}", c * b, b) for c in range(cols)]
        + [("E", f"E{r}", f"n{r}_{cols - 1}", cols * b, -r * b) for r in range(rows)]
        + [("S", f"S{c}", f"n{rows - 1}_{c}", c * b, -rows * b) for c in range(cols)]
    )
    sources, sinks = [], []
    for _side, ext, inner, x, y in approaches:
        nodes.append(Node(node_id=ext, x=x, y=y))
        add(ext, inner)
        sources.append(f"{ext}>{inner}")
        add(inner, ext)
        sinks.append(f"{inner}>{ext}")

    return RoadNetwork(links, nodes, sources, sinks, terminate_anywhere=terminate_anywhere,
                       name=f"grid{rows}x{cols}")


def build_chain(lengths: Sequence[float] = (100.0, 100.0)) -> RoadNetwork:
    """Straight chain of links; the first is the only source, the last the only sink"""
    if not lengths:
        raise ContractViolation("Chain needs at least one link")
    nodes, links = [], []
    x = 0.0
    nodes.append(Node(node_id="c0", x=0.0, y=0.0))
    for i, length in enumerate(lengths):
        x += float(length)
        nodes.append(Node(node_id=f"c{i + 1}", x=x, y=0.0))
        links.append(Link(link_id=f"c{i}>c{i + 1}", from_node=f"c{i}", to_node=f"c{i + 1}", length=float(length)))
    return RoadNetwork(links, nodes, [links[0].link_id], [links[-1].link_id], name=f"chain{len(lengths)}")


def build_two_route(block_length: float = 100.0) -> RoadNetwork:
    """
    Diamond with a single branching point and two equal-length routes.

    in: a -> b; at b the vehicle turns left (to c) or right (to d); both
    continue to e and leave through the single sink e -> f.
    """
    b = float(block_length)
    coords = {"a": (-b, 0.0), "b": (0.0, 0.0), "c": (0.5 * b, b), "d": (0.5 * b, -b), "e": (b, 0.0), "f": (2 * b, 0.0)}
    nodes = [Node(node_id=k, x=x, y=y) for k, (x, y) in coords.items()]
    pairs = [("a", "b"), ("b", "c"), ("b", "d"), ("c", "e"), ("d", "e"), ("e", "f")]
    links = [
        Link(link_id=f"{u}>{v}", from_node=u, to_node=v,
             length=math.dist(coords[u], coords[v]))
        for u, v in pairs
    ]
    return RoadNetwork(links, nodes, ["a>b"], ["e>f"], name="two_route")


# ============================================================================
# EDGE-LIST PERSISTENCE
# ============================================================================

def edge_list_text(net: RoadNetwork) -> str:
    lines = [
        f"#sources {' '.join(net.sources)}",
        f"#sinks {' '.join(net.sink_order)}",
        f"#terminate {'anywhere' if net.terminate_anywhere else 'sinks'}",
    ]
    for node in net.nodes.values():
        lines.append(f"#node {node.node_id} {node.x!r} {node.y!r}")
    for link in net.links.values():
        lines.append(f"{link.link_id} {link.from_node} {link.to_node} {link.length!r}")
    return "\n".join(lines) + "\n"


def network_id(net: RoadNetwork) -> str:
    """SHA-256 of the canonical edge list"""
    return hashlib.sha256(edge_list_text(net).encode("utf-8")).hexdigest()


def save_edge_list(net: RoadNetwork, path: Union[str, Path]) -> None:
    Path(path).write_text(edge_list_text(net), encoding="utf-8")
    logger.info(f"[NET] Saved edge list to {path}")


def network_from_edge_list(path: Union[str, Path], name: Optional[str] = None) -> RoadNetwork:
    """Load a network from an edge-list file"""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataFormatError(f"Cannot read edge list {path}: {e}") from e
    return parse_edge_list(text, name=name or path.stem, source=str(path))


def parse_edge_list(text: str, name: str = "network", source: str = "<edge list>") -> RoadNetwork:
    """
    Build a network from plain-text edge-list lines.

    Nodes without a #node line get coordinates (0, 0), which only works for
    networks whose turns are never classified; grids always carry #node lines.

    Raises:
        DataFormatError: Malformed line (with line number)
    """
    sources: List[str] = []
    sinks: List[str] = []
    terminate_anywhere = False
    nodes: Dict[str, Node] = {}
    links: List[Link] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "#sources":
                sources = parts[1:]
            elif parts[0] == "#sinks":
                sinks = parts[1:]
            elif parts[0] == "#terminate":
                terminate_anywhere = parts[1] == "anywhere"
            elif parts[0] == "#node":
                nodes[parts[1]] = Node(node_id=parts[1], x=float(parts[2]), y=float(parts[3]))
            elif parts[0].startswith("#"):
                continue
            else:
                if len(parts) != 4:
                    raise ValueError(f"expected 'link_id from_node to_node length_m', got {line!r}")
                links.append(Link(link_id=parts[0], from_node=parts[1], to_node=parts[2], length=float(parts[3])))
        except (IndexError, ValueError) as e:
            raise DataFormatError(f"{source}: {e}", line=lineno) from e
    for link in links:
        for end in (link.from_node, link.to_node):
            nodes.setdefault(end, Node(node_id=end, x=0.0, y=0.0))
    return RoadNetwork(links, nodes.values(), sources, sinks, terminate_anywhere=terminate_anywhere, name=name)
