"""
Trajectory Datasets

Trajectory and dataset representation, CSV persistence, train/test splitting,
validation against a network and route-distribution extraction.
"""
import csv
import logging
import math
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ContractViolation, DataFormatError, DatasetValidationError, NetworkLookupError
from .network import RoadNetwork, Route, network_id, validate_route

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["traj_id", "tag", "links"]
TRUNCATED_SUFFIX = ":truncated"
NETWORK_PREFIX = "#network "


class Trajectory(BaseModel):
    """An ordered link sequence; virtual tokens are never stored"""
    model_config = ConfigDict(frozen=True)

    route: Tuple[str, ...] = Field(..., min_length=1, description="Link ids in travel order")
    tag: str = Field(default="", description="Source tag, e.g. the demand scenario name")
    truncated: bool = Field(default=False, description="Generation stopped at max_len before End")


class Dataset(BaseModel):
    """Immutable ordered collection of trajectories"""
    model_config = ConfigDict(frozen=True)

    trajectories: Tuple[Trajectory, ...] = Field(default_factory=tuple)
    network_ref: str = Field(default="", description="network_id of the network the routes validate against")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i: int) -> Trajectory:
        return self.trajectories[i]

    @property
    def routes(self) -> List[Route]:
        return [t.route for t in self.trajectories]

    @classmethod
    def from_routes(
        cls,
        routes: Iterable[Sequence[str]],
        tag: str = "",
        network_ref: str = "",
        truncated: Optional[Sequence[bool]] = None,
    ) -> "Dataset":
        routes = [tuple(r) for r in routes]
        flags = list(truncated) if truncated is not None else [False] * len(routes)
        return cls(
            trajectories=tuple(Trajectory(route=r, tag=tag, truncated=f) for r, f in zip(routes, flags)),
            network_ref=network_ref,
        )

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(trajectories=tuple(self.trajectories[i] for i in indices), network_ref=self.network_ref)


class RouteDistribution(BaseModel):
    """Route frequencies keyed by reference routes, plus the unknown bucket"""
    model_config = ConfigDict(frozen=True)

    probs: Dict[Tuple[str, ...], float] = Field(default_factory=dict)
    unknown_mass: float = Field(default=0.0, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _normalized(self):
        if any(p < 0 for p in self.probs.values()):
            raise ValueError("route frequencies must be non-negative")
        total = math.fsum(self.probs.values()) + self.unknown_mass
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"route frequencies sum to {total!r}, not 1")
        return self


# ============================================================================
# VALIDATION
# ============================================================================

def validate_dataset(dataset: Dataset, net: RoadNetwork) -> None:
    """
    Validate every trajectory against a network.

    Raises:
        DatasetValidationError: Unknown link or disconnected pair; line is the
            CSV line number (header = line 1)
    """
    for i, traj in enumerate(dataset):
        _validate_row(traj.route, net, line=i + 2)


def _validate_row(route: Sequence[str], net: RoadNetwork, line: Optional[int]) -> None:
    try:
        validate_route(net, route)
    except NetworkLookupError as e:
        raise DatasetValidationError(f"link id absent from network: {e}", line=line) from e
    except ContractViolation as e:
        raise DatasetValidationError(str(e), line=line) from e


# ============================================================================
# CSV PERSISTENCE
# ============================================================================

def save_csv(dataset: Dataset, path: Union[str, Path]) -> None:
    """
    Write one trajectory per row: traj_id,tag,links with links space-separated.

    Truncated trajectories carry the tag suffix ':truncated'. A dataset tied to
    a network starts with a '#network <id>' line above the header.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        {
            "traj_id": list(range(len(dataset))),
            "tag": [t.tag + (TRUNCATED_SUFFIX if t.truncated else "") for t in dataset],
            "links": [" ".join(t.route) for t in dataset],
        },
        columns=CSV_COLUMNS,
    )
    with path.open("w", encoding="utf-8", newline="") as f:
        if dataset.network_ref:
            f.write(f"{NETWORK_PREFIX}{dataset.network_ref}\n")
        frame.to_csv(f, index=False, quoting=csv.QUOTE_NONNUMERIC, lineterminator="\n")
    logger.info(f"[DATA] Saved {len(dataset)} trajectories to {path}")


def load_csv(path: Union[str, Path], net: Optional[RoadNetwork] = None) -> Dataset:
    """
    Read a dataset CSV.

    Args:
        path: CSV path
        net: Optional network to validate every row against

    Returns:
        Dataset (empty for an empty file)

    Raises:
        DataFormatError: Malformed row, with line number
        DatasetValidationError: Row does not validate against net, or the file
            records a different network
    """
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"Dataset file not found: {path}")
    with path.open(encoding="utf-8") as f:
        first = f.readline()
    network_ref, offset = "", 0
    if first.startswith(NETWORK_PREFIX):
        network_ref, offset = first[len(NETWORK_PREFIX):].strip(), 1
    if net is not None:
        expected = network_id(net)
        if network_ref and network_ref != expected:
            raise DatasetValidationError(
                f"{path} was written for network {network_ref[:12]}, not {expected[:12]} ({net.name})", line=1)
        network_ref = expected

    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8", skiprows=offset)
    except pd.errors.EmptyDataError:
        logger.info(f"[DATA] {path} is empty")
        return Dataset(network_ref=network_ref)
    except pd.errors.ParserError as e:
        raise DataFormatError(f"{path}: {e}") from e

    if list(frame.columns) != CSV_COLUMNS:
        raise DataFormatError(
            f"{path}: header must be {','.join(CSV_COLUMNS)}, got {','.join(frame.columns)}", line=1 + offset)

    trajectories = []
    for row, (tag, links) in enumerate(zip(frame["tag"], frame["links"])):
        line = row + 2 + offset
        route = tuple(links.split())
        if not route:
            raise DataFormatError(f"{path}: empty link sequence", line=line)
        truncated = tag.endswith(TRUNCATED_SUFFIX)
        if truncated:
            tag = tag[: -len(TRUNCATED_SUFFIX)]
        if net is not None:
            _validate_row(route, net, line=line)
        trajectories.append(Trajectory(route=route, tag=tag, truncated=truncated))

    logger.info(f"[DATA] Loaded {len(trajectories)} trajectories from {path}")
    return Dataset(trajectories=tuple(trajectories), network_ref=network_ref)


# ============================================================================
# SPLITTING AND DISTRIBUTIONS
# ============================================================================

def split(dataset: Dataset, ratio: float, seed: int) -> Tuple[Dataset, Dataset]:
    """
    Shuffle then cut into train/test.

    Sizes are floor(ratio * N) and N - floor(ratio * N); deterministic given seed.
    """
    if not 0.0 < ratio < 1.0:
        raise ContractViolation(f"split ratio must be in (0, 1), got {ratio}")
    n = len(dataset)
    cut = int(math.floor(ratio * n + 1e-9))
    order = np.random.default_rng(seed).permutation(n)
    train, test = dataset.subset(order[:cut].tolist()), dataset.subset(order[cut:].tolist())
    logger.info(f"[DATA] Split {n} trajectories into {len(train)} train / {len(test)} test")
    return train, test


def route_counts(dataset: Dataset) -> Counter:
    """Counts of complete (non-truncated) routes"""
    return Counter(t.route for t in dataset if not t.truncated)


def route_distribution(dataset: Dataset, reference: Dataset) -> RouteDistribution:
    """
    Route frequencies of a dataset over the routes of a reference dataset.

    Every reference route is a key (possibly with frequency 0); all other mass,
    including truncated trajectories, goes to the unknown bucket.
    """
    if len(dataset) == 0 or len(reference) == 0:
        raise ContractViolation("route_distribution needs two non-empty datasets")
    known = sorted(route_counts(reference))
    counts = route_counts(dataset)
    n = len(dataset)
    probs = {r: counts.get(r, 0) / n for r in known}
    known_total = sum(counts.get(r, 0) for r in known)
    return RouteDistribution(probs=probs, unknown_mass=(n - known_total) / n)


def _frequencies(keys: Iterable) -> Dict:
    counts = Counter(keys)
    n = sum(counts.values())
    return {k: c / n for k, c in sorted(counts.items(), key=lambda kv: str(kv[0]))}


def length_distribution(dataset: Dataset) -> Dict[int, float]:
    return _frequencies(len(t.route) for t in dataset)


def origin_distribution(dataset: Dataset) -> Dict[str, float]:
    return _frequencies(t.route[0] for t in dataset)


def destination_distribution(dataset: Dataset) -> Dict[str, float]:
    return _frequencies(t.route[-1] for t in dataset)


def od_distribution(dataset: Dataset) -> Dict[Tuple[str, str], float]:
    return _frequencies((t.route[0], t.route[-1]) for t in dataset)


def longest_route(dataset: Dataset) -> int:
    return max((len(t.route) for t in dataset), default=0)
