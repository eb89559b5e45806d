"""
Evaluation

Trajectory-level similarity (BLEU, METEOR with exact matching only) and
dataset-level comparison (Jensen-Shannon route distance, link transition
entropy, complexity sensitivity). All logarithms are base 2.
"""
import logging
import math
import time
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Dict, Hashable, List, Mapping, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.spatial.distance import jensenshannon
from scipy.stats import linregress

from .data import (
    Dataset,
    RouteDistribution,
    destination_distribution,
    length_distribution,
    od_distribution,
    origin_distribution,
    route_counts,
    route_distribution,
)
from .errors import ContractViolation
from .models import ComplexityFit, ConvergenceRecord, DistributionReport, ScoreReport
from .network import END, START

logger = logging.getLogger(__name__)

UNKNOWN = "unknown"
LN4 = math.log(4.0)


# ============================================================================
# BLEU
# ============================================================================

def _ngrams(seq: Sequence[Hashable], order: int) -> Counter:
    return Counter(tuple(seq[k:k + order]) for k in range(len(seq) - order + 1))


class ReferencePool:
    """
    A reference set prepared for repeated scoring.

    Holds the unique references, their lengths and, per n-gram order, the
    maximum count of every n-gram within any single reference.
    """

    def __init__(self, references: Sequence[Sequence[Hashable]], max_order: int = 4):
        unique = sorted({tuple(r) for r in references}, key=lambda r: (len(r), [str(t) for t in r]))
        if not unique or any(len(r) == 0 for r in unique):
            raise ContractViolation("references must be non-empty sequences")
        self.references: List[Tuple[Hashable, ...]] = unique
        self.reference_set = set(unique)
        self.lengths = sorted({len(r) for r in unique})
        self.max_order = max_order
        self.max_counts: Dict[int, Dict[tuple, int]] = {}
        for order in range(1, max_order + 1):
            best: Dict[tuple, int] = {}
            for ref in unique:
                for gram, count in _ngrams(ref, order).items():
                    if count > best.get(gram, 0):
                        best[gram] = count
            self.max_counts[order] = best
        self.token_sets = [set(r) for r in unique]

    def closest_length(self, length: int) -> int:
        """Reference length closest to length; ties go to the shorter"""
        return min(self.lengths, key=lambda ref_len: (abs(ref_len - length), ref_len))


def bleu_from_pool(candidate: Sequence[Hashable], pool: ReferencePool, n: int = 4) -> float:
    if n < 1:
        raise ContractViolation(f"BLEU order must be >= 1, got {n}")
    if len(candidate) == 0:
        raise ContractViolation("BLEU candidate must be non-empty")
    if n > pool.max_order:
        raise ContractViolation(f"reference pool prepared for order <= {pool.max_order}, got {n}")
    precisions = []
    for order in range(1, n + 1):
        grams = _ngrams(candidate, order)
        total = sum(grams.values())
        if total == 0:
            continue  # candidate shorter than this order
        limits = pool.max_counts[order]
        clipped = sum(min(count, limits.get(gram, 0)) for gram, count in grams.items())
        precisions.append(clipped / total)
    if min(precisions) == 0.0:
        return 0.0
    geometric = math.prod(precisions) ** (1.0 / len(precisions))
    brevity = min(1.0, len(candidate) / pool.closest_length(len(candidate)))
    return brevity * geometric


def bleu_n(candidate: Sequence[Hashable], references: Sequence[Sequence[Hashable]], n: int = 4) -> float:
    """
    Modified n-gram precision with clipping and brevity penalty.

    The geometric mean runs over the orders for which the candidate has at
    least one n-gram.
    """
    if n < 1:
        raise ContractViolation(f"BLEU order must be >= 1, got {n}")
    return bleu_from_pool(candidate, ReferencePool(references, max_order=n), n)


# ============================================================================
# METEOR
# ============================================================================

def _chunks(pairs: List[Tuple[int, int]]) -> int:
    """Maximal runs adjacent in the candidate whose reference positions are also adjacent"""
    ordered = sorted(pairs)
    chunks = 1
    for (c0, r0), (c1, r1) in zip(ordered, ordered[1:]):
        if not (c1 == c0 + 1 and abs(r1 - r0) == 1):
            chunks += 1
    return chunks


def align(candidate: Sequence[Hashable], reference: Sequence[Hashable]) -> List[Tuple[int, int]]:
    """
    Exact-match alignment with the most matches, then the fewest crossings.

    Dynamic programming over candidate positions. A state is the set of
    reference positions used so far (a bitmask); matching candidate i to
    reference j adds one crossing per used position right of j. Occurrences
    of one token pair up in order, and every token gets min(candidate count,
    reference count) matches. Ties keep the first alignment reached when
    reference positions are tried left to right.
    """
    ref_pos = defaultdict(list)
    for j, tok in enumerate(reference):
        ref_pos[tok].append(j)
    cand_count = Counter(candidate)
    seen: Counter = Counter()

    # mask -> (crossings, pairs)
    states: Dict[int, Tuple[int, Tuple[Tuple[int, int], ...]]] = {0: (0, ())}
    for i, tok in enumerate(candidate):
        slots = ref_pos.get(tok)
        if not slots:
            continue
        later = cand_count[tok] - seen[tok] - 1  # occurrences after i
        seen[tok] += 1
        need = min(cand_count[tok], len(slots))
        following: Dict[int, Tuple[int, Tuple[Tuple[int, int], ...]]] = {}

        def offer(mask: int, cost: int, pairs: Tuple[Tuple[int, int], ...]):
            if mask not in following or cost < following[mask][0]:
                following[mask] = (cost, pairs)

        for mask, (cost, pairs) in states.items():
            used = [k for k, j in enumerate(slots) if mask >> j & 1]
            matched = len(used)
            first_free = used[-1] + 1 if used else 0
            for k in range(first_free, len(slots)):
                if matched + 1 + min(later, len(slots) - k - 1) < need:
                    break
                j = slots[k]
                offer(mask | (1 << j), cost + bin(mask >> (j + 1)).count("1"), pairs + ((i, j),))
            if matched + min(later, len(slots) - first_free) >= need:
                offer(mask, cost, pairs)
        states = following

    _, best = min(states.values(), key=lambda state: state[0])
    return list(best)


def meteor_single(candidate: Sequence[Hashable], reference: Sequence[Hashable]) -> float:
    pairs = align(candidate, reference)
    matches = len(pairs)
    if matches == 0:
        return 0.0
    precision = matches / len(candidate)
    recall = matches / len(reference)
    f_mean = 10.0 * precision * recall / (recall + 9.0 * precision)
    penalty = 0.5 * (_chunks(pairs) / matches) ** 3
    return f_mean * (1.0 - penalty)


def meteor_from_pool(candidate: Sequence[Hashable], pool: ReferencePool) -> float:
    candidate = tuple(candidate)
    if not candidate:
        raise ContractViolation("METEOR candidate must be non-empty")
    if candidate in pool.reference_set:
        # an identical reference attains the maximum
        return meteor_single(candidate, candidate)
    tokens = set(candidate)
    best = 0.0
    for ref, ref_tokens in zip(pool.references, pool.token_sets):
        if tokens.isdisjoint(ref_tokens):
            continue
        best = max(best, meteor_single(candidate, ref))
    return best


def meteor(candidate: Sequence[Hashable], references: Sequence[Sequence[Hashable]]) -> float:
    """Exact-match METEOR, maximum over references"""
    return meteor_from_pool(candidate, ReferencePool(references, max_order=1))


# ============================================================================
# DATASET SCORES
# ============================================================================

def token_stream(route: Sequence[str]) -> Tuple[str, ...]:
    return (START,) + tuple(route) + (END,)


def _score_chunk(candidates: List[Tuple[str, ...]], pool: ReferencePool, n: int) -> List[Tuple[float, float]]:
    return [(bleu_from_pool(c, pool, n), meteor_from_pool(c, pool)) for c in candidates]


def dataset_scores(generated: Dataset, reference: Dataset, n: int = 4, workers: int = 1) -> ScoreReport:
    """
    Score every generated trajectory against the whole reference set.

    Start and End tokens are part of every scored sequence.
    """
    if len(generated) == 0 or len(reference) == 0:
        raise ContractViolation("dataset_scores needs two non-empty datasets")
    pool = ReferencePool([token_stream(t.route) for t in reference], max_order=n)
    streams = [token_stream(t.route) for t in generated]
    unique = sorted(set(streams))
    logger.info(f"[EVAL] Scoring {len(streams)} trajectories ({len(unique)} unique) "
                f"against {len(pool.references)} unique references")

    if workers > 1 and len(unique) >= 2 * workers:
        parts = [unique[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(_score_chunk, parts, [pool] * workers, [n] * workers))
        scores = {c: s for part, res in zip(parts, results) for c, s in zip(part, res)}
    else:
        scores = dict(zip(unique, _score_chunk(unique, pool, n)))

    bleu = np.array([scores[s][0] for s in streams])
    met = np.array([scores[s][1] for s in streams])
    return ScoreReport(
        bleu=bleu.tolist(),
        meteor=met.tolist(),
        bleu_mean=float(np.clip(bleu.mean(), 0.0, 1.0)),
        bleu_std=float(bleu.std()),
        meteor_mean=float(np.clip(met.mean(), 0.0, 1.0)),
        meteor_std=float(met.std()),
        n=n,
    )


# ============================================================================
# DISTRIBUTIONS
# ============================================================================

def _as_mapping(dist: Union[RouteDistribution, Mapping]) -> Dict:
    if isinstance(dist, RouteDistribution):
        mapping = dict(dist.probs)
        mapping[UNKNOWN] = dist.unknown_mass
        return mapping
    return dict(dist)


def js_distance(p: Union[RouteDistribution, Mapping], q: Union[RouteDistribution, Mapping]) -> float:
    """
    Base-2 Jensen-Shannon distance; keys missing on one side have probability 0.

    Raises:
        ContractViolation: An input is negative or does not sum to 1
    """
    p, q = _as_mapping(p), _as_mapping(q)
    keys = sorted(set(p) | set(q), key=str)
    pv = np.array([p.get(k, 0.0) for k in keys], dtype=np.float64)
    qv = np.array([q.get(k, 0.0) for k in keys], dtype=np.float64)
    for name, v in (("p", pv), ("q", qv)):
        if (v < 0).any() or abs(math.fsum(v) - 1.0) > 1e-9:
            raise ContractViolation(f"{name} is not a normalized distribution (sum {math.fsum(v)!r})")
    distance = float(jensenshannon(pv, qv, base=2.0))
    if math.isnan(distance):
        return 0.0
    return min(1.0, max(0.0, distance))


def link_transition_entropy(dataset: Dataset) -> float:
    """Mean over transition-source links of the entropy (bits) of the next link"""
    if len(dataset) == 0:
        raise ContractViolation("link_transition_entropy needs a non-empty dataset")
    rows: Dict[str, Counter] = defaultdict(Counter)
    for traj in dataset:
        for prev, nxt in zip(traj.route, traj.route[1:]):
            rows[prev][nxt] += 1
    if not rows:
        return 0.0
    entropies = []
    for counts in rows.values():
        probs = np.array(list(counts.values()), dtype=np.float64)
        probs /= probs.sum()
        entropies.append(float(-(probs * np.log2(probs)).sum()))
    return float(np.mean(entropies))


def complexity_sensitivity(points: Sequence[Tuple[float, float]]) -> ComplexityFit:
    """OLS of d_JS on link transition entropy; the slope is the sensitivity"""
    if len(points) < 2:
        raise ContractViolation("complexity_sensitivity needs at least two points")
    x = np.array([p[0] for p in points], dtype=np.float64)
    y = np.array([p[1] for p in points], dtype=np.float64)
    if np.ptp(x) == 0.0:
        raise ContractViolation("complexity_sensitivity needs at least two distinct entropies")
    fit = linregress(x, y)
    residual = y - (fit.intercept + fit.slope * x)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r_squared = 1.0 - float((residual ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return ComplexityFit(slope=float(fit.slope), intercept=float(fit.intercept), r_squared=r_squared,
                         n_points=len(points))


def attribute_js(generated: Dataset, reference: Dataset) -> Dict[str, float]:
    """JS distances of trajectory length, origin, destination and OD distributions"""
    return {
        "length": js_distance(length_distribution(generated), length_distribution(reference)),
        "origin": js_distance(origin_distribution(generated), origin_distribution(reference)),
        "destination": js_distance(destination_distribution(generated), destination_distribution(reference)),
        "od": js_distance(od_distribution(generated), od_distribution(reference)),
    }


def distribution_report(generated: Dataset, reference: Dataset) -> DistributionReport:
    """Route-distribution comparison of a generated set against the reference set"""
    p = route_distribution(generated, reference)
    q = route_distribution(reference, reference)
    known = set(q.probs)
    unknown = sum(1 for t in generated if t.truncated or t.route not in known)
    counts_gen = {" ".join(r): c for r, c in sorted(route_counts(generated).items()) if r in known}
    counts_gen[UNKNOWN] = unknown
    counts_ref = {" ".join(r): c for r, c in sorted(route_counts(reference).items())}
    return DistributionReport(
        d_js=js_distance(p, q),
        unknown_count=unknown,
        unknown_rate=unknown / len(generated),
        route_counts_generated=counts_gen,
        route_counts_reference=counts_ref,
        entropy_generated=link_transition_entropy(generated),
        entropy_reference=link_transition_entropy(reference),
        attribute_js=attribute_js(generated, reference),
    )


# ============================================================================
# DIAGNOSTICS
# ============================================================================

def measure_throughput(generate: Callable[[], Dataset]) -> Tuple[Dataset, float]:
    """Run a generator callable and return (dataset, wall-clock seconds)"""
    start = time.perf_counter()
    dataset = generate()
    return dataset, time.perf_counter() - start


def discriminator_equilibrium(records: Sequence[ConvergenceRecord], tail: float = 0.1) -> Dict[str, float]:
    """Statistics of J_Discrim over the final fraction of iterations, and the gap to ln 4"""
    if not records:
        raise ContractViolation("empty convergence log")
    count = max(1, int(math.ceil(tail * len(records))))
    values = np.array([r.J_discrim for r in records[-count:]], dtype=np.float64)
    mean = float(values.mean())
    return {"mean": mean, "min": float(values.min()), "max": float(values.max()), "gap_to_ln4": abs(mean - LN4)}


# ============================================================================
# REPORT FILES
# ============================================================================

def write_scores_csv(report: ScoreReport, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({"traj_id": range(len(report.bleu)), "bleu": report.bleu, "meteor": report.meteor})
    frame.to_csv(path, index=False, lineterminator="\n", float_format="%.10g")


def write_distribution_csv(report: DistributionReport, path: Union[str, Path]) -> None:
    """metric,value rows followed by route,generated,reference count rows"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metrics = [
        ("d_js", report.d_js),
        ("unknown_count", report.unknown_count),
        ("unknown_rate", report.unknown_rate),
        ("entropy_generated", report.entropy_generated),
        ("entropy_reference", report.entropy_reference),
    ] + [(f"js_{name}", value) for name, value in report.attribute_js.items()]
    routes = sorted(set(report.route_counts_reference) | set(report.route_counts_generated))
    rows = [{"key": name, "value": value, "generated": None, "reference": None} for name, value in metrics]
    rows += [
        {"key": route, "value": None,
         "generated": report.route_counts_generated.get(route, 0),
         "reference": report.route_counts_reference.get(route, 0)}
        for route in routes
    ]
    pd.DataFrame(rows, columns=["key", "value", "generated", "reference"]).to_csv(
        path, index=False, lineterminator="\n", float_format="%.10g"
    )


def markdown_table(frame: pd.DataFrame, float_format: str = "{:.4f}") -> str:
    """Render a DataFrame as a GitHub Markdown table"""
    def cell(value) -> str:
        if isinstance(value, float):
            return "" if math.isnan(value) else float_format.format(value)
        return str(value)

    header = "| " + " | ".join(str(c) for c in frame.columns) + " |"
    rule = "|" + "|".join("---" for _ in frame.columns) + "|"
    body = ["| " + " | ".join(cell(v) for v in row) + " |" for row in frame.itertuples(index=False)]
    return "\n".join([header, rule] + body) + "\n"
