import itertools
import math

import numpy as np
import pandas as pd
import pytest

from trajlab.data import Dataset, RouteDistribution
from trajlab.errors import ContractViolation
from trajlab.evaluation import (
    align,
    bleu_n,
    complexity_sensitivity,
    dataset_scores,
    discriminator_equilibrium,
    distribution_report,
    js_distance,
    link_transition_entropy,
    markdown_table,
    meteor,
    write_distribution_csv,
    write_scores_csv,
)
from trajlab.models import ConvergenceRecord

A, B, C, D, E = "A", "B", "C", "D", "E"


# ============================================================================
# BLEU
# ============================================================================

def test_bleu_perfect_match():
    assert bleu_n([A, B, C, D], [[A, B, C, D]], n=4) == 1.0


def test_bleu_bigram():
    assert bleu_n([A, B, C, D], [[A, B, C, E]], n=2) == pytest.approx(math.sqrt(0.5))


def test_bleu_clipping():
    assert bleu_n([A, A, A], [[A, B]], n=1) == pytest.approx(1 / 3)


def test_bleu_brevity_and_skipped_orders():
    # no bigram in a one-token candidate; brevity 1/2 against the length-2 reference
    assert bleu_n([A], [[A, B]], n=2) == pytest.approx(0.5)


def test_bleu_clips_per_reference():
    # A appears at most once in any single reference
    assert bleu_n([A, A], [[A, B], [A, C]], n=1) == pytest.approx(0.5)


def test_bleu_no_overlap():
    assert bleu_n([A, B], [[C, D]], n=2) == 0.0


def test_bleu_invalid_inputs():
    with pytest.raises(ContractViolation):
        bleu_n([], [[A]])
    with pytest.raises(ContractViolation):
        bleu_n([A], [[A]], n=0)


# ============================================================================
# METEOR
# ============================================================================

def test_meteor_identical():
    assert meteor([A, B, C, D], [[A, B, C, D]]) == pytest.approx(0.9921875)


def test_meteor_disjoint():
    assert meteor([A, B], [[C, D]]) == 0.0


def test_meteor_swap():
    assert meteor([A, B, C, D], [[A, C, B, D]]) == pytest.approx(0.7890625)


def test_meteor_takes_best_reference():
    assert meteor([A, B, C, D], [[E], [A, B, C, D]]) == pytest.approx(0.9921875)


def test_align_prefers_fewest_crossings():
    assert sorted(align([A, B, A], [A, B, A])) == [(0, 0), (1, 1), (2, 2)]


def order_crossings(pairs):
    refs = [r for _, r in sorted(pairs)]
    return sum(1 for a in range(len(refs)) for b in range(a + 1, len(refs)) if refs[a] > refs[b])


def exhaustive_best(candidate, reference):
    """(-matches, crossings) of the best injective same-token matching, by enumeration"""
    options = [[None] + [j for j, r in enumerate(reference) if r == c] for c in candidate]
    best = None
    for choice in itertools.product(*options):
        used = [j for j in choice if j is not None]
        if len(used) != len(set(used)):
            continue
        key = (-len(used), order_crossings(list(enumerate(used))))
        best = key if best is None or key < best else best
    return best


@pytest.mark.parametrize("candidate, reference", [
    ([A, B, A, C, B], [B, A, C, A, B]),
    ([A, A, B, B], [B, A, B, A]),
    ([A, B, C, A], [C, A, A, B]),
    ([A, A, A], [A]),
])
def test_align_is_optimal(candidate, reference):
    pairs = align(candidate, reference)
    assert (-len(pairs), order_crossings(pairs)) == exhaustive_best(candidate, reference)


def test_align_repeated_tokens_without_crossings():
    candidate = [B] + [A] * 6
    reference = [A] * 7 + [B] + [A] * 8
    pairs = align(candidate, reference)
    assert pairs == [(i, 7 + i) for i in range(7)]
    f_mean = 10 * (7 / 16) / (7 / 16 + 9)
    assert meteor(candidate, [reference]) == pytest.approx(f_mean * (1 - 0.5 / 7 ** 3))


# ============================================================================
# JENSEN-SHANNON DISTANCE
# ============================================================================

def test_js_identical():
    assert js_distance({"x": 0.3, "y": 0.7}, {"x": 0.3, "y": 0.7}) == 0.0


def test_js_disjoint():
    assert js_distance({"x": 1.0}, {"y": 1.0}) == pytest.approx(1.0)


def test_js_point_mass_against_uniform():
    assert js_distance({"x": 1.0}, {"x": 0.5, "y": 0.5}) == pytest.approx(0.557922, abs=1e-6)


def test_js_symmetric():
    p, q = {"x": 0.2, "y": 0.8}, {"x": 0.6, "z": 0.4}
    assert js_distance(p, q) == pytest.approx(js_distance(q, p))


def test_js_of_route_distributions_includes_unknown():
    p = RouteDistribution(probs={("a",): 0.5}, unknown_mass=0.5)
    q = RouteDistribution(probs={("a",): 1.0}, unknown_mass=0.0)
    assert js_distance(p, q) == pytest.approx(js_distance({"a": 0.5, "u": 0.5}, {"a": 1.0}))


def test_js_rejects_unnormalized():
    with pytest.raises(ContractViolation):
        js_distance({"x": 0.5}, {"x": 1.0})


# ============================================================================
# LINK TRANSITION ENTROPY AND COMPLEXITY
# ============================================================================

def test_entropy_deterministic_routes(upper_route):
    assert link_transition_entropy(Dataset.from_routes([upper_route] * 3)) == 0.0


def test_entropy_uniform_four_way():
    data = Dataset.from_routes([("x", "a"), ("x", "b"), ("x", "c"), ("x", "d")])
    assert link_transition_entropy(data) == pytest.approx(2.0)


def test_entropy_averages_over_source_links():
    data = Dataset.from_routes([("x", "a"), ("x", "b"), ("y", "a"), ("y", "a")])
    assert link_transition_entropy(data) == pytest.approx(0.5)


def test_entropy_invariant_under_duplication(two_route_data):
    doubled = Dataset.from_routes(two_route_data.routes * 2)
    assert link_transition_entropy(doubled) == pytest.approx(link_transition_entropy(two_route_data))


def test_entropy_of_single_link_routes():
    assert link_transition_entropy(Dataset.from_routes([("x",)])) == 0.0


@pytest.mark.parametrize("points, slope", [
    ([(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)], 1.0),
    ([(0.0, 0.3), (1.0, 0.3)], 0.0),
    ([(0.0, 0.0), (1.0, 0.6)], 0.6),
])
def test_complexity_slope(points, slope):
    fit = complexity_sensitivity(points)
    assert fit.slope == pytest.approx(slope)
    assert fit.r_squared == pytest.approx(1.0)
    assert fit.n_points == len(points)


def test_complexity_needs_distinct_entropies():
    with pytest.raises(ContractViolation):
        complexity_sensitivity([(1.0, 0.1), (1.0, 0.2)])
    with pytest.raises(ContractViolation):
        complexity_sensitivity([(1.0, 0.1)])


# ============================================================================
# DATASET REPORTS
# ============================================================================

def test_dataset_scores_self(two_route_data):
    report = dataset_scores(two_route_data, two_route_data)
    assert report.bleu == [1.0] * 4
    assert report.bleu_mean == 1.0
    assert report.bleu_std == 0.0
    assert 0.9 < report.meteor_mean < 1.0


def test_dataset_scores_requires_data(two_route_data):
    with pytest.raises(ContractViolation):
        dataset_scores(Dataset(), two_route_data)


def test_distribution_report_self(two_route_data):
    report = distribution_report(two_route_data, two_route_data)
    assert report.d_js == 0.0
    assert report.unknown_count == 0
    assert report.entropy_generated == report.entropy_reference
    assert all(v == 0.0 for v in report.attribute_js.values())


def test_distribution_report_counts_novel_routes(upper_route, lower_route):
    reference = Dataset.from_routes([upper_route])
    generated = Dataset.from_routes([upper_route, upper_route, lower_route])
    report = distribution_report(generated, reference)
    assert report.unknown_count == 1
    assert report.unknown_rate == pytest.approx(1 / 3)
    assert report.route_counts_generated == {" ".join(upper_route): 2, "unknown": 1}
    assert report.d_js == pytest.approx(js_distance({"u": 2 / 3, "x": 1 / 3}, {"u": 1.0}))


def test_discriminator_equilibrium():
    records = [
        ConvergenceRecord(iter=i, J_policy=0.0, J_value=0.0,
                          J_discrim=math.log(4.0) if i >= 18 else 0.1, entropy=0.0, unique_routes=1)
        for i in range(20)
    ]
    stats = discriminator_equilibrium(records)
    assert stats["mean"] == pytest.approx(math.log(4.0))
    assert stats["gap_to_ln4"] == pytest.approx(0.0)


def test_markdown_table():
    frame = pd.DataFrame({"model": ["mmc", "trajgail"], "d_js": [0.5, np.nan]})
    assert markdown_table(frame) == "| model | d_js |\n|---|---|\n| mmc | 0.5000 |\n| trajgail |  |\n"


def test_report_files(tmp_path, two_route_data):
    write_scores_csv(dataset_scores(two_route_data, two_route_data), tmp_path / "scores.csv")
    write_distribution_csv(distribution_report(two_route_data, two_route_data), tmp_path / "distribution.csv")
    scores = pd.read_csv(tmp_path / "scores.csv")
    assert list(scores.columns) == ["traj_id", "bleu", "meteor"]
    assert len(scores) == 4
    dist = pd.read_csv(tmp_path / "distribution.csv")
    assert dist.loc[dist.key == "d_js", "value"].item() == 0.0
    assert dist.loc[dist.key == "unknown", "generated"].item() == 0
