from collections import Counter

import numpy as np
import pytest
from scipy.stats import chisquare

from trajlab.baselines import bc_rnn_generate, bc_rnn_train, maxent_generate, maxent_train, mmc_fit, mmc_generate
from trajlab.baselines.bcrnn import sequence_loss, step_accuracy
from trajlab.baselines.maxent import (
    empirical_visitation,
    expected_visitation,
    horizon_for,
    maxent_gradient,
    monte_carlo_visitation,
    policy_token_transitions,
    soft_value_iteration,
)
from trajlab.baselines.mmc import conditional_entropy, sample_markov_chain
from trajlab.data import Dataset, longest_route, split
from trajlab.errors import ContractViolation
from trajlab.evaluation import distribution_report
from trajlab.models import BcRnnConfig, DemandPattern, MaxEntConfig, RouteChoiceRule
from trajlab.network import END, START, enumerate_shortest_routes, validate_route
from trajlab.nn import no_grad
from trajlab.sim import generate_demand


# ============================================================================
# MOBILITY MARKOV CHAIN
# ============================================================================

def test_mmc_hand_counts(two_route):
    model = mmc_fit(Dataset.from_routes([
        ("a>b", "b>c", "c>e", "e>f"),
        ("a>b", "b>c", "c>e", "e>f"),
        ("a>b", "b>d", "d>e", "e>f"),
    ]), two_route)
    assert model.prob(two_route, "b>c", "a>b") == pytest.approx(2 / 3)
    assert model.prob(two_route, "b>d", "a>b") == pytest.approx(1 / 3)
    assert model.prob(two_route, "a>b", START) == 1.0
    assert model.prob(two_route, END, "e>f") == 1.0


def test_mmc_single_trajectory_is_deterministic(two_route, upper_route):
    model = mmc_fit(Dataset.from_routes([upper_route]), two_route)
    observed = model.probs[model.counts > 0]
    assert (observed == 1.0).all()


def test_mmc_start_row_is_origin_frequency(grid3):
    routes = [("W1>n1_0", "n1_0>n1_1", "n1_1>n1_2", "n1_2>E1")] * 3 + [("N1>n0_1", "n0_1>n1_1", "n1_1>n2_1", "n2_1>S1")]
    model = mmc_fit(Dataset.from_routes(routes), grid3)
    assert model.prob(grid3, "W1>n1_0", START) == 0.75
    assert model.prob(grid3, "N1>n0_1", START) == 0.25


def test_mmc_matches_counting_oracle(grid3):
    rng = np.random.default_rng(0)
    pool = enumerate_shortest_routes(grid3, "W0>n0_0", "n2_2>S2") + enumerate_shortest_routes(grid3, "N2>n0_2", "n2_0>W2")
    for _ in range(100):
        picks = rng.integers(0, len(pool), size=int(rng.integers(1, 8)))
        data = Dataset.from_routes([pool[i] for i in picks])
        model = mmc_fit(data, grid3)
        counts = Counter()
        for route in data.routes:
            seq = [START, *route, END]
            counts.update(zip(seq, seq[1:]))
        totals = Counter()
        for (prev, _), c in counts.items():
            totals[prev] += c
        for (prev, nxt), c in counts.items():
            assert model.prob(grid3, nxt, prev) == c / totals[prev]
        assert int(model.counts.sum()) == sum(counts.values())


def test_mmc_generate_deterministic_chain(chain):
    model = mmc_fit(Dataset.from_routes([("c0>c1", "c1>c2")]), chain)
    data = mmc_generate(model, chain, n=50, max_len=5, seed=0)
    assert set(data.routes) == {("c0>c1", "c1>c2")}
    assert not any(t.truncated for t in data)


def test_mmc_generate_is_seeded(two_route, two_route_data):
    model = mmc_fit(two_route_data, two_route)
    assert mmc_generate(model, two_route, 100, 10, seed=4) == mmc_generate(model, two_route, 100, 10, seed=4)


def test_mmc_generate_frequencies(two_route, two_route_data, upper_route):
    model = mmc_fit(two_route_data, two_route)
    data = mmc_generate(model, two_route, 20000, 10, seed=1)
    share = sum(1 for r in data.routes if r == upper_route) / len(data)
    assert share == pytest.approx(0.75, abs=0.02)
    for t in data:
        validate_route(two_route, t.route)


def test_markov_chain_truncation():
    # 0 -> 1 -> 0 -> ... never reaches End (token 3)
    transition = np.zeros((4, 4))
    transition[2, 0] = 1.0
    transition[0, 1] = 1.0
    transition[1, 0] = 1.0
    chains, truncated = sample_markov_chain(transition, start_token=2, end_token=3, n=3, max_len=4, seed=0)
    assert truncated.all()
    assert chains[0] == [0, 1, 0, 1]


def test_markov_chain_zero_mass_row():
    transition = np.zeros((3, 3))
    transition[1, 0] = 1.0
    with pytest.raises(ContractViolation):
        sample_markov_chain(transition, start_token=1, end_token=2, n=2, max_len=3, seed=0)


# ============================================================================
# BEHAVIOUR-CLONING RNN
# ============================================================================

SMALL_BC = BcRnnConfig(hidden_size=8, num_layers=1, learning_rate=0.05, epochs=60, batch_size=16, seed=0)


def test_bc_rnn_memorizes_single_route(two_route, upper_route):
    data = Dataset.from_routes([upper_route] * 8)
    model, history = bc_rnn_train(data, two_route, SMALL_BC.model_copy(update={"epochs": 150}))
    assert history[-1] < history[0]
    assert step_accuracy(model, two_route, data) == 1.0
    generated = bc_rnn_generate(model, two_route, 200, 10, seed=0)
    assert set(generated.routes) == {upper_route}


def test_bc_rnn_loss_bounded_by_conditional_entropy(two_route, two_route_data):
    model, _ = bc_rnn_train(two_route_data, two_route, SMALL_BC)
    floor = conditional_entropy(mmc_fit(two_route_data, two_route))
    with no_grad():
        loss = sequence_loss(model, two_route, two_route_data.routes).item()
    assert loss >= floor - 1e-6
    assert loss < floor + 0.05


def test_bc_rnn_masks_infeasible_tokens(two_route, two_route_data):
    model, _ = bc_rnn_train(two_route_data, two_route, SMALL_BC.model_copy(update={"epochs": 1}))
    with no_grad():
        state = model.stack.step(np.array([two_route.start_token]), model.stack.initial_state(1))
        logp = model.next_log_probs(state[-1], np.array([two_route.start_token]), two_route.successor_table).data
    feasible = two_route.successor_table[two_route.start_token]
    assert np.exp(logp[0, ~feasible]).sum() == 0.0


def test_bc_rnn_generate_is_seeded(two_route, two_route_data):
    model, _ = bc_rnn_train(two_route_data, two_route, SMALL_BC.model_copy(update={"epochs": 2}))
    assert bc_rnn_generate(model, two_route, 50, 10, seed=9) == bc_rnn_generate(model, two_route, 50, 10, seed=9)


# ============================================================================
# MAXIMUM-ENTROPY IRL
# ============================================================================

def test_horizon(two_route_data):
    assert horizon_for(two_route_data, 1.5) == 8


def test_svf_gradient_at_uniform_weights(chain):
    data = Dataset.from_routes([("c0>c1", "c1>c2")])
    empirical = empirical_visitation(data, chain)
    horizon = 4
    grad, policy = maxent_gradient(chain, "svf", np.zeros(chain.n_links + 2), empirical, horizon)
    expected, _ = expected_visitation(chain, soft_value_iteration(chain, np.zeros((chain.n_links + 2, chain.n_actions)), horizon), horizon)
    assert grad == pytest.approx(empirical[0] - expected)
    # a deterministic chain is matched exactly
    assert np.abs(grad).max() < 1e-12


def test_expected_visitation_matches_monte_carlo(two_route, two_route_data):
    horizon = horizon_for(two_route_data, 1.5)
    rewards = np.zeros((two_route.n_links + 2, two_route.n_actions))
    rewards[two_route.token_of("b>d")] = 0.7
    policy = soft_value_iteration(two_route, rewards, horizon)
    svf, _ = expected_visitation(two_route, policy, horizon)
    mean, stderr = monte_carlo_visitation(two_route, policy, horizon, n=10000, seed=0)
    stable = stderr > 0
    assert (np.abs(svf - mean)[stable] <= 3 * stderr[stable] + 1e-12).all()
    assert np.allclose(svf[~stable], mean[~stable])


def test_maxent_learns_expert_branch(two_route, upper_route):
    data = Dataset.from_routes([upper_route] * 10)
    model = maxent_train(data, two_route, "svf", MaxEntConfig(iterations=500, learning_rate=0.1))
    branch = two_route.token_of("a>b")
    # Left leads to b>c (upper route)
    upper_action = two_route.route_actions(upper_route)[1]
    assert model.policy[branch, upper_action] >= 0.99


def test_maxent_symmetric_expert_gives_symmetric_policy(two_route, upper_route, lower_route):
    data = Dataset.from_routes([upper_route, lower_route] * 5)
    model = maxent_train(data, two_route, "savf", MaxEntConfig(iterations=200))
    branch = two_route.token_of("a>b")
    probs = model.policy[branch][two_route.mask_table[branch]]
    assert probs == pytest.approx([0.5, 0.5], abs=1e-2)


def test_maxent_non_convergence_returns_best(two_route, upper_route, caplog):
    data = Dataset.from_routes([upper_route] * 4)
    with caplog.at_level("WARNING", logger="trajlab"):
        model = maxent_train(data, two_route, "svf", MaxEntConfig(iterations=2, tolerance=1e-12))
    assert not model.converged
    assert model.policy is not None
    assert "Not converged" in caplog.text


def test_maxent_generate_point_mass(two_route, upper_route):
    data = Dataset.from_routes([upper_route] * 10)
    model = maxent_train(data, two_route, "savf", MaxEntConfig(iterations=400, learning_rate=0.2))
    generated = maxent_generate(model, two_route, 500, 10, seed=0)
    share = sum(1 for r in generated.routes if r == upper_route) / len(generated)
    assert share >= 0.97
    assert generated == maxent_generate(model, two_route, 500, 10, seed=0)


def test_maxent_rejects_unknown_variant(two_route, two_route_data):
    with pytest.raises(ContractViolation):
        maxent_train(two_route_data, two_route, "both", MaxEntConfig())


# ============================================================================
# DESK-SCALE SINGLE-OD
# ============================================================================

def route_probability(net, transition, route):
    tokens = net.encode_route(route)
    return float(np.prod([transition[a, b] for a, b in zip(tokens, tokens[1:])]))


@pytest.mark.slow
def test_bc_rnn_matches_proportional_route_distribution(grid3):
    expert = generate_demand(grid3, DemandPattern(), RouteChoiceRule(kind="proportional"), n=2000, seed=0)
    train_set, test_set = split(expert, 0.7, seed=0)
    model, _ = bc_rnn_train(train_set, grid3, BcRnnConfig())
    generated = bc_rnn_generate(model, grid3, 2000, 3 * longest_route(train_set), seed=1)
    assert distribution_report(generated, test_set).d_js < 0.1


@pytest.mark.slow
def test_maxent_generate_follows_policy_chi_square(grid3):
    expert = generate_demand(grid3, DemandPattern(), RouteChoiceRule(kind="logit"), n=500, seed=0)
    model = maxent_train(expert, grid3, "savf", MaxEntConfig(iterations=50))
    n = 20000
    generated = maxent_generate(model, grid3, n, 40, seed=3)
    transition = policy_token_transitions(grid3, model.policy)
    routes = sorted(set(expert.routes))
    probs = np.array([route_probability(grid3, transition, r) for r in routes])
    counts = Counter(t.route for t in generated if not t.truncated)
    observed = np.array([counts.get(r, 0) for r in routes])
    # everything outside the expert routes, truncations included, shares one bin
    observed = np.append(observed, n - observed.sum())
    expected = np.append(probs, max(0.0, 1.0 - probs.sum())) * n
    keep = expected >= 5
    rest = ~keep
    observed = np.append(observed[keep], observed[rest].sum())
    expected = np.append(expected[keep], expected[rest].sum())
    if expected[-1] == 0.0:
        observed, expected = observed[:-1], expected[:-1]
    assert chisquare(observed, expected).pvalue > 1e-3
