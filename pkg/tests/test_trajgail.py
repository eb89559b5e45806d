import math

import numpy as np
import pytest

from trajlab.data import Dataset, split
from trajlab.errors import ContractViolation
from trajlab.evaluation import dataset_scores, discriminator_equilibrium, distribution_report
from trajlab.models import ConvergenceRecord, DemandPattern, RouteChoiceRule, TrainConfig
from trajlab.network import validate_route
from trajlab.nn import Adam, grad_check, graph_parameters, no_grad
from trajlab.sim import generate_demand
from trajlab.trajgail import (
    StepPairs,
    TrainResult,
    assign_rewards,
    build_models,
    checkpoint_tensors,
    discounted_returns,
    discriminator_objective,
    discriminator_reward,
    generate,
    models_from_tensors,
    policy_objective,
    read_convergence_csv,
    rollout,
    train,
    update_discriminator,
    update_policy,
    update_value,
    value_objective,
    value_targets,
    write_convergence_csv,
)

TINY = TrainConfig(hidden_size=4, num_layers=2, seed=0)


@pytest.fixture
def models(two_route):
    return build_models(two_route, TINY)


def constant_head(module, bias):
    """Make a module's output independent of the history"""
    module.head.weight.data[:] = 0.0
    module.head.bias.data[:] = bias


def grads(module):
    return {name: (np.zeros_like(p.data) if p.grad is None else p.grad) for name, p in module.parameters().items()}


# ============================================================================
# STEP PAIRS
# ============================================================================

def test_step_pairs_from_dataset(two_route, two_route_data):
    pairs = StepPairs.from_dataset(two_route_data, two_route)
    # Start -> a>b, the branch, two links, then Terminate
    assert len(pairs) == 20
    assert pairs.tokens.shape == (4, 5)
    assert (pairs.tokens[:, 0] == two_route.start_token).all()
    assert pairs.observations[0] == two_route.start_token
    assert pairs.actions[4] == 3
    assert pairs.masks[np.arange(len(pairs)), pairs.actions].all()


def test_step_pairs_skip_truncated(two_route, upper_route):
    data = Dataset.from_routes([upper_route, upper_route[:2]], truncated=[False, True])
    assert len(StepPairs.from_dataset(data, two_route)) == 5
    with pytest.raises(ContractViolation):
        StepPairs.from_dataset(Dataset.from_routes([upper_route[:2]], truncated=[True]), two_route)


def test_step_pairs_subset(two_route, two_route_data):
    pairs = StepPairs.from_dataset(two_route_data, two_route)
    part = pairs.subset(np.array([5, 6]))
    assert part.tokens.shape == (1, 5)
    assert part.traj.tolist() == [0, 0]
    assert part.observations.tolist() == pairs.observations[[5, 6]].tolist()
    assert part.actions.tolist() == pairs.actions[[5, 6]].tolist()


def test_discounted_returns():
    returns = discounted_returns(np.array([1.0, 2.0, 3.0]), np.array([1, 2, -1]), gamma=0.5)
    assert returns.tolist() == [2.75, 3.5, 3.0]


# ============================================================================
# ROLLOUT
# ============================================================================

def test_rollout_point_mass_policy(two_route, models, upper_route):
    policy = models[0]
    upper_action = two_route.route_actions(upper_route)[1]
    bias = np.zeros(two_route.n_actions)
    bias[upper_action] = 50.0
    constant_head(policy, bias)
    batch = rollout(policy, two_route, n=30, max_len=10, seed=0)
    assert set(batch.routes(two_route)) == {upper_route}
    assert not batch.truncated.any()
    assert batch.unique_routes(two_route) == 1


def test_rollout_is_seeded_and_valid(two_route, models):
    first = generate(models[0], two_route, 40, 10, seed=3)
    assert first == generate(models[0], two_route, 40, 10, seed=3)
    for t in first:
        validate_route(two_route, t.route)


def test_rollout_truncates_at_max_len(two_route, models):
    batch = rollout(models[0], two_route, n=5, max_len=1, seed=0)
    assert batch.truncated.all()
    assert set(batch.routes(two_route)) == {("a>b",)}
    assert len(batch) == 5
    assert (batch.next_index == -1).all()


def test_rollout_next_index_links_steps(two_route, models):
    batch = rollout(models[0], two_route, n=3, max_len=10, seed=1)
    pairs = batch.pairs
    for k, nxt in enumerate(batch.next_index):
        if nxt >= 0:
            assert pairs.traj[nxt] == pairs.traj[k]
            assert pairs.step[nxt] == pairs.step[k] + 1
    # five pairs per complete trajectory, the last one Terminate
    assert len(batch) == 15
    assert (batch.next_index == -1).sum() == 3


def test_rollout_rejects_bad_sizes(two_route, models):
    with pytest.raises(ContractViolation):
        rollout(models[0], two_route, n=0, max_len=5, seed=0)


# ============================================================================
# REWARDS AND OBJECTIVES
# ============================================================================

@pytest.mark.parametrize("d, reward", [(0.5, math.log(2.0)), (0.1, 2.302585093)])
def test_discriminator_reward(two_route, models, d, reward):
    discrim = models[2]
    constant_head(discrim, math.log(d / (1.0 - d)))
    value = discriminator_reward(discrim, [two_route.start_token, two_route.token_of("a>b")], 1, two_route)
    assert value == pytest.approx(reward, rel=1e-6)


def test_assign_rewards(two_route, models):
    discrim = models[2]
    constant_head(discrim, 0.0)
    batch = assign_rewards(rollout(models[0], two_route, n=4, max_len=10, seed=0), discrim, gamma=1.0)
    assert batch.rewards == pytest.approx(np.full(len(batch), math.log(2.0)))
    # undiscounted return of the first pair covers all five steps
    assert batch.returns[batch.pairs.step == 0] == pytest.approx(np.full(4, 5 * math.log(2.0)))


def test_bce_at_indifference(two_route, two_route_data, models):
    discrim = models[2]
    constant_head(discrim, 0.0)
    pairs = StepPairs.from_dataset(two_route_data, two_route)
    assert discriminator_objective(discrim, pairs, pairs).item() == pytest.approx(math.log(4.0))


def test_identical_batches_give_zero_discriminator_gradient(two_route, two_route_data, models):
    discrim = models[2]
    discrim.head.weight.data[:] = 0.0
    pairs = StepPairs.from_dataset(two_route_data, two_route)
    discrim.zero_grad()
    discriminator_objective(discrim, pairs, pairs).backward()
    for name, g in grads(discrim).items():
        assert np.abs(g).max() < 1e-12, name


def test_perfect_separation_loss(two_route, two_route_data, models):
    discrim = models[2]
    constant_head(discrim, np.array([-30.0, 30.0, 0.0, 0.0]))
    pairs = StepPairs.from_dataset(two_route_data, two_route)
    expert = pairs.model_copy(update={"actions": np.zeros(len(pairs), dtype=np.int64)})
    generated = pairs.model_copy(update={"actions": np.ones(len(pairs), dtype=np.int64)})
    assert discriminator_objective(discrim, generated, expert).item() < 1e-5


def test_value_targets_without_discount_are_rewards(two_route, models):
    policy, value, discrim = models
    batch = assign_rewards(rollout(policy, two_route, n=4, max_len=10, seed=2), discrim, gamma=0.0)
    assert value_targets(value, policy, batch, gamma=0.0) == pytest.approx(batch.rewards)


def test_value_targets_bootstrap_on_next_step(two_route, models):
    policy, value, discrim = models
    constant_head(value, 2.0)
    batch = assign_rewards(rollout(policy, two_route, n=4, max_len=10, seed=2), discrim, gamma=0.5)
    targets = value_targets(value, policy, batch, gamma=0.5)
    expected = batch.rewards + np.where(batch.next_index >= 0, 0.5 * 2.0, 0.0)
    assert targets == pytest.approx(expected)


def test_policy_objective_zero_advantage_zero_entropy(two_route, models):
    policy = models[0]
    batch = rollout(policy, two_route, n=6, max_len=10, seed=0)
    policy.zero_grad()
    loss, j_policy, entropy = policy_objective(policy, batch.pairs, np.zeros(len(batch)), entropy_coef=0.0)
    loss.backward()
    assert j_policy.item() == 0.0
    assert entropy.item() > 0.0
    for name, g in grads(policy).items():
        assert np.abs(g).max() == 0.0, name


def test_policy_entropy_is_exact_masked_entropy(two_route, models):
    policy = models[0]
    constant_head(policy, 0.0)
    batch = rollout(policy, two_route, n=8, max_len=10, seed=0)
    _, _, entropy = policy_objective(policy, batch.pairs, np.zeros(len(batch)), entropy_coef=0.0)
    # only the branch step has two valid actions
    valid = batch.pairs.masks.sum(axis=1)
    assert entropy.item() == pytest.approx(np.log(valid).mean())


def test_objective_gradients(two_route, models, two_route_data):
    policy, value, discrim = models
    expert = StepPairs.from_dataset(two_route_data, two_route)
    batch = assign_rewards(rollout(policy, two_route, n=4, max_len=10, seed=0), discrim, 0.95)
    targets = value_targets(value, policy, batch, 0.95)
    with no_grad():
        q_taken = value.q_taken(batch.pairs).data
    assert grad_check(lambda: policy_objective(policy, batch.pairs, q_taken, 0.01)[0], policy.parameters()) < 1e-4
    assert grad_check(lambda: value_objective(value, batch.pairs, targets), value.parameters()) < 1e-4
    assert grad_check(lambda: discriminator_objective(discrim, batch.pairs, expert), discrim.parameters()) < 1e-4


def test_objectives_touch_only_their_own_module(two_route, models, two_route_data):
    policy, value, discrim = models
    expert = StepPairs.from_dataset(two_route_data, two_route)
    batch = assign_rewards(rollout(policy, two_route, n=4, max_len=10, seed=0), discrim, 0.95)
    targets = value_targets(value, policy, batch, 0.95)
    with no_grad():
        q_taken = value.q_taken(batch.pairs).data
    objectives = [
        (policy, policy_objective(policy, batch.pairs, q_taken, 0.01)[0]),
        (value, value_objective(value, batch.pairs, targets)),
        (discrim, discriminator_objective(discrim, batch.pairs, expert)),
    ]
    for module, loss in objectives:
        own = {id(p) for p in module.parameters().values()}
        reached = {id(p) for p in graph_parameters(loss)}
        assert reached and reached <= own


# ============================================================================
# UPDATE STEPS
# ============================================================================

def branch_pairs(net, data):
    """The pairs taken at the single branching history [Start, a>b]"""
    pairs = StepPairs.from_dataset(data, net)
    return pairs.subset(np.flatnonzero(pairs.step == 1))


def branch_probability(policy, pairs, action):
    with no_grad():
        return float(np.exp(policy.log_probs(pairs).data[0, action]))


def test_update_value_reaches_bellman_fixed_point(chain):
    policy, value, _ = build_models(chain, TINY)
    batch = rollout(policy, chain, n=2, max_len=5, seed=0)
    # Start -> c0>c1 -> c1>c2 -> Terminate, the only choices on a chain
    assert batch.pairs.step.tolist() == [0, 1, 2, 0, 1, 2]
    batch.rewards = np.tile([0.3, 1.0, 2.0], 2)
    optimizer = Adam(value.parameters(), lr=0.01)
    for _ in range(1500):
        j_value = update_value(value, optimizer, batch, policy, gamma=0.95)
    with no_grad():
        q = value.q_taken(batch.pairs).data[:3]
    q_second = 1.0 + 0.95 * 2.0
    assert q == pytest.approx([0.3 + 0.95 * q_second, q_second, 2.0], abs=0.05)
    assert j_value < 1e-2


def test_update_value_without_bootstrap_fits_rewards(chain):
    policy, value, discrim = build_models(chain, TINY)
    batch = assign_rewards(rollout(policy, chain, n=2, max_len=5, seed=0), discrim, gamma=0.0)
    optimizer = Adam(value.parameters(), lr=0.01)
    first = update_value(value, optimizer, batch, policy, gamma=0.0)
    for _ in range(800):
        last = update_value(value, optimizer, batch, policy, gamma=0.0)
    assert last < 0.01 * first


def test_update_policy_raises_probability_of_positive_q(two_route, two_route_data, models, upper_route):
    policy = models[0]
    pairs = branch_pairs(two_route, two_route_data)
    upper = two_route.route_actions(upper_route)[1]
    q_taken = (pairs.actions == upper).astype(np.float64)
    optimizer = Adam(policy.parameters(), lr=0.01)
    history = [branch_probability(policy, pairs, upper)]
    for _ in range(5):
        update_policy(policy, optimizer, pairs, q_taken, entropy_coef=0.0)
        history.append(branch_probability(policy, pairs, upper))
    assert all(later > earlier for earlier, later in zip(history, history[1:]))


def test_update_policy_entropy_drives_branch_to_uniform(two_route, two_route_data, models, upper_route):
    policy = models[0]
    pairs = branch_pairs(two_route, two_route_data)
    upper = two_route.route_actions(upper_route)[1]
    policy.head.bias.data[upper] += 5.0
    assert branch_probability(policy, pairs, upper) > 0.8
    optimizer = Adam(policy.parameters(), lr=0.02)
    for _ in range(500):
        _, entropy = update_policy(policy, optimizer, pairs, np.zeros(len(pairs)), entropy_coef=10.0)
    assert branch_probability(policy, pairs, upper) == pytest.approx(0.5, abs=0.05)
    assert entropy == pytest.approx(math.log(2.0), abs=1e-2)


def test_update_policy_null_coefficients_keep_parameters(two_route, models):
    policy = models[0]
    batch = rollout(policy, two_route, n=6, max_len=10, seed=0)
    before = policy.state_dict()
    update_policy(policy, Adam(policy.parameters(), lr=0.1), batch.pairs, np.zeros(len(batch)), entropy_coef=0.0)
    for name, array in policy.state_dict().items():
        assert np.array_equal(array, before[name]), name


def test_update_discriminator_lowers_loss(two_route, two_route_data, models):
    policy, _, discrim = models
    expert = StepPairs.from_dataset(two_route_data, two_route)
    generated = rollout(policy, two_route, n=8, max_len=10, seed=0).pairs
    with no_grad():
        before = discriminator_objective(discrim, generated, expert).item()
    after = update_discriminator(discrim, Adam(discrim.parameters(), lr=1e-3), expert, generated)
    assert after < before


# ============================================================================
# TRAINING AND PERSISTENCE
# ============================================================================

SMOKE = TrainConfig(iterations=3, samples=8, hidden_size=4, num_layers=1, generator_updates=2, seed=5)


def test_train_logs_every_iteration(two_route, two_route_data):
    result = train(two_route_data, two_route, SMOKE)
    assert [r.iter for r in result.log] == [0, 1, 2]
    assert all(np.isfinite([r.J_policy, r.J_value, r.J_discrim, r.entropy]).all() for r in result.log)
    assert result.max_len == 12


def test_train_is_deterministic(two_route, two_route_data):
    first = train(two_route_data, two_route, SMOKE)
    second = train(two_route_data, two_route, SMOKE)
    assert first.log == second.log
    assert generate(first.policy, two_route, 20, 10, seed=0) == generate(second.policy, two_route, 20, 10, seed=0)


def test_train_rejects_empty_expert(two_route):
    with pytest.raises(ContractViolation):
        train(Dataset(), two_route, SMOKE)


def collapse_warnings(caplog):
    return [r for r in caplog.records if r.levelname == "WARNING" and "mode collapse" in r.getMessage()]


def test_default_collapse_floor_flags_single_route_generator(chain, caplog):
    # the chain has one route, so every iteration generates a single unique route
    expert = Dataset.from_routes([("c0>c1", "c1>c2")] * 4)
    config = SMOKE.model_copy(update={"collapse_patience": 2})
    assert config.collapse_floor == 2
    with caplog.at_level("WARNING", logger="trajlab"):
        result = train(expert, chain, config)
    assert [r.unique_routes for r in result.log] == [1, 1, 1]
    warnings = collapse_warnings(caplog)
    assert len(warnings) == 1
    assert "iter 2" in warnings[0].getMessage()


def test_collapse_warning_needs_a_floor(chain, caplog):
    expert = Dataset.from_routes([("c0>c1", "c1>c2")] * 4)
    config = SMOKE.model_copy(update={"collapse_patience": 1, "collapse_floor": 1})
    with caplog.at_level("WARNING", logger="trajlab"):
        train(expert, chain, config)
    assert collapse_warnings(caplog) == []


def test_checkpoint_tensors_roundtrip(two_route, models):
    result = TrainResult(policy=models[0], value=models[1], discrim=models[2], log=[], max_len=8)
    tensors = checkpoint_tensors(result)
    assert any(k.startswith("discrim.head.") for k in tensors)
    restored = models_from_tensors(tensors, two_route, TINY.model_copy(update={"seed": 99}))
    for original, loaded in zip(models, restored):
        for name, array in original.state_dict().items():
            assert np.array_equal(loaded.state_dict()[name], array)


def test_convergence_csv_roundtrip(tmp_path):
    records = [
        ConvergenceRecord(iter=0, J_policy=-0.5, J_value=1.25, J_discrim=1.375, entropy=0.25, unique_routes=2),
        ConvergenceRecord(iter=1, J_policy=-0.25, J_value=0.75, J_discrim=1.125, entropy=0.125, unique_routes=1),
    ]
    path = tmp_path / "reports" / "convergence.csv"
    write_convergence_csv(records, path)
    assert path.read_text().splitlines()[0] == "iter,J_policy,J_value,J_discrim,entropy,unique_routes"
    assert read_convergence_csv(path) == records


@pytest.mark.slow
def test_imitates_single_route_expert(two_route, upper_route):
    expert = Dataset.from_routes([upper_route] * 20)
    config = TrainConfig(iterations=300, samples=64, hidden_size=8, num_layers=1, learning_rate=0.01,
                         generator_updates=2, seed=0)
    result = train(expert, two_route, config)
    generated = generate(result.policy, two_route, 500, result.max_len, seed=1)
    share = sum(1 for r in generated.routes if r == upper_route) / len(generated)
    assert share >= 0.9


# ============================================================================
# DESK-SCALE SINGLE-OD
# ============================================================================

@pytest.fixture(scope="module", params=["binomial", "clogit", "proportional", "logit", "fixed"])
def desk_single_od(request, grid3):
    """TrajGAIL trained at the desk preset on 2,000 simulated single-OD trajectories"""
    expert = generate_demand(grid3, DemandPattern(), RouteChoiceRule(kind=request.param), n=2000, seed=0)
    train_set, test_set = split(expert, 0.7, seed=0)
    result = train(train_set, grid3, TrainConfig())
    generated = generate(result.policy, grid3, 2000, result.max_len, seed=1)
    return request.param, test_set, result, generated


@pytest.mark.slow
def test_desk_single_od_scores(desk_single_od):
    _, test_set, _, generated = desk_single_od
    scores = dataset_scores(generated, test_set, n=4)
    assert scores.bleu_mean >= 0.99
    assert scores.meteor_mean >= 0.99
    assert distribution_report(generated, test_set).d_js <= 0.10


@pytest.mark.slow
def test_desk_single_od_discriminator_settles_near_ln4(desk_single_od, tmp_path):
    _, _, result, _ = desk_single_od
    path = tmp_path / "convergence.csv"
    write_convergence_csv(result.log, path)
    records = read_convergence_csv(path)
    tail = discriminator_equilibrium(records, tail=0.1)
    assert 1.2 <= tail["min"] <= tail["max"] <= 1.5


@pytest.mark.slow
def test_desk_single_od_routes_are_valid(desk_single_od, grid3):
    rule, test_set, _, generated = desk_single_od
    for trajectory in generated:
        validate_route(grid3, trajectory.route)
        assert trajectory.truncated or trajectory.route[-1] in grid3.sinks
    if rule == "fixed":
        assert distribution_report(generated, test_set).unknown_rate < 0.05
