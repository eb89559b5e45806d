import numpy as np
import pytest

from trajlab.errors import ContractViolation, DataFormatError, NetworkLookupError
from trajlab.network import (
    END,
    LEFT,
    RIGHT,
    START,
    STRAIGHT,
    TERMINATE,
    action_mask,
    build_grid,
    edge_list_text,
    enumerate_shortest_routes,
    network_from_edge_list,
    network_id,
    next_observation,
    parse_edge_list,
    route_length,
    save_edge_list,
    validate_route,
)


# ============================================================================
# CONSTRUCTION
# ============================================================================

def test_grid3_counts(grid3):
    internal = [lid for lid in grid3.link_ids if lid.startswith("n") and ">n" in lid]
    assert len(internal) == 24
    assert grid3.n_links == 48
    assert len(grid3.sources) == 12
    assert len(grid3.sinks) == 12
    assert grid3.n_actions == 12
    assert grid3.n_tokens == 51


def test_grid2_counts(grid2):
    internal = [lid for lid in grid2.link_ids if lid.startswith("n") and ">n" in lid]
    assert len(internal) == 8
    assert len(grid2.sources) == 8
    assert len(grid2.sinks) == 8
    assert grid2.n_links == 24


@pytest.mark.parametrize("rows, cols", [(1, 3), (3, 1)])
def test_grid_rejects_degenerate(rows, cols):
    with pytest.raises(ContractViolation):
        build_grid(rows, cols, 100.0)


def test_sources_are_side_major(grid3):
    assert grid3.sources[:3] == ("W0>n0_0", "W1>n1_0", "W2>n2_0")
    assert grid3.sources[3] == "N0>n0_0"


def test_network_is_immutable(grid3):
    with pytest.raises(AttributeError):
        grid3.name = "other"


# ============================================================================
# MASKS AND LOOK-UP
# ============================================================================

def test_start_mask_has_one_origin_per_source(grid3):
    mask = action_mask(grid3, START)
    assert {a.index for a in mask} == set(range(12))
    assert all(a.label.startswith("Origin(") for a in mask)


def test_interior_mask_is_three_way(grid3):
    mask = action_mask(grid3, "n1_0>n1_1")
    assert {a.index for a in mask} == {STRAIGHT, LEFT, RIGHT}


def test_sink_mask_includes_terminate(grid3):
    assert TERMINATE in {a.index for a in action_mask(grid3, "n1_2>E1")}


def test_end_mask_is_empty(grid3):
    assert action_mask(grid3, END) == frozenset()


def test_unknown_link_mask(grid3):
    with pytest.raises(NetworkLookupError):
        action_mask(grid3, "nowhere")


def test_next_observation_examples(grid3):
    assert next_observation(grid3, START, 0) == grid3.sources[0]
    assert next_observation(grid3, "n1_2>E1", TERMINATE) == END
    # eastbound, Straight keeps heading east
    assert next_observation(grid3, "n1_0>n1_1", STRAIGHT) == "n1_1>n1_2"
    # eastbound: Left turns north (row index decreases), Right turns south
    assert next_observation(grid3, "n1_0>n1_1", LEFT) == "n1_1>n0_1"
    assert next_observation(grid3, "n1_0>n1_1", RIGHT) == "n1_1>n2_1"


def test_next_observation_rejects_masked_action(grid3):
    with pytest.raises(ContractViolation, match="n1_0>n1_1"):
        next_observation(grid3, "n1_0>n1_1", TERMINATE)
    with pytest.raises(ContractViolation):
        next_observation(grid3, END, 0)


def test_mask_and_lookup_coherent(grid3):
    for row in range(grid3.n_links + 1):
        o = grid3.observation_of(row)
        for a in range(grid3.n_actions):
            if grid3.mask_table[row, a]:
                nxt = next_observation(grid3, o, a)
                assert nxt == END or nxt in grid3.links
            else:
                with pytest.raises(ContractViolation):
                    next_observation(grid3, o, a)


def test_terminate_only_on_sinks(grid3):
    for i, lid in enumerate(grid3.link_ids):
        assert grid3.mask_table[i, TERMINATE] == (lid in grid3.sinks)


def test_terminate_anywhere():
    net = build_grid(2, 2, 100.0, terminate_anywhere=True)
    assert net.mask_table[: net.n_links, TERMINATE].all()


def test_closure_under_random_walks(grid3):
    rng = np.random.default_rng(0)
    for _ in range(50):
        o = START
        for _ in range(30):
            valid = sorted(a.index for a in action_mask(grid3, o))
            o = next_observation(grid3, o, int(rng.choice(valid)))
            if o == END:
                break
            assert o in grid3.links


def test_route_actions_roundtrip(grid3):
    route = ("W1>n1_0", "n1_0>n1_1", "n1_1>n1_2", "n1_2>E1")
    actions = grid3.route_actions(route)
    assert actions[0] == grid3.sources.index("W1>n1_0")
    assert actions[-1] == TERMINATE
    o = START
    for a in actions:
        o = next_observation(grid3, o, a)
    assert o == END


# ============================================================================
# SHORTEST ROUTES
# ============================================================================

def test_six_shortest_routes(grid3):
    routes = enumerate_shortest_routes(grid3, "W0>n0_0", "n2_2>S2")
    assert len(routes) == 6
    assert routes == sorted(routes)
    lengths = {route_length(grid3, r) for r in routes}
    assert len(lengths) == 1
    for r in routes:
        validate_route(grid3, r)


def test_straight_corridor_single_route(grid3):
    assert len(enumerate_shortest_routes(grid3, "W1>n1_0", "n1_2>E1")) == 1


def test_one_by_one_offset_gives_two_routes(grid2):
    routes = enumerate_shortest_routes(grid2, "W0>n0_0", "n1_1>S1")
    assert routes == [
        ("W0>n0_0", "n0_0>n0_1", "n0_1>n1_1", "n1_1>S1"),
        ("W0>n0_0", "n0_0>n1_0", "n1_0>n1_1", "n1_1>S1"),
    ]


def test_two_by_one_offset_gives_three_routes(grid3):
    assert len(enumerate_shortest_routes(grid3, "W0>n0_0", "n2_1>S1")) == 3
    assert len(enumerate_shortest_routes(grid3, "N0>n0_0", "n1_2>E1")) == 3


def test_enumerate_requires_boundary_links(grid3):
    with pytest.raises(ContractViolation):
        enumerate_shortest_routes(grid3, "n1_0>n1_1", "n1_2>E1")


def test_validate_route_errors(grid3):
    with pytest.raises(NetworkLookupError):
        validate_route(grid3, ["W0>n0_0", "bogus"])
    with pytest.raises(ContractViolation, match="Disconnected"):
        validate_route(grid3, ["W0>n0_0", "n1_1>n1_2"])


# ============================================================================
# EDGE LISTS
# ============================================================================

def test_edge_list_roundtrip(tmp_path, grid3):
    path = tmp_path / "grid.edgelist"
    save_edge_list(grid3, path)
    loaded = network_from_edge_list(path)
    assert loaded.link_ids == grid3.link_ids
    assert loaded.sources == grid3.sources
    assert np.array_equal(loaded.next_table, grid3.next_table)
    assert network_id(loaded) == network_id(grid3)


def test_parse_edge_list_from_text(two_route):
    net = parse_edge_list(edge_list_text(two_route), name="copy")
    assert net.name == "copy"
    assert np.array_equal(net.mask_table, two_route.mask_table)


def test_malformed_edge_list_reports_line():
    with pytest.raises(DataFormatError, match="line 2"):
        parse_edge_list("#sources a\nbroken line\n")
