import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manetwatch.config import ScenarioConfig
from manetwatch.netsim import (
    BROADCAST,
    ChannelModel,
    DpdCache,
    EpisodeClock,
    JammerConfig,
    JamMode,
    MobilityParams,
    MobilityState,
    NetworkState,
    Packet,
    TrafficFlow,
    compute_links,
    inject_traffic,
    nearest_neighbors,
    step_mobility,
    transmit,
)
from manetwatch.rollout import TERMINAL_STATES, simulate


def one_node(speed, heading, mean_speed, mean_heading, memory, pos=(300.0, 300.0)):
    return MobilityState(np.array([pos], dtype=float), np.array([speed]), np.array([heading]),
                         np.array([mean_speed]), np.array([mean_heading]), memory)


# --- mobility -----------------------------------------------------------------

def test_full_memory_ignores_noise():
    s = one_node(3.0, 0.7, 2.0, -1.0, 1.0)
    out = step_mobility(s, MobilityParams(memory=1.0, sigma_speed=5, sigma_heading=5), None,
                        noise=([2.5], [-1.3]))
    assert out.speed[0] == 3.0
    assert out.heading[0] == 0.7


def test_zero_memory_collapses_to_means():
    s = one_node(7.0, 2.0, 2.0, 0.4, 0.0)
    out = step_mobility(s, MobilityParams(memory=0.0), None, noise=([0.0], [0.0]))
    assert out.speed[0] == 2.0
    assert out.heading[0] == 0.4


def test_speed_update_hand_value():
    # oracle: 0.5*4 + 0.5*2 + sqrt(0.75)*1*0.3, evaluated separately
    s = one_node(4.0, 0.0, 2.0, 0.0, 0.5)
    out = step_mobility(s, MobilityParams(memory=0.5, mean_speed=2, sigma_speed=1.0), None,
                        noise=([0.3], [0.0]))
    assert out.speed[0] == pytest.approx(3.2598076211353316, abs=1e-12)
    assert out.speed[0] == pytest.approx(3.2598, abs=1e-4)


def test_position_advances_along_heading():
    s = one_node(0.0, 0.0, 5.0, math.pi / 2, 0.0, pos=(100.0, 100.0))
    out = step_mobility(s, MobilityParams(memory=0.0), None, noise=([0.0], [0.0]))
    np.testing.assert_allclose(out.position[0], [100.0, 105.0], atol=1e-12)


def test_wall_reflection_mirrors_position_and_heading():
    s = one_node(0.0, 0.0, 10.0, 0.0, 0.0, pos=(595.0, 300.0))
    out = step_mobility(s, MobilityParams(memory=0.0, width=600, height=600), None, noise=([0.0], [0.0]))
    np.testing.assert_allclose(out.position[0], [595.0, 300.0], atol=1e-9)
    assert math.cos(out.heading[0]) == pytest.approx(-1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 1), st.floats(0.1, 60))
def test_nodes_stay_in_area_and_speed_nonnegative(seed, memory, mean_speed):
    rng = np.random.default_rng(seed)
    params = MobilityParams(mean_speed=mean_speed, memory=memory, sigma_speed=3, sigma_heading=1,
                            width=200, height=100)
    n = 6
    s = MobilityState(np.column_stack([rng.uniform(0, 200, n), rng.uniform(0, 100, n)]),
                      np.full(n, mean_speed), rng.uniform(-3, 3, n), np.full(n, mean_speed),
                      rng.uniform(-3, 3, n), memory)
    for _ in range(30):
        s = step_mobility(s, params, rng)
        assert np.all(s.speed >= 0)
        assert np.all((s.position[:, 0] >= 0) & (s.position[:, 0] <= 200))
        assert np.all((s.position[:, 1] >= 0) & (s.position[:, 1] <= 100))


def test_mobility_params_validated():
    with pytest.raises(ValueError):
        MobilityParams(memory=1.5)


# --- links ------------------------------------------------------------------

def test_link_boundary_is_inclusive():
    ch = ChannelModel(100.0)
    assert compute_links(np.array([[0.0, 0.0], [100.0, 0.0]]), ch)[0, 1]
    assert not compute_links(np.array([[0.0, 0.0], [100.0 + 1e-9, 0.0]]), ch)[0, 1]


def test_line_of_four_is_a_path():
    pos = np.array([[0.0, 0.0], [100.0, 0.0], [200.0, 0.0], [300.0, 0.0]])
    adj = compute_links(pos, ChannelModel(100.0))
    # brute-force oracle
    expect = np.array([[i != j and math.dist(pos[i], pos[j]) <= 100.0 for j in range(4)] for i in range(4)])
    np.testing.assert_array_equal(adj, expect)
    assert adj.sum() // 2 == 3


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10_000))
def test_links_symmetric(n, seed):
    pos = np.random.default_rng(seed).uniform(0, 500, (n, 2))
    adj = compute_links(pos, ChannelModel(180.0))
    np.testing.assert_array_equal(adj, adj.T)
    assert not adj.diagonal().any()


def test_nearest_neighbors_truncates_then_sorts_by_id():
    pos = np.array([[0.0, 0.0], [30.0, 0], [10.0, 0], [20.0, 0], [5.0, 0]])
    adj = compute_links(pos, ChannelModel(100.0))
    assert nearest_neighbors(adj, pos, 0, 2) == [2, 4]
    assert nearest_neighbors(adj, pos, 0, 8) == [1, 2, 3, 4]


# --- transmit ---------------------------------------------------------------

def world(positions, radius=100.0, jammers=()):
    pos = np.asarray(positions, dtype=float)
    ch = ChannelModel(radius, list(jammers))
    adj = compute_links(pos, ch)
    n = len(pos)
    nbrs = [nearest_neighbors(adj, pos, i, 8) for i in range(n)]
    state = NetworkState(pos, adj, nbrs, [[] for _ in range(n)], [DpdCache() for _ in range(n)])
    return state, ch


def pkt(pid=0, src=0, dst=3):
    return Packet(pid, 0, src, dst, hop_count=0, ttl=16, created_slot=0)


def test_unicast_to_neighbour_is_acked():
    state, ch = world([[0, 0], [50, 0], [300, 0], [600, 0]])
    out = transmit(0, 1, pkt(), state, ch, slot=0)
    assert out.targets == [1]
    assert out.accepted == {1: True}
    assert out.n_acks == 1


def test_broadcast_reaches_all_three_neighbours():
    state, ch = world([[0, 0], [50, 0], [0, 50], [-50, 0], [500, 500]])
    out = transmit(0, BROADCAST, pkt(dst=4), state, ch, slot=0)
    assert sorted(out.targets) == [1, 2, 3]
    assert out.n_acks == 3


def test_suppress_ack_jammer_keeps_delivery_but_hides_ack():
    jam = JammerConfig(position=(0, 0), jam_radius=10, active_window=(0, 10), mode="SUPPRESS_ACK")
    state, ch = world([[0, 0], [50, 0], [300, 0], [600, 0]], jammers=[jam])
    out = transmit(0, 1, pkt(), state, ch, slot=5)
    assert out.accepted == {1: True}
    assert out.n_acks == 0
    assert out.jammed


def test_jammer_outside_window_is_silent():
    jam = JammerConfig(position=(0, 0), jam_radius=10, active_window=(3, 4), mode="SUPPRESS_ACK")
    state, ch = world([[0, 0], [50, 0], [300, 0], [600, 0]], jammers=[jam])
    assert transmit(0, 1, pkt(), state, ch, slot=5).n_acks == 1


def test_suppress_all_silences_receivers_inside():
    jam = JammerConfig(position=(50, 0), jam_radius=5, active_window=(0, 10), mode=JamMode.SUPPRESS_ALL)
    state, ch = world([[0, 0], [50, 0], [0, 50], [600, 0]], jammers=[jam])
    out = transmit(0, BROADCAST, pkt(), state, ch, slot=0)
    assert out.accepted[1] is False and out.accepted[2] is True
    assert out.acked == [2]


def test_duplicates_are_dropped_and_not_acked():
    state, ch = world([[0, 0], [50, 0], [300, 0], [600, 0]])
    assert transmit(0, 1, pkt(), state, ch, slot=0).n_acks == 1
    out = transmit(0, 1, pkt(), state, ch, slot=1)
    assert out.accepted == {1: False}
    assert out.n_acks == 0


def test_unicast_to_empty_slot_fails_without_raising():
    state, ch = world([[0, 0], [50, 0], [300, 0], [600, 0]])
    out = transmit(0, 5, pkt(), state, ch, slot=0)
    assert out.failed and out.targets == [] and out.n_acks == 0


def test_destination_ack_sets_reached_flag():
    state, ch = world([[0, 0], [50, 0], [300, 0], [600, 0]])
    assert transmit(0, 1, pkt(dst=1), state, ch, slot=0).reached_destination


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.floats(1, 300), st.sampled_from(["SUPPRESS_ACK", "SUPPRESS_ALL"]),
       st.integers(0, 8))
def test_adding_a_jammer_never_adds_acks(seed, radius, mode, action):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0, 400, (6, 2))
    jam = JammerConfig(position=tuple(rng.uniform(0, 400, 2)), jam_radius=radius, active_window=(0, 5),
                       mode=mode)
    free, ch_free = world(pos, radius=200)
    jammed, ch_jam = world(pos, radius=200, jammers=[jam])
    a = transmit(0, action, pkt(dst=5), free, ch_free, slot=2)
    b = transmit(0, action, pkt(dst=5), jammed, ch_jam, slot=2)
    assert b.n_acks <= a.n_acks
    assert set(b.acked) <= set(a.acked)


# --- DPD, clock, traffic ----------------------------------------------------

def test_dpd_rejects_repeats_until_evicted():
    c = DpdCache(capacity=2)
    assert c.insert(1) and c.insert(2)
    assert not c.insert(1)
    assert c.insert(3)  # evicts 1
    assert 1 not in c and c.insert(1)


def test_clock_stops_at_t_max():
    c = EpisodeClock(2)
    c.tick(); c.tick()
    assert c.done
    with pytest.raises(RuntimeError):
        c.tick()


def test_rate_one_flow_emits_every_slot():
    rng = np.random.default_rng(0)
    flow = TrafficFlow(0, 0, 1, 1.0)
    assert all(len(inject_traffic([flow], EpisodeClock(10, t), rng)) == 1 for t in range(10))


def test_empty_flow_list_emits_nothing():
    assert inject_traffic([], EpisodeClock(10), np.random.default_rng(0)) == []


def test_bernoulli_count_within_three_sigma():
    rng = np.random.default_rng(7)
    flow = TrafficFlow(0, 0, 1, 0.25)
    total = sum(len(inject_traffic([flow], EpisodeClock(10_000, t), rng)) for t in range(10_000))
    sigma = math.sqrt(10_000 * 0.25 * 0.75)
    assert abs(total - 2500) <= 3 * sigma


def test_flow_validation():
    with pytest.raises(ValueError):
        TrafficFlow(0, 1, 1, 0.5)
    with pytest.raises(ValueError):
        TrafficFlow(0, 1, 2, 0.0)


# --- whole episodes ---------------------------------------------------------

def small_cfg(**kw):
    return ScenarioConfig.from_dict({"N": 6, "T_max": 120, **kw})


def test_same_seed_same_event_trace():
    cfg = small_cfg()
    a = simulate(cfg, 11, record_events=True)
    b = simulate(cfg, 11, record_events=True)
    assert a.events_jsonl() == b.events_jsonl()
    assert simulate(cfg, 12, record_events=True).events_jsonl() != a.events_jsonl()


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_every_packet_ends_in_one_terminal_state(seed):
    res = simulate(small_cfg(flows={"count": 3, "rate": 0.6}), seed)
    counts = res.metrics["terminal"]
    assert set(counts) == set(TERMINAL_STATES)
    assert sum(counts.values()) == res.metrics["injected"]


def test_no_node_accepts_a_packet_twice():
    res = simulate(small_cfg(), 4, record_events=True)
    # an ACK is only sent for a fresh copy, so (receiver, packet) pairs never repeat
    accepted = [(j, e["packet"]) for e in res.events if e["kind"] == "tx" for j in e["acked"]]
    assert len(accepted) == len(set(accepted))
