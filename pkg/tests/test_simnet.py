from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bcflsim.simnet import (Delivered, Dropped, Network, NetworkConfig, PartitionWindow, RoutingError, Simulator,
                            node_rng, transmit)


def make_net(n=3, **cfg):
    sim = Simulator()
    net = Network(sim, NetworkConfig(**cfg))
    for x in range(n):
        net.add_node(x)
    return sim, net


def test_schedule_fires_at_clock_plus_delay():
    sim = Simulator()
    sim.run_until(10)
    fired = []
    sim.schedule(lambda: fired.append(sim.now), 5)
    sim.run_until(100)
    assert fired == [15]


def test_negative_delay_rejected():
    with pytest.raises(ValueError):
        Simulator().schedule(lambda: None, -1)


def test_run_until_on_empty_queue_advances_clock():
    sim = Simulator()
    assert sim.run_until(250) == 0
    assert sim.now == 250


def test_run_until_counts_events_before_t():
    sim = Simulator()
    for d in (1, 2, 3, 50):
        sim.schedule(lambda: None, d)
    assert sim.run_until(10) == 3
    assert sim.pending() == 1


def test_cannot_run_backwards():
    sim = Simulator()
    sim.run_until(5)
    with pytest.raises(ValueError):
        sim.run_until(4)


def test_same_time_events_fire_in_insertion_order():
    sim = Simulator()
    order = []
    for k in range(5):
        sim.schedule(lambda k=k: order.append(k), 7)
    sim.run_until(7)
    assert order == [0, 1, 2, 3, 4]


def test_cancelled_event_does_not_fire():
    sim = Simulator()
    hit = []
    eid = sim.schedule(lambda: hit.append(1), 3)
    sim.cancel(eid)
    sim.run_until(10)
    assert hit == [] and sim.pending() == 0


def test_certain_drop():
    sim, net = make_net(drop_probability=1.0)
    assert isinstance(net.send(0, 1, "x", "k"), Dropped)
    assert net.dropped["k"] == 1 and net.delivered["k"] == 0


def test_no_randomness_latency():
    sim, net = make_net(base_latency_ms=50, jitter_ms=0)
    sim.run_until(20)
    out = net.send(0, 1, "x", "k")
    assert out == Delivered(70)


def test_partition_drops_during_window_only():
    w = PartitionWindow([0], [1], 100, 200)
    sim, net = make_net(partitions=[w], jitter_ms=0)
    assert isinstance(net.send(0, 1, "x", "k"), Delivered)
    sim.run_until(150)
    assert net.send(0, 1, "x", "k") == Dropped("partition")
    assert net.send(1, 0, "x", "k") == Dropped("partition")
    assert isinstance(net.send(0, 2, "x", "k"), Delivered)
    sim.run_until(201)
    assert isinstance(net.send(0, 1, "x", "k"), Delivered)


def test_unknown_node_is_a_routing_error():
    sim, net = make_net()
    with pytest.raises(RoutingError):
        net.send(0, 99, "x", "k")
    with pytest.raises(RoutingError):
        net.send(99, 0, "x", "k")


def test_invalid_network_config():
    with pytest.raises(ValueError):
        NetworkConfig(drop_probability=1.5)
    with pytest.raises(ValueError):
        PartitionWindow([0], [1], 10, 5)


def test_delivery_invokes_handler_and_crash_semantics():
    sim, net = make_net(jitter_ms=0)
    got = []
    net.on(1, "k", lambda m: got.append((m.src, m.payload, m.deliver_time)))
    net.send(0, 1, "hello", "k")
    sim.run_until(1000)
    assert got == [(0, "hello", 50)]
    net.crash(1)
    net.send(0, 1, "lost", "k")
    sim.run_until(2000)
    assert net.lost_to_crash["k"] == 1 and len(got) == 1
    net.crash(0)
    assert net.send(0, 2, "x", "k") == Dropped("sender-crashed")
    assert net.sent["k"] == 2


def test_broadcast_skips_self():
    sim, net = make_net(4)
    net.broadcast(0, [0, 1, 2, 3], "x", "b")
    assert net.sent["b"] == 3


def test_node_streams_independent_of_insertion_order():
    a = node_rng(5, 3, "net").random(4)
    node_rng(5, 1, "net").random(100)
    b = node_rng(5, 3, "net").random(4)
    assert (a == b).all()
    assert not (node_rng(5, 3, "net").random(4) == node_rng(5, 4, "net").random(4)).all()


def _scenario(seed: int, drop: float):
    sim, net = make_net(5, seed=seed, drop_probability=drop)
    for k in range(30):
        sim.schedule(lambda k=k: net.send(k % 5, (k * 3 + 1) % 5, k, "m") if k % 5 != (k * 3 + 1) % 5 else None,
                     k * 7)
    sim.run_until(10_000)
    return sim, net


def test_replay_gives_identical_traces():
    s1, n1 = _scenario(3, 0.2)
    s2, n2 = _scenario(3, 0.2)
    assert s1.trace == s2.trace
    assert n1.log == n2.log


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32), drop=st.floats(0, 1), n_msgs=st.integers(0, 60))
def test_conservation_and_monotone_clock(seed, drop, n_msgs):
    sim, net = make_net(4, seed=seed, drop_probability=drop)
    seen = []
    for x in range(4):
        net.on(x, "m", lambda m: seen.append(m))
    for k in range(n_msgs):
        sim.schedule(lambda k=k: net.send(k % 4, (k + 1) % 4, k, "m"), k % 13)
    sim.run_until(100_000)
    assert net.sent["m"] == n_msgs == net.delivered["m"] + net.dropped["m"]
    assert len(seen) == net.delivered["m"]
    assert len({m.payload for m in seen}) == len(seen)
    times = [t for t, _, _ in sim.trace]
    assert times == sorted(times)
    assert all(m.deliver_time >= m.send_time for m in seen)


@given(seed=st.integers(0, 2**32), t=st.integers(0, 10**6))
def test_transmit_latency_bounds(seed, t):
    cfg = NetworkConfig(base_latency_ms=30, jitter_ms=10)
    out = transmit(0, 1, t, cfg, node_rng(seed, 0))
    assert t + 30 <= out.deliver_time <= t + 40
