import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ringagg.overlay import SystemParams, bootstrap_initial, make_node_ids
from ringagg.simnet import (
    BEHAVIORS,
    ENVELOPE_OVERHEAD,
    AdversaryConfig,
    ConfigError,
    Phase,
    RoundTag,
    World,
    corrupt,
    wire_bytes,
)

NODES = list(range(1, 11))


def world(malicious=(), behaviors=(), trace=False):
    mal = frozenset(malicious)
    adv = AdversaryConfig.uniform_behavior(mal, behaviors, seed=1) if mal else None
    return World(NODES, adv, trace=trace)


class TestDelivery:
    def test_honest_delivered_next_step(self):
        w = world()
        w.send(1, 2, "hello", 5)
        assert w.pending()
        (env,) = w.step()
        assert (env.sender, env.receiver, env.payload, env.size) == (1, 2, "hello", 5 + ENVELOPE_OVERHEAD)
        assert env.tag == RoundTag(0, int(Phase.MISC), 0)
        assert w.step() == [] and not w.pending()

    def test_batch_order_is_canonical(self):
        w = world()
        for sender in (5, 3, 9):
            w.multicast(sender, [7, 2], sender, 1)
        got = [(e.receiver, e.sender) for e in w.step()]
        assert got == sorted(got)

    def test_unknown_receiver_counted(self):
        w = world()
        w.send(1, 999, "x", 1)
        assert w.step() == []
        assert w.metrics.dropped["unknown-receiver"] == 1

    def test_spoof_rejected(self):
        w = world(malicious=[3])
        w.send_as(3, 1, 2, "forged", 1)
        assert w.step() == []
        assert w.metrics.dropped["bad-signature"] == 1
        assert w.metrics.sent_msgs[3] == 1 and w.metrics.sent_msgs[1] == 0

    def test_replay_of_old_round_is_stale(self):
        w = world(malicious=[3], behaviors=["replay"])
        w.send(3, 2, "first", 1)
        w.step()
        w.send(3, 2, "second", 1)
        delivered = w.step()
        assert [e.payload for e in delivered] == ["second"]
        assert w.metrics.dropped["stale-tag"] == 1

    def test_drop_all(self):
        w = world(malicious=[4], behaviors=["drop_all"])
        w.multicast(4, NODES, "x", 1)
        assert w.step() == [] and w.metrics.sent_msgs[4] == 0

    def test_equivocation_stays_under_sender_identity(self):
        w = world(malicious=[4], behaviors=["equivocate"])
        w.adversary.tamperers[("equivocate", "vote")] = lambda s, r, p, size: [("A" if r % 2 else "B", size)]
        w.multicast(4, [1, 2, 3], "honest", 1, kind="vote")
        delivered = w.step()
        assert {e.payload for e in delivered} == {"A", "B"}
        assert all(e.sender == e.signed_by == 4 for e in delivered)

    def test_decide_is_identity_for_honest(self):
        w = world(malicious=[4], behaviors=["abstain"])
        w.adversary.deciders[("abstain", "input")] = lambda node, v: None
        assert w.decide(1, "input", 7) == 7
        assert w.decide(4, "input", 7) is None

    def test_schedule_only_for_malicious(self):
        w = world(malicious=[4])
        with pytest.raises(ConfigError):
            w.schedule(2, 1, [2], "x", 1)
        w.schedule(1, 4, [2], "late", 1)
        assert w.step() == []
        assert [e.payload for e in w.step()] == ["late"]

    def test_trace_format(self):
        w = world(trace=True)
        w.set_phase(Phase.RING)
        w.send(1, 2, "x", 3)
        w.step()
        assert w.trace_text() == f"r0 1->2 phase=ring bytes={3 + ENVELOPE_OVERHEAD}\n"

    def test_malicious_set_must_be_nodes(self):
        with pytest.raises(ConfigError):
            World(NODES, AdversaryConfig(frozenset({42})))


class TestWireFormat:
    @given(st.binary(max_size=64))
    def test_length(self, payload):
        raw = wire_bytes(1, 2, RoundTag(1, 2, 3), payload)
        assert len(raw) == 32 + len(payload) + 64
        assert raw[16:28] == RoundTag(1, 2, 3).to_bytes()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 12), st.integers(1, 12), st.integers(0, 50)), max_size=200), st.sampled_from(BEHAVIORS))
def test_conservation(sends, behavior):
    w = world(malicious=[2, 5], behaviors=[behavior, "replay"])
    for k, (a, b, size) in enumerate(sends):
        if a <= 10:
            w.send(a, b, k, size)
        if k % 17 == 0:
            w.step()
    while w.pending():
        w.step()
    m = w.metrics
    assert m.total_msgs == m.delivered_msgs + m.dropped_msgs
    assert m.total_bytes == sum(m.sent_bytes.values())


def test_million_envelope_stress():
    nodes = list(range(1000))
    w = World(nodes)
    for rnd in range(10):
        for s in nodes:
            w.multicast(s, nodes[(s % 10) * 100 : (s % 10) * 100 + 100], rnd, 8)
        w.step()
    m = w.metrics
    assert m.total_msgs == 10**6 == m.delivered_msgs
    assert m.total_bytes == sum(m.sent_bytes[x] for x in nodes) == 10**6 * (8 + ENVELOPE_OVERHEAD)
    assert sum(m.recv_bytes.values()) == m.total_bytes


def test_identical_runs_identical_trace():
    def run():
        w = world(malicious=[3, 7], behaviors=["drop_selective", "replay"], trace=True)
        for rnd in range(5):
            for s in NODES:
                w.multicast(s, NODES, (s, rnd), 4)
            w.step()
        return w.trace_text(), w.metrics.summary()

    assert run() == run()


class TestCorrupt:
    def test_uniform_exact_budget(self):
        assert len(corrupt("uniform", list(range(100)), 0.3, seed=1)) == 30

    def test_bound_enforced(self):
        with pytest.raises(ConfigError):
            corrupt("uniform", list(range(100)), 0.45, seed=1, epsilon=0.1)
        assert len(corrupt("uniform", list(range(100)), 0.45, seed=1, epsilon=0.1, unsafe=True)) == 45

    def test_targeted_cluster(self):
        nodes = make_node_ids(128, 3)
        ov = bootstrap_initial(nodes, SystemParams(128, seed=3))
        mal = corrupt("targeted-cluster", nodes, 30 / 128, seed=2, view=ov, targets=(0,))
        assert len(mal) == 30
        assert set(ov.members(0)) <= mal

    def test_join_order_takes_latest(self):
        assert corrupt("join-order", list(range(10)), 0.3, seed=0) == {7, 8, 9}

    def test_unknown_strategy(self):
        with pytest.raises(ConfigError):
            corrupt("nearest", [1, 2, 3], 0.1, seed=0)


class TestAdversaryConfig:
    def test_behaviors_only_on_malicious(self):
        with pytest.raises(ConfigError):
            AdversaryConfig(frozenset({1}), ((2, frozenset({"abstain"})),))

    def test_unknown_behavior(self):
        with pytest.raises(ConfigError):
            AdversaryConfig.uniform_behavior([1], ["teleport"])

    def test_full_suite_covers_all(self):
        cfg = AdversaryConfig.full_suite(range(16), seed=4)
        seen = set().union(*(cfg.behaviors_of(x) for x in range(16)))
        assert seen == set(BEHAVIORS)

    def test_static(self):
        cfg = AdversaryConfig.full_suite(range(4), seed=4)
        w = World(range(10), cfg)
        w.step()
        assert w.malicious == frozenset(range(4))


def test_trace_lines_carry_no_payload():
    w = world(trace=True)
    w.multicast(1, NODES, b"secret-marker", 13)
    w.step()
    line = re.compile(r"^r\d+ \d+->\d+ phase=[a-z]+ bytes=\d+$")
    assert all(line.match(x) for x in w.trace_text().splitlines())
    assert "secret" not in w.trace_text()
