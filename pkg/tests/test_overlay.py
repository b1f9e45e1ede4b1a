import hashlib
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ringagg.overlay import (
    POSITION_SPACE,
    BootstrapError,
    EmptyClusterError,
    NodeNotFoundError,
    Overlay,
    OverlayError,
    SeededRandomSource,
    SystemParams,
    TooFewNodesError,
    bootstrap_initial,
    check_honest_majority,
    cluster_size,
    fingers,
    g_for,
    hash_order_partition,
    knowers,
    make_node_ids,
    route,
)

S = POSITION_SPACE


def at(frac: float) -> int:
    return int(frac * S)


class Script:
    """Random source replaying fixed values, for hand-built churn scenarios."""

    def __init__(self, values):
        self.values = list(values)
        self.calls = []

    def draw(self, cluster, bounds):
        self.calls.append((cluster, len(bounds)))
        return [self.values.pop(0) % b for b in bounds]


class TestClusterSize:
    @pytest.mark.parametrize("n,k,expected", [(256, 2, 16), (200, 20, 154), (4, 1, 4), (64, 2, 12), (1024, 2, 20)])
    def test_examples(self, n, k, expected):
        assert cluster_size(n, k) == expected

    @given(st.integers(4, 10**6), st.integers(1, 30))
    def test_even_and_clamped(self, n, k):
        s = cluster_size(n, k)
        assert s % 2 == 0 and s >= 4
        assert s >= k * math.log2(n) - 1e-9

    def test_log_base_is_configurable(self):
        assert cluster_size(1000, 2, log_base=10) == 6

    def test_small_n_rejected(self):
        with pytest.raises(ValueError):
            cluster_size(3, 1)


class TestSystemParams:
    def test_tau_bound(self):
        with pytest.raises(ValueError):
            SystemParams(256, epsilon=0.2, tau_frac=0.3)

    def test_too_few_nodes(self):
        with pytest.raises(TooFewNodesError):
            SystemParams(16, k_cluster=4)

    def test_churn_constant_is_a_soft_check(self):
        assert not SystemParams(256, epsilon=0.1, k_cluster=2).churn_constant_ok
        assert SystemParams(4096, epsilon=0.2, tau_frac=0.2, k_cluster=6).churn_constant_ok


class TestHashOrderPartition:
    def test_identity_hash(self):
        lay = hash_order_partition(list(range(8, 0, -1)), 4, hash=lambda x: x)
        assert [sorted(c) for c in lay.clusters] == [[1, 2, 3, 4], [5, 6, 7, 8]]

    def test_remainder_goes_to_last_cluster(self):
        lay = hash_order_partition(list(range(1, 10)), 4, hash=lambda x: x)
        assert lay.sizes() == [4, 5]

    def test_ties_broken_by_id(self):
        lay = hash_order_partition([5, 3, 9, 1], 2, hash=lambda x: 7)
        assert lay.order == (1, 3, 5, 9)

    def test_too_few_nodes(self):
        with pytest.raises(TooFewNodesError):
            hash_order_partition(list(range(7)), 4)

    def test_golden_1024(self):
        nodes = make_node_ids(1024, 5)
        lay = hash_order_partition(nodes, cluster_size(1024, 2))
        # independent recomputation of the sort-by-hash order
        space = 1024**3

        def h(x):
            return int.from_bytes(hashlib.sha256(b"ringagg/order" + x.to_bytes(8, "big")).digest(), "big") % space + 1

        order = sorted(nodes, key=lambda x: (h(x), x))
        expected = [order[i * 20 : (i + 1) * 20] for i in range(50)] + [order[1000:]]
        assert [list(c) for c in lay.clusters] == expected
        assert hashlib.sha256(lay.dump().encode()).hexdigest() == "7db377da35b7b3d4751c1e8719404e36282f6aff82620f670a718257c7a4236a"


class TestBootstrap:
    def test_g_for_64_nodes(self):
        ov = bootstrap_initial(make_node_ids(64, 9), SystemParams(64, seed=9))
        assert ov.g == 8 == g_for(64, 12)
        ov.check_partition()

    def test_positions_distinct(self):
        ov = bootstrap_initial(make_node_ids(300, 2), SystemParams(300, seed=2))
        positions = [p for c in ov.clusters() for _, p in c]
        assert len(set(positions)) == 300

    def test_golden_replay(self):
        ov = bootstrap_initial(make_node_ids(64, 9), SystemParams(64, seed=9))
        again = bootstrap_initial(make_node_ids(64, 9), SystemParams(64, seed=9))
        assert ov.dump() == again.dump()
        assert ov.redraws == 0
        assert hashlib.sha256(ov.dump().encode()).hexdigest() == "5590cc9582a2a55a612650c83c466f3c76ec878361f4c6d61c033ade390f45f6"

    def test_floor_rule(self):
        ov = bootstrap_initial(make_node_ids(128, 1), SystemParams(128, seed=1), g_rule="floor")
        assert ov.g == 128 // 14

    def test_redraw_limit(self):
        # seed 247 leaves one of the two segments empty on the first draw
        params = SystemParams(8, k_cluster=1, seed=247)
        with pytest.raises(BootstrapError):
            bootstrap_initial(make_node_ids(8, 0), params, max_redraws=0)
        ov = bootstrap_initial(make_node_ids(8, 0), params)
        assert ov.redraws >= 1 and all(ov.sizes())

    def test_dump_format(self):
        ov = Overlay(2, {11: at(0.25), 12: at(0.75)})
        assert ov.dump() == f"cluster 0: 11@{at(0.25):016x}\ncluster 1: 12@{at(0.75):016x}"


class TestFingers:
    def test_examples(self):
        assert fingers(8, 0) == [1, 2, 4, 7]
        assert fingers(4, 3) == [0, 1, 2]

    @given(st.integers(2, 300).flatmap(lambda g: st.tuples(st.just(g), st.integers(0, g - 1))))
    def test_knowers_are_inverse(self, gi):
        g, i = gi
        assert knowers(g, i) == sorted(j for j in range(g) if i in fingers(g, j))

    @given(st.integers(2, 300).flatmap(lambda g: st.tuples(st.just(g), st.integers(0, g - 1), st.integers(0, g - 1))))
    def test_route_hops_are_authorized(self, gij):
        g, i, j = gij
        path = route(g, i, j)
        assert path[0] == i and path[-1] == j
        for a, b in zip(path, path[1:]):
            assert a in fingers(g, b)
        assert len(path) - 1 <= max(1, math.ceil(math.log2(g)))

    def test_connection_bound(self):
        n = 512
        nodes = make_node_ids(n, 3)
        for view in (hash_order_partition(nodes, cluster_size(n, 2)), bootstrap_initial(nodes, SystemParams(n, seed=3))):
            s = max(view.sizes())
            bound = s * (math.log2(view.g) + 2)
            assert max(len(view.connections(x)) for x in nodes) <= bound

    def test_ring_neighbours_see_full_membership(self):
        ov = bootstrap_initial(make_node_ids(128, 4), SystemParams(128, seed=4))
        for i in range(ov.g):
            view = ov.neighbor_view(i)
            for j in ((i + 1) % ov.g, (i - 1) % ov.g):
                assert view[j] == ov.members(j)


def small_overlay():
    # cluster 0: three nodes in the first 2/9 of the ring, plus two more
    positions = {1: at(0.01), 2: at(0.05), 3: at(0.1), 4: at(0.3), 5: at(0.4), 6: at(0.6), 7: at(0.7), 8: at(0.9)}
    return Overlay(2, positions)


class TestCuckooJoin:
    def test_join_evicting_three(self):
        ov = small_overlay()
        rng = Script([at(0.15), at(0.55), at(0.65), at(0.85)])
        report = ov.cuckoo_join(99, rng, k_segment=2)
        assert ov.position(99) == at(0.15)
        assert sorted(x for x, old, new in report.moved if old is not None) == [1, 2, 3]
        assert all(ov.cluster_of(x) == 1 for x in (1, 2, 3))
        ov.check_partition()
        assert ov.n == 9

    def test_join_into_empty_segment_moves_only_newcomer(self):
        positions = {1: at(0.01), 2: at(0.05), 3: at(0.1), 4: at(0.3), 5: at(0.4), 6: at(0.6), 7: at(0.7), 8: at(0.75)}
        ov = Overlay(2, positions)
        # with 9 nodes the aligned segment around 0.95 is [8/9, 1), empty before the join
        report = ov.cuckoo_join(99, Script([at(0.95)]), k_segment=2)
        assert report.moved == [(99, None, 1)]
        assert ov.n == 9

    def test_duplicate_join_rejected(self):
        ov = small_overlay()
        with pytest.raises(OverlayError):
            ov.cuckoo_join(1, Script([0]))

    def test_rng_calls_are_recorded(self):
        ov = small_overlay()
        report = ov.cuckoo_join(99, Script([at(0.15), at(0.55), at(0.65), at(0.85)]))
        assert [count for _, _, count in report.rng_calls] == [1, 3]
        assert report.transfers  # finger updates are priced


class TestLeave:
    def test_one_node_cluster_refilled(self):
        positions = {1: at(0.05), 2: at(0.1), 3: at(0.2), 4: at(0.3), 5: at(0.45), 6: at(0.7)}
        ov = Overlay(2, positions)
        ov.leave(6, Script([0, 0]), k_segment=2)
        assert ov.n == 5
        assert sorted(ov.members(1)) == [1, 2, 3, 4]
        assert ov.members(0) == [5]
        ov.check_partition()

    def test_count_drops_by_one(self):
        ov = bootstrap_initial(make_node_ids(256, 1), SystemParams(256, seed=1))
        victim = ov.members(3)[0]
        ov.leave(victim, SeededRandomSource(1))
        assert ov.n == 255 and victim not in ov
        ov.check_partition()

    def test_unknown_node(self):
        with pytest.raises(NodeNotFoundError):
            small_overlay().leave(12345, Script([0, 0]))

    def test_emptied_cluster_raises_distinct_error(self):
        ov = Overlay(2, {1: at(0.1), 2: at(0.2), 3: at(0.7)})
        # the segment of length 2/2 = 1/2 swapped into cluster 1 comes from cluster 0, emptying it
        with pytest.raises(EmptyClusterError):
            ov.leave(3, Script([0, 0]), k_segment=1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.lists(st.booleans(), min_size=1, max_size=60))
def test_churn_preserves_partition(seed, ops):
    nodes = make_node_ids(128, seed)
    ov = bootstrap_initial(nodes, SystemParams(128, seed=seed))
    rng = SeededRandomSource(seed)
    fresh = iter(make_node_ids(len(ops), seed, start=128))
    live = list(nodes)
    for k, join in enumerate(ops):
        try:
            if join:
                x = next(fresh)
                ov.cuckoo_join(x, rng)
                live.append(x)
            else:
                ov.leave(live.pop(k % len(live)), rng)
        except EmptyClusterError:
            pass
        ov.check_partition()
        assert sorted(ov.nodes()) == sorted(live)


class TestHonestMajority:
    def test_strict_majority(self):
        lay = hash_order_partition([1, 2, 3, 4, 5, 6, 7], 3, hash=lambda x: x)
        report = check_honest_majority(lay, {3, 6, 7})
        assert [c.majority for c in report.clusters] == [True, False]
        assert report.failing == [1] and not report.all_majority

    def test_tie_is_not_majority(self):
        lay = hash_order_partition(list(range(8)), 4, hash=lambda x: x)
        assert not check_honest_majority(lay, {0, 1}).clusters[0].majority
