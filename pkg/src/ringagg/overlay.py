"""Cluster-ring overlays.

Two layouts share one read-only view interface (``g``, ``members``,
``cluster_of``, ``fingers``): :class:`Layout`, the static partition by hash
order, and :class:`Overlay`, the dynamic position-based partition maintained
by the cuckoo join rule and the segment-swap leave rule.

Node identifiers are plain integers derived from a node's public key. Honesty
is never stored here; adversary bookkeeping lives in :mod:`ringagg.simnet`.
"""

from __future__ import annotations

import bisect
import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

from .crypto.common import Seed, SeedStream, seed_bytes

NodeId = int
Position = int

POSITION_BITS = 64
POSITION_SPACE = 1 << POSITION_BITS
G_RULES = ("pow2", "floor")


class OverlayError(Exception):
    pass


class TooFewNodesError(OverlayError, ValueError):
    pass


class BootstrapError(OverlayError):
    pass


class NodeNotFoundError(OverlayError, KeyError):
    pass


class EmptyClusterError(OverlayError):
    """Churn emptied a cluster; the current epoch cannot continue."""


def cluster_size(n: int, k_cluster: float, log_base: float = 2) -> int:
    """max(4, ceil(k * log n)), rounded up to an even number."""
    if n < 4:
        raise ValueError("cluster_size needs n >= 4")
    # round before ceil so exact powers do not pick up float noise
    s = max(4, math.ceil(round(k_cluster * math.log(n, log_base), 9)))
    return s + (s % 2)


@dataclass(frozen=True)
class SystemParams:
    n: int
    epsilon: float = 0.1
    tau_frac: float = 0.25
    k_cluster: float = 2
    seed: Seed = 0
    log_base: float = 2

    def __post_init__(self):
        if not 0 < self.epsilon < 0.5:
            raise ValueError("epsilon must lie in (0, 1/2)")
        if not 0 <= self.tau_frac < 0.5 - self.epsilon:
            raise ValueError(f"tau_frac must lie in [0, {0.5 - self.epsilon:g})")
        if self.k_cluster <= 0:
            raise ValueError("k_cluster must be positive")
        if self.n < 4 or self.n < 2 * self.cluster_size:
            raise TooFewNodesError(f"n={self.n} is below twice the cluster size")

    @property
    def cluster_size(self) -> int:
        return cluster_size(self.n, self.k_cluster, self.log_base)

    @property
    def churn_constant_ok(self) -> bool:
        """Whether k exceeds 1/epsilon, the condition the churn analysis assumes."""
        return self.k_cluster > 1 / self.epsilon


def node_public_key(index: int, seed: Seed) -> bytes:
    return hashlib.sha256(b"ringagg/node-key" + seed_bytes(seed) + index.to_bytes(8, "big")).digest()


def node_id_from_key(public_key: bytes) -> NodeId:
    # 63 bits: fits the 8-byte wire header as a signed or unsigned integer
    return int.from_bytes(hashlib.sha256(b"ringagg/node-id" + public_key).digest()[:8], "big") >> 1


def make_node_ids(count: int, seed: Seed, start: int = 0) -> list[NodeId]:
    ids = [node_id_from_key(node_public_key(i, seed)) for i in range(start, start + count)]
    if len(set(ids)) != len(ids):
        raise OverlayError("node id collision")
    return ids


def g_for(n: int, s: int, rule: str = "pow2") -> int:
    if rule == "pow2":
        return max(2, 1 << math.ceil(math.log2(n / s)))
    if rule == "floor":
        return max(2, n // s)
    raise ValueError(f"unknown g rule {rule!r}")


def fingers(g: int, i: int) -> list[int]:
    """Clusters known to cluster ``i``: ring neighbours and ``i + 2^j``."""
    if not 0 <= i < g:
        raise IndexError(f"cluster {i} outside [0, {g})")
    top = max(1, math.ceil(math.log2(g)))
    out = {(i + (1 << j)) % g for j in range(1, top + 1)}
    out |= {(i + 1) % g, (i - 1) % g}
    out.discard(i)
    return sorted(out)


def knowers(g: int, i: int) -> list[int]:
    """Clusters whose finger set contains ``i``."""
    top = max(1, math.ceil(math.log2(g)))
    out = {(i - (1 << j)) % g for j in range(1, top + 1)}
    out |= {(i + 1) % g, (i - 1) % g}
    out.discard(i)
    return sorted(out)


def route(g: int, src: int, dst: int) -> list[int]:
    """Cluster path from ``src`` to ``dst`` where each hop is authorized.

    A hop ``a -> b`` is accepted by ``b`` only if ``a`` is in ``fingers(b)``,
    so paths use the clockwise ring step or counter-clockwise ``2^j`` jumps.
    """
    path = [src]
    if src == dst:
        return path
    if (dst - src) % g == 1:
        return [src, dst]
    cur = src
    while cur != dst:
        dist = (cur - dst) % g
        step = 1 << (dist.bit_length() - 1)
        cur = (cur - step) % g
        path.append(cur)
    return path


class ClusterView(Protocol):
    g: int

    def members(self, i: int) -> list[NodeId]: ...

    def cluster_of(self, node: NodeId) -> int: ...

    def nodes(self) -> list[NodeId]: ...


class _ViewMixin:
    def fingers(self, i: int) -> list[int]:
        return fingers(self.g, i)

    def sizes(self) -> list[int]:
        return [len(self.members(i)) for i in range(self.g)]

    def neighbor_view(self, i: int) -> dict[int, list[NodeId]]:
        """Full membership of every cluster that cluster ``i`` knows."""
        return {j: self.members(j) for j in self.fingers(i)}

    def connections(self, node: NodeId) -> set[NodeId]:
        i = self.cluster_of(node)
        out = set(self.members(i))
        for j in self.fingers(i):
            out.update(self.members(j))
        out.discard(node)
        return out


# --- static layout ------------------------------------------------------------


def default_order_hash(n: int) -> Callable[[NodeId], int]:
    space = n**3

    def h(node: NodeId) -> int:
        digest = hashlib.sha256(b"ringagg/order" + node.to_bytes(8, "big")).digest()
        return int.from_bytes(digest, "big") % space + 1

    return h


@dataclass(frozen=True)
class Layout(_ViewMixin):
    """Static partition: consecutive blocks of ``s`` in hash order."""

    order: tuple[NodeId, ...]
    s: int
    clusters: tuple[tuple[NodeId, ...], ...]
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for i, members in enumerate(self.clusters):
            for node in members:
                self._index[node] = i

    @property
    def g(self) -> int:
        return len(self.clusters)

    def members(self, i: int) -> list[NodeId]:
        return list(self.clusters[i])

    def cluster_of(self, node: NodeId) -> int:
        try:
            return self._index[node]
        except KeyError:
            raise NodeNotFoundError(node) from None

    def nodes(self) -> list[NodeId]:
        return list(self.order)

    def dump(self) -> str:
        return "\n".join(f"cluster {i}: " + " ".join(str(x) for x in c) for i, c in enumerate(self.clusters))


def hash_order_partition(nodes: Sequence[NodeId], s: int, hash: Callable[[NodeId], int] | None = None) -> Layout:
    n = len(nodes)
    if s < 1 or n < 2 * s:
        raise TooFewNodesError(f"{n} nodes cannot form two clusters of size {s}")
    if len(set(nodes)) != n:
        raise ValueError("duplicate node ids")
    h = hash or default_order_hash(n)
    order = tuple(sorted(nodes, key=lambda x: (h(x), x)))
    g = n // s
    blocks = [order[i * s : (i + 1) * s] for i in range(g - 1)]
    blocks.append(order[(g - 1) * s :])
    return Layout(order, s, tuple(blocks))


# --- dynamic overlay ------------------------------------------------------------


class RandomSource(Protocol):
    def draw(self, cluster: int, bounds: Sequence[int]) -> list[int]: ...


class SeededRandomSource:
    """Stand-in for the cluster coin: one seeded stream for all clusters."""

    def __init__(self, seed: Seed):
        self._stream = SeedStream(seed, b"overlay/rng-source")

    def draw(self, cluster: int, bounds: Sequence[int]) -> list[int]:
        return [self._stream.randbelow(b) for b in bounds]


@dataclass
class ChurnReport:
    """What one join or leave did, with the size data needed to price it.

    ``rng_calls`` holds ``(cluster, cluster_size, values)``; ``transfers``
    holds ``(src, dst, src_size, dst_size)`` inter-cluster transfers;
    ``direct_messages`` counts point-to-point messages to or from single nodes.
    """

    op: str
    node: NodeId
    moved: list[tuple[NodeId, int | None, int | None]] = field(default_factory=list)
    rng_calls: list[tuple[int, int, int]] = field(default_factory=list)
    transfers: list[tuple[int, int, int, int]] = field(default_factory=list)
    direct_messages: int = 0


class Overlay(_ViewMixin):
    def __init__(self, g: int, positions: dict[NodeId, Position] | None = None, epoch: int = 0):
        if g < 1:
            raise ValueError("g must be positive")
        self.g = g
        self.epoch = epoch
        self.redraws = 0
        self._pos: dict[NodeId, Position] = {}
        self._sorted: list[Position] = []
        self._at: dict[Position, NodeId] = {}
        for node, pos in (positions or {}).items():
            self._place(node, pos)

    # -- geometry --------------------------------------------------------

    def segment(self, i: int) -> tuple[Position, Position]:
        return -(-i * POSITION_SPACE // self.g), -(-(i + 1) * POSITION_SPACE // self.g)

    def cluster_at(self, pos: Position) -> int:
        return (pos * self.g) >> POSITION_BITS

    def cluster_len(self, i: int) -> int:
        lo, hi = self.segment(i)
        return bisect.bisect_left(self._sorted, hi) - bisect.bisect_left(self._sorted, lo)

    def _range(self, lo: Position, hi: Position) -> list[NodeId]:
        a = bisect.bisect_left(self._sorted, lo)
        b = bisect.bisect_left(self._sorted, hi)
        return [self._at[p] for p in self._sorted[a:b]]

    # -- views -------------------------------------------------------------

    @property
    def n(self) -> int:
        return len(self._pos)

    def __contains__(self, node: NodeId) -> bool:
        return node in self._pos

    def position(self, node: NodeId) -> Position:
        try:
            return self._pos[node]
        except KeyError:
            raise NodeNotFoundError(node) from None

    def members(self, i: int) -> list[NodeId]:
        return self._range(*self.segment(i))

    def cluster_of(self, node: NodeId) -> int:
        return self.cluster_at(self.position(node))

    def nodes(self) -> list[NodeId]:
        return [self._at[p] for p in self._sorted]

    def clusters(self) -> list[list[tuple[NodeId, Position]]]:
        return [[(x, self._pos[x]) for x in self.members(i)] for i in range(self.g)]

    def dump(self) -> str:
        lines = []
        for i, members in enumerate(self.clusters()):
            body = " ".join(f"{x}@{p:016x}" for x, p in members)
            lines.append(f"cluster {i}: {body}".rstrip())
        return "\n".join(lines)

    def check_partition(self) -> None:
        seen = 0
        for i in range(self.g):
            lo, hi = self.segment(i)
            for x in self.members(i):
                assert lo <= self._pos[x] < hi
                seen += 1
        assert seen == len(self._pos) == len(self._sorted) == len(self._at)

    def new_epoch(self, s: int | None = None, rule: str = "pow2") -> None:
        """Start a new epoch, optionally recomputing ``g`` for the current n."""
        if s is not None:
            self.g = g_for(self.n, s, rule)
        self.epoch += 1
        if any(not self.members(i) for i in range(self.g)):
            raise EmptyClusterError("re-partition left a cluster empty")

    # -- mutation ------------------------------------------------------------

    def _place(self, node: NodeId, pos: Position) -> None:
        if node in self._pos:
            raise OverlayError(f"node {node} already placed")
        if pos in self._at:
            raise OverlayError("position collision")
        self._pos[node] = pos
        self._at[pos] = node
        bisect.insort(self._sorted, pos)

    def _remove(self, node: NodeId) -> Position:
        pos = self._pos.pop(node)
        del self._at[pos]
        del self._sorted[bisect.bisect_left(self._sorted, pos)]
        return pos

    def _fresh_positions(self, rng: RandomSource, cluster: int, count: int, report: ChurnReport) -> list[Position]:
        if count == 0:
            return []
        report.rng_calls.append((cluster, self.cluster_len(cluster), count))
        out = rng.draw(cluster, [POSITION_SPACE] * count)
        taken = set()
        for k, p in enumerate(out):
            while p in self._at or p in taken:
                # collision: the cluster draws once more
                report.rng_calls.append((cluster, self.cluster_len(cluster), 1))
                p = rng.draw(cluster, [POSITION_SPACE])[0]
            taken.add(p)
            out[k] = p
        return out

    def _charge_route(self, src: int, dst: int, report: ChurnReport, back: bool = False) -> None:
        hops = route(self.g, src, dst)
        if back:
            hops += route(self.g, dst, src)[1:]
        for a, b in zip(hops, hops[1:]):
            report.transfers.append((a, b, self.cluster_len(a), self.cluster_len(b)))

    def _charge_updates(self, changed: Iterable[int], report: ChurnReport) -> None:
        for c in sorted(set(changed)):
            size = self.cluster_len(c)
            for k in knowers(self.g, c):
                report.transfers.append((c, k, size, self.cluster_len(k)))

    def _relocate(self, origin: int, moves: list[tuple[NodeId, int, Position]], report: ChurnReport) -> set[int]:
        """Place already-removed nodes at new positions decided by cluster ``origin``."""
        dests: dict[int, list[NodeId]] = {}
        for node, old, pos in moves:
            self._place(node, pos)
            new = self.cluster_at(pos)
            report.moved.append((node, old, new))
            dests.setdefault(new, []).append(node)
            dests.setdefault(old, [])
        for d, arrivals in sorted(dests.items()):
            if d != origin and arrivals:
                self._charge_route(origin, d, report)
            # each member of the destination hands the newcomer its view
            report.direct_messages += len(arrivals) * (self.cluster_len(d) - 1)
        return set(dests)

    def _check_nonempty(self, clusters: Iterable[int], op: str) -> None:
        empty = [i for i in sorted(set(clusters)) if not self.cluster_len(i)]
        if empty:
            raise EmptyClusterError(f"{op} emptied cluster(s) {empty}")

    def cuckoo_join(self, node: NodeId, rng: RandomSource, k_segment: float = 2) -> ChurnReport:
        """Place ``node`` randomly and scatter the nodes of its k/n segment.

        Eviction does not cascade: scattered nodes are placed directly.
        """
        if node in self._pos:
            raise OverlayError(f"node {node} already in the overlay")
        report = ChurnReport("join", node)
        contact = self.cluster_at(int.from_bytes(hashlib.sha256(node.to_bytes(8, "big")).digest()[:8], "big"))
        report.direct_messages += self.cluster_len(contact)
        (pos,) = self._fresh_positions(rng, contact, 1, report)
        target = self.cluster_at(pos)
        self._charge_route(contact, target, report)

        n_after = self.n + 1
        seg_len = k_segment * POSITION_SPACE / n_after
        seg_idx = int(pos // seg_len)
        lo, hi = math.ceil(seg_idx * seg_len), math.ceil((seg_idx + 1) * seg_len)
        evicted = self._range(lo, min(hi, POSITION_SPACE))
        self._place(node, pos)
        report.moved.append((node, None, target))
        report.direct_messages += self.cluster_len(target) - 1
        changed = {target}
        if evicted:
            old = [self.cluster_of(x) for x in evicted]
            for x in evicted:
                self._remove(x)
            fresh = self._fresh_positions(rng, target, len(evicted), report)
            changed |= self._relocate(target, list(zip(evicted, old, fresh)), report)
        self._charge_updates(changed, report)
        self._check_nonempty(changed, "join")
        return report

    def leave(self, node: NodeId, rng: RandomSource, k_segment: float = 2) -> ChurnReport:
        """Remove ``node``; its cluster swaps in a random k/n segment and scatters the displaced nodes."""
        home = self.cluster_of(node)
        report = ChurnReport("leave", node)
        self._remove(node)
        report.moved.append((node, home, None))
        report.direct_messages += self.cluster_len(home)
        if self.n == 0:
            return report
        seg_len = min(int(k_segment * POSITION_SPACE / self.n), self.segment(home)[1] - self.segment(home)[0])
        report.rng_calls.append((home, self.cluster_len(home), 2))
        home_lo, home_hi = self.segment(home)
        src_lo, dst_off = rng.draw(home, [POSITION_SPACE - seg_len + 1, home_hi - home_lo - seg_len + 1])
        dst_lo = home_lo + dst_off
        incoming = self._range(src_lo, src_lo + seg_len)
        incoming_set = set(incoming)
        displaced = [x for x in self._range(dst_lo, dst_lo + seg_len) if x not in incoming_set]
        for c in sorted({self.cluster_of(x) for x in incoming} - {home}):
            self._charge_route(home, c, report, back=True)
        translated = [(x, self.cluster_of(x), self._pos[x] - src_lo + dst_lo) for x in incoming]
        displaced_from = [self.cluster_of(x) for x in displaced]
        for x in incoming + displaced:
            self._remove(x)
        changed = {home}
        if translated:
            changed |= self._relocate(home, translated, report)
        if displaced:
            fresh = self._fresh_positions(rng, home, len(displaced), report)
            changed |= self._relocate(home, list(zip(displaced, displaced_from, fresh)), report)
        self._charge_updates(changed, report)
        self._check_nonempty(changed, "leave")
        return report


def bootstrap_initial(
    honest_nodes: Sequence[NodeId],
    params: SystemParams,
    g_rule: str = "pow2",
    max_redraws: int = 100,
) -> Overlay:
    """Uniform seeded positions for an all-honest starting population."""
    n = len(honest_nodes)
    s = cluster_size(n, params.k_cluster, params.log_base)
    if n < 2 * s:
        raise TooFewNodesError(f"{n} nodes cannot form two clusters of size {s}")
    g = g_for(n, s, g_rule)
    stream = SeedStream(params.seed, b"overlay/bootstrap")
    for attempt in range(max_redraws + 1):
        positions: dict[NodeId, Position] = {}
        used: set[Position] = set()
        for node in honest_nodes:
            p = stream.randbits(POSITION_BITS)
            while p in used:
                p = stream.randbits(POSITION_BITS)
            used.add(p)
            positions[node] = p
        overlay = Overlay(g, positions)
        if all(overlay.members(i) for i in range(g)):
            overlay.redraws = attempt
            return overlay
    raise BootstrapError(f"some cluster stayed empty after {max_redraws} re-draws")


# --- honest-majority oracle -------------------------------------------------------


@dataclass(frozen=True)
class ClusterHonesty:
    index: int
    honest: int
    size: int

    @property
    def majority(self) -> bool:
        return 2 * self.honest > self.size


@dataclass(frozen=True)
class MajorityReport:
    clusters: tuple[ClusterHonesty, ...]

    @property
    def all_majority(self) -> bool:
        return all(c.majority for c in self.clusters)

    @property
    def failing(self) -> list[int]:
        return [c.index for c in self.clusters if not c.majority]


def check_honest_majority(view: ClusterView, malicious: Iterable[NodeId]) -> MajorityReport:
    """Simulator-side oracle; protocol code never learns who is malicious."""
    bad = set(malicious)
    out = []
    for i in range(view.g):
        members = view.members(i)
        out.append(ClusterHonesty(i, sum(1 for x in members if x not in bad), len(members)))
    return MajorityReport(tuple(out))
