"""Cluster communication subroutines over a :class:`~ringagg.simnet.World`.

Broadcasts are batched: many independent instances, each confined to one
cluster, advance together through the same synchronous rounds. Two strategies
are available. ``dolev-strong`` (default) uses signature chains over
``f + 1`` rounds with ``f = floor((s-1)/2)`` and tolerates any minority of
faulty members. ``double-echo`` is the SEND/ECHO/READY authenticated echo
broadcast, which needs ``s > 3f``.

Honest outcomes are returned per ``(node, instance)``; ``None`` stands for the
undecided outcome.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass
from typing import Any, Hashable, Iterable, Mapping, Sequence

from .crypto.common import SeedStream, int_bytes, lp
from .overlay import RandomSource, fingers
from .simnet import SIGNATURE_BYTES, Phase, World

STRATEGIES = ("dolev-strong", "double-echo")
INSTANCE_BYTES = 8
BOTTOM = None


class RngFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class BroadcastInstance:
    key: Hashable
    sender: int
    members: tuple[int, ...]
    value: Any
    size: int


@dataclass(frozen=True)
class Equivocation:
    """Second value an equivocating sender signs; same nominal size."""

    original: Any
    variant: int = 1


# --- honest-case message counts ----------------------------------------------------------


def fault_bound(s: int, strategy: str = "dolev-strong") -> int:
    if strategy == "dolev-strong":
        return (s - 1) // 2
    if strategy == "double-echo":
        return (s - 1) // 3
    raise ValueError(f"unknown broadcast strategy {strategy!r}")


def broadcast_cost(s: int, strategy: str = "dolev-strong") -> int:
    """Messages one broadcast sends in a cluster of ``s`` when all members are honest."""
    if s < 2:
        return 0
    if strategy == "dolev-strong":
        return (s - 1) ** 2 if fault_bound(s) >= 1 else s - 1
    if strategy == "double-echo":
        return (s - 1) * (2 * s + 1)
    raise ValueError(f"unknown broadcast strategy {strategy!r}")


def cluster_rng_cost(s: int, strategy: str = "dolev-strong") -> int:
    # commit and reveal phases, one broadcast per member each
    return 2 * s * broadcast_cost(s, strategy)


def transfer_cost(s_from: int, s_to: int) -> int:
    return s_from * s_to


def churn_messages(report, strategy: str = "dolev-strong") -> int:
    """Honest-case message count of one overlay join or leave."""
    total = report.direct_messages
    total += sum(cluster_rng_cost(size, strategy) for _, size, _ in report.rng_calls)
    total += sum(transfer_cost(a, b) for _, _, a, b in report.transfers)
    return total


# --- Dolev-Strong ------------------------------------------------------------------------


def _ds_size(inst: BroadcastInstance, chain_len: int) -> int:
    return inst.size + INSTANCE_BYTES + SIGNATURE_BYTES * (chain_len - 1)


def _install_ds_adversary(world: World, instances: Mapping[Hashable, BroadcastInstance], last_round: dict) -> None:
    """Equivocation strategies for signature-chain broadcast."""
    adv = world.adversary

    def split_origin(sender, receiver, payload, size):
        key, value, chain = payload
        if len(chain) != 1:
            return [(payload, size)]
        alt = Equivocation(value)
        world.sign(sender, (key, alt))
        if adv.coin(sender, receiver, 7):
            return [((key, alt, chain), size)]
        return [(payload, size)]

    def late_relay(sender, receiver, payload, size):
        key, value, chain = payload
        if len(chain) == 1 and chain[0] == sender:
            return split_origin(sender, receiver, payload, size)
        inst = instances[key]
        final = last_round[key]
        if world.round >= final:
            return [(payload, size)]
        # withhold now; re-inject in the final round with the chain padded by
        # colluders' signatures so its length matches that round
        needed = final - world.round
        pad = [x for x in inst.members if x in world.malicious and x not in chain]
        if len(pad) >= needed and adv.coin(sender, receiver, world.round):
            padded = chain[:-1] + tuple(pad[:needed]) + chain[-1:]
            for x in pad[:needed]:
                world.sign(x, (key, value))
            tail = padded[-1]
            world.schedule(final, tail, (receiver,), (key, value, padded), _ds_size(inst, len(padded)))
            return []
        return [(payload, size)]

    adv.tamperers[("equivocate", "ds")] = late_relay


def _run_dolev_strong(world: World, instances: list[BroadcastInstance]) -> dict:
    by_key = {inst.key: inst for inst in instances}
    member_sets = {inst.key: frozenset(inst.members) for inst in instances}
    f_of = {inst.key: fault_bound(len(inst.members)) for inst in instances}
    start = world.round
    # round numbers are relative: sends of relative round r happen at world round start + r - 1
    last_round = {k: start + f for k, f in f_of.items()}
    _install_ds_adversary(world, by_key, last_round)
    extracted: dict[tuple[int, Hashable], list] = {}
    for inst in instances:
        value = world.decide(inst.sender, "broadcast", inst.value)
        extracted[(inst.sender, inst.key)] = [value]
        world.sign(inst.sender, (inst.key, value))
        others = [x for x in inst.members if x != inst.sender]
        world.multicast(inst.sender, others, (inst.key, value, (inst.sender,)), _ds_size(inst, 1), "ds")
    rounds = max(f_of.values(), default=0) + 1
    verify = world.verify
    for r in range(1, rounds + 1):
        relays = []
        for env in world.step():
            key, value, chain = env.payload
            members = member_sets.get(key)
            receiver = env.receiver
            if members is None or receiver not in members or r > f_of[key] + 1:
                continue
            if len(chain) < r or chain[0] != by_key[key].sender or chain[-1] != env.sender:
                continue
            if len(set(chain)) != len(chain) or not members.issuperset(chain):
                continue
            statement = (key, value)
            if not all(verify(x, statement) for x in chain):
                continue
            got = extracted.setdefault((receiver, key), [])
            if value in got or len(got) >= 2:
                continue
            got.append(value)
            if r <= f_of[key]:
                relays.append((receiver, key, value, chain))
        for receiver, key, value, chain in relays:
            world.sign(receiver, (key, value))
            new_chain = chain + (receiver,)
            targets = [x for x in by_key[key].members if x not in new_chain]
            world.multicast(receiver, targets, (key, value, new_chain), _ds_size(by_key[key], len(new_chain)), "ds")
    out = {}
    for inst in instances:
        for x in inst.members:
            got = extracted.get((x, inst.key), ())
            out[(x, inst.key)] = got[0] if len(got) == 1 else BOTTOM
    return out


# --- authenticated double-echo -------------------------------------------------------------


def _run_double_echo(world: World, instances: list[BroadcastInstance], max_rounds: int = 8) -> dict:
    by_key = {inst.key: inst for inst in instances}
    member_sets = {inst.key: frozenset(inst.members) for inst in instances}
    adv = world.adversary

    def split_send(sender, receiver, payload, size):
        kind, key, value = payload
        if kind == "SEND" and adv.coin(sender, receiver, 7):
            return [((kind, key, Equivocation(value)), size)]
        if kind in ("ECHO", "READY") and adv.coin(sender, receiver, 11):
            return [((kind, key, Equivocation(value)), size)]
        return [(payload, size)]

    adv.tamperers[("equivocate", "de")] = split_send

    echoed: set = set()
    readied: set = set()
    delivered: dict = {}
    echoes: dict = {}
    readies: dict = {}
    for inst in instances:
        value = world.decide(inst.sender, "broadcast", inst.value)
        others = [x for x in inst.members if x != inst.sender]
        world.multicast(inst.sender, others, ("SEND", inst.key, value), inst.size + INSTANCE_BYTES, "de")
        # the sender echoes its own value
        echoed.add((inst.sender, inst.key))
        world.multicast(inst.sender, others, ("ECHO", inst.key, value), inst.size + INSTANCE_BYTES, "de")
        echoes.setdefault((inst.sender, inst.key), {}).setdefault(value, set()).add(inst.sender)

    for _ in range(max_rounds):
        if not world.pending():
            break
        sends = []
        for env in world.step():
            kind, key, value = env.payload
            members = member_sets.get(key)
            x = env.receiver
            if members is None or x not in members or env.sender not in members:
                continue
            inst = by_key[key]
            s = len(inst.members)
            f = fault_bound(s, "double-echo")
            if kind == "SEND":
                if env.sender == inst.sender and (x, key) not in echoed:
                    echoed.add((x, key))
                    sends.append((x, "ECHO", key, value))
                    echoes.setdefault((x, key), {}).setdefault(value, set()).add(x)
                continue
            table = echoes if kind == "ECHO" else readies
            voters = table.setdefault((x, key), {}).setdefault(value, set())
            voters.add(env.sender)
            if (x, key) not in readied:
                n_echo = len(echoes.get((x, key), {}).get(value, ()))
                n_ready = len(readies.get((x, key), {}).get(value, ()))
                if 2 * n_echo > s + f or n_ready >= f + 1:
                    readied.add((x, key))
                    sends.append((x, "READY", key, value))
                    readies.setdefault((x, key), {}).setdefault(value, set()).add(x)
            n_ready = len(readies.get((x, key), {}).get(value, ()))
            if n_ready >= 2 * f + 1 and (x, key) not in delivered:
                delivered[(x, key)] = value
        for x, kind, key, value in sends:
            inst = by_key[key]
            targets = [y for y in inst.members if y != x]
            world.multicast(x, targets, (kind, key, value), inst.size + INSTANCE_BYTES, "de")
    while world.pending():
        world.step()
    return {(x, inst.key): delivered.get((x, inst.key), BOTTOM) for inst in instances for x in inst.members}


def secure_broadcast_batch(world: World, instances: Sequence[BroadcastInstance], strategy: str = "dolev-strong") -> dict:
    """Run many broadcasts concurrently; returns ``{(node, key): value or None}``."""
    instances = sorted(instances, key=lambda i: repr(i.key))
    if len({i.key for i in instances}) != len(instances):
        raise ValueError("broadcast instance keys must be unique")
    for inst in instances:
        if inst.sender not in inst.members:
            raise ValueError("sender must belong to the cluster")
    if strategy == "dolev-strong":
        return _run_dolev_strong(world, instances)
    if strategy == "double-echo":
        return _run_double_echo(world, instances)
    raise ValueError(f"unknown broadcast strategy {strategy!r}")


def secure_broadcast(world: World, members: Sequence[int], sender: int, msg: Any, size: int, strategy: str = "dolev-strong", key: Hashable = "bcast") -> dict:
    """One broadcast; returns ``{node: value or None}`` for every member."""
    out = secure_broadcast_batch(world, [BroadcastInstance(key, sender, tuple(members), msg, size)], strategy)
    return {x: out[(x, key)] for x in members}


# --- inter-cluster transfer ------------------------------------------------------------------


@dataclass(frozen=True)
class Transfer:
    src: int
    dst: int
    senders: tuple[int, ...]
    receivers: tuple[int, ...]
    values: Mapping[int, Any]  # sender -> value it holds (None: holds nothing)
    size: int
    kind: str = "transfer"


def majority_value(values: Iterable[Any], cluster_size: int) -> Any:
    """The value carried by strictly more than half of ``cluster_size`` senders."""
    counts = Counter(v for v in values if v is not None)
    for v, c in counts.items():
        if 2 * c > cluster_size:
            return v
    return BOTTOM


def inter_cluster_transfer_batch(world: World, transfers: Sequence[Transfer], g: int) -> dict:
    """One round of cluster-to-cluster sends; returns ``{(receiver, dst): value or None}``."""
    for t in transfers:
        for x in t.senders:
            v = t.values.get(x)
            if v is None:
                continue
            v = world.decide(x, t.kind, v)
            if v is None:
                continue
            world.multicast(x, t.receivers, (t.src, v), t.size, t.kind)
    inbox: dict[tuple[int, int], dict[int, Any]] = {}
    expected = {(t.dst, t.src): frozenset(t.senders) for t in transfers}
    dst_of = {}
    for t in transfers:
        for y in t.receivers:
            dst_of.setdefault(y, set()).add(t.dst)
    for env in world.step():
        src, v = env.payload
        for dst in dst_of.get(env.receiver, ()):
            senders = expected.get((dst, src))
            if senders is not None and env.sender in senders:
                # first envelope per sender counts; duplicates are ignored
                inbox.setdefault((env.receiver, dst), {}).setdefault(env.sender, v)
    out = {}
    for t in transfers:
        authorized = t.src in fingers(g, t.dst)
        if not authorized:
            world.metrics.rejections += len(t.receivers)
        for y in t.receivers:
            got = inbox.get((y, t.dst), {})
            out[(y, t.dst)] = majority_value(got.values(), len(t.senders)) if authorized else BOTTOM
    return out


def inter_cluster_transfer(world: World, view, src: int, dst: int, values: Mapping[int, Any], size: int, kind: str = "transfer") -> dict:
    """Send from cluster ``src`` to ``dst``; returns ``{receiver: value or None}``."""
    t = Transfer(src, dst, tuple(view.members(src)), tuple(view.members(dst)), dict(values), size, kind)
    out = inter_cluster_transfer_batch(world, [t], view.g)
    return {y: out[(y, dst)] for y in t.receivers}


def ring_forward(world: World, view, start: int, values: Mapping[int, Any], size: int, kind: str, hops: int | None = None) -> dict:
    """Forward values clockwise cluster by cluster, starting at cluster ``start``.

    Returns the value every reached node ends up holding (``None`` where the
    majority filter produced nothing). Nodes holding nothing forward nothing.
    """
    g = view.g
    hops = g - 1 if hops is None else hops
    held = {x: values.get(x) for x in view.members(start)}
    cur = start
    for _ in range(hops):
        nxt = (cur + 1) % g
        got = inter_cluster_transfer(world, view, cur, nxt, {x: held.get(x) for x in view.members(cur)}, size, kind)
        held.update(got)
        cur = nxt
    return held


def global_broadcast(world: World, view, origin: int, msg: Any, size: int, strategy: str = "dolev-strong", kind: str = "announce") -> dict:
    """Broadcast in the origin's cluster, then forward around the whole ring."""
    c = view.cluster_of(origin)
    local = secure_broadcast(world, view.members(c), origin, msg, size, strategy, key=("global", kind, origin))
    return ring_forward(world, view, c, local, size, kind)


# --- cluster randomness ------------------------------------------------------------------------


SALT_BYTES = 16


@dataclass(frozen=True)
class ClusterRandomness:
    contributors: tuple[int, ...]
    values: tuple[int, ...]
    bounds: tuple[int, ...]

    @property
    def value(self) -> int:
        return self.values[0]


def commitment(salt: bytes, values: Sequence[int]) -> bytes:
    return hashlib.sha256(b"ringagg/commit" + lp(salt) + b"".join(lp(int_bytes(v)) for v in values)).digest()


def _bounds(bound: int | Sequence[int]) -> tuple[int, ...]:
    bounds = (bound,) if isinstance(bound, int) else tuple(bound)
    if not bounds or any(b < 2 for b in bounds):
        raise ValueError("every bound must be at least 2")
    return bounds


def combine_contributions(commitments: Mapping[int, bytes | None], reveals: Mapping[int, Any], bound: int | Sequence[int]) -> ClusterRandomness:
    """Sum, per component, the revealed contributions whose commitment checks out."""
    bounds = _bounds(bound)
    valid = []
    sums = [0] * len(bounds)
    for x in sorted(commitments):
        com = commitments[x]
        rev = reveals.get(x)
        if com is None or rev is None:
            continue
        try:
            salt, values = rev
            values = tuple(values)
        except (TypeError, ValueError):
            continue
        if len(values) != len(bounds) or not all(isinstance(v, int) and 0 <= v < b for v, b in zip(values, bounds)):
            continue
        if not isinstance(salt, bytes) or commitment(salt, values) != com:
            continue
        valid.append(x)
        sums = [a + v for a, v in zip(sums, values)]
    if not valid:
        raise RngFailure("no valid contributions")
    return ClusterRandomness(tuple(valid), tuple(v % b for v, b in zip(sums, bounds)), bounds)


def cluster_rng(
    world: World,
    members: Sequence[int],
    bound: int | Sequence[int],
    seed,
    strategy: str = "dolev-strong",
    timeout_rounds: int | None = None,
    label: Hashable = "rng",
) -> dict:
    """Commit-reveal coin for one cluster; returns ``{member: ClusterRandomness or None}``.

    ``bound`` may be a sequence, in which case one value per bound is drawn
    with a single pair of broadcasts. Members commit via secure broadcast and
    then reveal; a reveal not delivered within the broadcast schedule is
    excluded, as is one failing its commitment.
    """
    bounds = _bounds(bound)
    members = tuple(members)
    schedule = fault_bound(len(members), strategy) + 1
    if timeout_rounds is not None and timeout_rounds < schedule:
        raise ValueError(f"timeout of {timeout_rounds} rounds is shorter than the broadcast schedule ({schedule})")
    secrets = {}
    for x in members:
        stream = SeedStream(seed, b"cluster-rng/" + int_bytes(x) + repr(label).encode())
        salt = stream.randbytes(SALT_BYTES)
        honest = (salt, tuple(stream.randbelow(b) for b in bounds))
        secrets[x] = world.decide(x, "rng-contribution", honest)
    commits = []
    for x in members:
        try:
            com = commitment(*secrets[x])
        except (TypeError, ValueError):
            continue  # nothing committed
        commits.append(BroadcastInstance((label, "commit", x), x, members, com, 32))
    got_commits = secure_broadcast_batch(world, commits, strategy)
    reveals = []
    for x in members:
        rev = world.decide(x, "rng-reveal", secrets[x])
        if rev is not None:
            reveals.append(BroadcastInstance((label, "reveal", x), x, members, rev, SALT_BYTES + 8 * len(bounds)))
    got_reveals = secure_broadcast_batch(world, reveals, strategy)
    out = {}
    for y in members:
        coms = {x: got_commits.get((y, (label, "commit", x))) for x in members}
        revs = {x: got_reveals.get((y, (label, "reveal", x))) for x in members}
        try:
            out[y] = combine_contributions(coms, revs, bounds)
        except RngFailure:
            out[y] = None
    return out


class SimulatedRandomSource:
    """Overlay random source that runs the cluster coin inside a world.

    Every draw executes :func:`cluster_rng` among the current members of the
    deciding cluster and returns the value agreed by its members.
    """

    def __init__(self, world: World, overlay, seed, strategy: str = "dolev-strong"):
        self.world = world
        self.overlay = overlay
        self.seed = seed
        self.strategy = strategy
        self.calls = 0

    def draw(self, cluster: int, bounds: Sequence[int]) -> list[int]:
        self.calls += 1
        result = cluster_rng(
            self.world, self.overlay.members(cluster), bounds, f"{self.seed}/{self.calls}", self.strategy, label=("churn", self.calls)
        )
        agreed = {r.values for r in result.values() if r is not None}
        if len(agreed) != 1:
            raise RngFailure("cluster members disagree on the coin")
        return list(agreed.pop())
