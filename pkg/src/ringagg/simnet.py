"""Deterministic synchronous-round message simulator.

Envelopes sent in round ``r`` are delivered, sorted by ``(receiver, sender,
seq)``, when :meth:`World.step` closes round ``r``. Every envelope carries the
round tag current at send time; a receiver drops envelopes whose tag is not
the tag of the round being closed, whose claimed sender differs from the
signer, or whose receiver is unknown. Drops are counted, so
``sent == delivered + dropped`` always holds.

Malicious senders are routed through an :class:`Adversary`, which can drop,
duplicate, replay or rewrite payloads, but always under the malicious node's
own identity. Protocol code asks :meth:`World.decide` for every value a node
is about to contribute; for honest nodes that is the identity.
"""

from __future__ import annotations

import hashlib
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Callable, Iterable, Mapping, NamedTuple, Sequence

from .crypto.common import Seed, SeedStream, seed_bytes

HEADER_BYTES = 32
SIGNATURE_BYTES = 64
ENVELOPE_OVERHEAD = HEADER_BYTES + SIGNATURE_BYTES

BEHAVIORS = (
    "drop_all",
    "drop_selective",
    "equivocate",
    "garbage_payload",
    "invalid_input",
    "bad_share",
    "abstain",
    "replay",
)


class ConfigError(ValueError):
    pass


class Phase(IntEnum):
    SETUP = 1
    LOCAL = 2
    RING = 3
    DECRYPT = 4
    CHURN = 5
    MISC = 6

    @property
    def label(self) -> str:
        return self.name.lower()


class RoundTag(NamedTuple):
    epoch: int
    phase: int
    step: int

    def to_bytes(self) -> bytes:
        return struct.pack(">III", self.epoch, self.phase, self.step)


class Envelope(NamedTuple):
    # field order doubles as the delivery sort key
    receiver: int
    sender: int
    seq: int
    tag: RoundTag
    payload: Any
    size: int
    signed_by: int


def wire_bytes(sender: int, receiver: int, tag: RoundTag, payload: bytes) -> bytes:
    """Reference wire encoding: header, payload, signature placeholder."""
    header = struct.pack(">QQ", sender, receiver) + tag.to_bytes() + struct.pack(">I", len(payload))
    signature = hashlib.sha512(header + payload).digest()
    return header + payload + signature


@dataclass
class RunMetrics:
    sent_msgs: Counter = field(default_factory=Counter)
    sent_bytes: Counter = field(default_factory=Counter)
    recv_msgs: Counter = field(default_factory=Counter)
    recv_bytes: Counter = field(default_factory=Counter)
    recipients: dict = field(default_factory=lambda: defaultdict(set))
    phase_msgs: Counter = field(default_factory=Counter)
    phase_bytes: Counter = field(default_factory=Counter)
    dropped: Counter = field(default_factory=Counter)
    rejections: int = 0
    churn_ops: list = field(default_factory=list)

    @property
    def total_msgs(self) -> int:
        return sum(self.sent_msgs.values())

    @property
    def total_bytes(self) -> int:
        return sum(self.sent_bytes.values())

    @property
    def delivered_msgs(self) -> int:
        return sum(self.recv_msgs.values())

    @property
    def dropped_msgs(self) -> int:
        return sum(self.dropped.values())

    def node_bytes(self, nodes: Iterable[int]) -> list[int]:
        return [self.sent_bytes[x] for x in nodes]

    def max_node_bytes(self, nodes: Sequence[int]) -> int:
        return max(self.node_bytes(nodes))

    def mean_node_bytes(self, nodes: Sequence[int]) -> float:
        return sum(self.node_bytes(nodes)) / len(nodes)

    def phase_bytes_of(self, phase: Phase) -> int:
        return self.phase_bytes[int(phase)]

    def summary(self) -> dict:
        return {
            "total_msgs": self.total_msgs,
            "total_bytes": self.total_bytes,
            "delivered": self.delivered_msgs,
            "dropped": dict(sorted(self.dropped.items())),
            "phase_msgs": {Phase(p).label: v for p, v in sorted(self.phase_msgs.items())},
            "phase_bytes": {Phase(p).label: v for p, v in sorted(self.phase_bytes.items())},
            "rejections": self.rejections,
        }


# --- adversary ----------------------------------------------------------------------


@dataclass(frozen=True)
class AdversaryConfig:
    malicious: frozenset
    behaviors: tuple = ()  # sorted (node, frozenset of behavior names) pairs
    seed: Seed = 0

    def __post_init__(self):
        object.__setattr__(self, "malicious", frozenset(self.malicious))
        table = tuple(sorted((int(x), frozenset(b)) for x, b in dict(self.behaviors).items()))
        for x, bs in table:
            if x not in self.malicious:
                raise ConfigError(f"behaviors assigned to honest node {x}")
            unknown = set(bs) - set(BEHAVIORS)
            if unknown:
                raise ConfigError(f"unknown behaviors {sorted(unknown)}")
        object.__setattr__(self, "behaviors", table)

    def behaviors_of(self, node: int) -> frozenset:
        return dict(self.behaviors).get(node, frozenset())

    @classmethod
    def honest(cls) -> "AdversaryConfig":
        return cls(frozenset())

    @classmethod
    def uniform_behavior(cls, malicious: Iterable[int], behaviors: Iterable[str], seed: Seed = 0) -> "AdversaryConfig":
        mal = frozenset(malicious)
        bs = frozenset(behaviors)
        return cls(mal, tuple((x, bs) for x in mal), seed)

    @classmethod
    def full_suite(cls, malicious: Iterable[int], seed: Seed, extra_prob: float = 0.25) -> "AdversaryConfig":
        """Round-robin one behavior per node so all appear, plus random extras."""
        mal = sorted(malicious)
        stream = SeedStream(seed, b"simnet/full-suite")
        table = []
        for k, x in enumerate(mal):
            bs = {BEHAVIORS[k % len(BEHAVIORS)]}
            for b in BEHAVIORS:
                if b != "drop_all" and stream.randbelow(1 << 16) < extra_prob * (1 << 16):
                    bs.add(b)
            table.append((x, frozenset(bs)))
        return cls(frozenset(mal), tuple(table), seed)


Tamperer = Callable[[int, int, Any, int], list]
Decider = Callable[[int, Any], Any]


class Adversary:
    """Executes the configured misbehaviors for malicious nodes.

    Protocol layers register kind-specific strategies: ``deciders`` rewrite a
    value a node is about to contribute, ``tamperers`` rewrite one outgoing
    envelope payload. Both are keyed by ``(behavior, kind)``.
    """

    def __init__(self, config: AdversaryConfig):
        self.config = config
        self._behaviors = {x: b for x, b in config.behaviors}
        self._key = hashlib.sha256(b"simnet/adversary" + seed_bytes(config.seed)).digest()
        self.deciders: dict[tuple[str, str], Decider] = {}
        self.tamperers: dict[tuple[str, str], Tamperer] = {}
        self._last: dict[int, tuple] = {}
        self.state: dict = {}  # scratch space shared by registered strategies

    def behaviors(self, node: int) -> frozenset:
        return self._behaviors.get(node, frozenset())

    def coin(self, *parts: int) -> int:
        h = hashlib.sha256(self._key + b"".join(p.to_bytes(8, "big", signed=True) for p in parts))
        return h.digest()[0] & 1

    def decide(self, node: int, kind: str, value: Any) -> Any:
        bs = self.behaviors(node)
        for b in BEHAVIORS:
            if b in bs and (b, kind) in self.deciders:
                return self.deciders[(b, kind)](node, value)
        return value

    def outgoing(self, world: "World", sender: int, receiver: int, payload: Any, size: int, kind: str) -> list:
        """Return ``(payload, size, tag)`` triples to actually send."""
        bs = self.behaviors(sender)
        if "drop_all" in bs:
            return []
        if "drop_selective" in bs and self.coin(sender, receiver, world.round):
            return []
        out = [(payload, size)]
        for b in BEHAVIORS:
            if b in bs and (b, kind) in self.tamperers:
                out = [r for p, s in out for r in self.tamperers[(b, kind)](sender, receiver, p, s)]
        sends = [(p, s, world.tag) for p, s in out]
        if "replay" in bs:
            prev = self._last.get(sender)
            if prev is not None and prev[2] != world.tag:
                sends.append(prev)
            if sends:
                self._last[sender] = sends[0]
        return sends


# --- corruption strategies -----------------------------------------------------------


CORRUPTION_STRATEGIES = ("uniform", "targeted-cluster", "join-order")


def _shuffled(items: Sequence[int], stream: SeedStream) -> list[int]:
    out = list(items)
    for i in range(len(out) - 1, 0, -1):
        j = stream.randbelow(i + 1)
        out[i], out[j] = out[j], out[i]
    return out


def corrupt(
    strategy: str,
    nodes: Sequence[int],
    tau_frac: float,
    seed: Seed,
    epsilon: float = 0.0,
    view=None,
    targets: Sequence[int] = (0,),
    unsafe: bool = False,
) -> frozenset:
    """Pick exactly floor(tau * n) malicious nodes.

    ``targeted-cluster`` fills the clusters in ``targets`` first (needs
    ``view``); ``join-order`` corrupts the latest joiners, taking ``nodes`` as
    the join order. Bounds violations raise unless ``unsafe`` is set.
    """
    if not 0 <= tau_frac < 1:
        raise ConfigError("tau_frac must lie in [0, 1)")
    if not unsafe and not tau_frac < 0.5 - epsilon:
        raise ConfigError(f"tau_frac={tau_frac} violates tau < 1/2 - epsilon={0.5 - epsilon:g}")
    budget = int(tau_frac * len(nodes) + 1e-9)
    stream = SeedStream(seed, b"simnet/corrupt/" + strategy.encode())
    if strategy == "uniform":
        return frozenset(_shuffled(sorted(nodes), stream)[:budget])
    if strategy == "join-order":
        return frozenset(nodes[len(nodes) - budget :]) if budget else frozenset()
    if strategy == "targeted-cluster":
        if view is None:
            raise ConfigError("targeted-cluster corruption needs a cluster view")
        chosen: list[int] = []
        for c in targets:
            for x in view.members(c):
                if len(chosen) < budget and x not in chosen:
                    chosen.append(x)
        taken = set(chosen)
        rest = [x for x in _shuffled(sorted(nodes), stream) if x not in taken]
        chosen.extend(rest[: budget - len(chosen)])
        return frozenset(chosen)
    raise ConfigError(f"unknown corruption strategy {strategy!r}")


# --- world ----------------------------------------------------------------------------


class World:
    def __init__(
        self,
        nodes: Iterable[int],
        adversary: Adversary | AdversaryConfig | None = None,
        epoch: int = 0,
        trace: bool = False,
    ):
        self.nodes = frozenset(nodes)
        if isinstance(adversary, AdversaryConfig):
            adversary = Adversary(adversary)
        self.adversary = adversary or Adversary(AdversaryConfig.honest())
        self._malicious = self.adversary.config.malicious
        if not self._malicious <= self.nodes:
            raise ConfigError("malicious set must be a subset of the nodes")
        self.epoch = epoch
        self.phase = Phase.MISC
        self.round = 0
        self.tag = RoundTag(epoch, int(self.phase), 0)
        self.metrics = RunMetrics()
        self.trace_lines: list[str] | None = [] if trace else None
        self.signatures: set = set()
        self.oracle: dict = {}  # simulator-only: ciphertext bytes -> plaintext
        self._outbox: list[Envelope] = []
        self._scheduled: dict[int, list] = defaultdict(list)
        self._seq = 0

    # -- simulator-side queries (never used by honest handlers) ----------------

    def is_honest(self, node: int) -> bool:
        return node not in self._malicious

    @property
    def malicious(self) -> frozenset:
        return self._malicious

    # -- phase and tag ------------------------------------------------------------

    def set_phase(self, phase: Phase) -> None:
        self.phase = phase
        self.tag = RoundTag(self.epoch, int(phase), self.round)

    # -- signing ---------------------------------------------------------------------

    def sign(self, signer: int, statement: Any) -> None:
        self.signatures.add((signer, statement))

    def verify(self, signer: int, statement: Any) -> bool:
        return (signer, statement) in self.signatures

    # -- decisions ------------------------------------------------------------------------

    def decide(self, node: int, kind: str, value: Any) -> Any:
        if node in self._malicious:
            return self.adversary.decide(node, kind, value)
        return value

    # -- sending ------------------------------------------------------------------------

    def send(self, sender: int, receiver: int, payload: Any, size: int, kind: str = "") -> None:
        self.multicast(sender, (receiver,), payload, size, kind)

    def multicast(self, sender: int, receivers: Sequence[int], payload: Any, size: int, kind: str = "") -> None:
        if sender in self._malicious:
            for r in receivers:
                for p, s, tag in self.adversary.outgoing(self, sender, r, payload, size, kind):
                    self._emit(sender, sender, r, p, s, tag)
            return
        tag = self.tag
        wire = size + ENVELOPE_OVERHEAD
        seq = self._seq
        append = self._outbox.append
        for r in receivers:
            append(Envelope(r, sender, seq, tag, payload, wire, sender))
            seq += 1
        count = seq - self._seq
        self._seq = seq
        m = self.metrics
        m.sent_msgs[sender] += count
        m.sent_bytes[sender] += count * wire
        m.recipients[sender].update(receivers)
        m.phase_msgs[tag.phase] += count
        m.phase_bytes[tag.phase] += count * wire

    def send_as(self, actual: int, claimed: int, receiver: int, payload: Any, size: int) -> None:
        """A spoofing attempt: the envelope is signed by ``actual``."""
        self._emit(actual, claimed, receiver, payload, size, self.tag)

    def _emit(self, actual: int, claimed: int, receiver: int, payload: Any, size: int, tag: RoundTag) -> None:
        wire = size + ENVELOPE_OVERHEAD
        self._outbox.append(Envelope(receiver, claimed, self._seq, tag, payload, wire, actual))
        self._seq += 1
        m = self.metrics
        m.sent_msgs[actual] += 1
        m.sent_bytes[actual] += wire
        m.recipients[actual].add(receiver)
        m.phase_msgs[self.tag.phase] += 1
        m.phase_bytes[self.tag.phase] += wire

    def schedule(self, round_: int, sender: int, receivers: Sequence[int], payload: Any, size: int) -> None:
        """Queue a raw send by a malicious node for a later round."""
        if sender not in self._malicious:
            raise ConfigError("only malicious nodes use delayed sends")
        self._scheduled[round_].append((sender, tuple(receivers), payload, size))

    def pending(self) -> bool:
        return bool(self._outbox) or any(r >= self.round for r in self._scheduled)

    # -- delivery ------------------------------------------------------------------------

    def step(self) -> list[Envelope]:
        """Close the current round and return its valid deliveries in canonical order."""
        for sender, receivers, payload, size in self._scheduled.pop(self.round, ()):
            for r in receivers:
                self._emit(sender, sender, r, payload, size, self.tag)
        batch = self._outbox
        self._outbox = []
        batch.sort()
        tag = self.tag
        nodes = self.nodes
        m = self.metrics
        recv_msgs, recv_bytes, dropped = m.recv_msgs, m.recv_bytes, m.dropped
        trace = self.trace_lines
        delivered = []
        for env in batch:
            if env.receiver not in nodes:
                dropped["unknown-receiver"] += 1
            elif env.signed_by != env.sender:
                dropped["bad-signature"] += 1
            elif env.tag != tag:
                dropped["stale-tag"] += 1
            else:
                delivered.append(env)
                recv_msgs[env.receiver] += 1
                recv_bytes[env.receiver] += env.size
                if trace is not None:
                    trace.append(
                        f"r{self.round} {env.sender}->{env.receiver} phase={Phase(env.tag.phase).label} bytes={env.size}"
                    )
        self.round += 1
        self.tag = RoundTag(self.epoch, int(self.phase), self.round)
        return delivered

    def trace_text(self) -> str:
        return "\n".join(self.trace_lines or []) + ("\n" if self.trace_lines else "")
