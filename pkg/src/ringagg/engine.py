"""The aggregation epoch as a deterministic state machine over a cluster view.

Order of steps: announce the epoch ring-wide, install a threshold key in the
last cluster and forward the public key around the ring, let every node
broadcast its encrypted input with a membership proof inside its cluster,
fold accepted inputs into a local aggregate, pass partial aggregates from
cluster 0 to cluster g-1, and decrypt there with a threshold of
``floor(s/2) + 1`` shares before forwarding the result ring-wise.

Node-local state is kept per node; the harness (not the protocol) decides
whether the epoch aborted by looking at honest nodes' local outcomes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from . import crypto
from .clustercomm import BroadcastInstance, global_broadcast, inter_cluster_transfer, ring_forward, secure_broadcast_batch
from .crypto import Ciphertext, DecryptionShare, MembershipProof, SecurityParams, ShareProof, ValueDomain
from .crypto.common import encode_ints, int_bytes, lp, seed_bytes
from .overlay import Overlay, check_honest_majority
from .simnet import AdversaryConfig, ConfigError, Phase, RunMetrics, World

PHASES = ("announce", "setup", "submit", "local", "ring", "decrypt")


class EpochAbort(Exception):
    """An honest node reached an undecided outcome; carries the phase reached."""

    def __init__(self, phase: str, detail: Any = None, metrics: RunMetrics | None = None, world: World | None = None):
        super().__init__(f"epoch aborted in phase {phase}" + (f" ({detail})" if detail is not None else ""))
        self.phase = phase
        self.detail = detail
        self.metrics = metrics
        self.world = world


# --- vote encoding ------------------------------------------------------------------


def encode_vote(choice: int, n_max: int) -> int:
    if choice < 0 or n_max < 1:
        raise ValueError("choice must be non-negative and n_max positive")
    return (n_max + 1) ** choice


def decode_totals(total: int, d: int, n_max: int) -> tuple[int, ...]:
    base = n_max + 1
    if not 0 <= total < base**d:
        raise ValueError(f"total {total} does not fit {d} digits in base {base}")
    counts = []
    for _ in range(d):
        total, digit = divmod(total, base)
        counts.append(digit)
    return tuple(counts)


def polling_domain(d: int, n_max: int) -> ValueDomain:
    return ValueDomain(encode_vote(j, n_max) for j in range(d))


def check_plaintext_space(domain: ValueDomain, n: int, params: SecurityParams) -> None:
    # 2^(bits-1) lower-bounds the plaintext space of both backends
    if domain.max * n >= 1 << (params.modulus_bits - 1):
        raise ConfigError(f"max(domain) * n = {domain.max * n} overflows a {params.modulus_bits}-bit plaintext space")


# --- configuration and epochs --------------------------------------------------------


@dataclass(frozen=True)
class EpochConfig:
    domain: ValueDomain
    n: int
    g: int
    threshold_size: int
    t: int
    time_window: int = 64
    backend: str = "mock"
    params: SecurityParams = field(default_factory=SecurityParams)
    strategy: str = "dolev-strong"
    epoch: int = 0

    def __post_init__(self):
        if self.threshold_size < 2:
            raise ConfigError("the threshold cluster needs at least two members")
        if self.t != self.threshold_size // 2 + 1:
            raise ConfigError("t must be floor(s/2) + 1 for the threshold cluster size s")
        if self.backend not in crypto.BACKENDS:
            raise ConfigError(f"unknown backend {self.backend!r}")
        check_plaintext_space(self.domain, self.n, self.params)

    @classmethod
    def for_view(cls, view, domain: ValueDomain, **kw) -> "EpochConfig":
        s = len(view.members(view.g - 1))
        return cls(domain, len(view.nodes()), view.g, s, s // 2 + 1, **kw)

    def digest(self) -> bytes:
        body = b"".join(
            [
                lp(self.domain.to_bytes()),
                encode_ints(self.n, self.g, self.threshold_size, self.t, self.time_window, self.epoch),
                lp(self.backend.encode()),
                encode_ints(self.params.modulus_bits, self.params.nominal_ciphertext_bits),
                lp(self.strategy.encode()),
            ]
        )
        return hashlib.sha256(b"ringagg/epoch-config" + body).digest()


class EpochQueue:
    """Postpones overlay churn requested while an epoch is running."""

    def __init__(self, overlay: Overlay, rng, k_segment: float = 2):
        self.overlay = overlay
        self.rng = rng
        self.k_segment = k_segment
        self.active = False
        self.pending: list[tuple[str, int]] = []

    def begin(self) -> None:
        self.active = True

    def request_join(self, node: int):
        if self.active:
            self.pending.append(("join", node))
            return None
        return self.overlay.cuckoo_join(node, self.rng, self.k_segment)

    def request_leave(self, node: int):
        if self.active:
            self.pending.append(("leave", node))
            return None
        return self.overlay.leave(node, self.rng, self.k_segment)

    def end(self) -> list:
        self.active = False
        reports = []
        for op, node in self.pending:
            if op == "join":
                reports.append(self.overlay.cuckoo_join(node, self.rng, self.k_segment))
            else:
                reports.append(self.overlay.leave(node, self.rng, self.k_segment))
        self.pending.clear()
        self.overlay.new_epoch()
        return reports


# --- result --------------------------------------------------------------------------------


@dataclass
class AggregationResult:
    total: int
    counts: tuple[int, ...] | None
    accepted: int
    excluded: int
    oracle_total: int
    result_ok: bool
    metrics: RunMetrics
    all_majority: bool
    exclusion_consistent: bool
    local_consistent: bool
    n: int
    g: int
    world: World = field(repr=False)


def _seed(seed, *parts) -> bytes:
    h = hashlib.sha256(b"ringagg/engine" + seed_bytes(seed))
    for p in parts:
        h.update(lp(p if isinstance(p, bytes) else str(p).encode()))
    return h.digest()


class AggregationRun:
    """One epoch of the protocol; call the step methods in order or use :meth:`run`."""

    def __init__(self, view, config: EpochConfig, world: World, seed):
        self.view = view
        self.config = config
        self.world = world
        self.seed = seed
        self.g = view.g
        self.members = [view.members(i) for i in range(view.g)]
        self.cluster_of = {x: i for i, ms in enumerate(self.members) for x in ms}
        self.last = self.g - 1
        self.pk: dict[int, Any] = {}
        self.true_pk = None
        self.shares: dict[int, Any] = {}
        self.accepted: dict[int, tuple] = {}
        self.excluded: dict[int, int] = {}
        self.local: dict[int, Ciphertext | None] = {}
        self.partial: dict[int, Any] = {}
        self.result: dict[int, Any] = {}
        self._verified: dict = {}
        self._sums: dict = {}
        self._combined: dict = {}
        self._install_adversary()

    # -- harness helpers ------------------------------------------------------------

    def _abort_if_undecided(self, phase: str, held: Mapping[int, Any], nodes, detail: Any = None) -> None:
        for x in nodes:
            if self.world.is_honest(x) and held.get(x) is None:
                raise EpochAbort(phase, self.cluster_of[x] if detail is None else detail, self.world.metrics, self.world)

    # -- adversary strategies ---------------------------------------------------------

    def _install_adversary(self) -> None:
        adv = self.world.adversary
        cfg = self.config
        fake_digest = hashlib.sha256(b"adversary/digest" + cfg.digest()).digest()
        adv.deciders[("garbage_payload", "announce")] = lambda node, v: fake_digest

        def fake_pk(node, v):
            if "fake_pk" not in adv.state:
                adv.state["fake_pk"] = crypto.keygen(cfg.params, cfg.t, cfg.threshold_size, _seed(self.seed, "adversary-key"), cfg.backend)[0]
            return adv.state["fake_pk"]

        adv.deciders[("garbage_payload", "pk")] = fake_pk

        def invalid_input(node, v):
            pk = self.pk.get(node) or self.true_pk
            bad = cfg.domain.max + 1 + (node % 7)
            c = crypto.encrypt(pk, bad, _seed(self.seed, "bad-input", node))
            self.world.oracle[c.body] = bad
            return (c, crypto.forge_membership(pk, c, cfg.domain))

        adv.deciders[("invalid_input", "input")] = invalid_input
        adv.deciders[("abstain", "input")] = lambda node, v: None
        garbage_input = b"\xff" * cfg.params.input_size(len(cfg.domain))
        adv.deciders[("garbage_payload", "input")] = lambda node, v: garbage_input

        def bad_share(node, v):
            if not isinstance(v, DecryptionShare):
                return v
            junk = _seed(self.seed, "bad-share", node)
            return DecryptionShare(v.index, v.key_id, lp(junk), ShareProof(lp(junk[:8]) + lp(junk[8:])))

        adv.deciders[("bad_share", "share")] = bad_share
        adv.deciders[("garbage_payload", "share")] = lambda node, v: b"\x00" * cfg.params.decryption_share_size()

        def shifted(node, v):
            # coordinated: every malicious sender holding v sends the same v + 1
            pk = self.pk.get(node) or self.true_pk
            if not isinstance(v, Ciphertext):
                return v
            key = ("shift", v.body)
            if key not in adv.state:
                one = crypto.encrypt(pk, 1, _seed(self.seed, "adversary-shift"))
                adv.state[key] = self._add(pk, v, one)
            return adv.state[key]

        adv.deciders[("garbage_payload", "ring")] = shifted
        adv.deciders[("garbage_payload", "result")] = lambda node, v: v + 1 if isinstance(v, int) else v

    # -- crypto with per-run memoization ------------------------------------------------------

    def _add(self, pk, a, b):
        key = (pk.key_id, a.body, b.body)
        if key not in self._sums:
            try:
                self._sums[key] = crypto.add(pk, a, b)
            except (TypeError, ValueError):
                self._sums[key] = None
        return self._sums[key]

    def _verify_input(self, pk, value) -> Ciphertext | None:
        if not (isinstance(value, tuple) and len(value) == 2):
            return None
        c, proof = value
        if not isinstance(c, Ciphertext) or not isinstance(proof, MembershipProof):
            return None
        key = (pk.key_id, c, proof)
        if key not in self._verified:
            self._verified[key] = crypto.verify_membership(pk, c, self.config.domain, proof)
        return c if self._verified[key] else None

    # -- protocol steps -------------------------------------------------------------------------

    def announce_epoch(self, initiator: int | None = None) -> None:
        world = self.world
        world.set_phase(Phase.SETUP)
        if initiator is None:
            # the launching node is honest by assumption
            initiator = next(x for ms in self.members for x in ms if world.is_honest(x))
        digest = self.config.digest()
        held = global_broadcast(world, self.view, initiator, digest, 32, self.config.strategy, kind="announce")
        self.announced = held
        self._abort_if_undecided("announce", held, self.cluster_of)
        for x in self.cluster_of:
            if world.is_honest(x) and held[x] != digest:
                raise EpochAbort("announce", self.cluster_of[x], world.metrics, world)

    def setup_threshold_cluster(self) -> None:
        cfg, world = self.config, self.world
        world.set_phase(Phase.SETUP)
        holders = self.members[self.last]
        pk, shares = crypto.keygen(cfg.params, cfg.t, len(holders), _seed(self.seed, "dealer"), cfg.backend)
        self.true_pk = pk
        for x, share in zip(holders, shares):
            self.shares[x] = share
        held = ring_forward(world, self.view, self.last, {x: pk for x in holders}, cfg.params.public_key_size(), "pk")
        for x, v in held.items():
            self.pk[x] = v if isinstance(v, crypto.PublicKey) else None
        self._abort_if_undecided("setup", self.pk, self.cluster_of)

    def submit_inputs(self, inputs: Mapping[int, int]) -> None:
        cfg, world = self.config, self.world
        world.set_phase(Phase.LOCAL)
        size = cfg.params.input_size(len(cfg.domain))
        instances = []
        for ms in self.members:
            for x in ms:
                pk = self.pk.get(x)
                value = inputs.get(x)
                honest = None
                if pk is not None and value is not None:
                    c, proof = crypto.prove_membership(pk, value, _seed(self.seed, "input", x), cfg.domain)
                    world.oracle[c.body] = value
                    honest = (c, proof)
                chosen = world.decide(x, "input", honest)
                if chosen is not None:
                    instances.append(BroadcastInstance(("input", x), x, tuple(ms), chosen, size))
        out = secure_broadcast_batch(world, instances, cfg.strategy)
        for ms in self.members:
            for y in ms:
                pk = self.pk.get(y)
                acc, bad = [], 0
                for x in sorted(ms):
                    v = out.get((y, ("input", x)))
                    if v is None:
                        continue
                    c = self._verify_input(pk, v) if pk is not None else None
                    if c is None:
                        bad += 1
                    else:
                        acc.append((x, c))
                self.accepted[y] = tuple(acc)
                self.excluded[y] = bad

    def local_aggregate(self) -> None:
        world = self.world
        world.set_phase(Phase.LOCAL)
        for i, ms in enumerate(self.members):
            for y in ms:
                pk = self.pk.get(y)
                if pk is None:
                    self.local[y] = None
                    continue
                acc = self.accepted.get(y, ())
                if not acc:
                    seed = crypto.derive_common_randomness([world.tag.to_bytes(), int_bytes(i)])
                    self.local[y] = crypto.encrypt(pk, 0, seed)
                    continue
                total = acc[0][1]
                for _, c in acc[1:]:
                    total = self._add(pk, total, c)
                    if total is None:
                        break
                self.local[y] = total

    def ring_pass(self) -> None:
        cfg, world = self.config, self.world
        world.set_phase(Phase.RING)
        for x in self.members[0]:
            self.partial[x] = self.local[x]
        for hop in range(self.g - 1):
            src, dst = hop, hop + 1
            got = inter_cluster_transfer(
                world, self.view, src, dst, {x: self.partial.get(x) for x in self.members[src]}, cfg.params.ciphertext_bytes, "ring"
            )
            for y, incoming in got.items():
                pk, local = self.pk.get(y), self.local.get(y)
                ok = isinstance(incoming, Ciphertext) and pk is not None and local is not None
                self.partial[y] = self._add(pk, incoming, local) if ok else None
            self._abort_if_undecided("ring", self.partial, self.members[dst], detail=hop)

    def threshold_decrypt(self) -> None:
        cfg, world = self.config, self.world
        world.set_phase(Phase.DECRYPT)
        holders = self.members[self.last]
        instances = []
        for x in holders:
            share, agg = self.shares.get(x), self.partial.get(x)
            honest = None
            if share is not None and isinstance(agg, Ciphertext):
                try:
                    honest = crypto.share_decrypt(share, agg)
                except (TypeError, ValueError):
                    honest = None
            chosen = world.decide(x, "share", honest)
            if chosen is not None:
                instances.append(BroadcastInstance(("share", x), x, tuple(holders), chosen, cfg.params.decryption_share_size()))
        out = secure_broadcast_batch(world, instances, cfg.strategy)
        totals = {}
        for y in holders:
            pk, agg = self.pk.get(y), self.partial.get(y)
            delivered = tuple(v for x in holders if isinstance(v := out.get((y, ("share", x))), DecryptionShare))
            totals[y] = None
            if pk is None or not isinstance(agg, Ciphertext):
                continue
            key = (pk.key_id, agg.body, delivered)
            if key not in self._combined:
                try:
                    self._combined[key] = crypto.combine(pk, agg, delivered)
                except (crypto.CryptoError, TypeError, ValueError):
                    self._combined[key] = None
            totals[y] = self._combined[key]
        self._abort_if_undecided("decrypt", totals, holders)
        held = ring_forward(world, self.view, self.last, totals, cfg.params.modulus_bytes, "result")
        self.result = held
        self._abort_if_undecided("decrypt", held, self.cluster_of)

    # -- harness summary -----------------------------------------------------------------------

    def summarize(self, n_max: int | None = None) -> AggregationResult:
        world = self.world
        honest = [x for ms in self.members for x in ms if world.is_honest(x)]
        totals = {self.result[x] for x in honest}
        total = self.result[honest[0]] if honest else None
        oracle = accepted = excluded = 0
        excl_ok = local_ok = True
        for ms in self.members:
            hs = [x for x in ms if world.is_honest(x)]
            if not hs:
                continue
            first = hs[0]
            excl_ok &= all(self.accepted[y] == self.accepted[first] for y in hs)
            local_ok &= all(self.local[y] == self.local[first] for y in hs)
            accepted += len(self.accepted[first])
            excluded += self.excluded[first]
            oracle += sum(world.oracle.get(c.body, 0) for _, c in self.accepted[first])
        counts = None
        if n_max is not None and total is not None:
            try:
                counts = decode_totals(total, len(self.config.domain), n_max)
            except ValueError:
                counts = None
        majority = check_honest_majority(self.view, world.malicious).all_majority
        return AggregationResult(
            total=total,
            counts=counts,
            accepted=accepted,
            excluded=excluded,
            oracle_total=oracle,
            result_ok=len(totals) == 1 and total == oracle,
            metrics=world.metrics,
            all_majority=majority,
            exclusion_consistent=excl_ok,
            local_consistent=local_ok,
            n=len(self.cluster_of),
            g=self.g,
            world=world,
        )

    def run(self, inputs: Mapping[int, int], initiator: int | None = None, n_max: int | None = None) -> AggregationResult:
        self.announce_epoch(initiator)
        self.setup_threshold_cluster()
        self.submit_inputs(inputs)
        self.local_aggregate()
        self.ring_pass()
        self.threshold_decrypt()
        return self.summarize(n_max)


def run_aggregation(
    view,
    inputs: Mapping[int, int],
    adversary: AdversaryConfig | None = None,
    backend: str = "mock",
    seed=0,
    *,
    domain: ValueDomain | None = None,
    params: SecurityParams | None = None,
    strategy: str = "dolev-strong",
    epoch: int = 0,
    time_window: int = 64,
    trace: bool = False,
    initiator: int | None = None,
    n_max: int | None = None,
) -> AggregationResult:
    """Run one full epoch; raises :class:`EpochAbort` if an honest node ends undecided."""
    domain = domain or ValueDomain([0, 1])
    params = params or SecurityParams()
    config = EpochConfig.for_view(view, domain, time_window=time_window, backend=backend, params=params, strategy=strategy, epoch=epoch)
    world = World(view.nodes(), adversary, epoch=epoch, trace=trace)
    return AggregationRun(view, config, world, seed).run(inputs, initiator, n_max)
