"""Experiment drivers behind the command line: sweeps, Monte Carlo studies and churn costs."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Sequence

import numpy as np
from scipy.stats import hypergeom

from .clustercomm import STRATEGIES, broadcast_cost, churn_messages
from .crypto import SecurityParams, ValueDomain
from .crypto.common import SeedStream, seed_bytes
from .engine import EpochAbort, run_aggregation
from .overlay import (
    EmptyClusterError,
    OverlayError,
    SeededRandomSource,
    SystemParams,
    bootstrap_initial,
    check_honest_majority,
    cluster_size,
    hash_order_partition,
    make_node_ids,
)
from .simnet import BEHAVIORS, ENVELOPE_OVERHEAD, AdversaryConfig, ConfigError, Phase, corrupt

CSV_COLUMNS = (
    "n",
    "tau",
    "k_cluster",
    "backend",
    "seed",
    "total_msgs",
    "total_bytes",
    "max_node_bytes",
    "mean_node_bytes",
    "phase_setup_bytes",
    "phase_local_bytes",
    "phase_ring_bytes",
    "phase_decrypt_bytes",
    "baseline_bytes",
    "result_ok",
)


# --- run configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    n: int = 64
    tau_frac: float = 0.0
    epsilon: float = 0.1
    k_cluster: float = 2
    domain: tuple[int, ...] = (0, 1)
    backend: str = "mock"
    seed: int = 0
    behaviors: tuple[str, ...] | str = "full"
    modulus_bits: int = 128
    strategy: str = "dolev-strong"
    layout: str = "overlay"
    g_rule: str = "pow2"
    corruption: str = "uniform"
    targets: tuple[int, ...] = (0,)
    unsafe: bool = False

    def __post_init__(self):
        object.__setattr__(self, "domain", tuple(self.domain))
        object.__setattr__(self, "targets", tuple(self.targets))
        if not isinstance(self.behaviors, str):
            object.__setattr__(self, "behaviors", tuple(self.behaviors))
            unknown = set(self.behaviors) - set(BEHAVIORS)
            if unknown:
                raise ConfigError(f"unknown behaviors {sorted(unknown)}")
        elif self.behaviors != "full":
            raise ConfigError("behaviors must be a list of names or 'full'")
        if self.layout not in ("overlay", "static"):
            raise ConfigError(f"unknown layout {self.layout!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown broadcast strategy {self.strategy!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def replace(self, **kw) -> "RunConfig":
        return RunConfig(**{**asdict(self), **kw})

    @property
    def params(self) -> SecurityParams:
        return SecurityParams(self.modulus_bits)


def build_view(cfg: RunConfig):
    nodes = make_node_ids(cfg.n, cfg.seed)
    s = cluster_size(cfg.n, cfg.k_cluster)
    if cfg.layout == "static":
        return hash_order_partition(nodes, s)
    sys = SystemParams(cfg.n, epsilon=cfg.epsilon, tau_frac=min(cfg.tau_frac, 0.5 - cfg.epsilon - 1e-9), k_cluster=cfg.k_cluster, seed=cfg.seed)
    return bootstrap_initial(nodes, sys, g_rule=cfg.g_rule)


def build_adversary(cfg: RunConfig, view) -> AdversaryConfig:
    mal = corrupt(cfg.corruption, view.nodes(), cfg.tau_frac, cfg.seed, cfg.epsilon, view=view, targets=cfg.targets, unsafe=cfg.unsafe)
    if not mal:
        return AdversaryConfig.honest()
    if cfg.behaviors == "full":
        return AdversaryConfig.full_suite(mal, cfg.seed)
    return AdversaryConfig.uniform_behavior(mal, cfg.behaviors, cfg.seed)


def seeded_inputs(nodes: Sequence[int], domain: Sequence[int], seed) -> dict[int, int]:
    stream = SeedStream(seed, b"experiments/inputs")
    return {x: domain[stream.randbelow(len(domain))] for x in nodes}


# --- baseline --------------------------------------------------------------------------


def baseline_messages(n: int, strategy: str = "dolev-strong") -> int:
    """Non-layout protocol: every node broadcasts its input and its decryption share to all n nodes."""
    return 2 * n * broadcast_cost(n, strategy)


def baseline_bytes(n: int, params: SecurityParams, d: int = 2, strategy: str = "dolev-strong") -> int:
    overhead = ENVELOPE_OVERHEAD
    per_bcast = broadcast_cost(n, strategy)
    return n * per_bcast * (overhead + params.input_size(d)) + n * per_bcast * (overhead + params.decryption_share_size())


# --- single runs and sweeps --------------------------------------------------------------


@dataclass
class RunOutcome:
    row: dict
    aborted: str | None = None
    abort_detail: Any = None
    trace: str = ""
    overlay_dump: str = ""
    result: Any = None


def _row(cfg: RunConfig, metrics, nodes, ok) -> dict:
    return {
        "n": cfg.n,
        "tau": cfg.tau_frac,
        "k_cluster": cfg.k_cluster,
        "backend": cfg.backend,
        "seed": cfg.seed,
        "total_msgs": metrics.total_msgs,
        "total_bytes": metrics.total_bytes,
        "max_node_bytes": metrics.max_node_bytes(nodes),
        "mean_node_bytes": round(metrics.mean_node_bytes(nodes), 3),
        "phase_setup_bytes": metrics.phase_bytes_of(Phase.SETUP),
        "phase_local_bytes": metrics.phase_bytes_of(Phase.LOCAL),
        "phase_ring_bytes": metrics.phase_bytes_of(Phase.RING),
        "phase_decrypt_bytes": metrics.phase_bytes_of(Phase.DECRYPT),
        "baseline_bytes": baseline_bytes(cfg.n, cfg.params, len(cfg.domain), cfg.strategy),
        "result_ok": ok,
    }


def error_row(cfg: RunConfig, message: str) -> dict:
    row = {c: "" for c in CSV_COLUMNS}
    row.update(n=cfg.n, tau=cfg.tau_frac, k_cluster=cfg.k_cluster, backend=cfg.backend, seed=cfg.seed)
    row["result_ok"] = "error:" + message.replace(",", ";")
    return row


def run_once(cfg: RunConfig, trace: bool = False) -> RunOutcome:
    view = build_view(cfg)
    adversary = build_adversary(cfg, view)
    nodes = view.nodes()
    inputs = seeded_inputs(nodes, cfg.domain, cfg.seed)
    dump = view.dump()
    try:
        res = run_aggregation(
            view,
            inputs,
            adversary,
            cfg.backend,
            cfg.seed,
            domain=ValueDomain(cfg.domain),
            params=cfg.params,
            strategy=cfg.strategy,
            trace=trace,
        )
    except EpochAbort as abort:
        text = abort.world.trace_text() if trace and abort.world else ""
        return RunOutcome(_row(cfg, abort.metrics, nodes, False), abort.phase, abort.detail, text, dump)
    text = res.world.trace_text() if trace else ""
    return RunOutcome(_row(cfg, res.metrics, nodes, res.result_ok), trace=text, overlay_dump=dump, result=res)


def sweep_scaling(ns: Sequence[int], template: RunConfig) -> list[dict]:
    rows = []
    for n in ns:
        cfg = template.replace(n=n)
        try:
            rows.append(run_once(cfg).row)
        except (ConfigError, OverlayError, ValueError) as exc:
            rows.append(error_row(cfg, str(exc)))
    return rows


# --- partition Monte Carlo -----------------------------------------------------------------


@dataclass(frozen=True)
class PartitionResult:
    n: int
    tau_frac: float
    s: int
    trials: int
    frequency: float
    cluster_failure: tuple[float, ...]
    union_bound: float
    sigma: float

    @property
    def deviation(self) -> float:
        """Distance between observed and predicted frequency in standard errors."""
        if self.sigma == 0:
            return 0.0 if self.frequency == self.union_bound else math.inf
        return abs(self.frequency - self.union_bound) / self.sigma


def block_sizes(n: int, s: int) -> list[int]:
    g = n // s
    return [s] * (g - 1) + [n - s * (g - 1)]


def exact_cluster_failure(n: int, malicious: int, size: int) -> float:
    # honest majority fails iff malicious >= ceil(size / 2)
    return float(hypergeom.sf((size + 1) // 2 - 1, n, malicious, size))


def montecarlo_partition(n: int, tau_frac: float, s: int, trials: int, seed=0) -> PartitionResult:
    """Uniform random partitions into blocks of ``s`` (remainder to the last block)."""
    if s < 2 or n < 2 * s:
        raise ValueError("need s >= 2 and n >= 2s")
    malicious = int(tau_frac * n + 1e-9)
    sizes = block_sizes(n, s)
    bounds = np.cumsum([0] + sizes)
    rng = np.random.default_rng(int.from_bytes(seed_bytes(seed)[:8], "big"))
    bad = np.zeros(n, dtype=np.int32)
    bad[:malicious] = 1
    good = 0
    for _ in range(trials):
        counts = np.add.reduceat(rng.permutation(bad), bounds[:-1])
        good += bool(np.all(2 * (np.array(sizes) - counts) > np.array(sizes)))
    fails = tuple(exact_cluster_failure(n, malicious, sz) for sz in sizes)
    union = max(0.0, 1.0 - sum(fails))
    sigma = math.sqrt(union * (1 - union) / trials)
    return PartitionResult(n, tau_frac, s, trials, good / trials, fails, union, sigma)


# --- lower bound ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LowerBoundConfig:
    n: int
    epsilon: float
    omega_plus: int
    omega_minus: int | None = None
    c_frac: float = 1.0
    trials: int = 100

    def __post_init__(self):
        if self.omega_plus < 1:
            raise ConfigError("omega_plus must be at least 1")
        if not 0 <= self.epsilon < 1:
            raise ConfigError("epsilon must lie in [0, 1)")
        if not 0 < self.c_frac <= 1:
            raise ConfigError("c_frac must lie in (0, 1]")
        if self.omega_plus >= self.n:
            raise ConfigError("omega_plus must be below n")


@dataclass(frozen=True)
class LowerBoundResult:
    config: LowerBoundConfig
    frequency: float
    mean_disjoint: float
    closed_form: float
    sigma: float


def _draw_recipients(rng, n: int, senders: int, omega_plus: int, omega_minus: int | None) -> np.ndarray:
    out = np.empty((senders, omega_plus), dtype=np.int64)
    load = np.zeros(n, dtype=np.int64)
    for i in range(senders):
        # uniform over nodes with spare reception capacity, same law as rejecting capped draws
        eligible = np.flatnonzero(load < omega_minus) if omega_minus is not None else np.arange(n)
        eligible = eligible[eligible != i]
        if len(eligible) < omega_plus:
            raise ConfigError(f"reception cap {omega_minus} leaves sender {i} fewer than {omega_plus} recipients")
        pick = rng.choice(eligible, size=omega_plus, replace=False)
        load[pick] += 1
        out[i] = pick
    return out


def greedy_disjoint(recipients) -> list[int]:
    """Senders kept in order whenever their recipient set avoids all earlier kept sets."""
    rows = recipients.tolist() if hasattr(recipients, "tolist") else list(recipients)
    used: set[int] = set()
    kept = []
    for i, row in enumerate(rows):
        if used.isdisjoint(row):
            used.update(row)
            kept.append(i)
    return kept


def _uniform_recipients(rng, n: int, senders: int, omega_plus: int) -> np.ndarray:
    """Distinct recipients per sender, never the sender itself, by row-wise rejection."""
    rec = rng.integers(0, n - 1, size=(senders, omega_plus))
    while True:
        srt = np.sort(rec, axis=1)
        dup = (srt[:, 1:] == srt[:, :-1]).any(axis=1) if omega_plus > 1 else np.zeros(senders, dtype=bool)
        if not dup.any():
            break
        rec[dup] = rng.integers(0, n - 1, size=(int(dup.sum()), omega_plus))
    return rec + (rec >= np.arange(senders)[:, None])


def lowerbound_demo(config: LowerBoundConfig, seed=0) -> LowerBoundResult:
    n = config.n
    senders = max(1, math.ceil(config.c_frac * n))
    malicious = int(config.epsilon * n + 1e-9)
    rng = np.random.default_rng(int.from_bytes(seed_bytes(seed)[:8], "big"))
    hits = 0
    disjoint_counts = []
    for _ in range(config.trials):
        if config.omega_minus is None:
            rec = _uniform_recipients(rng, n, senders, config.omega_plus)
        else:
            rec = _draw_recipients(rng, n, senders, config.omega_plus, config.omega_minus)
        kept = greedy_disjoint(rec)
        disjoint_counts.append(len(kept))
        bad = np.zeros(n, dtype=bool)
        bad[rng.choice(n, size=malicious, replace=False)] = True
        hits += bool(bad[rec[kept]].all(axis=1).any())
    k_mean = float(np.mean(disjoint_counts))
    p = config.epsilon**config.omega_plus
    closed = float(np.mean([1 - (1 - p) ** k for k in disjoint_counts]))
    sigma = math.sqrt(closed * (1 - closed) / config.trials)
    return LowerBoundResult(config, hits / config.trials, k_mean, closed, sigma)


def within_sigma(observed: float, predicted: float, sigma: float, trials: int, width: float = 3.0) -> bool:
    # half-trial continuity correction keeps the test meaningful when sigma is ~0
    return abs(observed - predicted) <= width * sigma + 0.5 / trials


# --- churn -----------------------------------------------------------------------------------


@dataclass(frozen=True)
class ChurnCost:
    n: int
    g: int
    ops: int
    mean_messages: float

    @property
    def per_log_cubed(self) -> float:
        return self.mean_messages / math.log2(self.n) ** 3


def churn_cost(n: int, ops: int = 1000, seed=0, k_cluster: float = 2, k_segment: float = 2, g_rule: str = "floor", strategy: str = "dolev-strong") -> ChurnCost:
    """Mean priced message count over alternating join and random leave operations."""
    nodes = make_node_ids(n, seed)
    ov = bootstrap_initial(nodes, SystemParams(n, k_cluster=k_cluster, seed=seed), g_rule=g_rule)
    rng = SeededRandomSource(seed_bytes(seed) + b"/churn-rng")
    pick = SeedStream(seed, b"experiments/churn-pick")
    fresh = iter(make_node_ids(ops, seed, start=n))
    live = list(nodes)
    total = 0
    for i in range(ops):
        if i % 2 == 0:
            x = next(fresh)
            report = ov.cuckoo_join(x, rng, k_segment)
            live.append(x)
        else:
            x = live.pop(pick.randbelow(len(live)))
            report = ov.leave(x, rng, k_segment)
        total += churn_messages(report, strategy)
    ov.check_partition()
    return ChurnCost(n, ov.g, ops, total / ops)


@dataclass(frozen=True)
class ChurnMajorityTrial:
    survived: bool
    final_majority: bool
    min_majority_fraction: float
    operations: int
    error: str | None = None
    first_failure: int | None = None


def join_majority_trial(n0: int, joins: int, tau_frac: float, k: float, seed, checkpoints: int = 10) -> ChurnMajorityTrial:
    """Honest start, then ``joins`` cuckoo joins, each joiner corrupted with probability tau."""
    nodes = make_node_ids(n0, seed)
    ov = bootstrap_initial(nodes, SystemParams(n0, epsilon=0.05, tau_frac=0, k_cluster=k, seed=seed))
    rng = SeededRandomSource(seed_bytes(seed) + b"/join-rng")
    coin = SeedStream(seed, b"experiments/join-corrupt")
    bad: set[int] = set()
    every = max(1, joins // checkpoints)
    lowest = 1.0
    for i, x in enumerate(make_node_ids(joins, seed, start=n0)):
        if coin.randbelow(1 << 20) < tau_frac * (1 << 20):
            bad.add(x)
        ov.cuckoo_join(x, rng, k)
        if (i + 1) % every == 0:
            rep = check_honest_majority(ov, bad)
            lowest = min(lowest, sum(c.majority for c in rep.clusters) / ov.g)
    final = check_honest_majority(ov, bad).all_majority
    return ChurnMajorityTrial(lowest == 1.0 and final, final, lowest, joins)


def targeted_leave_trial(n0: int, leaves: int, tau_frac: float, k: float, seed) -> ChurnMajorityTrial:
    """The adversary repeatedly forces out an honest node of the weakest cluster."""
    nodes = make_node_ids(n0, seed)
    ov = bootstrap_initial(nodes, SystemParams(n0, epsilon=0.05, tau_frac=0, k_cluster=k, seed=seed))
    bad = set(corrupt("uniform", nodes, tau_frac, seed))
    rng = SeededRandomSource(seed_bytes(seed) + b"/leave-rng")
    lowest = 1.0
    first_failure = None
    for step in range(leaves):
        rep = check_honest_majority(ov, bad)
        lowest = min(lowest, sum(c.majority for c in rep.clusters) / ov.g)
        if first_failure is None and not rep.all_majority:
            first_failure = step
        weakest = min(rep.clusters, key=lambda c: (2 * c.honest - c.size, c.index))
        victims = [x for x in ov.members(weakest.index) if x not in bad]
        if not victims:
            return ChurnMajorityTrial(False, False, lowest, step, first_failure=first_failure)
        try:
            ov.leave(victims[0], rng, k)
        except EmptyClusterError as exc:
            return ChurnMajorityTrial(False, False, lowest, step + 1, str(exc), first_failure if first_failure is not None else step + 1)
    final = check_honest_majority(ov, bad).all_majority
    if first_failure is None and not final:
        first_failure = leaves
    return ChurnMajorityTrial(first_failure is None, final, lowest, leaves, first_failure=first_failure)
