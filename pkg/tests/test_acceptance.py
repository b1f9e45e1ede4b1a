"""End-to-end acceptance checks, one test per criterion, each reporting a PASS/FAIL line."""

import itertools
import math
import random

import pytest

from ringagg import crypto as C
from ringagg.cli import main
from ringagg.engine import EpochAbort, run_aggregation
from ringagg.experiments import (
    LowerBoundConfig,
    RunConfig,
    baseline_bytes,
    build_adversary,
    build_view,
    churn_cost,
    lowerbound_demo,
    montecarlo_partition,
    run_once,
    seeded_inputs,
    within_sigma,
)
from ringagg.overlay import check_honest_majority

GRID_NS = (64, 128, 256)
GRID_TAUS = (0.1, 0.25, 0.3)
GRID_TRIALS = 200
SCALING_NS = (64, 128, 256, 512)


def _grid_run(n, tau, seed):
    cfg = RunConfig(n=n, tau_frac=tau, seed=seed)
    view = build_view(cfg)
    adversary = build_adversary(cfg, view)
    majority = check_honest_majority(view, adversary.malicious).all_majority
    inputs = seeded_inputs(view.nodes(), cfg.domain, seed)
    try:
        res = run_aggregation(view, inputs, adversary, seed=seed, domain=C.ValueDomain(cfg.domain), params=cfg.params)
        exact, metrics = res.result_ok, res.metrics
    except EpochAbort as abort:
        exact, metrics = False, abort.metrics
    nodes = view.nodes()
    s = max(view.sizes())
    return {
        "majority": majority,
        "exact": exact,
        "recipients": max(len(metrics.recipients[x]) for x in nodes),
        "recipient_bound": s * (math.log2(view.g) + 2) + 2 * s,
        "byte_ratio": metrics.max_node_bytes(nodes) / metrics.mean_node_bytes(nodes),
        "byte_bound": 4 * math.log2(n) ** 2,
    }


@pytest.fixture(scope="module")
def adversarial_grid():
    return {(n, tau): [_grid_run(n, tau, seed) for seed in range(GRID_TRIALS)] for n in GRID_NS for tau in GRID_TAUS}


def test_exact_under_adversary(adversarial_grid, verdict):
    eligible = wrong = 0
    for runs in adversarial_grid.values():
        for r in runs:
            if r["majority"]:
                eligible += 1
                wrong += not r["exact"]
    ok = wrong == 0 and eligible > 0
    verdict(1, ok, f"{eligible - wrong}/{eligible} honest-majority trials exact over {len(adversarial_grid)} grid points")
    assert ok


def test_crypto_correctness(verdict):
    pk, shares = C.keygen(C.SecurityParams(64), 3, 5, seed=2024, backend="real")
    rng = random.Random(2024)

    def decrypt(c):
        return C.combine(pk, c, [C.share_decrypt(s, c) for s in shares[:3]])

    homomorphic = 0
    for i in range(1000):
        a, b, k = rng.randrange(pk.n), rng.randrange(pk.n), rng.randrange(2**64)
        ca, cb = C.encrypt(pk, a, 2 * i), C.encrypt(pk, b, 2 * i + 1)
        homomorphic += decrypt(C.add(pk, ca, cb)) == (a + b) % pk.n and decrypt(C.scale(pk, ca, k)) == a * k % pk.n

    subsets_ok = True
    for t, m in ((2, 3), (3, 5)):
        tpk, tshares = C.keygen(C.SecurityParams(64), t, m, seed=t * 7 + m, backend="real")
        c = C.encrypt(tpk, 4242, 1)
        ds = [C.share_decrypt(s, c) for s in tshares]
        subsets_ok &= all(C.combine(tpk, c, sub) == 4242 for sub in itertools.combinations(ds, t))
        for sub in itertools.combinations(ds, t - 1):
            try:
                C.combine(tpk, c, sub)
                subsets_ok = False
            except C.InsufficientSharesError:
                pass

    def flip(data, bit):
        buf = bytearray(data)
        buf[bit // 8] ^= 1 << (bit % 8)
        return bytes(buf)

    domain = C.ValueDomain([0, 1])
    c, proof = C.prove_membership(pk, 1, 77, domain)
    nbits = len(proof.transcript) * 8
    false_accepts = sum(
        C.verify_membership(pk, c, domain, C.MembershipProof(flip(proof.transcript, rng.randrange(nbits)))) for _ in range(100)
    )
    share = C.share_decrypt(shares[0], c)
    for _ in range(100):
        if rng.random() < 0.5:
            bad = C.DecryptionShare(share.index, share.key_id, flip(share.value, rng.randrange(len(share.value) * 8)), share.proof)
        else:
            t = share.proof.transcript
            bad = C.DecryptionShare(share.index, share.key_id, share.value, C.ShareProof(flip(t, rng.randrange(len(t) * 8))))
        false_accepts += C.verify_share(pk, c, bad)

    ok = homomorphic == 1000 and subsets_ok and false_accepts == 0
    verdict(2, ok, f"homomorphism {homomorphic}/1000, threshold subsets {'exact' if subsets_ok else 'WRONG'}, {false_accepts} false accepts in 200 mutations")
    assert ok


def test_message_scaling(verdict):
    # floor-rule cluster count: the power-of-two rule makes mean cluster size oscillate with n
    seeds = range(4)
    totals = {n: sum(run_once(RunConfig(n=n, seed=s, g_rule="floor")).row["total_msgs"] for s in seeds) / len(seeds) for n in SCALING_NS}
    steps = [totals[2 * n] / totals[n] for n in SCALING_NS[:-1]]
    normalised = [totals[n] / (n * math.log2(n) ** 3) for n in SCALING_NS]
    spread = max(normalised) / min(normalised)
    ok = max(steps) <= 3.0 and spread < 2
    verdict(3, ok, f"step ratios {[round(x, 2) for x in steps]}, M/(n log^3 n) spread {spread:.2f}")
    assert ok


def test_balancedness(adversarial_grid, verdict):
    runs = [r for rs in adversarial_grid.values() for r in rs]
    recipients_ok = all(r["recipients"] <= r["recipient_bound"] for r in runs)
    bytes_ok = all(r["byte_ratio"] <= r["byte_bound"] for r in runs)
    worst = max(r["byte_ratio"] / r["byte_bound"] for r in runs)
    ok = recipients_ok and bytes_ok
    verdict(4, ok, f"{len(runs)} runs, recipient bound {'held' if recipients_ok else 'VIOLATED'}, worst max/mean bytes at {worst:.2f} of bound")
    assert ok


def test_baseline_separation(verdict):
    params = C.SecurityParams(1024)
    baseline = baseline_bytes(200, params)
    measured = run_once(RunConfig(n=200, modulus_bits=1024)).row["total_bytes"]
    target = 30e9
    ok = target / 10 <= baseline <= target * 10 and baseline >= 100 * measured
    verdict(5, ok, f"baseline {baseline / 1e9:.1f} GB, measured {measured / 1e6:.1f} MB, ratio {baseline / measured:.0f}x")
    assert ok


def test_partition_majority(verdict):
    # the union bound itself is about 0.87 here, so 0.99 cannot be reached by a uniform partition
    res = montecarlo_partition(1024, 0.3, 40, 1000, seed=0)
    close = within_sigma(res.frequency, res.union_bound, res.sigma, res.trials)
    ok = res.frequency >= 0.99 and close
    verdict(6, ok, f"frequency {res.frequency:.3f} (need >= 0.99), union bound {res.union_bound:.4f}, within 3 sigma: {close}")
    assert ok


def test_lower_bound(verdict):
    res = lowerbound_demo(LowerBoundConfig(10_000, 0.3, 2, trials=500), seed=0)
    close = within_sigma(res.frequency, res.closed_form, res.sigma, 500)
    ok = res.frequency >= 0.99 and close
    verdict(7, ok, f"frequency {res.frequency:.3f}, closed form {res.closed_form:.6f}, mean K {res.mean_disjoint:.0f}")
    assert ok


def test_overlay_maintenance(verdict):
    costs = [churn_cost(n, ops=1000, seed=0).per_log_cubed for n in SCALING_NS]
    spread = max(costs) / min(costs)
    ok = spread < 2
    verdict(8, ok, f"messages per op / log^3 n = {[round(c, 2) for c in costs]}, spread {spread:.2f}")
    assert ok


def test_determinism(capsys, tmp_path, verdict):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"n": 128, "tau_frac": 0.25}')
    invocations = [
        ["run", "--config", str(cfg), "--seed", "7", "--trace"],
        ["sweep", "--ns", "64,128", "--seed", "7", "--trials", "2"],
        ["run", "--config", str(cfg), "--seed", "8", "--out", str(tmp_path / "row.csv")],
    ]
    identical = True
    for argv in invocations:
        outputs = []
        for _ in range(2):
            code = main(argv)
            out, err = capsys.readouterr()
            written = (tmp_path / "row.csv").read_text() if "--out" in argv else ""
            outputs.append((code, out, err, written))
        identical &= outputs[0] == outputs[1]
    verdict(9, identical, f"{len(invocations)} invocations repeated, outputs and traces {'identical' if identical else 'DIFFER'}")
    assert identical


def test_negative_path(verdict):
    aborted = detected = silent = 0
    for seed in range(100):
        cfg = RunConfig(n=64, tau_frac=0.3, seed=seed, corruption="targeted-cluster", targets=(0,), behaviors=("garbage_payload",))
        outcome = run_once(cfg)
        if outcome.aborted:
            aborted += 1
        elif outcome.row["result_ok"]:
            silent += 1
        else:
            detected += 1
    ok = silent == 0
    verdict(10, ok, f"100 trials: {aborted} aborted, {detected} flagged by oracle, {silent} silently wrong")
    assert ok
