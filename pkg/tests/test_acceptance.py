"""One test per acceptance criterion; each prints a single PASS/FAIL line."""

import itertools
import json
import math
import random
import time

import numpy as np
import pytest

from cgfuzz import corpus, extract, harness, passes
from cgfuzz.graph import DType, IdAllocator, TensorType, graph_hash
from cgfuzz.harness import INCONSISTENCY, CampaignConfig, run_campaign
from cgfuzz.synth import DIRECT_INSERT, BridgeImpossible, SynthesisConfig, bridge, bridge_steps

from isomorphism import from_graph, from_rows, isomorphic

pytestmark = pytest.mark.acceptance

SEED_COUNT = 4000
SOUNDNESS_TESTS = 10_000
VALIDITY_ATTEMPTS = 5_000
SWEEP_BUDGET = 20_000
REPLAY_SAMPLE = 100
BRIDGE_PAIRS = 10_000


def verdict(capsys, number, title, ok, detail):
    with capsys.disabled():
        print(f"\nAC{number} {'PASS' if ok else 'FAIL'} {title}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def root(tmp_path_factory):
    d = tmp_path_factory.mktemp("acceptance")
    corpus.write_corpus(d, seed_count=0)
    return d


@pytest.fixture(scope="module")
def seeds():
    return {f"seed-{i:04d}": corpus.gen_seed(corpus.seed_rng(0, i)) for i in range(SEED_COUNT)}


@pytest.fixture(scope="module")
def pools(root):
    return {mode: extract.extract_corpus(root, mode) for mode in extract.MODES}


@pytest.fixture(scope="module")
def soundness(pools, seeds):
    start = time.monotonic()
    res = run_campaign(CampaignConfig(budget_tests=SOUNDNESS_TESTS), pools[extract.ADAPTIVE], seeds)
    return res, time.monotonic() - start


@pytest.fixture(scope="module")
def mutant_findings(pools, seeds):
    """Raw findings from uninterrupted campaigns, one per mutant."""
    findings = []
    for m in passes.list_mutants():
        res = run_campaign(CampaignConfig(budget_tests=300, master_seed=11, mutant=m.name), pools[extract.ADAPTIVE], seeds)
        findings.extend(f.report for f in res.findings)
    return findings


def test_ac1_soundness_baseline(capsys, soundness):
    res, elapsed = soundness
    ok = res.metrics.generated == SOUNDNESS_TESTS and not res.reports and elapsed <= 600
    detail = f"{res.metrics.generated} tests, {len(res.reports)} reports, {elapsed:.0f}s (limit 600s)"
    verdict(capsys, 1, "soundness baseline", ok, detail)


def test_ac2_validity_rate(capsys, soundness, pools, seeds):
    repair = soundness[0].metrics
    cfg = CampaignConfig(budget_tests=VALIDITY_ATTEMPTS, synthesis=SynthesisConfig(strategy=DIRECT_INSERT))
    direct = run_campaign(cfg, pools[extract.ADAPTIVE], seeds).metrics
    ok = (
        repair.generated >= VALIDITY_ATTEMPTS
        and direct.generated >= VALIDITY_ATTEMPTS
        and repair.validity_rate >= 0.80
        and direct.validity_rate <= 0.10
    )
    detail = (
        f"repair {repair.validity_rate:.2%} of {repair.generated} (need >= 80%), "
        f"direct-insert {direct.validity_rate:.2%} of {direct.generated} (need <= 10%)"
    )
    verdict(capsys, 2, "validity rate", ok, detail)


def test_ac3_trigger_rate(capsys, soundness):
    m = soundness[0].metrics
    ok = m.target_tests > 0 and m.trigger_rate >= 0.75
    verdict(capsys, 3, "trigger rate", ok, f"{m.trigger_rate:.2%} over {m.target_tests} valid tests (need >= 75%)")


def test_ac4_mutant_kill_study(capsys, pools, seeds):
    start = time.monotonic()
    kills = {}
    for mode in extract.MODES:
        recs = harness.mutant_sweep(CampaignConfig(), pools[mode], seeds, total_budget=SWEEP_BUDGET)
        kills[mode] = harness.kill_count(recs)
    elapsed = time.monotonic() - start
    a = kills[extract.ADAPTIVE]
    ok = (
        len(passes.list_mutants()) >= 10
        and a >= 8
        and all(k <= a for k in kills.values())
        and kills[extract.WHOLE_GRAPH] <= a / 2
        and kills[extract.NOOPT] <= a / 2
        and elapsed <= 1800
    )
    detail = ", ".join(f"{m}={k}" for m, k in kills.items()) + f" of {len(passes.MUTANTS)}; {elapsed:.0f}s"
    verdict(capsys, 4, "mutant kill study", ok, detail)


def brute_chebyshev(a, b):
    worst = 0.0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        if math.isnan(x) or math.isnan(y):
            return math.inf
        d = 0.0 if x == y else abs(x - y)
        worst = d if d > worst else worst
    return worst


def test_ac5_oracle_exactness(capsys):
    rng = np.random.default_rng(2024)
    mismatches = 0
    for i in range(1000):
        shape = tuple(int(s) for s in rng.integers(1, 6, size=int(rng.integers(0, 4))))
        a = rng.uniform(-10, 10, shape)
        b = a + rng.normal(0, 10.0 ** -rng.integers(1, 8), shape)
        if i % 10 == 0:
            b.flat[0] = np.nan
        if i % 17 == 0:
            a.flat[-1] = b.flat[-1] = np.inf
        if i % 3 == 0:
            a, b = a.astype(np.float32), b.astype(np.float32)
        mismatches += harness.chebyshev(a, b) != brute_chebyshev(a, b)
    t = 1e-3
    up, down = np.nextafter(t, 1.0), np.nextafter(t, 0.0)
    zero = np.zeros(1)
    boundary = [
        harness.chebyshev(zero, np.array([t])) == t,
        not harness.inconsistent(harness.chebyshev(zero, np.array([t])), t),
        harness.inconsistent(harness.chebyshev(zero, np.array([up])), t),
        not harness.inconsistent(harness.chebyshev(zero, np.array([down])), t),
        harness.inconsistent(harness.chebyshev(zero, np.array([np.nan])), t),
    ]
    ok = mismatches == 0 and all(boundary)
    verdict(capsys, 5, "oracle exactness", ok, f"{mismatches}/1000 mismatches, boundary checks {boundary}")


def _reveals(report, passes_):
    if not passes_:
        return False
    v = harness.test_one(
        report.graph, [passes_], harness.OracleConfig(), passes.CompileOptions(report.mutant), report.plan.rng_seed
    )
    return v.kind == report.kind


def test_ac6_minimization(capsys, mutant_findings):
    stored = {}
    for r in mutant_findings:
        if r.kind == INCONSISTENCY:
            stored.setdefault(r.key, r)
    bad = []
    for key, r in stored.items():
        s = r.minimal_passes
        if not _reveals(r, s):
            bad.append((key, "minimal set does not reveal"))
            continue
        if len(r.pipeline) <= 3:
            subsets = [c for k in range(len(s)) for c in itertools.combinations(s, k)]
        else:
            subsets = [s[:i] + s[i + 1 :] for i in range(len(s))]
        if any(_reveals(r, sub) for sub in subsets):
            bad.append((key, "not 1-minimal"))
    ok = len(stored) > 0 and not bad
    verdict(capsys, 6, "minimization correctness", ok, f"{len(stored)} inconsistency reports checked, failures {bad}")


def test_ac7_reproducibility(capsys, tmp_path, mutant_findings, pools, seeds):
    by_id = {p.id: p for p in pools[extract.ADAPTIVE]}
    sample = random.Random(7).sample(mutant_findings, min(REPLAY_SAMPLE, len(mutant_findings)))
    failures = 0
    for i, r in enumerate(sample):
        path = tmp_path / f"r{i}.json"
        path.write_text(json.dumps(r.to_dict()))
        stored = harness.load_report(path)
        replayed = harness.replay(stored, by_id, seeds)
        failures += not (
            replayed.graph_hash == graph_hash(r.graph) and replayed.verdict.kind == r.kind and replayed.key == r.key
        )
    ok = len(sample) == REPLAY_SAMPLE and failures == 0
    verdict(capsys, 7, "reproducibility", ok, f"{len(sample)} of {len(mutant_findings)} raw findings replayed, {failures} differ")


def test_ac8_bridge_algebra(capsys):
    rng = random.Random(8)
    dtypes = list(DType)
    violations, impossible, checked = 0, 0, 0

    def rand_type():
        shape = tuple(rng.choice([0] + [1, 2, 3, 4, 5, 8] * 4) for _ in range(rng.randint(0, 4)))
        return TensorType(rng.choice(dtypes), shape)

    for _ in range(BRIDGE_PAIRS):
        src, dst = rand_type(), rand_type()
        try:
            nodes, terminal = bridge("src", src, dst, IdAllocator({"src"}))
        except BridgeImpossible:
            impossible += 1
            violations += (src.element_count == 0) == (dst.element_count == 0)
            continue
        checked += 1
        cur, cur_id = src, "src"
        for n in nodes:
            out = n.outputs[0].type
            violations += n.inputs != (cur_id,)
            if n.op in ("Pad", "Crop"):
                violations += out.element_count != dst.element_count
            elif n.op == "Reshape":
                violations += out.element_count != cur.element_count
            elif n.op == "Cast":
                violations += out.shape != cur.shape
            else:
                violations += 1
            cur, cur_id = out, n.outputs[0].id
        violations += cur != dst or cur_id != terminal or bridge_steps(nodes) > 3
    ok = violations == 0 and checked + impossible == BRIDGE_PAIRS
    detail = f"{checked} chains checked, {impossible} impossible pairs, {violations} violations"
    verdict(capsys, 8, "bridge algebra", ok, detail)


def test_ac9_pattern_fidelity(capsys, pools):
    total, bad_trigger, bad_iso = 0, 0, 0
    for mode, pool in pools.items():
        if mode == extract.NOOPT:
            continue
        for p in pool:
            total += 1
            bad_trigger += not extract.triggers(p)
            bad_iso += not isomorphic(from_graph(p.graph), from_rows(extract.abstract(p).topology))
    ok = total > 0 and bad_trigger == 0 and bad_iso == 0
    detail = f"{total} patterns, {bad_trigger} do not trigger, {bad_iso} not isomorphic to their abstraction"
    verdict(capsys, 9, "pattern fidelity", ok, detail)
