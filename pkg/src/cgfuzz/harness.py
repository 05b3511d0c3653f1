"""Campaign driver: oracles, pass-set minimization, deduplication, metrics
and reports."""

from __future__ import annotations

import hashlib
import json
import math
import random
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import interp, passes
from .extract import AbstractPattern, Pattern, abstract
from .graph import Graph, graph_from_dict, graph_hash, graph_to_dict
from .synth import (
    REPAIR,
    SeedPool,
    SynthesisConfig,
    SynthesisOutcome,
    SynthesisPlan,
    high_order_admit,
    synthesize,
)

CLEAN = "clean"
CRASH = "crash"
INCONSISTENCY = "inconsistency"

FULL_VS_NONE = "full-pipeline-vs-none"
RANDOM_SUBSETS = "random-subsets"

REPORT_SCHEMA = "cgfuzz.report/1"


class ShapeMismatch(ValueError):
    pass


class NotReproducible(AssertionError):
    pass


@dataclass(frozen=True)
class OracleConfig:
    threshold: float = 1e-3
    input_seeds: int = 3
    sampler: str = RANDOM_SUBSETS
    subsets: int = 2

    def __post_init__(self) -> None:
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if self.sampler not in (FULL_VS_NONE, RANDOM_SUBSETS):
            raise ValueError(f"unknown sampler {self.sampler!r}")


# ---------------------------------------------------------------------------
# oracles


def chebyshev(a, b) -> float:
    """Max absolute elementwise difference; NaN anywhere gives +inf."""
    x = np.asarray(getattr(a, "data", a), dtype=np.float64)
    y = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeMismatch(f"shapes {list(x.shape)} and {list(y.shape)} differ")
    if x.size == 0:
        return 0.0
    if np.isnan(x).any() or np.isnan(y).any():
        return math.inf
    with np.errstate(invalid="ignore"):
        diff = np.where(x == y, 0.0, np.abs(x - y))
    return float(diff.max())


def inconsistent(distance: float, threshold: float) -> bool:
    return distance > threshold


@dataclass(frozen=True)
class Verdict:
    kind: str
    pipeline: tuple[str, ...] = ()
    message: str = ""
    distance: float = 0.0
    fired: frozenset[str] = frozenset()

    @property
    def is_bug(self) -> bool:
        return self.kind != CLEAN


def sample_pipelines(rng_seed: int, cfg: OracleConfig) -> list[tuple[str, ...]]:
    full = tuple(passes.PIPELINE)
    if cfg.sampler == FULL_VS_NONE:
        return [full]
    rng = random.Random(f"pipelines:{rng_seed}")
    out = [full]
    for _ in range(cfg.subsets):
        picked = [p for p in full if rng.random() < 0.5] or [rng.choice(full)]
        out.append(tuple(picked))
    return out


def _outputs_distance(ref: list[interp.TensorValue], got: list[interp.TensorValue]) -> float:
    if len(ref) != len(got):
        return math.inf
    worst = 0.0
    for a, b in zip(ref, got):
        try:
            worst = max(worst, chebyshev(a, b))
        except ShapeMismatch:
            return math.inf
    return worst


def test_one(
    graph: Graph,
    pipelines: Sequence[Sequence[str]],
    cfg: OracleConfig = OracleConfig(),
    options: passes.CompileOptions | None = None,
    rng_seed: int = 0,
) -> Verdict:
    fired: set[str] = set()
    optimized: list[tuple[tuple[str, ...], Graph]] = []
    for pl in pipelines:
        pl = tuple(pl)
        r = passes.run_pipeline(pl, graph, options)
        fired.update(r.fired)
        if r.crash is not None:
            return Verdict(CRASH, pl, r.crash.message, fired=frozenset(fired))
        optimized.append((pl, r.graph))
    worst = 0.0
    for s in range(cfg.input_seeds):
        inputs = interp.gen_inputs(graph, rng_seed + s)
        ref = interp.execute(graph, inputs)
        cache: list[tuple[Graph, float]] = []
        for pl, g in optimized:
            if g is graph:
                continue
            d = next((dist for other, dist in cache if other == g), None)
            if d is None:
                try:
                    d = _outputs_distance(ref, interp.execute(g, inputs))
                except interp.ExecError as e:
                    return Verdict(CRASH, pl, f"runtime: {e}", fired=frozenset(fired))
                cache.append((g, d))
            if inconsistent(d, cfg.threshold):
                return Verdict(INCONSISTENCY, pl, distance=d, fired=frozenset(fired))
            worst = max(worst, d)
    return Verdict(CLEAN, distance=worst, fired=frozenset(fired))


# ---------------------------------------------------------------------------
# minimization and dedup

_QUOTED = re.compile(r"'[^']*'")
_TYPE = re.compile(r"\b(?:F32|F64|I32|I64|Bool)\[[^\]]*\]")
_NUMBER = re.compile(r"-?\d+(?:\.\d+)?(?:e-?\d+)?")


def normalize_message(msg: str) -> str:
    msg = _QUOTED.sub("''", msg)
    msg = _TYPE.sub("T", msg)
    return _NUMBER.sub("N", msg)


def dedup_key(kind: str, message: str = "", passes_: Iterable[str] = ()) -> str:
    if kind == CRASH:
        return f"crash:{normalize_message(message)}"
    return "inconsistency:" + ",".join(sorted(passes_))


def _reveals(verdict: Verdict, kind: str, message: str) -> bool:
    if verdict.kind != kind:
        return False
    return kind != CRASH or normalize_message(verdict.message) == normalize_message(message)


def ddmin(items: Sequence[str], test: Callable[[tuple[str, ...]], bool]) -> tuple[str, ...]:
    items = tuple(items)
    n = 2
    while len(items) >= 2:
        size = math.ceil(len(items) / n)
        chunks = [items[i : i + size] for i in range(0, len(items), size)]
        for c in chunks:
            if test(c):
                items, n = c, 2
                break
        else:
            for i in range(len(chunks)):
                comp = tuple(x for j, c in enumerate(chunks) if j != i for x in c)
                if test(comp):
                    items, n = comp, max(n - 1, 2)
                    break
            else:
                if n >= len(items):
                    break
                n = min(len(items), 2 * n)
    return items


def minimize_passes(
    graph: Graph,
    pipeline: Sequence[str],
    cfg: OracleConfig = OracleConfig(),
    options: passes.CompileOptions | None = None,
    rng_seed: int = 0,
    verdict: Verdict | None = None,
) -> tuple[str, ...]:
    """A 1-minimal sub-sequence of ``pipeline`` that still reveals the bug."""
    memo: dict[tuple[str, ...], bool] = {}
    first = verdict or test_one(graph, [pipeline], cfg, options, rng_seed)
    if not first.is_bug:
        raise NotReproducible("the failing pipeline does not reveal a bug")

    def test(sub: tuple[str, ...]) -> bool:
        if sub not in memo:
            memo[sub] = bool(sub) and _reveals(test_one(graph, [sub], cfg, options, rng_seed), first.kind, first.message)
        return memo[sub]

    if not test(tuple(pipeline)):
        raise NotReproducible("the failing pipeline does not reveal the same bug on its own")
    items = ddmin(tuple(pipeline), test)
    changed = True
    while changed:
        changed = False
        for i in range(len(items)):
            sub = items[:i] + items[i + 1 :]
            if test(sub):
                items, changed = sub, True
                break
    return items


@dataclass
class BugReport:
    kind: str
    key: str
    graph: Graph
    plan: SynthesisPlan
    lineage: dict[str, dict]
    pipelines: tuple[tuple[str, ...], ...]
    pipeline: tuple[str, ...]
    minimal_passes: tuple[str, ...]
    message: str = ""
    distance: float = 0.0
    mutant: str | None = None
    pattern_target: str | None = None
    strategy: str = REPAIR

    @property
    def graph_hash(self) -> str:
        return graph_hash(self.graph)

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "kind": self.kind,
            "key": self.key,
            "message": self.message,
            "distance": self.distance if math.isfinite(self.distance) else "inf",
            "mutant": self.mutant,
            "pattern_target": self.pattern_target,
            "minimal_passes": list(self.minimal_passes),
            "failing_pipeline": list(self.pipeline),
            "provenance": {
                "plan": self.plan.to_dict(),
                "lineage": self.lineage,
                "pipelines": [list(p) for p in self.pipelines],
                "strategy": self.strategy,
            },
            "graph_hash": self.graph_hash,
            "graph": graph_to_dict(self.graph),
        }

    @staticmethod
    def from_dict(d: Mapping) -> BugReport:
        prov = d["provenance"]
        dist = d.get("distance", 0.0)
        return BugReport(
            kind=d["kind"],
            key=d["key"],
            graph=graph_from_dict(d["graph"]),
            plan=SynthesisPlan.from_dict(prov["plan"]),
            lineage=dict(prov.get("lineage", {})),
            pipelines=tuple(tuple(p) for p in prov["pipelines"]),
            pipeline=tuple(d["failing_pipeline"]),
            minimal_passes=tuple(d["minimal_passes"]),
            message=d.get("message", ""),
            distance=math.inf if dist == "inf" else float(dist),
            mutant=d.get("mutant"),
            pattern_target=d.get("pattern_target"),
            strategy=prov.get("strategy", REPAIR),
        )


class BugStore:
    def __init__(self) -> None:
        self.reports: dict[str, BugReport] = {}

    def add(self, report: BugReport) -> bool:
        if report.key in self.reports:
            return False
        self.reports[report.key] = report
        return True

    def __len__(self) -> int:
        return len(self.reports)


def dedup(report: BugReport, store: BugStore) -> bool:
    return store.add(report)


# ---------------------------------------------------------------------------
# campaign


@dataclass(frozen=True)
class CampaignConfig:
    budget_tests: int | None = 1000
    budget_seconds: float | None = None
    master_seed: int = 0
    oracle: OracleConfig = OracleConfig()
    synthesis: SynthesisConfig = SynthesisConfig()
    mutant: str | None = None
    workers: int = 1
    batch_size: int = 32
    stop_on_first_bug: bool = False
    admit: bool = True

    def __post_init__(self) -> None:
        if self.budget_tests is None and self.budget_seconds is None:
            raise ValueError("a campaign needs a test or time budget")


@dataclass
class CampaignMetrics:
    generated: int = 0
    valid: int = 0
    discarded: dict[str, int] = field(default_factory=dict)
    pass_triggers: dict[str, int] = field(default_factory=dict)
    target_tests: int = 0
    target_triggered: int = 0
    clean: int = 0
    crashes: int = 0
    inconsistencies: int = 0
    distinct_bugs: int = 0
    admitted: int = 0
    reused: int = 0
    bridged: int = 0
    bridge_nodes: int = 0
    rewired: int = 0
    appended: int = 0
    fallback: int = 0
    wall_clock: float = 0.0

    @property
    def validity_rate(self) -> float:
        return self.valid / self.generated if self.generated else 0.0

    @property
    def trigger_rate(self) -> float:
        return self.target_triggered / self.target_tests if self.target_tests else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["validity_rate"] = self.validity_rate
        d["trigger_rate"] = self.trigger_rate
        return d


@dataclass
class Finding:
    """One raw bug occurrence, kept for reproducibility sampling."""

    report: BugReport
    new: bool


@dataclass
class CampaignResult:
    metrics: CampaignMetrics
    store: BugStore
    findings: list[Finding]
    pool: SeedPool

    @property
    def reports(self) -> list[BugReport]:
        return list(self.store.reports.values())


@dataclass
class _PlanResult:
    outcome: SynthesisOutcome
    pipelines: tuple[tuple[str, ...], ...] = ()
    verdict: Verdict | None = None
    minimal: tuple[str, ...] = ()


def process_plan(
    plan: SynthesisPlan,
    pattern: Pattern,
    seed: Graph,
    cfg: CampaignConfig,
    abstract_pattern: AbstractPattern | None = None,
) -> _PlanResult:
    outcome = synthesize(plan, pattern, seed, cfg.synthesis, abstract_pattern)
    if not outcome.ok:
        return _PlanResult(outcome)
    options = passes.CompileOptions(cfg.mutant)
    pipelines = tuple(sample_pipelines(plan.rng_seed, cfg.oracle))
    verdict = test_one(outcome.graph, pipelines, cfg.oracle, options, plan.rng_seed)
    minimal: tuple[str, ...] = ()
    if verdict.is_bug:
        minimal = minimize_passes(outcome.graph, verdict.pipeline, cfg.oracle, options, plan.rng_seed)
    return _PlanResult(outcome, pipelines, verdict, minimal)


def _worker(args) -> _PlanResult:
    return process_plan(*args)


class _Lineage:
    def __init__(self) -> None:
        self.plans: dict[str, dict] = {}

    def chain(self, seed_id: str) -> dict[str, dict]:
        out = {}
        while seed_id in self.plans:
            out[seed_id] = self.plans[seed_id]
            seed_id = self.plans[seed_id]["seed"]
        return out


def run_campaign(
    cfg: CampaignConfig,
    patterns: Sequence[Pattern],
    seeds: Mapping[str, Graph] | SeedPool,
    on_batch: Callable[[CampaignMetrics], None] | None = None,
) -> CampaignResult:
    pool = seeds if isinstance(seeds, SeedPool) else SeedPool(seeds)
    metrics = CampaignMetrics()
    store = BugStore()
    findings: list[Finding] = []
    if not patterns or not len(pool):
        return CampaignResult(metrics, store, findings, pool)
    by_id = {p.id: p for p in patterns}
    pattern_ids = [p.id for p in patterns]
    abstracts = {p.id: abstract(p) for p in patterns}
    master = random.Random(cfg.master_seed)
    lineage = _Lineage()
    start = time.monotonic()
    executor = ProcessPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        while True:
            if cfg.budget_tests is not None and metrics.generated >= cfg.budget_tests:
                break
            if cfg.budget_seconds is not None and time.monotonic() - start >= cfg.budget_seconds:
                break
            n = cfg.batch_size
            if cfg.budget_tests is not None:
                n = min(n, cfg.budget_tests - metrics.generated)
            if cfg.budget_seconds is not None and metrics.generated:
                # shrink the final batches so a wall-clock budget is not overshot
                elapsed = time.monotonic() - start
                per_test = elapsed / metrics.generated
                n = min(n, max(1, int((cfg.budget_seconds - elapsed) / per_test)))
            batch = []
            for _ in range(n):
                sid = master.choice(pool.ids)
                pid = master.choice(pattern_ids)
                point = master.randint(0, len(pool[sid].nodes))
                batch.append(SynthesisPlan(sid, pid, point, master.getrandbits(63)))
            args = [(pl, by_id[pl.pattern_id], pool[pl.seed_id], cfg, abstracts[pl.pattern_id]) for pl in batch]
            results = list(executor.map(_worker, args)) if executor else [_worker(a) for a in args]
            stop = False
            for plan, r in zip(batch, results):
                metrics.generated += 1
                o = r.outcome
                if not o.ok:
                    metrics.discarded[o.discarded] = metrics.discarded.get(o.discarded, 0) + 1
                    continue
                metrics.valid += 1
                metrics.reused += o.reused
                metrics.bridged += o.bridged
                metrics.bridge_nodes += o.bridge_nodes
                metrics.rewired += o.rewired
                metrics.appended += o.appended
                metrics.fallback += int(o.fallback)
                v = r.verdict
                for p in v.fired:
                    metrics.pass_triggers[p] = metrics.pass_triggers.get(p, 0) + 1
                target = by_id[plan.pattern_id].target
                if target is not None:
                    metrics.target_tests += 1
                    metrics.target_triggered += int(target in v.fired)
                if v.kind == CLEAN:
                    metrics.clean += 1
                    if cfg.admit:
                        ok, sid = high_order_admit(o.graph, True, pool, cfg.synthesis.node_cap)
                        if ok:
                            lineage.plans[sid] = plan.to_dict()
                            metrics.admitted += 1
                    continue
                if v.kind == CRASH:
                    metrics.crashes += 1
                else:
                    metrics.inconsistencies += 1
                report = BugReport(
                    kind=v.kind,
                    key=dedup_key(v.kind, v.message, r.minimal),
                    graph=o.graph,
                    plan=plan,
                    lineage=lineage.chain(plan.seed_id),
                    pipelines=r.pipelines,
                    pipeline=v.pipeline,
                    minimal_passes=r.minimal,
                    message=v.message,
                    distance=v.distance,
                    mutant=cfg.mutant,
                    pattern_target=target,
                    strategy=cfg.synthesis.strategy,
                )
                new = dedup(report, store)
                findings.append(Finding(report, new))
                if new:
                    metrics.distinct_bugs += 1
                if cfg.stop_on_first_bug:
                    stop = True
                    break
            metrics.wall_clock = time.monotonic() - start
            if on_batch is not None:
                on_batch(metrics)
            if stop:
                break
    finally:
        if executor is not None:
            executor.shutdown()
    metrics.wall_clock = time.monotonic() - start
    return CampaignResult(metrics, store, findings, pool)


# ---------------------------------------------------------------------------
# replay


@dataclass(frozen=True)
class ReplayResult:
    graph_hash: str
    verdict: Verdict
    key: str
    minimal_passes: tuple[str, ...]

    def matches(self, report: BugReport) -> bool:
        return (
            self.graph_hash == report.graph_hash
            and self.verdict.kind == report.kind
            and self.key == report.key
        )


def rederive(
    plan: SynthesisPlan,
    lineage: Mapping[str, Mapping],
    patterns: Mapping[str, Pattern],
    seeds: Mapping[str, Graph],
    cfg: SynthesisConfig = SynthesisConfig(),
) -> SynthesisOutcome:
    def seed_graph(seed_id: str) -> Graph:
        if seed_id in lineage:
            parent = SynthesisPlan.from_dict(lineage[seed_id])
            o = rederive(parent, lineage, patterns, seeds, cfg)
            if not o.ok:
                raise NotReproducible(f"admitted seed {seed_id} no longer synthesizes: {o.discarded}")
            return o.graph
        return seeds[seed_id]

    return synthesize(plan, patterns[plan.pattern_id], seed_graph(plan.seed_id), cfg)


def replay(
    report: BugReport,
    patterns: Mapping[str, Pattern],
    seeds: Mapping[str, Graph],
    oracle: OracleConfig = OracleConfig(),
    synthesis: SynthesisConfig = SynthesisConfig(),
) -> ReplayResult:
    cfg = SynthesisConfig(synthesis.node_cap, synthesis.bridge_cap, report.strategy)
    o = rederive(report.plan, report.lineage, patterns, seeds, cfg)
    if not o.ok:
        raise NotReproducible(f"plan no longer synthesizes: {o.discarded}")
    options = passes.CompileOptions(report.mutant)
    v = test_one(o.graph, report.pipelines, oracle, options, report.plan.rng_seed)
    minimal: tuple[str, ...] = ()
    if v.is_bug:
        minimal = minimize_passes(o.graph, v.pipeline, oracle, options, report.plan.rng_seed)
    return ReplayResult(graph_hash(o.graph), v, dedup_key(v.kind, v.message, minimal), minimal)


# ---------------------------------------------------------------------------
# mutant sweep and ablation


@dataclass
class KillRecord:
    mutant: str
    killed: bool
    tests: int
    bug_key: str | None
    kind: str | None


def mutant_sweep(
    cfg: CampaignConfig,
    patterns: Sequence[Pattern],
    seeds: Mapping[str, Graph],
    mutants: Sequence[str] | None = None,
    total_budget: int = 20000,
) -> list[KillRecord]:
    """One sub-campaign per mutant with an equal share of the test budget,
    each stopping at its first bug."""
    names = list(mutants) if mutants is not None else [m.name for m in passes.list_mutants()]
    if not names:
        return []
    per = total_budget // len(names)
    out = []
    for name in names:
        sub = CampaignConfig(
            budget_tests=per,
            budget_seconds=None,
            master_seed=cfg.master_seed,
            oracle=cfg.oracle,
            synthesis=cfg.synthesis,
            mutant=name,
            workers=cfg.workers,
            batch_size=cfg.batch_size,
            stop_on_first_bug=True,
            admit=cfg.admit,
        )
        res = run_campaign(sub, patterns, dict(seeds))
        first = res.findings[0].report if res.findings else None
        out.append(
            KillRecord(name, first is not None, res.metrics.generated, first.key if first else None, first.kind if first else None)
        )
    return out


def kill_count(records: Iterable[KillRecord]) -> int:
    return sum(r.killed for r in records)


# ---------------------------------------------------------------------------
# output


def _slug(key: str) -> str:
    return hashlib.sha256(key.encode()).hexdigest()[:12]


def write_reports(directory, result: CampaignResult, config_dump: Mapping | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for r in result.reports:
        name = f"{r.kind}-{_slug(r.key)}.json"
        body = r.to_dict()
        body["metrics_snapshot"] = result.metrics.to_dict()
        with open(d / name, "w") as f:
            json.dump(body, f, indent=1)
            f.write("\n")
        names.append(name)
    summary = {
        "metrics": result.metrics.to_dict(),
        "bugs": [{"file": n, "key": r.key, "kind": r.kind} for n, r in zip(names, result.reports)],
        "config": dict(config_dump or {}),
    }
    with open(d / "campaign.json", "w") as f:
        json.dump(summary, f, indent=1)
        f.write("\n")
    return d / "campaign.json"


def load_report(path) -> BugReport:
    with open(path) as f:
        d = json.load(f)
    if d.get("schema") != REPORT_SCHEMA:
        raise ValueError(f"{path}: not a bug report")
    return BugReport.from_dict(d)
