"""Command-line entry point.

Configuration precedence: built-in defaults < config file (``--config``,
flat ``key = value`` lines) < ``CGFUZZ_<KEY>`` environment variables <
command-line flags.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

from . import corpus, extract, harness, passes
from .graph import ParseError, load_graph
from .synth import DIRECT_INSERT, REPAIR, SynthesisConfig

ENV_PREFIX = "CGFUZZ_"

EXIT_OK = 0
EXIT_BUGS = 1
EXIT_FAULT = 2


@dataclass(frozen=True)
class Key:
    name: str
    default: Any
    kind: Callable[[str], Any]
    help: str


def _optional_str(s: str) -> str | None:
    return None if s in ("", "none", "None") else s


def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


KEYS = [
    Key("workdir", ".", str, "root directory for corpus, seeds, patterns and reports"),
    Key("corpus", "", str, "corpus directory (default: <workdir>/corpus)"),
    Key("seeds", "", str, "seed-graph directory (default: <workdir>/seeds)"),
    Key("patterns", "", str, "pattern-pool directory (default: <workdir>/patterns)"),
    Key("reports", "", str, "report directory (default: <workdir>/reports)"),
    Key("seed_count", 4000, int, "number of seed graphs written by corpus-gen"),
    Key("master_seed", 0, int, "master RNG seed"),
    Key("budget", "1000", str, "campaign budget: a test count (e.g. 10000) or seconds (e.g. 600s)"),
    Key("threshold", 1e-3, float, "Chebyshev inconsistency threshold"),
    Key("input_seeds", 3, int, "random input sets per test"),
    Key("sampler", harness.RANDOM_SUBSETS, str, "pipeline sampler: random-subsets | full-pipeline-vs-none"),
    Key("mode", extract.ADAPTIVE, str, "extraction mode: " + " | ".join(extract.MODES)),
    Key("mutant", None, _optional_str, "active mutant (see `report --mutants`)"),
    Key("workers", 1, int, "worker processes"),
    Key("strategy", REPAIR, str, "synthesis strategy: repair | direct-insert"),
    Key("node_cap", 200, int, "maximum nodes in a synthesized graph"),
    Key("bridge_cap", 3, int, "maximum bridge steps per dangling edge"),
    Key("batch_size", 32, int, "plans drawn per batch"),
    Key("admit", True, _bool, "admit bug-free graphs as new seeds"),
    Key("sweep_budget", 20000, int, "total tests for mutant-sweep, split evenly across mutants"),
]
KEY_MAP = {k.name: k for k in KEYS}


class ConfigError(Exception):
    pass


def parse_config_file(path) -> dict[str, str]:
    out = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in KEY_MAP:
                raise ConfigError(f"{path}:{lineno}: unknown key {k!r}")
            out[k] = v
    return out


def resolve_config(args: argparse.Namespace, environ: dict[str, str] | None = None) -> dict[str, Any]:
    environ = os.environ if environ is None else environ
    cfg: dict[str, Any] = {k.name: k.default for k in KEYS}
    sources = {k.name: "default" for k in KEYS}
    layers = []
    if getattr(args, "config", None):
        layers.append(("file", parse_config_file(args.config)))
    layers.append(("env", {k.name: environ[ENV_PREFIX + k.name.upper()] for k in KEYS if ENV_PREFIX + k.name.upper() in environ}))
    layers.append(("flag", {k.name: getattr(args, k.name) for k in KEYS if getattr(args, k.name, None) is not None}))
    for source, values in layers:
        for name, raw in values.items():
            try:
                cfg[name] = KEY_MAP[name].kind(raw) if isinstance(raw, str) else raw
            except ValueError as e:
                raise ConfigError(f"bad value for {name} ({source}): {e}") from e
            sources[name] = source
    root = Path(cfg["workdir"])
    for name in ("corpus", "seeds", "patterns", "reports"):
        if not cfg[name]:
            cfg[name] = str(root / name)
    if cfg["mode"] not in extract.MODES:
        raise ConfigError(f"unknown mode {cfg['mode']!r}")
    if cfg["strategy"] not in (REPAIR, DIRECT_INSERT):
        raise ConfigError(f"unknown strategy {cfg['strategy']!r}")
    if cfg["mutant"] is not None and cfg["mutant"] not in passes.MUTANTS:
        raise ConfigError(f"unknown mutant {cfg['mutant']!r}")
    parse_budget(cfg["budget"])
    cfg["_sources"] = sources
    return cfg


def parse_budget(text: str) -> tuple[int | None, float | None]:
    text = str(text).strip()
    try:
        if text.endswith("s"):
            secs = float(text[:-1])
            if secs <= 0:
                raise ValueError
            return None, secs
        n = int(text)
    except ValueError:
        raise ConfigError(f"bad budget {text!r}: expected a test count or '<seconds>s'") from None
    if n <= 0:
        raise ConfigError("budget must be positive")
    return n, None


def effective_config(cfg: dict[str, Any]) -> dict[str, Any]:
    return {k: v for k, v in cfg.items() if not k.startswith("_")}


def dump_config(cfg: dict[str, Any], stream) -> None:
    print("# effective configuration", file=stream)
    for k in KEYS:
        print(f"{k.name} = {cfg[k.name]}  # {cfg['_sources'][k.name]}", file=stream)


def campaign_config(cfg: dict[str, Any]) -> harness.CampaignConfig:
    tests, secs = parse_budget(cfg["budget"])
    return harness.CampaignConfig(
        budget_tests=tests,
        budget_seconds=secs,
        master_seed=cfg["master_seed"],
        oracle=harness.OracleConfig(cfg["threshold"], cfg["input_seeds"], cfg["sampler"]),
        synthesis=SynthesisConfig(cfg["node_cap"], cfg["bridge_cap"], cfg["strategy"]),
        mutant=cfg["mutant"],
        workers=cfg["workers"],
        batch_size=cfg["batch_size"],
        admit=cfg["admit"],
    )


def load_seeds(directory) -> dict[str, Any]:
    d = Path(directory)
    if not d.is_dir():
        raise extract.CorpusError(d, "seed directory does not exist (run corpus-gen)")
    seeds = {}
    for path in sorted(d.glob("*.cg.json")):
        try:
            seeds[path.name[: -len(".cg.json")]] = load_graph(path)[0]
        except ParseError as e:
            raise extract.CorpusError(path, str(e)) from e
    return seeds


def _refuse_overwrite(path: Path, force: bool) -> None:
    occupied = any(path.iterdir()) if path.is_dir() else path.exists()
    if occupied:
        if not force:
            raise ConfigError(f"{path} already exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()


class _Out:
    def __init__(self, as_json: bool):
        self.as_json = as_json

    def emit(self, payload: dict, text: str) -> None:
        if self.as_json:
            json.dump(payload, sys.stdout, indent=1, default=str)
            sys.stdout.write("\n")
        else:
            print(text)


# ---------------------------------------------------------------------------
# commands


def cmd_corpus_gen(cfg, args, out: _Out) -> int:
    root = Path(cfg["workdir"])
    corpus_dir, seed_dir = Path(cfg["corpus"]), Path(cfg["seeds"])
    _refuse_overwrite(corpus_dir, args.force)
    _refuse_overwrite(seed_dir, args.force)
    root.mkdir(parents=True, exist_ok=True)
    manifest = corpus.write_corpus(root, cfg["seed_count"], cfg["master_seed"])
    if corpus_dir.resolve() != (root / "corpus").resolve():
        shutil.move(str(root / "corpus"), corpus_dir)
    if seed_dir.resolve() != (root / "seeds").resolve():
        shutil.move(str(root / "seeds"), seed_dir)
    lines = [f"wrote {manifest['opt_tests']} documented tests, {manifest['noopt_tests']} non-optimization tests"]
    lines += [f"  {p}: {n}" for p, n in manifest["opt_tests_per_pass"].items()]
    lines.append(f"wrote {manifest['seeds']} seed graphs to {seed_dir}")
    out.emit(manifest, "\n".join(lines))
    return EXIT_OK


def cmd_extract(cfg, args, out: _Out) -> int:
    corpus_dir = Path(cfg["corpus"])
    pattern_dir = Path(cfg["patterns"])
    _refuse_overwrite(pattern_dir, args.force)
    pairs = extract.collect_pairs(corpus_dir / "opt")
    pool = extract.build_pool(pairs, extract.ADAPTIVE if cfg["mode"] == extract.NOOPT else cfg["mode"])
    if cfg["mode"] == extract.NOOPT:
        pool = extract.noopt_pool(corpus_dir / "noopt", len(pool), cfg["master_seed"])
    if not pool:
        print("warning: extraction produced an empty pattern pool", file=sys.stderr)
    index = extract.save_pool(pattern_dir, pool, cfg["mode"])
    index_out = {k: v for k, v in index.items() if k != "patterns"}
    index_out["pairs"] = len(pairs)
    lines = [f"{len(pairs)} (graph, pass) pairs -> {len(pool)} patterns (mode {cfg['mode']})"]
    lines += [f"  {p}: {n}" for p, n in sorted(index["per_pass"].items())]
    out.emit(index_out, "\n".join(lines))
    return EXIT_OK


def _metrics_text(m: harness.CampaignMetrics) -> str:
    lines = [
        f"generated {m.generated}, valid {m.valid} (validity {m.validity_rate:.2%})",
        f"target trigger rate {m.trigger_rate:.2%} over {m.target_tests} valid tests",
        f"crash findings {m.crashes}, inconsistency findings {m.inconsistencies}, distinct bugs {m.distinct_bugs}",
        f"admitted seeds {m.admitted}, wall clock {m.wall_clock:.1f}s",
    ]
    if m.discarded:
        lines.append("discarded: " + ", ".join(f"{k}={v}" for k, v in sorted(m.discarded.items())))
    lines.append("pass triggers: " + ", ".join(f"{k}={v}" for k, v in sorted(m.pass_triggers.items())))
    return "\n".join(lines)


def cmd_fuzz(cfg, args, out: _Out) -> int:
    report_dir = Path(cfg["reports"])
    _refuse_overwrite(report_dir, args.force)
    patterns = extract.load_pool(cfg["patterns"])
    seeds = load_seeds(cfg["seeds"])
    cc = campaign_config(cfg)
    result = harness.run_campaign(cc, patterns, seeds)
    harness.write_reports(report_dir, result, effective_config(cfg))
    payload = {"metrics": result.metrics.to_dict(), "bugs": [r.key for r in result.reports]}
    text = _metrics_text(result.metrics)
    if result.reports:
        text += "\nbugs:\n" + "\n".join(f"  {r.key}" for r in result.reports)
    out.emit(payload, text)
    return EXIT_BUGS if result.reports else EXIT_OK


def cmd_replay(cfg, args, out: _Out) -> int:
    report = harness.load_report(args.report)
    patterns = {p.id: p for p in extract.load_pool(cfg["patterns"])}
    seeds = load_seeds(cfg["seeds"])
    oracle = harness.OracleConfig(cfg["threshold"], cfg["input_seeds"], cfg["sampler"])
    r = harness.replay(report, patterns, seeds, oracle, SynthesisConfig(cfg["node_cap"], cfg["bridge_cap"]))
    ok = r.matches(report)
    payload = {
        "reproduced": ok,
        "graph_hash": r.graph_hash,
        "expected_graph_hash": report.graph_hash,
        "verdict": r.verdict.kind,
        "key": r.key,
        "expected_key": report.key,
    }
    text = f"{'reproduced' if ok else 'NOT reproduced'}: {r.verdict.kind} {r.key} (graph {r.graph_hash[:12]})"
    out.emit(payload, text)
    return EXIT_OK if ok else EXIT_BUGS


def cmd_minimize(cfg, args, out: _Out) -> int:
    graph, _ = load_graph(args.graph)
    pipeline = args.pipeline.split(",") if args.pipeline else list(passes.PIPELINE)
    for p in pipeline:
        passes.descriptor(p)
    oracle = harness.OracleConfig(cfg["threshold"], cfg["input_seeds"], cfg["sampler"])
    options = passes.CompileOptions(cfg["mutant"])
    verdict = harness.test_one(graph, [pipeline], oracle, options, args.input_seed)
    if not verdict.is_bug:
        out.emit({"verdict": "clean"}, "graph is clean under the given pipeline; nothing to minimize")
        return EXIT_OK
    minimal = harness.minimize_passes(graph, pipeline, oracle, options, args.input_seed, verdict)
    key = harness.dedup_key(verdict.kind, verdict.message, minimal)
    out.emit(
        {"verdict": verdict.kind, "minimal_passes": list(minimal), "key": key},
        f"{verdict.kind}: minimal pass set {', '.join(minimal)}\nkey {key}",
    )
    return EXIT_BUGS


def cmd_mutant_sweep(cfg, args, out: _Out) -> int:
    seeds = load_seeds(cfg["seeds"])
    modes = args.modes.split(",") if args.modes else [cfg["mode"]]
    mutants = None if args.mutants is None else [m for m in args.mutants.split(",") if m]
    cc = campaign_config(cfg)
    table = {}
    for mode in modes:
        if mode not in extract.MODES:
            raise ConfigError(f"unknown mode {mode!r}")
        if not args.modes and Path(cfg["patterns"], "index.json").exists():
            pool = extract.load_pool(cfg["patterns"])
        else:
            pool = _extract_from(cfg["corpus"], mode, cfg["master_seed"])
        records = harness.mutant_sweep(cc, pool, seeds, mutants, cfg["sweep_budget"])
        table[mode] = records
    payload = {
        mode: {
            "killed": harness.kill_count(recs),
            "mutants": {r.mutant: {"killed": r.killed, "tests": r.tests, "bug": r.bug_key} for r in recs},
        }
        for mode, recs in table.items()
    }
    report_dir = Path(cfg["reports"])
    report_dir.mkdir(parents=True, exist_ok=True)
    with open(report_dir / "kill-matrix.json", "w") as f:
        json.dump(payload, f, indent=1)
        f.write("\n")
    names = [r.mutant for r in next(iter(table.values()), [])]
    header = "mutant".ljust(30) + "".join(m.rjust(13) for m in table)
    rows = [header]
    for i, name in enumerate(names):
        rows.append(name.ljust(30) + "".join(("kill" if recs[i].killed else "-").rjust(13) for recs in table.values()))
    rows.append("killed".ljust(30) + "".join(str(harness.kill_count(r)).rjust(13) for r in table.values()))
    out.emit(payload, "\n".join(rows))
    return EXIT_OK


def _extract_from(corpus_dir, mode: str, seed: int):
    d = Path(corpus_dir)
    pool = extract.build_pool(extract.collect_pairs(d / "opt"), extract.ADAPTIVE if mode == extract.NOOPT else mode)
    if mode == extract.NOOPT:
        return extract.noopt_pool(d / "noopt", len(pool), seed)
    return pool


def cmd_report(cfg, args, out: _Out) -> int:
    if args.mutants:
        path = Path(args.mutants)
        passes.export_mutants(path)
        data = [m.__dict__ for m in passes.list_mutants()]
        out.emit({"mutants": data, "path": str(path)}, f"wrote {len(data)} mutants to {path}")
        return EXIT_OK
    summary_path = Path(cfg["reports"]) / "campaign.json"
    if not summary_path.exists():
        raise extract.CorpusError(summary_path, "no campaign summary (run fuzz first)")
    with open(summary_path) as f:
        summary = json.load(f)
    m = summary["metrics"]
    lines = [
        f"generated {m['generated']}, validity {m['validity_rate']:.2%}, trigger rate {m['trigger_rate']:.2%}",
        f"distinct bugs {len(summary['bugs'])}",
    ]
    lines += [f"  [{b['kind']}] {b['key']}  ({b['file']})" for b in summary["bugs"]]
    out.emit(summary, "\n".join(lines))
    return EXIT_OK


COMMANDS = {
    "corpus-gen": (cmd_corpus_gen, "write the documented-test corpus and the seed pool"),
    "extract": (cmd_extract, "extract the pattern pool from the corpus"),
    "fuzz": (cmd_fuzz, "run a fuzzing campaign and write bug reports"),
    "replay": (cmd_replay, "re-derive a bug report from its provenance and re-check it"),
    "minimize": (cmd_minimize, "find a 1-minimal failing pass set for a graph"),
    "mutant-sweep": (cmd_mutant_sweep, "run one sub-campaign per mutant and print the kill matrix"),
    "report": (cmd_report, "summarize a campaign or export the mutant catalog"),
}


def build_parser() -> argparse.ArgumentParser:
    keys_help = "\n".join(f"  {k.name:<13} {k.help} (default {k.default!r})" for k in KEYS)
    parser = argparse.ArgumentParser(
        prog="cgfuzz",
        description="Optimization-aware fuzzing of a toy graph compiler.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=(
            "configuration keys (config file `key = value`, env "
            f"{ENV_PREFIX}<KEY>, or --<key> flag; flags win):\n{keys_help}"
        ),
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--json", action="store_true", help="machine-readable output on stdout")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--quiet", action="store_true", help="do not print the effective configuration")
    for k in KEYS:
        common.add_argument(f"--{k.name.replace('_', '-')}", dest=k.name, default=None, help=k.help)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name == "replay":
            p.add_argument("report", help="path to a bug report JSON file")
        elif name == "minimize":
            p.add_argument("graph", help="path to a .cg.json graph")
            p.add_argument("--pipeline", help="comma-separated pass list (default: full pipeline)")
            p.add_argument("--input-seed", type=int, default=0, help="base seed for random inputs")
        elif name == "mutant-sweep":
            p.add_argument("--modes", help="comma-separated extraction modes for an ablation table")
            p.add_argument("--mutants", help="comma-separated subset of mutants")
        elif name == "report":
            p.add_argument("--mutants", help="write the mutant catalog to this JSON path instead")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAULT
    if not args.quiet:
        dump_config(cfg, sys.stderr)
    fn = COMMANDS[args.command][0]
    try:
        return fn(cfg, args, _Out(args.json))
    except (ConfigError, extract.CorpusError, ParseError, passes.UnknownPass, passes.UnknownMutant, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAULT
    except harness.NotReproducible as e:
        print(f"error: not reproducible: {e}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
