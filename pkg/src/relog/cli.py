"""Command-line entry points: run, eval, mine, report.

Exit codes (scriptable, 1:1 with loop termination statuses):
  0  sufficient          2  budget_exhausted    3  compile_failed
  4  execution_error    10  config error       11  IO error
 12  toolchain unavailable
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from relog.core import SourceUnit
from relog.evalharness import (
    EvalConfig,
    ManifestInvalid,
    evaluate_benchmark,
    load_benchmark,
    render_metrics_table,
)
from relog.gateway import Gateway, RemoteProvider, ReplayProvider, ReplayStore
from relog.ledger import ledger_to_jsonl, render_report, write_ledger
from relog.miner import (
    DEFAULT_API_PATTERNS,
    JACCARD_THRESHOLD,
    RepoUnreadable,
    format_report,
    lineages_to_csv,
    mine_repository,
    scan_repository,
    track_lineages,
)
from relog.pipeline import LoopConfig, Termination
from relog.pipeline import run_loop as pipeline_run_loop
from relog.rulestub import StubOptions, StubProvider
from relog.toolchain import ToolchainUnavailable, builtin_profile, load_profile, probe_commands

try:
    import tomllib
except ImportError:
    import tomli as tomllib

EXIT_BY_TERMINATION = {
    Termination.SUFFICIENT: 0,
    Termination.BUDGET_EXHAUSTED: 2,
    Termination.COMPILE_FAILED: 3,
    Termination.EXECUTION_ERROR: 4,
}
EXIT_CONFIG = 10
EXIT_IO = 11
EXIT_TOOLCHAIN = 12


class ConfigError(Exception):
    pass


def load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    try:
        if p.suffix == ".toml":
            return tomllib.loads(data.decode("utf-8"))
        return json.loads(data.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config file {p}: {exc}") from exc


def resolve_profile(name_or_path: str):
    p = Path(name_or_path)
    if p.suffix in (".json", ".toml") or p.exists():
        return load_profile(p)
    return builtin_profile(name_or_path)


def parse_hints(pairs: list[str]) -> dict:
    hints = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--hint expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        try:
            hints[key] = json.loads(value)
        except json.JSONDecodeError:
            hints[key] = value
    return hints


def build_provider(args, config: dict):
    kind = args.provider or config.get("provider", {}).get("kind", "stub")
    if kind == "stub":
        return StubProvider(StubOptions(
            always_insufficient=getattr(args, "stub_always_insufficient", False),
            broken_fixer=getattr(args, "stub_broken_fixer", False),
        ))
    if kind == "replay":
        if not args.replay:
            raise ConfigError("--provider replay requires --replay <dir>")
        return ReplayProvider(ReplayStore(args.replay))
    if kind == "remote":
        remote = config.get("provider", {})
        base_url = remote.get("base_url")
        if not base_url:
            raise ConfigError("remote provider needs provider.base_url in the config file")
        return RemoteProvider(
            base_url=base_url,
            model=remote.get("model", "default"),
            credential_env=remote.get("credential_env", ""),
        )
    raise ConfigError(f"unknown provider {kind!r}")


def build_gateway(args, config: dict) -> Gateway:
    provider = build_provider(args, config)
    record_store = ReplayStore(args.record) if getattr(args, "record", None) else None
    retry_limit = getattr(args, "retry_limit", None)
    if retry_limit is None:
        retry_limit = config.get("budgets", {}).get("retry_limit", 2)
    return Gateway(provider, retry_limit=retry_limit, record_store=record_store)


def run_directory(out_dir: str, label: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(out_dir) / f"{label}-{stamp}"
    run_dir = base
    seq = 1
    while run_dir.exists():
        run_dir = Path(f"{base}-{seq}")
        seq += 1
    run_dir.mkdir(parents=True)
    return run_dir


# -- subcommands -------------------------------------------------------------

def cmd_run(args) -> int:
    config = load_config_file(args.config)
    toolchain, render = resolve_profile(args.profile or config.get("profile", "c-clang"))
    try:
        probe_commands(toolchain)
    except ToolchainUnavailable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TOOLCHAIN

    try:
        source = SourceUnit.from_file(args.source)
    except OSError as exc:
        print(f"error: cannot read source: {exc}", file=sys.stderr)
        return EXIT_IO

    gateway = build_gateway(args, config)
    budgets = config.get("budgets", {})
    cfg = LoopConfig(
        max_iterations=args.max_iterations or budgets.get("max_iterations", 5),
        fix_budget=args.fix_budget if args.fix_budget is not None else budgets.get("fix_budget", 3),
        ablate_fixer=args.ablate_fixer,
        ablate_refine=args.ablate_refine,
        mode=args.mode,
        goal=args.goal,
        hints=parse_hints(args.hint),
        show_source_to_critic=args.mode == "direct",
    )
    ledger = pipeline_run_loop(source, toolchain, render, gateway, cfg)

    run_dir = run_directory(args.out, "run")
    ledger_path = write_ledger(ledger, run_dir / "ledger.jsonl")
    report = render_report(ledger_to_jsonl(ledger))
    (run_dir / "report.txt").write_text(report, encoding="utf-8")
    print(report, end="")
    print(f"ledger: {ledger_path}")

    if ledger.termination is Termination.EXECUTION_ERROR and ledger.reason.startswith("toolchain:"):
        return EXIT_TOOLCHAIN
    return EXIT_BY_TERMINATION[ledger.termination]


def cmd_eval(args) -> int:
    config = load_config_file(args.config)
    try:
        benchmark = load_benchmark(args.manifest, validate=not args.no_validate)
    except ManifestInvalid as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO

    budgets = config.get("budgets", {})
    eval_cfg = EvalConfig(
        generator=args.generator,
        plan_file=args.plan_file,
        max_iterations=args.max_iterations or budgets.get("max_iterations", 5),
        fix_budget=args.fix_budget if args.fix_budget is not None else budgets.get("fix_budget", 3),
        ablate_fixer=args.ablate_fixer,
        ablate_refine=args.ablate_refine,
    )
    if eval_cfg.generator == "plan-file" and not eval_cfg.plan_file:
        print("error: --generator plan-file requires --plan-file", file=sys.stderr)
        return EXIT_CONFIG

    def gateway_factory():
        return build_gateway(args, config)

    report, results = evaluate_benchmark(benchmark, gateway_factory, eval_cfg, jobs=args.jobs)

    run_dir = run_directory(args.out, "eval")
    direct = all(r.mode == "direct" for r in results) if results else True
    label = args.generator + ("+ablate-fixer" if args.ablate_fixer else "") + (
        "+ablate-refine" if args.ablate_refine else "")
    table = render_metrics_table(report, label, direct=direct)
    doc = {
        "tp_granularity": "enclosing method of a ground-truth fault line",
        "generator": label,
        "metrics": report.to_dict(),
        "excluded": [{"instance_id": i, "reason": r} for i, r in benchmark.excluded],
        "instances": [
            {
                "instance_id": r.instance_id,
                "mode": r.mode,
                "compile_failed": r.compile_failed,
                "detected": r.detected,
                "true_positive": r.true_positive,
                "repaired": r.repaired,
                "final_plan_size": r.final_plan_size,
                "emitted_events": r.emitted_events,
                "termination": r.termination,
            }
            for r in results
        ],
    }
    (run_dir / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    (run_dir / "report.txt").write_text(table, encoding="utf-8")
    ledger_dir = run_dir / "ledgers"
    for r in results:
        if r.ledger is not None:
            write_ledger(r.ledger, ledger_dir / f"{r.instance_id}.jsonl")
    print(table, end="")
    print(f"report: {run_dir / 'report.json'}")
    return 0


def cmd_mine(args) -> int:
    patterns = tuple(args.pattern) if args.pattern else DEFAULT_API_PATTERNS
    try:
        doc = mine_repository(args.repo, patterns, args.threshold, project=args.project)
    except RepoUnreadable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    run_dir = run_directory(args.out, "mine")
    (run_dir / "report.json").write_text(format_report(doc), encoding="utf-8")
    if args.csv:
        lineages = track_lineages(scan_repository(args.repo, patterns), args.threshold)
        (run_dir / "lineages.csv").write_text(lineages_to_csv(lineages), encoding="utf-8")
    print(format_report(doc), end="")
    print(f"report: {run_dir / 'report.json'}")
    return 0


def cmd_report(args) -> int:
    try:
        text = Path(args.ledger).read_text(encoding="utf-8")
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        print(render_report(text), end="")
    except (ValueError, KeyError) as exc:
        print(f"error: not a valid ledger: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


# -- argument parsing -----------------------------------------------------------

def _add_provider_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--provider", choices=["stub", "replay", "remote"], default=None,
                   help="completion provider (default: stub, or config file)")
    p.add_argument("--replay", metavar="DIR", help="replay store directory")
    p.add_argument("--record", metavar="DIR", help="record completions into this store")
    p.add_argument("--retry-limit", type=int, default=None,
                   help="retries on schema-invalid output (default 2)")
    p.add_argument("--config", metavar="FILE", help="TOML/JSON config file")
    p.add_argument("--stub-always-insufficient", action="store_true", help=argparse.SUPPRESS)
    p.add_argument("--stub-broken-fixer", action="store_true", help=argparse.SUPPRESS)


def _add_budget_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--max-iterations", type=int, default=None, help="refinement budget (default 5)")
    p.add_argument("--fix-budget", type=int, default=None, help="compile-repair budget (default 3)")
    p.add_argument("--ablate-fixer", action="store_true",
                   help="disable compilation repair (any compile failure terminates)")
    p.add_argument("--ablate-refine", action="store_true",
                   help="single generation pass, no refinement loop")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relog",
        description="Runtime-feedback-driven logging plan generation, mining, and evaluation.",
        epilog=__doc__.split("\n", 1)[1] if __doc__ else None,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the refinement loop on one source file")
    run.add_argument("source", help="path to the program source file")
    run.add_argument("--profile", default=None, help="toolchain profile path or builtin name")
    run.add_argument("--mode", choices=["direct", "indirect"], default="direct")
    run.add_argument("--goal", default="collect enough runtime evidence to locate the defect")
    run.add_argument("--hint", action="append", default=[], metavar="KEY=VALUE",
                     help="fixture hints for the stub provider (repeatable)")
    run.add_argument("--out", default="relog-out", help="output directory")
    _add_budget_args(run)
    _add_provider_args(run)
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="evaluate a benchmark manifest")
    ev.add_argument("manifest", help="benchmark manifest JSON")
    ev.add_argument("--generator", choices=["relog", "none", "plan-file"], default="relog")
    ev.add_argument("--plan-file", default=None, help="external plan JSON for --generator plan-file")
    ev.add_argument("--no-validate", action="store_true", help="skip instance reproduction checks")
    ev.add_argument("--jobs", type=int, default=1, help="instances evaluated concurrently")
    ev.add_argument("--out", default="relog-out", help="output directory")
    _add_budget_args(ev)
    _add_provider_args(ev)
    ev.set_defaults(func=cmd_eval)

    mine = sub.add_parser("mine", help="mine logging-statement change history from a repository")
    mine.add_argument("repo", help="path to a local git clone")
    mine.add_argument("--pattern", action="append", default=[],
                      help="logging API regex with an (?P<api>...) group (repeatable)")
    mine.add_argument("--threshold", type=float, default=JACCARD_THRESHOLD,
                      help="token-Jaccard lineage matching threshold")
    mine.add_argument("--project", default=None, help="project label for the report")
    mine.add_argument("--csv", action="store_true", help="also write a lineages CSV")
    mine.add_argument("--out", default="relog-out", help="output directory")
    mine.set_defaults(func=cmd_mine)

    rep = sub.add_parser("report", help="render a ledger file as a readable trace")
    rep.add_argument("ledger", help="path to a ledger .jsonl file")
    rep.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ToolchainUnavailable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TOOLCHAIN


if __name__ == "__main__":
    sys.exit(main())
