"""Downstream-debugging evaluation harness.

Loads benchmark manifests (direct and indirect debugging instances), runs a
logging generator (the full loop, an ablation, an external plan file, or no
logging at all), hands the collected runtime logs to a debugging agent, and
aggregates detection/repair metrics in the standard report column order.

True-positive granularity is the enclosing method of a ground-truth fault
line, located with a brace/indent heuristic; every report carries this
operationalization in its header.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from relog.core import LoggingPlan, RenderProfile, SourceUnit, apply_plan
from relog.gateway import (
    Gateway,
    MalformedAfterRetries,
    PromptEnvelope,
    ProviderUnavailable,
    ReplayMiss,
)
from relog.pipeline import (
    LoopConfig,
    RunLedger,
    Termination,
    events_doc,
    outcome_doc,
    probe_original,
    render_code_slot,
    run_loop,
)
from relog.schemas import DEBUG_SCHEMA
from relog.toolchain import (
    ExecutionOutcome,
    ToolchainProfile,
    cleanup_workspace,
    compile_unit,
    execute_unit,
    load_profile,
    materialize_workspace,
)


class ManifestInvalid(Exception):
    pass


class InstanceUnreproducible(Exception):
    pass


class PatchApplyFailure(Exception):
    pass


@dataclass(frozen=True)
class BenchmarkInstance:
    instance_id: str
    mode: str  # direct | indirect
    defective_unit: SourceUnit
    fixed_unit: SourceUnit
    toolchain: ToolchainProfile
    render: RenderProfile
    caller_units: tuple[SourceUnit, ...] = ()
    tests: dict[str, str] = field(default_factory=dict)
    failing_tests: tuple[str, ...] = ()
    regression_tests: tuple[str, ...] = ()
    fault_lines: tuple[tuple[str, int], ...] = ()
    hints: dict = field(default_factory=dict)

    @property
    def instrument_unit(self) -> SourceUnit:
        return self.caller_units[0] if self.mode == "indirect" else self.defective_unit

    def support_units(self, main: SourceUnit) -> tuple[SourceUnit, ...]:
        units = [self.defective_unit, *self.caller_units]
        return tuple(u for u in units if u.path != main.path)

    def goal(self) -> str:
        return f"collect runtime evidence to decide whether {self.instance_id} misbehaves and where"


@dataclass(frozen=True)
class DebugVerdict:
    defect_reported: bool
    location: dict | None
    explanation: str
    patch: dict | None = None


@dataclass(frozen=True)
class MetricsReport:
    total: int
    compilation_failures: int
    detected_defects: int
    true_positives: int
    precision: float
    recall: float
    f1: float
    avg_logs: float
    successful_repairs: int | None = None  # direct mode only

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "compilation_failures": self.compilation_failures,
            "detected_defects": self.detected_defects,
            "true_positives": self.true_positives,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "successful_repairs": self.successful_repairs,
            "avg_logs": self.avg_logs,
        }


def compute_metrics(results: list["InstanceResult"], direct: bool = True) -> MetricsReport:
    """Aggregate per-instance outcomes into the standard metric columns.

    A compilation-failure instance counts toward compilation_failures and is
    not-detected by definition. precision = TP/detected (0 when nothing was
    detected), recall = TP/total, f1 = 2PR/(P+R) (0 when P+R = 0).
    """
    total = len(results)
    compilation_failures = sum(1 for r in results if r.compile_failed)
    detected = sum(1 for r in results if not r.compile_failed and r.detected)
    tp = sum(1 for r in results if not r.compile_failed and r.detected and r.true_positive)
    precision, recall, f1 = metric_triple(tp, detected, total)
    plans = [r.final_plan_size for r in results]
    avg_logs = sum(plans) / len(plans) if plans else 0.0
    repairs = sum(1 for r in results if r.repaired) if direct else None
    return MetricsReport(
        total=total,
        compilation_failures=compilation_failures,
        detected_defects=detected,
        true_positives=tp,
        precision=precision,
        recall=recall,
        f1=f1,
        avg_logs=avg_logs,
        successful_repairs=repairs,
    )


def metric_triple(tp: int, detected: int, total: int) -> tuple[float, float, float]:
    if tp > min(detected, total) or min(tp, detected, total) < 0:
        raise ValueError(f"inconsistent counts: tp={tp} detected={detected} total={total}")
    precision = tp / detected if detected else 0.0
    recall = tp / total if total else 0.0
    f1 = (2 * precision * recall / (precision + recall)) if (precision + recall) else 0.0
    return precision, recall, f1


# -- true-positive matching -------------------------------------------------

def method_span(lines: tuple[str, ...], lineno: int, render: RenderProfile) -> tuple[int, int]:
    """1-based [start, end] of the method enclosing lineno; whole file if none."""
    pattern = re.compile(render.method_pattern)
    start = None
    for i in range(min(lineno, len(lines)), 0, -1):
        if pattern.match(lines[i - 1]):
            start = i
            break
    if start is None:
        return (1, len(lines))
    if render.block_style == "indent":
        base = _indent_width(lines[start - 1])
        end = len(lines)
        for j in range(start + 1, len(lines) + 1):
            text = lines[j - 1]
            if text.strip() and _indent_width(text) <= base:
                end = j - 1
                break
        while end > start and not lines[end - 1].strip():
            end -= 1
        return (start, end)
    depth = 0
    opened = False
    for j in range(start, len(lines) + 1):
        depth += lines[j - 1].count("{") - lines[j - 1].count("}")
        opened = opened or "{" in lines[j - 1]
        if opened and depth <= 0:
            return (start, j)
    return (start, len(lines))


def _indent_width(line: str) -> int:
    return len(line) - len(line.lstrip(" \t"))


def _method_name(line: str) -> str | None:
    m = re.search(r"([A-Za-z_]\w*)\s*\(", line)
    return m.group(1) if m else None


def tp_match(location: dict | None, instance: BenchmarkInstance) -> bool:
    """Reported location falls inside the enclosing method of a fault line."""
    if not location:
        return False
    units = {Path(u.path).name: u for u in (instance.defective_unit, *instance.caller_units)}
    reported_file = Path(location.get("file", "")).name
    for fault_file, fault_line in instance.fault_lines:
        if Path(fault_file).name != reported_file:
            continue
        unit = units.get(Path(fault_file).name)
        if unit is None:
            continue
        start, end = method_span(unit.lines, fault_line, instance.render)
        if "line" in location and location["line"] is not None:
            if start <= int(location["line"]) <= end:
                return True
        elif "method" in location:
            if location["method"] == _method_name(unit.lines[start - 1] if start <= len(unit.lines) else ""):
                return True
    return False


# -- manifest loading --------------------------------------------------------

@dataclass
class BenchmarkSet:
    instances: list[BenchmarkInstance]
    excluded: list[tuple[str, str]] = field(default_factory=list)

    def __iter__(self):
        return iter(self.instances)

    def __len__(self):
        return len(self.instances)


def load_benchmark(manifest_path: str | Path, validate: bool = True) -> BenchmarkSet:
    """Load and (optionally) validate a benchmark manifest.

    Validation checks, once per instance: the defective unit compiles, every
    declared failing test fails on it, and the fixed unit makes them pass.
    Unreproducible instances are excluded with a reason line.
    """
    path = Path(manifest_path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestInvalid(f"cannot read manifest: {exc}") from exc
    if not isinstance(doc, dict) or "instances" not in doc or "toolchain_profile" not in doc:
        raise ManifestInvalid("manifest needs 'toolchain_profile' and 'instances'")
    base = path.parent
    toolchain, render = load_profile(base / doc["toolchain_profile"])

    instances: list[BenchmarkInstance] = []
    excluded: list[tuple[str, str]] = []
    for i, entry in enumerate(doc["instances"]):
        instance = _parse_instance(entry, i, base, toolchain, render)
        if validate:
            reason = _check_reproducible(instance)
            if reason:
                excluded.append((instance.instance_id, reason))
                continue
        instances.append(instance)
    return BenchmarkSet(instances=instances, excluded=excluded)


def _parse_instance(entry, index, base: Path, toolchain, render) -> BenchmarkInstance:
    if not isinstance(entry, dict):
        raise ManifestInvalid(f"instances[{index}] must be an object")
    for key in ("instance_id", "mode", "defective_unit", "fixed_unit"):
        if key not in entry:
            raise ManifestInvalid(f"instances[{index}] missing {key!r}")
    mode = entry["mode"]
    if mode not in ("direct", "indirect"):
        raise ManifestInvalid(f"instances[{index}].mode must be direct or indirect")
    callers = tuple(
        SourceUnit.from_file(base / p, rel_path=Path(p).name)
        for p in entry.get("caller_units", [])
    )
    if mode == "indirect" and not callers:
        raise ManifestInvalid(f"instances[{index}]: indirect mode requires caller_units")
    defective = SourceUnit.from_file(base / entry["defective_unit"],
                                     rel_path=Path(entry["defective_unit"]).name)
    fixed = SourceUnit.from_file(base / entry["fixed_unit"], rel_path=defective.path)
    tests = dict(entry.get("tests", {}))
    if not tests:
        tests = {"run": toolchain.run_cmd}
    failing = tuple(entry.get("failing_tests", ["run"]))
    unknown = [t for t in (*failing, *entry.get("regression_tests", [])) if t not in tests]
    if unknown:
        raise ManifestInvalid(f"instances[{index}]: unknown test name(s) {unknown}")
    return BenchmarkInstance(
        instance_id=entry["instance_id"],
        mode=mode,
        defective_unit=defective,
        fixed_unit=fixed,
        toolchain=toolchain,
        render=render,
        caller_units=callers,
        tests=tests,
        failing_tests=failing,
        regression_tests=tuple(entry.get("regression_tests", [])),
        fault_lines=tuple((f, int(l)) for f, l in entry.get("fault_lines", [])),
        hints=dict(entry.get("hints", {})),
    )


def _run_named_test(ws, instance: BenchmarkInstance, main: SourceUnit, name: str) -> bool:
    """True iff the named check passes (exit 0) in the given workspace."""
    from relog.toolchain import _run, _unit_paths  # shared command plumbing

    main_file, units = _unit_paths(main, instance.support_units(main))
    code, _, _, _, timed_out = _run(instance.tests[name], ws, main_file, units, instance.toolchain)
    return not timed_out and code == 0


def _check_reproducible(instance: BenchmarkInstance) -> str | None:
    defective = instance.defective_unit
    support = instance.support_units(defective)
    ws = materialize_workspace(defective, support)
    try:
        if not compile_unit(defective, instance.toolchain, support, workspace=ws).ok:
            return "defective unit does not compile"
        for name in instance.failing_tests:
            if _run_named_test(ws, instance, defective, name):
                return f"declared failing test {name!r} passes on the defective unit"
    finally:
        cleanup_workspace(ws)

    fixed = instance.fixed_unit
    ws = materialize_workspace(fixed, support)
    try:
        if not compile_unit(fixed, instance.toolchain, support, workspace=ws).ok:
            return "fixed unit does not compile"
        for name in (*instance.failing_tests, *instance.regression_tests):
            if not _run_named_test(ws, instance, fixed, name):
                return f"test {name!r} fails on the fixed unit"
    finally:
        cleanup_workspace(ws)
    return None


# -- debug agent --------------------------------------------------------------

def run_debug_agent(
    instance: BenchmarkInstance,
    outcome: ExecutionOutcome | None,
    plan: LoggingPlan | None,
    gateway: Gateway,
) -> DebugVerdict:
    """Ask the debugging agent for a verdict; gateway errors count as not-detected."""
    if outcome is None:
        return DebugVerdict(False, None, "no execution outcome available", None)
    main = instance.instrument_unit
    events = events_doc(outcome, plan, main.path)
    if instance.mode == "direct":
        code = render_code_slot(instance.defective_unit)
        callers = "(none)"
    else:
        code = "(withheld)"
        callers = "\n\n".join(
            f"// {u.path}\n{render_code_slot(u)}" for u in instance.caller_units
        ) or "(none)"
    env = PromptEnvelope(
        template_id="debug",
        slots={
            "goal": instance.goal(),
            "code": code,
            "callers": callers,
            "outcome": json.dumps(outcome_doc(outcome), sort_keys=True, indent=1),
            "events": json.dumps(events, sort_keys=True, indent=1),
            "hints": json.dumps(dict(sorted(instance.hints.items())), sort_keys=True),
        },
        expected_schema=DEBUG_SCHEMA,
    )
    try:
        payload = gateway.complete(env).payload
    except (MalformedAfterRetries, ProviderUnavailable, ReplayMiss) as exc:
        return DebugVerdict(False, None, f"gateway error: {exc}", None)
    return DebugVerdict(
        defect_reported=payload["defect_reported"],
        location=payload.get("location"),
        explanation=payload.get("explanation", ""),
        patch=payload.get("patch"),
    )


# -- repair validation ---------------------------------------------------------

def apply_patch(unit: SourceUnit, patch: dict) -> SourceUnit:
    """Apply an edit-script patch; line numbers refer to the original unit."""
    if not isinstance(patch, dict):
        raise PatchApplyFailure("patch must be an object")
    if patch.get("kind") == "replace_unit":
        return SourceUnit.from_text(unit.path, patch["content"])
    if patch.get("kind") != "line_edits":
        raise PatchApplyFailure(f"unknown patch kind {patch.get('kind')!r}")
    replaces: dict[int, str] = {}
    deletes: set[int] = set()
    inserts: dict[int, list[str]] = {}
    for edit in patch.get("edits", []):
        op, line = edit.get("op"), edit.get("line")
        if not isinstance(line, int) or line < 0 or line > len(unit.lines):
            raise PatchApplyFailure(f"edit line {line} outside the unit")
        if op == "replace":
            if line == 0:
                raise PatchApplyFailure("cannot replace line 0")
            replaces[line] = edit["text"]
        elif op == "delete":
            deletes.add(line)
        elif op == "insert_after":
            inserts.setdefault(line, []).append(edit["text"])
        else:
            raise PatchApplyFailure(f"unknown edit op {op!r}")
    out = list(inserts.get(0, []))
    for i, text in enumerate(unit.lines, start=1):
        if i in deletes:
            pass
        elif i in replaces:
            out.append(replaces[i])
        else:
            out.append(text)
        out.extend(inserts.get(i, []))
    return SourceUnit.from_text(unit.path, "\n".join(out) + ("\n" if out else ""))


@dataclass(frozen=True)
class RepairCheck:
    ok: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


def validate_repair(instance: BenchmarkInstance, patch: dict) -> RepairCheck:
    """True iff the patched unit compiles and failing + regression tests pass."""
    try:
        patched = apply_patch(instance.defective_unit, patch)
    except (PatchApplyFailure, KeyError) as exc:
        return RepairCheck(False, f"patch did not apply: {exc}")
    support = instance.support_units(patched)
    ws = materialize_workspace(patched, support)
    try:
        if not compile_unit(patched, instance.toolchain, support, workspace=ws).ok:
            return RepairCheck(False, "patched unit does not compile")
        for name in (*instance.failing_tests, *instance.regression_tests):
            if not _run_named_test(ws, instance, patched, name):
                return RepairCheck(False, f"test {name!r} still fails")
    finally:
        cleanup_workspace(ws)
    return RepairCheck(True)


def ground_truth_patch(instance: BenchmarkInstance) -> dict:
    """The fixed unit expressed as a whole-unit replacement edit script."""
    return {"kind": "replace_unit", "content": instance.fixed_unit.to_text()}


# -- generator evaluation -------------------------------------------------------

@dataclass
class InstanceResult:
    instance_id: str
    mode: str
    generator: str
    compile_failed: bool
    detected: bool
    true_positive: bool
    repaired: bool
    final_plan_size: int
    emitted_events: int
    termination: str
    verdict: DebugVerdict | None = None
    ledger: RunLedger | None = None
    note: str = ""


@dataclass(frozen=True)
class EvalConfig:
    generator: str = "relog"  # relog | none | plan-file
    plan_file: str | Path | None = None
    max_iterations: int = 5
    fix_budget: int = 3
    ablate_fixer: bool = False
    ablate_refine: bool = False


def _instance_profile(instance: BenchmarkInstance) -> ToolchainProfile:
    if instance.failing_tests:
        return instance.toolchain.with_test_cmd(instance.tests[instance.failing_tests[0]])
    return instance.toolchain


def evaluate_instance(
    instance: BenchmarkInstance, gateway: Gateway, cfg: EvalConfig = EvalConfig()
) -> InstanceResult:
    main = instance.instrument_unit
    support = instance.support_units(main)
    profile = _instance_profile(instance)
    plan: LoggingPlan | None = None
    outcome: ExecutionOutcome | None = None
    ledger: RunLedger | None = None
    compile_failed = False
    termination = "n/a"
    note = ""

    if cfg.generator == "relog":
        loop_cfg = LoopConfig(
            max_iterations=cfg.max_iterations,
            fix_budget=cfg.fix_budget,
            ablate_fixer=cfg.ablate_fixer,
            ablate_refine=cfg.ablate_refine,
            mode=instance.mode,
            goal=instance.goal(),
            hints={**instance.hints, "unit": main.path},
            show_source_to_critic=instance.mode == "direct",
        )
        ledger = run_loop(main, profile, instance.render, gateway, loop_cfg, support)
        termination = ledger.termination.value
        plan = ledger.final_plan
        compile_failed = ledger.termination is Termination.COMPILE_FAILED
        note = ledger.reason
        executed = [r.outcome for r in ledger.iterations if r.outcome is not None]
        outcome = executed[-1] if executed else None
    elif cfg.generator == "none":
        plan = LoggingPlan(plan_id="none", revision=0)
        outcome = probe_original(main, profile, support)
        termination = "baseline"
    elif cfg.generator == "plan-file":
        if cfg.plan_file is None:
            raise ValueError("plan-file generator requires a plan file path")
        plan_doc = json.loads(Path(cfg.plan_file).read_text(encoding="utf-8"))
        plan = LoggingPlan.from_dict(plan_doc)
        instr = apply_plan(main, plan, instance.render)
        ws = materialize_workspace(instr, support)
        try:
            compiled = compile_unit(instr, profile, support, workspace=ws)
            if compiled.ok:
                outcome = execute_unit(instr, profile, support, workspace=ws)
                termination = "external_plan"
            else:
                compile_failed = True
                termination = "compile_failed"
        finally:
            cleanup_workspace(ws)
    else:
        raise ValueError(f"unknown generator {cfg.generator!r}")

    verdict: DebugVerdict | None = None
    detected = False
    tp = False
    repaired = False
    if not compile_failed:
        verdict = run_debug_agent(instance, outcome, plan, gateway)
        detected = verdict.defect_reported
        tp = detected and tp_match(verdict.location, instance)
        if instance.mode == "direct" and verdict.patch is not None:
            repaired = bool(validate_repair(instance, verdict.patch))

    return InstanceResult(
        instance_id=instance.instance_id,
        mode=instance.mode,
        generator=cfg.generator,
        compile_failed=compile_failed,
        detected=detected,
        true_positive=tp,
        repaired=repaired,
        final_plan_size=len(plan.statements) if plan else 0,
        emitted_events=len(outcome.log_events) if outcome else 0,
        termination=termination,
        verdict=verdict,
        ledger=ledger,
        note=note,
    )


def evaluate_benchmark(
    benchmark: BenchmarkSet,
    gateway_factory,
    cfg: EvalConfig = EvalConfig(),
    jobs: int = 1,
) -> tuple[MetricsReport, list[InstanceResult]]:
    """Evaluate every instance; gateway_factory() yields a fresh gateway per
    instance so providers/record stores may be shared safely. Instances run
    in their own workspaces, so jobs > 1 evaluates them concurrently;
    results keep manifest order either way."""
    instances = list(benchmark)
    if jobs > 1 and len(instances) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(
                lambda inst: evaluate_instance(inst, gateway_factory(), cfg), instances))
    else:
        results = [evaluate_instance(inst, gateway_factory(), cfg) for inst in instances]
    direct = all(r.mode == "direct" for r in results) if results else True
    return compute_metrics(results, direct=direct), results


TABLE_COLUMNS = (
    "Compilation Failures", "Detected Defects", "True Positives",
    "Precision", "Recall", "F1 Score", "Successful Repairs", "Avg. Logs",
)


def render_metrics_table(report: MetricsReport, label: str, direct: bool = True) -> str:
    """One-row table in the standard column order, with the TP note up front."""
    columns = list(TABLE_COLUMNS)
    values = [
        str(report.compilation_failures), str(report.detected_defects),
        str(report.true_positives), f"{report.precision:.3f}",
        f"{report.recall:.3f}", f"{report.f1:.3f}",
    ]
    if direct:
        values.append(str(report.successful_repairs if report.successful_repairs is not None else 0))
        values.append(f"{report.avg_logs:.2f}")
    else:
        columns.remove("Successful Repairs")
        columns[-1] = "Avg. Logs per Caller"
        values.append(f"{report.avg_logs:.2f}")
    head = " | ".join([("Variant")] + columns)
    row = " | ".join([label] + values)
    note = "# true positive = reported location within the enclosing method of a fault line"
    return f"{note}\n{head}\n{row}\n"
