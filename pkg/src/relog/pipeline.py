"""The closed refinement loop: generate, repair, execute, judge, refine.

One loop run is strictly sequential. Plans are the only thing the loop ever
mutates; every candidate plan is re-rendered into the pristine source, so
the original program logic is preserved across all iterations by
construction (and re-verified each time).
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum

from relog.core import (
    LoggingPlan,
    LoggingStatement,
    Position,
    RenderProfile,
    Severity,
    SourceUnit,
    apply_plan,
    normalize_plan,
    verify_logic_preserved,
)
from relog.gateway import (
    Gateway,
    MalformedAfterRetries,
    PromptEnvelope,
    ProviderUnavailable,
    ReplayMiss,
    StoreWriteFailure,
)
from relog.schemas import CRITIC_SCHEMA, GENERATION_SCHEMA, REFINEMENT_SCHEMA
from relog.toolchain import (
    CompileResult,
    ExecutionOutcome,
    ExecutionStatus,
    ToolchainProfile,
    ToolchainUnavailable,
    cleanup_workspace,
    compile_unit,
    execute_unit,
    materialize_workspace,
)


class Termination(Enum):
    SUFFICIENT = "sufficient"
    BUDGET_EXHAUSTED = "budget_exhausted"
    COMPILE_FAILED = "compile_failed"
    EXECUTION_ERROR = "execution_error"


DEFAULT_RUBRIC = (
    ("traceability", "do the logs clearly expose the execution path relevant to the observed behavior?"),
    ("state_visibility", "are key variables and intermediate states adequately recorded?"),
    ("causal_linkage", "do the logs provide enough evidence to explain why the behavior occurred?"),
)


@dataclass(frozen=True)
class SufficiencyRule:
    """Sufficient iff every dimension >= min_each and at least required_twos hit 2."""

    min_each: int = 1
    required_twos: int = 2

    def decide(self, scores: tuple[int, int, int]) -> bool:
        return all(s >= self.min_each for s in scores) and sum(
            1 for s in scores if s == 2
        ) >= self.required_twos


@dataclass(frozen=True)
class FeedbackItem:
    action: str  # add | remove | modify
    subject: str
    detail: str
    target_anchor: int | None = None

    def to_dict(self) -> dict:
        return {
            "action": self.action,
            "target_anchor": self.target_anchor,
            "subject": self.subject,
            "detail": self.detail,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeedbackItem":
        return cls(
            action=d["action"],
            subject=d.get("subject", ""),
            detail=d.get("detail", ""),
            target_anchor=d.get("target_anchor"),
        )


@dataclass(frozen=True)
class CriticVerdict:
    traceability: int
    state_visibility: int
    causal_linkage: int
    sufficient: bool
    feedback: tuple[FeedbackItem, ...]
    rationale: str

    @property
    def scores(self) -> tuple[int, int, int]:
        return (self.traceability, self.state_visibility, self.causal_linkage)

    def to_dict(self) -> dict:
        return {
            "traceability": self.traceability,
            "state_visibility": self.state_visibility,
            "causal_linkage": self.causal_linkage,
            "sufficient": self.sufficient,
            "feedback": [f.to_dict() for f in self.feedback],
            "rationale": self.rationale,
        }


@dataclass(frozen=True)
class CallMeta:
    purpose: str
    template_id: str
    digest: str
    provider: str
    attempts: int

    def to_dict(self) -> dict:
        return {
            "purpose": self.purpose,
            "template_id": self.template_id,
            "digest": self.digest,
            "provider": self.provider,
            "attempts": self.attempts,
        }


@dataclass
class IterationRecord:
    iteration: int
    plan: LoggingPlan
    fix_attempts: int
    compile: CompileResult
    outcome: ExecutionOutcome | None = None
    verdict: CriticVerdict | None = None
    gateway_calls: tuple[CallMeta, ...] = ()
    notes: tuple[str, ...] = ()


@dataclass
class RunLedger:
    source_digest: str
    config_snapshot: dict
    probe: ExecutionOutcome | None
    iterations: list[IterationRecord]
    termination: Termination
    final_plan: LoggingPlan | None
    reason: str = ""


@dataclass(frozen=True)
class LoopConfig:
    max_iterations: int = 5
    fix_budget: int = 3
    ablate_fixer: bool = False
    ablate_refine: bool = False
    mode: str = "direct"  # direct | indirect
    goal: str = "collect enough runtime evidence to locate the defect"
    hints: dict = field(default_factory=dict)
    show_source_to_critic: bool = True
    rule: SufficiencyRule = SufficiencyRule()
    extra_rubric: tuple[tuple[str, str], ...] = ()
    max_prompt_events: int = 50
    max_prompt_frames: int = 3
    stream_tail_chars: int = 1500

    def __post_init__(self):
        if self.max_iterations < 1 or self.fix_budget < 0:
            raise ValueError("budgets must be positive")

    def snapshot(self) -> dict:
        return {
            "max_iterations": self.max_iterations,
            "fix_budget": self.fix_budget,
            "ablate_fixer": self.ablate_fixer,
            "ablate_refine": self.ablate_refine,
            "mode": self.mode,
            "goal": self.goal,
            "hints": dict(sorted(self.hints.items())),
            "show_source_to_critic": self.show_source_to_critic,
            "sufficiency_rule": {
                "min_each": self.rule.min_each,
                "required_twos": self.rule.required_twos,
            },
            "rubric": [name for name, _ in DEFAULT_RUBRIC + self.extra_rubric],
        }


# -- slot rendering -------------------------------------------------------

def render_code_slot(source: SourceUnit) -> str:
    return "\n".join(f"{i:4d} | {line}" for i, line in enumerate(source.lines, start=1))


def outcome_doc(outcome: ExecutionOutcome, cfg: LoopConfig | None = None) -> dict:
    """Canonical JSON-able outcome summary; excludes volatile timing fields."""
    max_events = cfg.max_prompt_events if cfg else 50
    max_frames = cfg.max_prompt_frames if cfg else 3
    tail = cfg.stream_tail_chars if cfg else 1500
    exc = None
    if outcome.exception_info is not None:
        exc = {
            "type_name": outcome.exception_info.type_name,
            "message": outcome.exception_info.message,
            "frames": [list(f) for f in outcome.exception_info.frames[-max_frames:]],
        }
    return {
        "status": outcome.status.value,
        "exit_code": outcome.exit_code,
        "exception": exc,
        "events": [
            {"seq": e.sequence, "severity": e.severity.value,
             "marker": e.source_marker, "message": e.message}
            for e in outcome.log_events[-max_events:]
        ],
        "stdout_tail": outcome.stdout[-tail:],
        "stderr_tail": outcome.stderr[-tail:],
        "truncated": outcome.truncated,
    }


def events_doc(outcome: ExecutionOutcome, plan: LoggingPlan | None, unit_path: str) -> list[dict]:
    """Log events resolved to (unit, original anchor line) via plan markers."""
    records = []
    statements = plan.statements if plan else ()
    for e in outcome.log_events:
        anchor = None
        if e.source_marker is not None and 0 <= e.source_marker < len(statements):
            anchor = statements[e.source_marker].anchor_line
        records.append({
            "seq": e.sequence,
            "severity": e.severity.value,
            "marker": e.source_marker,
            "message": e.message,
            "unit": unit_path,
            "anchor_line": anchor,
        })
    return records


def diagnostics_doc(result: CompileResult) -> list[dict]:
    return [
        {"file": d.file, "line": d.line, "mapped_line": d.mapped_line,
         "statement_index": d.statement_index, "message": d.message}
        for d in result.diagnostics
    ]


def rubric_text(cfg: LoopConfig) -> str:
    dims = DEFAULT_RUBRIC + cfg.extra_rubric
    return "\n".join(f"- {name}: {question}" for name, question in dims)


def _dumps(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=1)


def _hints_slot(cfg: LoopConfig) -> str:
    return json.dumps(dict(sorted(cfg.hints.items())), sort_keys=True)


# -- stage operations -----------------------------------------------------

def probe_original(
    source: SourceUnit, profile: ToolchainProfile, extra_units: tuple[SourceUnit, ...] = ()
) -> ExecutionOutcome:
    """Execute the pristine program to collect the initial diagnostic signal."""
    ws = materialize_workspace(source, extra_units)
    try:
        pre = compile_unit(source, profile, extra_units, workspace=ws)
        if not pre.ok:
            raise ValueError(
                "pristine source does not compile; benchmark instances must be compilable"
            )
        return execute_unit(source, profile, extra_units, workspace=ws)
    finally:
        cleanup_workspace(ws)


_PLAN_ID_SANITIZE = re.compile(r"[^A-Za-z0-9_-]+")


def _plan_from_payload(payload: dict, source: SourceUnit, revision: int) -> tuple[LoggingPlan, list[str]]:
    """Build a LoggingPlan from a validated payload, clamping wild anchors."""
    notes = []
    plan_id = _PLAN_ID_SANITIZE.sub("-", payload["plan_id"]).strip("-") or "plan"
    statements = []
    limit = len(source.lines)
    for s in payload["statements"]:
        anchor = s["anchor_line"]
        if anchor > limit:
            notes.append(f"anchor {anchor} clamped to {limit}")
            anchor = limit
        statements.append(LoggingStatement(
            severity=Severity(s["severity"]),
            template=s["template"],
            variables=tuple(s["variables"]),
            anchor_line=anchor,
            position=Position(s["position"]),
        ))
    plan = normalize_plan(LoggingPlan(plan_id=plan_id, revision=revision, statements=tuple(statements)))
    return plan, notes


def _generate_with_notes(
    source: SourceUnit,
    outcome0: ExecutionOutcome,
    gateway: Gateway,
    cfg: LoopConfig,
) -> tuple[LoggingPlan, list[str]]:
    mode = "source_only" if outcome0.status is ExecutionStatus.PASS else "failure_guided"
    env = PromptEnvelope(
        template_id="generation",
        slots={
            "mode": mode,
            "goal": cfg.goal,
            "code": render_code_slot(source),
            "outcome": _dumps(outcome_doc(outcome0, cfg)),
            "hints": _hints_slot(cfg),
        },
        expected_schema=GENERATION_SCHEMA,
    )
    response = gateway.complete(env)
    return _plan_from_payload(response.payload, source, revision=0)


def generate_initial_plan(
    source: SourceUnit,
    outcome0: ExecutionOutcome,
    gateway: Gateway,
    cfg: LoopConfig = LoopConfig(),
) -> LoggingPlan:
    plan, _ = _generate_with_notes(source, outcome0, gateway, cfg)
    return plan


def repair_compilation(
    source: SourceUnit,
    plan: LoggingPlan,
    profile: ToolchainProfile,
    render: RenderProfile,
    gateway: Gateway,
    fix_budget: int,
    cfg: LoopConfig = LoopConfig(),
    extra_units: tuple[SourceUnit, ...] = (),
    failing: CompileResult | None = None,
) -> tuple[LoggingPlan, CompileResult, int]:
    """Repair loop: only the plan changes; every attempt re-renders into the
    pristine source. Returns the first compiling plan, or the last failing
    one after fix_budget attempts."""
    current = plan
    result = failing if failing is not None else compile_unit(
        apply_plan(source, current, render), profile, extra_units)
    attempts = 0
    while not result.ok and attempts < fix_budget:
        attempts += 1
        env = PromptEnvelope(
            template_id="repair",
            slots={
                "code": render_code_slot(source),
                "plan": _dumps(current.to_dict()),
                "diagnostics": _dumps(diagnostics_doc(result)),
                "hints": _hints_slot(cfg),
            },
            expected_schema=GENERATION_SCHEMA,
        )
        response = gateway.complete(env)
        candidate, _ = _plan_from_payload(response.payload, source, revision=current.revision + 1)
        current = candidate
        result = compile_unit(apply_plan(source, current, render), profile, extra_units)
    return current, result, attempts


def evaluate_sufficiency(
    source: SourceUnit,
    plan: LoggingPlan,
    outcome: ExecutionOutcome,
    gateway: Gateway,
    cfg: LoopConfig = LoopConfig(),
) -> CriticVerdict:
    """Ask the critic for rubric scores; sufficiency follows the configured rule."""
    code = render_code_slot(source) if cfg.show_source_to_critic else "(withheld)"
    env = PromptEnvelope(
        template_id="critic",
        slots={
            "goal": cfg.goal,
            "rubric": rubric_text(cfg),
            "code": code,
            "outcome": _dumps(outcome_doc(outcome, cfg)),
            "events": _dumps(outcome_doc(outcome, cfg)["events"]),
            "hints": _hints_slot(cfg),
        },
        expected_schema=CRITIC_SCHEMA,
    )
    payload = gateway.complete(env).payload
    scores = (payload["traceability"], payload["state_visibility"], payload["causal_linkage"])
    sufficient = cfg.rule.decide(scores)
    feedback = tuple(FeedbackItem.from_dict(f) for f in payload["feedback"])
    rationale = payload["rationale"]
    if sufficient != payload["sufficient"]:
        rationale += " [sufficiency recomputed by the configured threshold rule]"
    if not sufficient and not feedback:
        low = min(range(3), key=lambda i: scores[i])
        name = ("traceability", "state_visibility", "causal_linkage")[low]
        feedback = (FeedbackItem(
            action="add", subject="state",
            detail=f"improve {name}: add a statement exposing the weakest dimension",
        ),)
    return CriticVerdict(
        traceability=scores[0],
        state_visibility=scores[1],
        causal_linkage=scores[2],
        sufficient=sufficient,
        feedback=feedback,
        rationale=rationale,
    )


class EditTargetMissing(Exception):
    """A remove/modify edit named an anchor with no matching statement.

    Never aborts a refinement round: refine_plan records the miss in its
    notes and skips the edit. The class exists for callers that want to
    re-raise recorded misses as hard errors.
    """


def refine_plan(
    plan: LoggingPlan,
    feedback: tuple[FeedbackItem, ...],
    gateway: Gateway,
    source: SourceUnit,
    cfg: LoopConfig = LoopConfig(),
) -> tuple[LoggingPlan, tuple[str, ...]]:
    """Apply the refiner's edit list to the plan; missing targets are skipped
    and reported in the returned notes. Revision is incremented."""
    if not feedback:
        raise ValueError("refine_plan requires non-empty feedback")
    env = PromptEnvelope(
        template_id="refine",
        slots={
            "code": render_code_slot(source),
            "plan": _dumps(plan.to_dict()),
            "feedback": _dumps([f.to_dict() for f in feedback]),
            "goal": cfg.goal,
            "hints": _hints_slot(cfg),
        },
        expected_schema=REFINEMENT_SCHEMA,
    )
    payload = gateway.complete(env).payload
    statements = list(plan.statements)
    notes: list[str] = []
    limit = len(source.lines)
    for edit in payload["edits"]:
        action = edit["action"]
        if action == "add":
            s = edit["statement"]
            anchor = min(s["anchor_line"], limit)
            if anchor != s["anchor_line"]:
                notes.append(f"add anchor {s['anchor_line']} clamped to {limit}")
            statements.append(LoggingStatement(
                severity=Severity(s["severity"]),
                template=s["template"],
                variables=tuple(s["variables"]),
                anchor_line=anchor,
                position=Position(s["position"]),
            ))
            continue
        target = edit["target_anchor"]
        matches = [i for i, s in enumerate(statements) if s.anchor_line == target]
        if not matches:
            notes.append(f"{EditTargetMissing.__name__}: skipped {action}, no statement at anchor {target}")
            continue
        if action == "remove":
            for i in reversed(matches):
                del statements[i]
        else:  # modify
            changes = edit["changes"]
            i = matches[0]
            s = statements[i]
            statements[i] = LoggingStatement(
                severity=Severity(changes.get("severity", s.severity.value)),
                template=changes.get("template", s.template),
                variables=tuple(changes.get("variables", s.variables)),
                anchor_line=min(changes.get("anchor_line", s.anchor_line), limit),
                position=Position(changes.get("position", s.position.value)),
            )
    refined = normalize_plan(LoggingPlan(
        plan_id=plan.plan_id, revision=plan.revision + 1, statements=tuple(statements)))
    return refined, tuple(notes)


# -- the loop -------------------------------------------------------------

class _CallTracker:
    """Attributes gateway calls to the stage that issued them."""

    def __init__(self, gateway: Gateway):
        self.gateway = gateway
        self.pending: list[CallMeta] = []
        self._mark = len(gateway.calls)

    def note(self, purpose: str) -> None:
        for call in self.gateway.calls[self._mark:]:
            self.pending.append(CallMeta(
                purpose=purpose,
                template_id=call.template_id,
                digest=call.digest,
                provider=call.provider,
                attempts=call.attempts,
            ))
        self._mark = len(self.gateway.calls)

    def drain(self) -> tuple[CallMeta, ...]:
        out = tuple(self.pending)
        self.pending = []
        return out


def run_loop(
    source: SourceUnit,
    profile: ToolchainProfile,
    render: RenderProfile,
    gateway: Gateway,
    cfg: LoopConfig = LoopConfig(),
    extra_units: tuple[SourceUnit, ...] = (),
) -> RunLedger:
    """Run the full refinement loop; all failures become termination statuses.

    With ablate_refine the loop runs exactly one iteration (single pass);
    with ablate_fixer any compile failure terminates the run immediately.
    """
    if "unit" not in cfg.hints:
        cfg = replace(cfg, hints={"unit": source.path, **cfg.hints})
    iterations: list[IterationRecord] = []
    snapshot = cfg.snapshot()
    snapshot["toolchain"] = profile.name
    ledger = RunLedger(
        source_digest=source.digest,
        config_snapshot=snapshot,
        probe=None,
        iterations=iterations,
        termination=Termination.EXECUTION_ERROR,
        final_plan=None,
    )
    tracker = _CallTracker(gateway)

    try:
        probe = probe_original(source, profile, extra_units)
        ledger.probe = probe
        plan, pending_notes = _generate_with_notes(source, probe, gateway, cfg)
        tracker.note("generation")

        max_iterations = 1 if cfg.ablate_refine else cfg.max_iterations

        for iteration in range(max_iterations):
            iter_notes = tuple(pending_notes)
            pending_notes = []

            instr = apply_plan(source, plan, render)
            preserved = verify_logic_preserved(source, instr)
            if not preserved.ok:
                ledger.reason = f"instrumentation broke the source at line {preserved.divergent_line}"
                ledger.final_plan = plan
                return ledger

            compiled = compile_unit(instr, profile, extra_units)
            fix_attempts = 0
            if not compiled.ok:
                if cfg.ablate_fixer:
                    iterations.append(IterationRecord(
                        iteration=iteration, plan=plan, fix_attempts=0,
                        compile=compiled, gateway_calls=tracker.drain(),
                        notes=iter_notes,
                    ))
                    ledger.termination = Termination.COMPILE_FAILED
                    ledger.final_plan = plan
                    return ledger
                plan, compiled, fix_attempts = repair_compilation(
                    source, plan, profile, render, gateway, cfg.fix_budget,
                    cfg, extra_units, failing=compiled,
                )
                tracker.note("repair")
                if not compiled.ok:
                    iterations.append(IterationRecord(
                        iteration=iteration, plan=plan, fix_attempts=fix_attempts,
                        compile=compiled, gateway_calls=tracker.drain(),
                        notes=iter_notes,
                    ))
                    ledger.termination = Termination.COMPILE_FAILED
                    ledger.final_plan = plan
                    return ledger
                instr = apply_plan(source, plan, render)

            ws = materialize_workspace(instr, extra_units)
            try:
                if profile.compile_cmd.strip():
                    compile_unit(instr, profile, extra_units, workspace=ws)
                outcome = execute_unit(instr, profile, extra_units, workspace=ws)
            finally:
                cleanup_workspace(ws)

            verdict = evaluate_sufficiency(source, plan, outcome, gateway, cfg)
            tracker.note("critic")

            record = IterationRecord(
                iteration=iteration, plan=plan, fix_attempts=fix_attempts,
                compile=compiled, outcome=outcome, verdict=verdict,
                notes=iter_notes,
            )

            if verdict.sufficient:
                record.gateway_calls = tracker.drain()
                iterations.append(record)
                ledger.termination = Termination.SUFFICIENT
                ledger.final_plan = plan
                return ledger

            if iteration + 1 < max_iterations:
                plan, refine_notes = refine_plan(plan, verdict.feedback, gateway, source, cfg)
                tracker.note("refine")
                record.notes = record.notes + refine_notes
            record.gateway_calls = tracker.drain()
            iterations.append(record)

        ledger.termination = Termination.BUDGET_EXHAUSTED
        ledger.final_plan = plan
        return ledger

    except (MalformedAfterRetries, ProviderUnavailable, ReplayMiss, StoreWriteFailure) as exc:
        ledger.reason = f"gateway: {exc}"
        return ledger
    except ToolchainUnavailable as exc:
        ledger.reason = f"toolchain: {exc}"
        return ledger
    except ValueError as exc:
        ledger.reason = str(exc)
        return ledger
