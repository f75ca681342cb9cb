"""Deterministic rule-based provider: the offline stand-in for a live model.

The rules are intentionally simple and fixture-configurable through the
`hints` slot (a JSON object): generation logs variables assigned near the
failure site, the critic demands the fixture's key variable, the refiner
applies feedback literally, and the fixer drops or repositions statements
named by compiler diagnostics. Every response is a pure function of the
envelope, which keeps recorded sessions replayable.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass

from relog.gateway import PromptEnvelope

NUMBERED_LINE_RE = re.compile(r"^\s*(\d+) \| (.*)$")
ASSIGNMENT_RE = re.compile(r"^\s*(?:[A-Za-z_][\w\[\]\*\s]*[\s\*])?([A-Za-z_]\w*)\s*=(?!=)")
UNDECLARED_RE = re.compile(r"undeclared|cannot find symbol|not defined|NameError|was not declared", re.I)
UNREACHABLE_RE = re.compile(r"unreachable|never be executed|dead code", re.I)

FAILURE_STATUSES = {"exception", "crash", "test_failure", "timeout"}


@dataclass(frozen=True)
class StubOptions:
    always_insufficient: bool = False
    broken_fixer: bool = False


class StubProvider:
    """Rule-driven completions keyed off the envelope's template."""

    kind = "stub"

    def __init__(self, options: StubOptions = StubOptions()):
        self.options = options

    def complete_raw(self, prompt: str, env: PromptEnvelope, attempt: int) -> str:
        handlers = {
            "generation": self._generate,
            "repair": self._repair,
            "critic": self._critic,
            "refine": self._refine,
            "debug": self._debug,
        }
        try:
            handler = handlers[env.template_id]
        except KeyError:
            raise ValueError(f"stub provider has no rule for template {env.template_id!r}") from None
        return json.dumps(handler(env), sort_keys=True)

    # -- helpers ---------------------------------------------------------

    @staticmethod
    def _hints(env: PromptEnvelope) -> dict:
        try:
            doc = json.loads(env.slots.get("hints", "") or "{}")
        except json.JSONDecodeError:
            return {}
        return doc if isinstance(doc, dict) else {}

    @staticmethod
    def _json_slot(env: PromptEnvelope, name: str, default):
        try:
            return json.loads(env.slots[name])
        except (KeyError, json.JSONDecodeError):
            return default

    @staticmethod
    def _code_lines(env: PromptEnvelope) -> dict[int, str]:
        lines = {}
        for raw in env.slots.get("code", "").splitlines():
            m = NUMBERED_LINE_RE.match(raw)
            if m:
                lines[int(m.group(1))] = m.group(2)
        return lines

    @staticmethod
    def _failure_line(outcome: dict, unit: str | None = None) -> int | None:
        """Innermost frame line, restricted to the instrumented unit if known.

        Anchors refer to the unit being instrumented; a frame inside another
        unit (indirect mode) must not be turned into an anchor there.
        """
        exc = outcome.get("exception") or {}
        frames = exc.get("frames") or []
        if unit:
            unit_name = unit.rsplit("/", 1)[-1]
            frames = [f for f in frames if str(f[0]).rsplit("/", 1)[-1] == unit_name]
        if frames:
            return int(frames[-1][1])
        return None

    @staticmethod
    def _statement(anchor, template, variables, severity="debug", position="after"):
        return {
            "anchor_line": anchor,
            "position": position,
            "severity": severity,
            "template": template,
            "variables": list(variables),
        }

    # -- stage rules -----------------------------------------------------

    def _generate(self, env: PromptEnvelope) -> dict:
        code = self._code_lines(env)
        outcome = self._json_slot(env, "outcome", {})
        hints = self._hints(env)
        plan_id = "plan-" + hashlib.sha256(env.slots.get("code", "").encode()).hexdigest()[:8]
        statements = []

        failure_line = None
        if outcome.get("status") in FAILURE_STATUSES:
            failure_line = self._failure_line(outcome, hints.get("unit"))

        if failure_line is not None and code:
            lo = max(1, failure_line - 2)
            hi = min(max(code), failure_line + 2)
            statements.append(self._statement(
                min(failure_line, max(code)), f"reached line {failure_line}", (),
                severity="trace", position="before",
            ))
            for lineno in range(lo, hi + 1):
                m = ASSIGNMENT_RE.match(code.get(lineno, ""))
                if m:
                    var = m.group(1)
                    statements.append(self._statement(lineno, f"{var}={{}}", (var,)))
        elif code:
            assign_lines = [(n, ASSIGNMENT_RE.match(t)) for n, t in sorted(code.items())]
            assign_lines = [(n, m.group(1)) for n, m in assign_lines if m]
            if assign_lines:
                first_line, first_var = assign_lines[0]
                statements.append(self._statement(
                    first_line, "entering", (), severity="trace", position="before"))
                statements.append(self._statement(first_line, f"{first_var}={{}}", (first_var,)))
            return_lines = [
                (n, t) for n, t in sorted(code.items()) if re.match(r"\s*return\b", t)
            ]
            if return_lines:
                n, text = return_lines[-1]
                m = re.match(r"\s*return\s+([A-Za-z_]\w*)\s*;?\s*$", text)
                if m:
                    statements.append(self._statement(
                        n, f"returning {m.group(1)}={{}}", (m.group(1),), position="before"))
                else:
                    statements.append(self._statement(
                        n, "returning", (), severity="trace", position="before"))

        if hints.get("corrupt_plan"):
            anchor = failure_line or (max(code) if code else 1)
            assigns = [n for n, t in sorted(code.items()) if ASSIGNMENT_RE.match(t)]
            if assigns:
                anchor = assigns[-1]
            statements.append(self._statement(anchor, "ghost={}", ("__relog_ghost__",)))

        return {"plan_id": plan_id, "revision": 0, "statements": statements}

    def _repair(self, env: PromptEnvelope) -> dict:
        plan = self._json_slot(env, "plan", {"plan_id": "plan", "revision": 0, "statements": []})
        if self.options.broken_fixer:
            return plan
        diagnostics = self._json_slot(env, "diagnostics", [])
        statements = list(plan.get("statements", []))

        anchored = {}
        for idx, stmt in enumerate(statements):
            anchored.setdefault(stmt["anchor_line"], idx)

        drop: set[int] = set()
        flip: set[int] = set()
        matched_any = False
        for diag in diagnostics:
            idx = diag.get("statement_index")
            if idx is None and diag.get("mapped_line") in anchored:
                idx = anchored[diag["mapped_line"]]
            if idx is None or not 0 <= idx < len(statements):
                continue
            matched_any = True
            if UNREACHABLE_RE.search(diag.get("message", "")):
                flip.add(idx)
            else:
                drop.add(idx)
        if not matched_any and statements:
            drop.add(len(statements) - 1)

        repaired = []
        for idx, stmt in enumerate(statements):
            if idx in drop:
                continue
            if idx in flip and stmt["position"] == "after":
                stmt = dict(stmt, position="before")
            repaired.append(stmt)
        return {"plan_id": plan.get("plan_id", "plan"), "revision": plan.get("revision", 0),
                "statements": repaired}

    def _critic(self, env: PromptEnvelope) -> dict:
        hints = self._hints(env)
        outcome = self._json_slot(env, "outcome", {})
        events = self._json_slot(env, "events", [])
        messages = [e.get("message", "") for e in events if isinstance(e, dict)]
        key_var = hints.get("key_variable")

        if self.options.always_insufficient:
            return {
                "traceability": 0, "state_visibility": 0, "causal_linkage": 0,
                "sufficient": False,
                "feedback": [{
                    "action": "add", "target_anchor": None,
                    "subject": key_var or "state",
                    "detail": "the configured critic never accepts; add more evidence",
                }],
                "rationale": "configured to always demand refinement",
            }

        traceability = 2 if messages else 0
        key_logged = bool(key_var) and any(f"{key_var}=" in m for m in messages)
        any_state = any("=" in m for m in messages)
        if key_var:
            state_visibility = 2 if key_logged else (1 if any_state else 0)
            causal = 2 if key_logged else (1 if outcome.get("exception") and messages else 0)
        else:
            state_visibility = 2 if any_state else 0
            causal = state_visibility

        scores = (traceability, state_visibility, causal)
        sufficient = all(s >= 1 for s in scores) and sum(1 for s in scores if s == 2) >= 2
        feedback = []
        if not sufficient:
            subject = key_var or "state"
            feedback.append({
                "action": "add",
                "target_anchor": self._failure_line(outcome, hints.get("unit")),
                "subject": subject,
                "detail": f"log the value of {subject} near the failure site",
            })
        return {
            "traceability": traceability,
            "state_visibility": state_visibility,
            "causal_linkage": causal,
            "sufficient": sufficient,
            "feedback": feedback,
            "rationale": "rule-based assessment over collected events",
        }

    def _refine(self, env: PromptEnvelope) -> dict:
        feedback = self._json_slot(env, "feedback", [])
        plan = self._json_slot(env, "plan", {"statements": []})
        statements = plan.get("statements", [])
        fallback_anchor = statements[-1]["anchor_line"] if statements else 1

        edits = []
        for item in feedback:
            action = item.get("action")
            if action == "add":
                anchor = item.get("target_anchor") or fallback_anchor
                subject = item.get("subject", "state")
                edits.append({
                    "action": "add",
                    "statement": self._statement(
                        anchor, f"{subject}={{}}", (subject,), position="before"),
                })
            elif action == "remove":
                edits.append({"action": "remove", "target_anchor": item["target_anchor"]})
            elif action == "modify":
                edits.append({
                    "action": "modify",
                    "target_anchor": item["target_anchor"],
                    "changes": {"severity": "debug"},
                })
        return {"edits": edits}

    def _debug(self, env: PromptEnvelope) -> dict:
        hints = self._hints(env)
        outcome = self._json_slot(env, "outcome", {})
        events = self._json_slot(env, "events", [])
        violation = hints.get("violation")

        if violation:
            for ev in events:
                if isinstance(ev, dict) and violation in ev.get("message", ""):
                    return {
                        "defect_reported": True,
                        "location": {
                            "file": ev.get("unit", "unknown"),
                            "line": int(ev.get("anchor_line", 1)),
                        },
                        "explanation": f"logged value violates expectation: {ev['message']!r}",
                        "patch": None,
                    }
        exc = outcome.get("exception") or {}
        frames = exc.get("frames") or []
        if frames:
            file, line = frames[-1]
            return {
                "defect_reported": True,
                "location": {"file": file, "line": int(line)},
                "explanation": f"execution raised {exc.get('type_name', 'an error')} here",
                "patch": None,
            }
        return {
            "defect_reported": False,
            "location": None,
            "explanation": "no exception signal and no logged value violates the expectation",
            "patch": None,
        }
