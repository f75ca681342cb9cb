"""Response payload schemas and hand-rolled validators.

Every model response is validated against one of these schemas before any
other module may see it. Validators raise SchemaError with a message precise
enough to feed back into a retry prompt.
"""
from __future__ import annotations

from relog.core import Position, Severity, slot_count

GENERATION_SCHEMA = "logging_plan@1"
REPAIR_SCHEMA = "logging_plan@1"
CRITIC_SCHEMA = "critic_verdict@1"
REFINEMENT_SCHEMA = "plan_edits@1"
DEBUG_SCHEMA = "debug_verdict@1"

SEVERITIES = {s.value for s in Severity}
POSITIONS = {p.value for p in Position}
ACTIONS = {"add", "remove", "modify"}


class SchemaError(Exception):
    """Payload does not conform to its declared schema."""


def validate_payload(schema_id: str, payload) -> None:
    try:
        validator = _VALIDATORS[schema_id]
    except KeyError:
        raise SchemaError(f"unknown schema {schema_id!r}") from None
    validator(payload)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise SchemaError(msg)


def _check_statement(s, where: str) -> None:
    _require(isinstance(s, dict), f"{where} must be an object")
    for key in ("anchor_line", "position", "severity", "template", "variables"):
        _require(key in s, f"{where} missing field {key!r}")
    _require(isinstance(s["anchor_line"], int) and s["anchor_line"] >= 1,
             f"{where}.anchor_line must be a positive integer")
    _require(s["position"] in POSITIONS, f"{where}.position must be one of {sorted(POSITIONS)}")
    _require(s["severity"] in SEVERITIES, f"{where}.severity must be one of {sorted(SEVERITIES)}")
    _require(isinstance(s["template"], str) and s["template"], f"{where}.template must be non-empty")
    _require(isinstance(s["variables"], list) and all(isinstance(v, str) for v in s["variables"]),
             f"{where}.variables must be a list of strings")
    slots = slot_count(s["template"])
    _require(slots == len(s["variables"]),
             f"{where}: template has {slots} slots but {len(s['variables'])} variables")


def _validate_logging_plan(payload) -> None:
    _require(isinstance(payload, dict), "plan must be an object")
    for key in ("plan_id", "revision", "statements"):
        _require(key in payload, f"plan missing field {key!r}")
    _require(isinstance(payload["plan_id"], str) and payload["plan_id"], "plan_id must be a string")
    _require(isinstance(payload["revision"], int) and payload["revision"] >= 0,
             "revision must be a non-negative integer")
    _require(isinstance(payload["statements"], list), "statements must be a list")
    for i, s in enumerate(payload["statements"]):
        _check_statement(s, f"statements[{i}]")


def _check_feedback_item(item, where: str) -> None:
    _require(isinstance(item, dict), f"{where} must be an object")
    for key in ("action", "subject", "detail"):
        _require(key in item, f"{where} missing field {key!r}")
    _require(item["action"] in ACTIONS, f"{where}.action must be one of {sorted(ACTIONS)}")
    anchor = item.get("target_anchor")
    _require(anchor is None or (isinstance(anchor, int) and anchor >= 1),
             f"{where}.target_anchor must be a positive integer or null")
    if item["action"] in ("remove", "modify"):
        _require(anchor is not None, f"{where}: {item['action']} requires target_anchor")


def _validate_critic_verdict(payload) -> None:
    _require(isinstance(payload, dict), "verdict must be an object")
    for dim in ("traceability", "state_visibility", "causal_linkage"):
        _require(dim in payload, f"verdict missing dimension {dim!r}")
        _require(payload[dim] in (0, 1, 2), f"{dim} must be 0, 1, or 2")
    _require(isinstance(payload.get("sufficient"), bool), "sufficient must be a boolean")
    _require(isinstance(payload.get("rationale"), str), "rationale must be a string")
    feedback = payload.get("feedback")
    _require(isinstance(feedback, list), "feedback must be a list")
    for i, item in enumerate(feedback):
        _check_feedback_item(item, f"feedback[{i}]")
    if not payload["sufficient"]:
        _require(len(feedback) > 0, "an insufficient verdict must carry feedback")


def _validate_plan_edits(payload) -> None:
    _require(isinstance(payload, dict), "edits document must be an object")
    _require(isinstance(payload.get("edits"), list), "edits must be a list")
    for i, edit in enumerate(payload["edits"]):
        where = f"edits[{i}]"
        _require(isinstance(edit, dict), f"{where} must be an object")
        action = edit.get("action")
        _require(action in ACTIONS, f"{where}.action must be one of {sorted(ACTIONS)}")
        if action == "add":
            _require("statement" in edit, f"{where}: add requires a statement")
            _check_statement(edit["statement"], f"{where}.statement")
        else:
            anchor = edit.get("target_anchor")
            _require(isinstance(anchor, int) and anchor >= 1,
                     f"{where}: {action} requires a positive target_anchor")
            if action == "modify":
                changes = edit.get("changes")
                _require(isinstance(changes, dict) and changes,
                         f"{where}: modify requires a non-empty changes object")
                allowed = {"severity", "template", "variables", "position", "anchor_line"}
                bad = set(changes) - allowed
                _require(not bad, f"{where}.changes has unknown fields {sorted(bad)}")


def _check_patch(patch, where: str) -> None:
    _require(isinstance(patch, dict), f"{where} must be an object")
    kind = patch.get("kind")
    if kind == "replace_unit":
        _require(isinstance(patch.get("content"), str), f"{where}.content must be a string")
    elif kind == "line_edits":
        _require(isinstance(patch.get("edits"), list), f"{where}.edits must be a list")
        for i, e in enumerate(patch["edits"]):
            _require(isinstance(e, dict), f"{where}.edits[{i}] must be an object")
            _require(e.get("op") in ("replace", "insert_after", "delete"),
                     f"{where}.edits[{i}].op must be replace/insert_after/delete")
            _require(isinstance(e.get("line"), int) and e["line"] >= 0,
                     f"{where}.edits[{i}].line must be a non-negative integer")
            if e.get("op") != "delete":
                _require(isinstance(e.get("text"), str), f"{where}.edits[{i}].text must be a string")
    else:
        raise SchemaError(f"{where}.kind must be replace_unit or line_edits")


def _validate_debug_verdict(payload) -> None:
    _require(isinstance(payload, dict), "verdict must be an object")
    _require(isinstance(payload.get("defect_reported"), bool), "defect_reported must be a boolean")
    _require(isinstance(payload.get("explanation"), str), "explanation must be a string")
    location = payload.get("location")
    if location is not None:
        _require(isinstance(location, dict), "location must be an object or null")
        _require(isinstance(location.get("file"), str), "location.file must be a string")
        _require("line" in location or "method" in location, "location needs line or method")
        if "line" in location:
            _require(isinstance(location["line"], int) and location["line"] >= 1,
                     "location.line must be a positive integer")
    patch = payload.get("patch")
    if patch is not None:
        _check_patch(patch, "patch")
        _require(payload["defect_reported"], "a patch requires defect_reported")


_VALIDATORS = {
    GENERATION_SCHEMA: _validate_logging_plan,
    CRITIC_SCHEMA: _validate_critic_verdict,
    REFINEMENT_SCHEMA: _validate_plan_edits,
    DEBUG_SCHEMA: _validate_debug_verdict,
}
