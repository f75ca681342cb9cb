"""Ledger persistence and human-readable trace rendering.

A run ledger is one JSON-lines file: a header, one record per iteration, and
a footer. Serialization is canonical (sorted keys, no wall-clock or timing
fields), so two replays of the same recorded session produce byte-identical
files. The report renderer is a pure function of the ledger text.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

from relog.pipeline import IterationRecord, RunLedger, outcome_doc

LEDGER_FORMAT = "relog-ledger@1"


def _compile_doc(record: IterationRecord) -> dict:
    return {
        "ok": record.compile.ok,
        "diagnostics": [
            {"file": d.file, "line": d.line, "mapped_line": d.mapped_line,
             "statement_index": d.statement_index, "message": d.message}
            for d in record.compile.diagnostics
        ],
        "stderr_tail": record.compile.stderr[-800:],
    }


def _iteration_doc(record: IterationRecord) -> dict:
    return {
        "kind": "iteration",
        "iteration": record.iteration,
        "plan": record.plan.to_dict(),
        "fix_attempts": record.fix_attempts,
        "compile": _compile_doc(record),
        "outcome": outcome_doc(record.outcome) if record.outcome else None,
        "event_count": len(record.outcome.log_events) if record.outcome else 0,
        "verdict": record.verdict.to_dict() if record.verdict else None,
        "gateway_calls": [c.to_dict() for c in record.gateway_calls],
        "notes": list(record.notes),
    }


def ledger_to_jsonl(ledger: RunLedger) -> str:
    header = {
        "kind": "header",
        "format": LEDGER_FORMAT,
        "source_digest": ledger.source_digest,
        "config": ledger.config_snapshot,
        "probe": outcome_doc(ledger.probe) if ledger.probe else None,
    }
    footer = {
        "kind": "footer",
        "termination": ledger.termination.value,
        "reason": ledger.reason,
        "final_plan": ledger.final_plan.to_dict() if ledger.final_plan else None,
        "iterations": len(ledger.iterations),
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(_iteration_doc(r), sort_keys=True) for r in ledger.iterations]
    lines.append(json.dumps(footer, sort_keys=True))
    return "\n".join(lines) + "\n"


def write_ledger(ledger: RunLedger, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(ledger_to_jsonl(ledger), encoding="utf-8")
    return p


def ledger_digest(jsonl_text: str) -> str:
    return hashlib.sha256(jsonl_text.encode("utf-8")).hexdigest()


def parse_ledger(jsonl_text: str) -> tuple[dict, list[dict], dict]:
    """Split ledger text into (header, iterations, footer); validates shape."""
    records = [json.loads(line) for line in jsonl_text.splitlines() if line.strip()]
    if not records or records[0].get("kind") != "header" or records[-1].get("kind") != "footer":
        raise ValueError("not a ledger file: missing header or footer record")
    body = records[1:-1]
    if any(r.get("kind") != "iteration" for r in body):
        raise ValueError("ledger body contains non-iteration records")
    return records[0], body, records[-1]


# -- report rendering -------------------------------------------------------

def _statement_key(s: dict) -> tuple:
    return (s["anchor_line"], s["position"], s["severity"], s["template"], tuple(s["variables"]))


def _fmt_statement(s: dict) -> str:
    vars_part = f" [{', '.join(s['variables'])}]" if s["variables"] else ""
    return f"L{s['anchor_line']}/{s['position']} {s['severity']} \"{s['template']}\"{vars_part}"


def _plan_diff_lines(prev: list[dict], cur: list[dict]) -> list[str]:
    prev_keys = {_statement_key(s) for s in prev}
    cur_keys = {_statement_key(s) for s in cur}
    lines = []
    for s in cur:
        if _statement_key(s) not in prev_keys:
            lines.append(f"  + {_fmt_statement(s)}")
    for s in prev:
        if _statement_key(s) not in cur_keys:
            lines.append(f"  - {_fmt_statement(s)}")
    if not lines:
        lines.append("  (plan unchanged)")
    return lines


def _fmt_outcome(doc: dict | None) -> str:
    if doc is None:
        return "not executed"
    parts = [f"status={doc['status']}", f"exit={doc['exit_code']}"]
    if doc.get("exception"):
        exc = doc["exception"]
        at = ""
        if exc.get("frames"):
            file, line = exc["frames"][-1]
            at = f" @ {file}:{line}"
        parts.append(f"exception={exc['type_name']}{at}")
    parts.append(f"events={len(doc.get('events', []))}")
    return " ".join(parts)


def render_report(jsonl_text: str) -> str:
    """Render a per-iteration narrative (plan diffs, fixes, outcome, verdict)."""
    header, iterations, footer = parse_ledger(jsonl_text)
    cfg = header.get("config", {})
    out = []
    out.append(f"run source={header['source_digest'][:12]} toolchain={cfg.get('toolchain', '?')}")
    out.append(
        "config: "
        + " ".join(
            f"{k}={cfg.get(k)}"
            for k in ("max_iterations", "fix_budget", "ablate_fixer", "ablate_refine", "mode")
        )
    )
    out.append(f"probe: {_fmt_outcome(header.get('probe'))}")

    prev_statements: list[dict] = []
    for rec in iterations:
        out.append("")
        out.append(f"== iteration {rec['iteration']} ==")
        plan = rec["plan"]
        out.append(f"plan {plan['plan_id']} rev {plan['revision']} ({len(plan['statements'])} statements)")
        out.extend(_plan_diff_lines(prev_statements, plan["statements"]))
        prev_statements = plan["statements"]

        comp = rec["compile"]
        if comp["ok"]:
            fixed = f" after {rec['fix_attempts']} repair attempt(s)" if rec["fix_attempts"] else ""
            out.append(f"compile: ok{fixed}")
        else:
            out.append(f"compile: FAILED after {rec['fix_attempts']} repair attempt(s)")
            for d in comp["diagnostics"]:
                where = f"{d['file']}:{d['line']}"
                mapped = f" (original line {d['mapped_line']})" if d.get("mapped_line") else ""
                stmt = f" [statement {d['statement_index']}]" if d.get("statement_index") is not None else ""
                out.append(f"  ! {where}{mapped}{stmt}: {d['message']}")

        out.append(f"outcome: {_fmt_outcome(rec.get('outcome'))}")
        verdict = rec.get("verdict")
        if verdict:
            out.append(
                "verdict: traceability={traceability} state_visibility={state_visibility} "
                "causal_linkage={causal_linkage} sufficient={sufficient}".format(**verdict)
            )
            for f in verdict["feedback"]:
                anchor = f" @ L{f['target_anchor']}" if f.get("target_anchor") else ""
                out.append(f"  feedback: {f['action']} {f['subject']}{anchor}: {f['detail']}")
        for note in rec.get("notes", []):
            out.append(f"  note: {note}")
        for call in rec.get("gateway_calls", []):
            out.append(
                f"  call: {call['purpose']} via {call['provider']} "
                f"attempts={call['attempts']} digest={call['digest'][:12]}"
            )

    out.append("")
    out.append(f"== termination: {footer['termination']} after {footer['iterations']} iteration(s) ==")
    if footer.get("reason"):
        out.append(f"reason: {footer['reason']}")
    final = footer.get("final_plan")
    if final:
        out.append(f"final plan {final['plan_id']} rev {final['revision']} ({len(final['statements'])} statements)")
        for s in final["statements"]:
            out.append(f"  {_fmt_statement(s)}")
    return "\n".join(out) + "\n"
