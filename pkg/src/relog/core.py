"""Core domain model: logging plans, source units, and the line instrumentor.

A logging plan is kept strictly apart from the source text. Rendering a plan
into a source unit produces marker-tagged lines that can always be stripped
back out, byte-for-byte, so the original program logic is provably untouched.
"""
from __future__ import annotations

import base64
import hashlib
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path


class Severity(Enum):
    TRACE = "trace"
    DEBUG = "debug"
    INFO = "info"
    WARN = "warn"
    ERROR = "error"


class Position(Enum):
    BEFORE = "before"
    AFTER = "after"


PLAN_ID_RE = re.compile(r"^[A-Za-z0-9_-]+$")

# Inline marker appended to every rendered logging line. The payload segment
# is a urlsafe-base64 JSON encoding of (severity, template, variables), which
# makes stripping exact without a parser for the target language.
MARKER_RE = re.compile(
    r"RELOG:(?P<plan_id>[A-Za-z0-9_-]+):(?P<index>\d+):(?P<anchor>\d+)"
    r":(?P<position>before|after):(?P<payload>[A-Za-z0-9_=-]*)"
)


class AnchorOutOfRange(Exception):
    """A statement's anchor_line exceeds the source unit's line count."""

    def __init__(self, line: int, limit: int):
        super().__init__(f"anchor line {line} out of range (source has {limit} lines)")
        self.line = line
        self.limit = limit


class MarkerCorruption(Exception):
    """A marker-tagged line cannot be parsed back into a logging statement."""


def slot_count(template: str) -> int:
    """Number of `{}` placeholder slots in a message template."""
    return template.count("{}")


@dataclass(frozen=True)
class LoggingStatement:
    """One logging call: severity, message template, and variables per slot.

    anchor_line is 1-based and always refers to the ORIGINAL source, never to
    rendered coordinates, across all plan revisions.
    """

    severity: Severity
    template: str
    variables: tuple[str, ...]
    anchor_line: int
    position: Position = Position.BEFORE

    def __post_init__(self):
        if not self.template:
            raise ValueError("template must be non-empty")
        if self.anchor_line < 1:
            raise ValueError(f"anchor_line must be >= 1, got {self.anchor_line}")
        slots = slot_count(self.template)
        if slots != len(self.variables):
            raise ValueError(
                f"template has {slots} slots but {len(self.variables)} variables given"
            )

    def to_dict(self) -> dict:
        return {
            "anchor_line": self.anchor_line,
            "position": self.position.value,
            "severity": self.severity.value,
            "template": self.template,
            "variables": list(self.variables),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LoggingStatement":
        return cls(
            severity=Severity(d["severity"]),
            template=d["template"],
            variables=tuple(d["variables"]),
            anchor_line=int(d["anchor_line"]),
            position=Position(d["position"]),
        )


@dataclass(frozen=True)
class LoggingPlan:
    """Ordered list of logging statements plus an identity and revision."""

    plan_id: str
    revision: int
    statements: tuple[LoggingStatement, ...] = ()

    def __post_init__(self):
        if not PLAN_ID_RE.match(self.plan_id):
            raise ValueError(f"plan_id must match [A-Za-z0-9_-]+, got {self.plan_id!r}")
        if self.revision < 0:
            raise ValueError("revision must be non-negative")

    def to_dict(self) -> dict:
        return {
            "plan_id": self.plan_id,
            "revision": self.revision,
            "statements": [s.to_dict() for s in self.statements],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LoggingPlan":
        return cls(
            plan_id=d["plan_id"],
            revision=int(d["revision"]),
            statements=tuple(LoggingStatement.from_dict(s) for s in d["statements"]),
        )


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class SourceUnit:
    """A source file as an ordered list of lines with a content digest."""

    path: str
    lines: tuple[str, ...]
    digest: str

    @classmethod
    def from_text(cls, path: str, text: str) -> "SourceUnit":
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]
        return cls(path=path, lines=tuple(lines), digest=text_digest(_join(lines)))

    @classmethod
    def from_file(cls, file_path: str | Path, rel_path: str | None = None) -> "SourceUnit":
        p = Path(file_path)
        return cls.from_text(rel_path or p.name, p.read_text(encoding="utf-8"))

    def to_text(self) -> str:
        return _join(self.lines)

    def digest_ok(self) -> bool:
        return self.digest == text_digest(self.to_text())


def _join(lines) -> str:
    return "\n".join(lines) + ("\n" if lines else "")


@dataclass(frozen=True)
class RenderProfile:
    """Surface syntax for rendering logging calls in a target language.

    call_format receives {severity}, {index}, {plan_id}, {template}, {args};
    call_format_no_args is used when a statement has no variables. Each `{}`
    slot in the message template is replaced with `placeholder`, and each
    variable expression is wrapped with arg_format before joining.
    """

    name: str
    call_format: str
    call_format_no_args: str
    placeholder: str
    comment_open: str
    comment_close: str = ""
    arg_format: str = "{var}"
    arg_separator: str = ", "
    escapes: tuple[tuple[str, str], ...] = ()
    copy_anchor_indent: bool = True
    block_style: str = "braces"  # braces | indent; drives method-span heuristics
    method_pattern: str = r"^[A-Za-z_][\w\s\*]*\w\s*\([^;]*\)\s*\{?\s*$"

    def render_template_text(self, template: str) -> str:
        """Escape template text and substitute placeholder slots."""
        out = []
        for i, part in enumerate(template.split("{}")):
            if i:
                out.append(self.placeholder)
            for src, dst in self.escapes:
                part = part.replace(src, dst)
            out.append(part)
        return "".join(out)


def _marker_token(profile: RenderProfile, plan_id: str, index: int, stmt: LoggingStatement) -> str:
    payload = base64.urlsafe_b64encode(
        json.dumps(
            {
                "severity": stmt.severity.value,
                "template": stmt.template,
                "variables": list(stmt.variables),
            },
            sort_keys=True,
            separators=(",", ":"),
        ).encode("utf-8")
    ).decode("ascii")
    return (
        f"{profile.comment_open}RELOG:{plan_id}:{index}:{stmt.anchor_line}"
        f":{stmt.position.value}:{payload}{profile.comment_close}"
    )


def render_statement(
    stmt: LoggingStatement, index: int, plan_id: str, profile: RenderProfile, indent: str = ""
) -> str:
    """Render one statement as a full marker-tagged source line."""
    fields = {
        "severity": stmt.severity.value,
        "index": index,
        "plan_id": plan_id,
        "template": profile.render_template_text(stmt.template),
    }
    if stmt.variables:
        args = profile.arg_separator.join(
            profile.arg_format.format(var=v) for v in stmt.variables
        )
        call = profile.call_format.format(args=args, **fields)
    else:
        call = profile.call_format_no_args.format(**fields)
    return f"{indent}{call} {_marker_token(profile, plan_id, index, stmt)}"


@dataclass(frozen=True)
class InstrumentedUnit:
    """A source unit with a logging plan rendered into it.

    Deleting every marker-tagged line from rendered_lines reproduces the base
    unit byte-for-byte; line_map sends original line numbers (1-based) to
    their rendered positions.
    """

    base: SourceUnit
    rendered_lines: tuple[str, ...]
    line_map: dict[int, int] = field(repr=False)
    plan_id: str = ""
    plan_revision: int = 0

    def rendered_text(self) -> str:
        return _join(self.rendered_lines)

    def statement_index_at(self, rendered_line: int) -> int | None:
        """Plan statement index for a rendered line, if it is a marker line."""
        if not 1 <= rendered_line <= len(self.rendered_lines):
            return None
        m = MARKER_RE.search(self.rendered_lines[rendered_line - 1])
        return int(m.group("index")) if m else None

    def original_line_for(self, rendered_line: int) -> int | None:
        """Map a rendered line number back to an original line number.

        Marker lines map to their statement's anchor; original lines map to
        themselves through the inverse of line_map.
        """
        if not 1 <= rendered_line <= len(self.rendered_lines):
            return None
        m = MARKER_RE.search(self.rendered_lines[rendered_line - 1])
        if m:
            return int(m.group("anchor"))
        for orig, rend in self.line_map.items():
            if rend == rendered_line:
                return orig
        return None


@dataclass(frozen=True)
class PreservationReport:
    ok: bool
    divergent_line: int | None = None
    expected: str | None = None
    found: str | None = None


def normalize_plan(plan: LoggingPlan) -> LoggingPlan:
    """Collapse exact duplicate statements and establish the sort invariant.

    Sorting is stable on anchor_line only, so statements sharing an anchor
    keep their original relative order. Idempotent; revision unchanged.
    """
    seen = set()
    unique = []
    for stmt in plan.statements:
        key = (stmt.anchor_line, stmt.position, stmt.severity, stmt.template, stmt.variables)
        if key in seen:
            continue
        seen.add(key)
        unique.append(stmt)
    unique.sort(key=lambda s: s.anchor_line)
    return LoggingPlan(plan_id=plan.plan_id, revision=plan.revision, statements=tuple(unique))


def apply_plan(source: SourceUnit, plan: LoggingPlan, syntax_profile: RenderProfile) -> InstrumentedUnit:
    """Insert a plan into a source unit as marker-tagged full lines.

    The plan is normalized first; statement indexes in markers refer to the
    normalized order. Statements with position=before appear immediately
    above their anchor line, position=after immediately below. The rendered
    line count equals the original count plus the (normalized) statement
    count.
    """
    plan = normalize_plan(plan)
    n = len(source.lines)
    for stmt in plan.statements:
        if stmt.anchor_line > n:
            raise AnchorOutOfRange(stmt.anchor_line, n)
    for line in source.lines:
        if MARKER_RE.search(line):
            raise ValueError("source contains the reserved RELOG marker token")

    before: dict[int, list[tuple[int, LoggingStatement]]] = {}
    after: dict[int, list[tuple[int, LoggingStatement]]] = {}
    for idx, stmt in enumerate(plan.statements):
        bucket = before if stmt.position is Position.BEFORE else after
        bucket.setdefault(stmt.anchor_line, []).append((idx, stmt))

    rendered: list[str] = []
    line_map: dict[int, int] = {}
    for lineno in range(1, n + 1):
        original = source.lines[lineno - 1]
        indent = _indent_of(original) if syntax_profile.copy_anchor_indent else ""
        for idx, stmt in before.get(lineno, []):
            rendered.append(render_statement(stmt, idx, plan.plan_id, syntax_profile, indent))
        rendered.append(original)
        line_map[lineno] = len(rendered)
        for idx, stmt in after.get(lineno, []):
            rendered.append(render_statement(stmt, idx, plan.plan_id, syntax_profile, indent))

    return InstrumentedUnit(
        base=source,
        rendered_lines=tuple(rendered),
        line_map=line_map,
        plan_id=plan.plan_id,
        plan_revision=plan.revision,
    )


def _indent_of(line: str) -> str:
    return line[: len(line) - len(line.lstrip(" \t"))]


def strip_plan(instr: InstrumentedUnit) -> tuple[SourceUnit, LoggingPlan]:
    """Recover the pristine source and the plan from an instrumented unit.

    Raises MarkerCorruption when markers are unparseable, duplicated, or when
    the non-marker residue does not reproduce the base unit byte-for-byte
    (e.g. a marker token was hand-edited away).
    """
    kept: list[str] = []
    found: dict[int, LoggingStatement] = {}
    plan_ids = set()
    for line in instr.rendered_lines:
        m = MARKER_RE.search(line)
        if not m:
            kept.append(line)
            continue
        try:
            payload = json.loads(base64.urlsafe_b64decode(m.group("payload")))
            stmt = LoggingStatement(
                severity=Severity(payload["severity"]),
                template=payload["template"],
                variables=tuple(payload["variables"]),
                anchor_line=int(m.group("anchor")),
                position=Position(m.group("position")),
            )
        except Exception as exc:
            raise MarkerCorruption(f"unparseable marker line: {line!r}") from exc
        index = int(m.group("index"))
        if index in found:
            raise MarkerCorruption(f"duplicate marker index {index}")
        found[index] = stmt
        plan_ids.add(m.group("plan_id"))

    if len(plan_ids) > 1:
        raise MarkerCorruption(f"inconsistent plan ids in markers: {sorted(plan_ids)}")
    if sorted(found) != list(range(len(found))):
        raise MarkerCorruption(f"marker indexes not contiguous: {sorted(found)}")
    if tuple(kept) != instr.base.lines:
        diff = _first_divergence(instr.base.lines, tuple(kept))
        raise MarkerCorruption(f"stripped lines diverge from base at line {diff}")

    source = SourceUnit(path=instr.base.path, lines=tuple(kept), digest=text_digest(_join(kept)))
    plan_id = plan_ids.pop() if plan_ids else instr.plan_id
    plan = LoggingPlan(
        plan_id=plan_id or instr.plan_id,
        revision=instr.plan_revision,
        statements=tuple(found[i] for i in range(len(found))),
    )
    return source, plan


def _first_divergence(expected: tuple[str, ...], actual: tuple[str, ...]) -> int:
    for i, (a, b) in enumerate(zip(expected, actual), start=1):
        if a != b:
            return i
    return min(len(expected), len(actual)) + 1


def verify_logic_preserved(original: SourceUnit, instr: InstrumentedUnit) -> PreservationReport:
    """Check that removing marker lines from instr yields original exactly."""
    residue = [ln for ln in instr.rendered_lines if not MARKER_RE.search(ln)]
    for i, (exp, got) in enumerate(zip(original.lines, residue), start=1):
        if exp != got:
            return PreservationReport(ok=False, divergent_line=i, expected=exp, found=got)
    if len(residue) != len(original.lines):
        line = min(len(residue), len(original.lines)) + 1
        exp = original.lines[line - 1] if line <= len(original.lines) else None
        got = residue[line - 1] if line <= len(residue) else None
        return PreservationReport(ok=False, divergent_line=line, expected=exp, found=got)
    return PreservationReport(ok=True)
