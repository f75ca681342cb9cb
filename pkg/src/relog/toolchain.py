"""Drive external compile/run commands and classify what happened.

Every build lives in a throwaway workspace directory; nothing is written
into the caller's tree. Command templates support {workspace}, {main_file},
{units}, and {timeout} substitution and run with a minimal allowlisted
environment.
"""
from __future__ import annotations

import json
import os
import re
import shlex
import shutil
import subprocess
import tempfile
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from relog.core import InstrumentedUnit, RenderProfile, Severity, SourceUnit

try:
    import tomllib  # py311+
except ImportError:
    import tomli as tomllib


class ToolchainUnavailable(Exception):
    """The external command could not be spawned (distinct from a failure)."""


@dataclass(frozen=True)
class ToolchainProfile:
    """Configuration for one compile/run toolchain."""

    name: str
    compile_cmd: str
    run_cmd: str
    timeout_s: float
    log_marker: str
    test_cmd: str | None = None
    diagnostic_patterns: tuple[str, ...] = ()
    exception_patterns: tuple[str, ...] = ()
    frame_patterns: tuple[str, ...] = ()
    default_exception_type: str = "Error"
    stream_cap_bytes: int = 256 * 1024
    env_allowlist: tuple[str, ...] = ("PATH", "HOME", "LANG", "LC_ALL", "TMPDIR")
    workspace_template: str = "flat"

    def __post_init__(self):
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")

    def with_test_cmd(self, test_cmd: str | None) -> "ToolchainProfile":
        d = self.__dict__.copy()
        d["test_cmd"] = test_cmd
        return ToolchainProfile(**d)


@dataclass(frozen=True)
class CompilerDiagnostic:
    file: str
    line: int
    message: str
    raw: str
    mapped_line: int | None = None
    statement_index: int | None = None


@dataclass(frozen=True)
class CompileResult:
    ok: bool
    diagnostics: tuple[CompilerDiagnostic, ...] = ()
    stdout: str = ""
    stderr: str = ""


class ExecutionStatus(Enum):
    PASS = "pass"
    TEST_FAILURE = "test_failure"
    EXCEPTION = "exception"
    TIMEOUT = "timeout"
    CRASH = "crash"


@dataclass(frozen=True)
class ExceptionInfo:
    type_name: str
    message: str
    frames: tuple[tuple[str, int], ...] = ()


@dataclass(frozen=True)
class LogEvent:
    severity: Severity
    message: str
    sequence: int
    source_marker: int | None = None


@dataclass(frozen=True)
class ExecutionOutcome:
    status: ExecutionStatus
    exit_code: int | None
    stdout: str
    stderr: str
    log_events: tuple[LogEvent, ...] = ()
    exception_info: ExceptionInfo | None = None
    wall_time_ms: int = 0
    truncated: bool = False

    def __post_init__(self):
        if self.status is ExecutionStatus.TIMEOUT and self.exit_code is not None:
            raise ValueError("timeout outcome must have exit_code None")
        if self.status is ExecutionStatus.EXCEPTION and self.exception_info is None:
            raise ValueError("exception outcome requires exception_info")


def materialize_workspace(
    main_unit: InstrumentedUnit | SourceUnit,
    extra_units: tuple[SourceUnit, ...] = (),
    parent: str | Path | None = None,
) -> Path:
    """Write the unit(s) into a fresh throwaway directory; returns its path."""
    root = Path(tempfile.mkdtemp(prefix="relog-ws-", dir=str(parent) if parent else None))
    if isinstance(main_unit, InstrumentedUnit):
        main_path, text = main_unit.base.path, main_unit.rendered_text()
    else:
        main_path, text = main_unit.path, main_unit.to_text()
    _write_unit(root, main_path, text)
    for unit in extra_units:
        _write_unit(root, unit.path, unit.to_text())
    return root


def _write_unit(root: Path, rel_path: str, text: str) -> None:
    target = (root / rel_path).resolve()
    if root.resolve() not in target.parents and target != root.resolve():
        raise ValueError(f"unit path escapes workspace: {rel_path}")
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(text, encoding="utf-8")


def cleanup_workspace(workspace: Path) -> None:
    shutil.rmtree(workspace, ignore_errors=True)


def _command_argv(template: str, workspace: Path, main_file: str, units: list[str], timeout_s: float) -> list[str]:
    cmd = template.format(
        workspace=str(workspace),
        main_file=main_file,
        units=" ".join(units),
        timeout=str(int(timeout_s)),
    )
    return shlex.split(cmd)


def _run(
    template: str, workspace: Path, main_file: str, units: list[str], profile: ToolchainProfile
) -> tuple[int | None, str, str, int, bool]:
    """Run one command template; returns (exit, stdout, stderr, ms, timed_out)."""
    argv = _command_argv(template, workspace, main_file, units, profile.timeout_s)
    env = {k: os.environ[k] for k in profile.env_allowlist if k in os.environ}
    start = time.monotonic()
    try:
        proc = subprocess.run(
            argv,
            cwd=str(workspace),
            env=env,
            capture_output=True,
            text=True,
            errors="replace",
            timeout=profile.timeout_s,
        )
    except FileNotFoundError as exc:
        raise ToolchainUnavailable(f"cannot spawn {argv[0]!r}: {exc}") from exc
    except PermissionError as exc:
        raise ToolchainUnavailable(f"cannot spawn {argv[0]!r}: {exc}") from exc
    except subprocess.TimeoutExpired as exc:
        ms = int((time.monotonic() - start) * 1000)
        out = _as_text(exc.stdout)
        err = _as_text(exc.stderr)
        return None, out, err, ms, True
    ms = int((time.monotonic() - start) * 1000)
    return proc.returncode, proc.stdout, proc.stderr, ms, False


def _as_text(data) -> str:
    if data is None:
        return ""
    if isinstance(data, bytes):
        return data.decode("utf-8", errors="replace")
    return data


def _strip_workspace_paths(text: str, workspace: Path) -> str:
    # Absolute throwaway-dir paths would leak into outcomes and make
    # otherwise-identical runs compare unequal.
    return text.replace(f"{workspace}/", "").replace(str(workspace), ".")


def _cap(text: str, profile: ToolchainProfile) -> tuple[str, bool]:
    raw = text.encode("utf-8")
    if len(raw) <= profile.stream_cap_bytes:
        return text, False
    return raw[: profile.stream_cap_bytes].decode("utf-8", errors="replace"), True


def _unit_paths(main_unit, extra_units) -> tuple[str, list[str]]:
    main = main_unit.base.path if isinstance(main_unit, InstrumentedUnit) else main_unit.path
    return main, [main] + [u.path for u in extra_units]


def compile_unit(
    main_unit: InstrumentedUnit | SourceUnit,
    profile: ToolchainProfile,
    extra_units: tuple[SourceUnit, ...] = (),
    workspace: Path | None = None,
) -> CompileResult:
    """Compile the workspace; diagnostics are mapped to original coordinates.

    An empty compile_cmd (interpreted targets) trivially succeeds. Lines on
    marker-tagged rendered lines additionally carry the plan statement index.
    """
    if not profile.compile_cmd.strip():
        return CompileResult(ok=True)
    own = workspace is None
    ws = workspace or materialize_workspace(main_unit, extra_units)
    try:
        main_file, units = _unit_paths(main_unit, extra_units)
        code, out, err, _, timed_out = _run(profile.compile_cmd, ws, main_file, units, profile)
        out = _strip_workspace_paths(out, ws)
        err = _strip_workspace_paths(err, ws)
        if timed_out:
            return CompileResult(ok=False, diagnostics=(), stdout=out, stderr=err)
        ok = code == 0
        diags = parse_diagnostics(err + "\n" + out, profile, main_unit)
        return CompileResult(ok=ok, diagnostics=diags, stdout=out, stderr=err)
    finally:
        if own:
            cleanup_workspace(ws)


def parse_diagnostics(
    text: str, profile: ToolchainProfile, main_unit: InstrumentedUnit | SourceUnit | None = None
) -> tuple[CompilerDiagnostic, ...]:
    patterns = [re.compile(p) for p in profile.diagnostic_patterns]
    main_path = None
    if main_unit is not None:
        main_path = main_unit.base.path if isinstance(main_unit, InstrumentedUnit) else main_unit.path
    diags = []
    for raw in text.splitlines():
        for pat in patterns:
            m = pat.search(raw)
            if not m:
                continue
            file = m.group("file")
            line = int(m.group("line"))
            mapped = line
            stmt_index = None
            if isinstance(main_unit, InstrumentedUnit) and main_path and Path(file).name == Path(main_path).name:
                stmt_index = main_unit.statement_index_at(line)
                mapped = main_unit.original_line_for(line)
            diags.append(
                CompilerDiagnostic(
                    file=file,
                    line=line,
                    message=m.group("message").strip(),
                    raw=raw,
                    mapped_line=mapped,
                    statement_index=stmt_index,
                )
            )
            break
    return tuple(diags)


def extract_log_events(stderr_and_stdout: str, profile: ToolchainProfile) -> tuple[LogEvent, ...]:
    """Turn marker-prefixed output lines into LogEvents, in emission order.

    Expected line shape: <log_marker><severity>|#<index>|<message>; lines not
    starting with the marker are ignored, malformed marker lines become
    info-level events carrying the whole remainder.
    """
    events = []
    for line in stderr_and_stdout.splitlines():
        if not line.startswith(profile.log_marker):
            continue
        rest = line[len(profile.log_marker):]
        parts = rest.split("|", 2)
        severity = Severity.INFO
        source_marker = None
        message = rest
        if len(parts) == 3:
            sev_token, idx_token, message = parts
            try:
                severity = Severity(sev_token)
            except ValueError:
                message = rest
            if re.fullmatch(r"#\d+", idx_token):
                source_marker = int(idx_token[1:])
        events.append(
            LogEvent(
                severity=severity,
                message=message,
                sequence=len(events) + 1,
                source_marker=source_marker,
            )
        )
    return tuple(events)


def parse_exception(text: str, profile: ToolchainProfile) -> ExceptionInfo | None:
    """Scan output for a configured stack-trace pattern and its frames."""
    exc_pats = [re.compile(p) for p in profile.exception_patterns]
    frame_pats = [re.compile(p) for p in profile.frame_patterns]
    type_name = None
    message = ""
    frames: list[tuple[str, int]] = []
    for line in text.splitlines():
        for pat in frame_pats:
            m = pat.search(line)
            if m:
                frames.append((m.group("file"), int(m.group("line"))))
                break
        for pat in exc_pats:
            m = pat.search(line)
            if not m:
                continue
            groups = m.groupdict()
            type_name = groups.get("type") or profile.default_exception_type
            message = (groups.get("message") or "").strip()
            break
    if type_name is None:
        return None
    return ExceptionInfo(type_name=type_name, message=message, frames=tuple(frames))


def _map_frames(exc_info: ExceptionInfo, instr: InstrumentedUnit) -> ExceptionInfo:
    """Rewrite stack-trace frame lines from rendered to original coordinates."""
    base_name = Path(instr.base.path).name
    frames = []
    for file, line in exc_info.frames:
        if Path(file).name == base_name:
            mapped = instr.original_line_for(line)
            frames.append((file, mapped if mapped is not None else line))
        else:
            frames.append((file, line))
    return ExceptionInfo(exc_info.type_name, exc_info.message, tuple(frames))


def execute_unit(
    main_unit: InstrumentedUnit | SourceUnit,
    profile: ToolchainProfile,
    extra_units: tuple[SourceUnit, ...] = (),
    workspace: Path | None = None,
) -> ExecutionOutcome:
    """Run the program and classify the outcome.

    Classification order (first match wins): timeout; stack-trace pattern ->
    exception; failing test_cmd -> test_failure; nonzero exit -> crash; else
    pass. Log events come from the run command's streams only.
    """
    own = workspace is None
    ws = workspace or materialize_workspace(main_unit, extra_units)
    try:
        main_file, units = _unit_paths(main_unit, extra_units)
        if own and profile.compile_cmd.strip():
            pre = compile_unit(main_unit, profile, extra_units, workspace=ws)
            if not pre.ok:
                raise ValueError("execute_unit requires a successfully compiled workspace")
        code, out, err, ms, timed_out = _run(profile.run_cmd, ws, main_file, units, profile)
        out = _strip_workspace_paths(out, ws)
        err = _strip_workspace_paths(err, ws)
        out, t1 = _cap(out, profile)
        err, t2 = _cap(err, profile)
        events = extract_log_events(err + "\n" + out, profile)

        if timed_out:
            return ExecutionOutcome(
                status=ExecutionStatus.TIMEOUT,
                exit_code=None,
                stdout=out,
                stderr=err,
                log_events=events,
                wall_time_ms=ms,
                truncated=t1 or t2,
            )
        exc_info = parse_exception(err + "\n" + out, profile)
        if exc_info is not None and isinstance(main_unit, InstrumentedUnit):
            exc_info = _map_frames(exc_info, main_unit)
        if exc_info is not None:
            status = ExecutionStatus.EXCEPTION
        else:
            status = None
            if profile.test_cmd:
                t_code, _, _, t_ms, t_timed_out = _run(profile.test_cmd, ws, main_file, units, profile)
                ms += t_ms
                if t_timed_out or t_code != 0:
                    status = ExecutionStatus.TEST_FAILURE
            if status is None:
                status = ExecutionStatus.CRASH if code != 0 else ExecutionStatus.PASS
        return ExecutionOutcome(
            status=status,
            exit_code=code,
            stdout=out,
            stderr=err,
            log_events=events,
            exception_info=exc_info,
            wall_time_ms=ms,
            truncated=t1 or t2,
        )
    finally:
        if own:
            cleanup_workspace(ws)


def probe_commands(profile: ToolchainProfile) -> None:
    """Raise ToolchainUnavailable if a configured command binary is missing."""
    for template in (profile.compile_cmd, profile.run_cmd):
        if not template.strip():
            continue
        binary = shlex.split(template)[0]
        if "{" in binary:
            continue  # templated binary paths resolved at run time
        if "/" in binary:
            continue  # workspace-relative artifacts (e.g. ./app) exist only after compile
        if shutil.which(binary) is None:
            raise ToolchainUnavailable(f"command not found: {binary}")


def load_profile(path: str | Path) -> tuple[ToolchainProfile, RenderProfile]:
    """Load a combined toolchain+render profile from a JSON or TOML file."""
    p = Path(path)
    data = p.read_bytes()
    if p.suffix == ".toml":
        doc = tomllib.loads(data.decode("utf-8"))
    else:
        doc = json.loads(data.decode("utf-8"))
    return profile_from_dict(doc)


def profile_from_dict(doc: dict) -> tuple[ToolchainProfile, RenderProfile]:
    name = doc.get("name", "unnamed")
    tc = dict(doc["toolchain"])
    rd = dict(doc["render"])
    for key in ("diagnostic_patterns", "exception_patterns", "frame_patterns", "env_allowlist"):
        if key in tc:
            tc[key] = tuple(tc[key])
    if "escapes" in rd:
        rd["escapes"] = tuple((a, b) for a, b in rd["escapes"])
    toolchain = ToolchainProfile(name=name, **tc)
    render = RenderProfile(name=name, **rd)
    return toolchain, render


def builtin_profile(name: str) -> tuple[ToolchainProfile, RenderProfile]:
    """Load a profile shipped with the package (c-clang, python)."""
    here = Path(__file__).parent / "profiles" / f"{name}.json"
    if not here.exists():
        available = sorted(q.stem for q in (Path(__file__).parent / "profiles").glob("*.json"))
        raise FileNotFoundError(f"no builtin profile {name!r}; available: {available}")
    return load_profile(here)
