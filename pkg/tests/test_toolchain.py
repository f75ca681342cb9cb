import shutil

import pytest

from relog.core import (
    LoggingPlan,
    LoggingStatement,
    Position,
    Severity,
    SourceUnit,
    apply_plan,
)
from relog.toolchain import (
    ExecutionStatus,
    ToolchainUnavailable,
    builtin_profile,
    cleanup_workspace,
    compile_unit,
    execute_unit,
    extract_log_events,
    materialize_workspace,
    probe_commands,
)

clang_missing = shutil.which("clang") is None
needs_clang = pytest.mark.skipif(clang_missing, reason="clang not installed")

C_TOOLCHAIN, C_RENDER = builtin_profile("c-clang")
PY_TOOLCHAIN, PY_RENDER = builtin_profile("python")

OK_PROGRAM = """\
#include <stdio.h>

int main(void) {
    int total = 7;
    printf("RESULT:%d\\n", total);
    return 0;
}
"""

ASSERT_PROGRAM = """\
#include <stdio.h>
#include <assert.h>

static int divide(int num, int den) {
    assert(den != 0);
    return num / den;
}

int main(void) {
    int num = 6;
    int den = 0;
    int ratio = divide(num, den);
    printf("RESULT:%d\\n", ratio);
    return 0;
}
"""

LOOP_PROGRAM = """\
int main(void) {
    for (;;) {}
    return 0;
}
"""


def log_stmt(anchor, template="total={}", variables=("total",), position=Position.BEFORE):
    return LoggingStatement(Severity.INFO, template, tuple(variables), anchor, position)


@needs_clang
def test_pristine_program_compiles():
    src = SourceUnit.from_text("main.c", OK_PROGRAM)
    instr = apply_plan(src, LoggingPlan("p", 0), C_RENDER)
    result = compile_unit(instr, C_TOOLCHAIN)
    assert result.ok
    assert not result.diagnostics


@needs_clang
def test_undeclared_variable_diagnostic_maps_to_anchor():
    src = SourceUnit.from_text("main.c", OK_PROGRAM)
    plan = LoggingPlan("p", 0, (log_stmt(5, "ghost={}", ("ghost",)),))
    instr = apply_plan(src, plan, C_RENDER)
    result = compile_unit(instr, C_TOOLCHAIN)
    assert not result.ok
    mapped = [d for d in result.diagnostics if d.statement_index == 0]
    assert mapped, result.diagnostics
    assert mapped[0].mapped_line == 5
    assert "undeclared" in mapped[0].message


@needs_clang
def test_statement_after_return_is_unreachable_error():
    src = SourceUnit.from_text("main.c", OK_PROGRAM)
    plan = LoggingPlan("p", 0, (log_stmt(6, position=Position.AFTER),))
    instr = apply_plan(src, plan, C_RENDER)
    result = compile_unit(instr, C_TOOLCHAIN)
    assert not result.ok
    assert any(
        "never be executed" in d.message or "unreachable" in d.message
        for d in result.diagnostics
    )
    assert any(d.statement_index == 0 for d in result.diagnostics)


@needs_clang
def test_execute_pass_with_log_events():
    src = SourceUnit.from_text("main.c", OK_PROGRAM)
    plan = LoggingPlan("p", 0, (log_stmt(5),))
    instr = apply_plan(src, plan, C_RENDER)
    outcome = execute_unit(instr, C_TOOLCHAIN)
    assert outcome.status is ExecutionStatus.PASS
    assert outcome.exit_code == 0
    assert len(outcome.log_events) == 1
    assert outcome.log_events[0].message == "total=7"
    assert outcome.log_events[0].source_marker == 0
    assert outcome.log_events[0].severity is Severity.INFO


@needs_clang
def test_execute_assert_failure_classified_as_exception():
    src = SourceUnit.from_text("div.c", ASSERT_PROGRAM)
    outcome = execute_unit(src, C_TOOLCHAIN)
    assert outcome.status is ExecutionStatus.EXCEPTION
    assert outcome.exception_info is not None
    assert outcome.exception_info.type_name == "AssertionFailure"
    assert ("div.c", 5) in outcome.exception_info.frames


@needs_clang
def test_execute_timeout():
    src = SourceUnit.from_text("loop.c", LOOP_PROGRAM)
    profile = C_TOOLCHAIN.with_test_cmd(None)
    profile = type(profile)(**{**profile.__dict__, "timeout_s": 2})
    outcome = execute_unit(src, profile)
    assert outcome.status is ExecutionStatus.TIMEOUT
    assert outcome.exit_code is None
    assert outcome.wall_time_ms >= 2000


@needs_clang
def test_execute_nonzero_exit_is_crash():
    src = SourceUnit.from_text("rc.c", "int main(void) { return 3; }\n")
    outcome = execute_unit(src, C_TOOLCHAIN)
    assert outcome.status is ExecutionStatus.CRASH
    assert outcome.exit_code == 3


@needs_clang
def test_failing_test_cmd_classified_as_test_failure():
    wrong = OK_PROGRAM.replace("total = 7", "total = 6")
    src = SourceUnit.from_text("main.c", wrong)
    profile = C_TOOLCHAIN.with_test_cmd("sh -c './app | grep -q ^RESULT:7$'")
    outcome = execute_unit(src, profile)
    assert outcome.status is ExecutionStatus.TEST_FAILURE
    assert outcome.exit_code == 0


@needs_clang
def test_empty_plan_execution_matches_pristine():
    src = SourceUnit.from_text("main.c", OK_PROGRAM)
    pristine = execute_unit(src, C_TOOLCHAIN)
    instr = apply_plan(src, LoggingPlan("p", 0), C_RENDER)
    empty = execute_unit(instr, C_TOOLCHAIN)
    assert (pristine.status, pristine.stdout, pristine.stderr) == (
        empty.status,
        empty.stdout,
        empty.stderr,
    )


@needs_clang
def test_deterministic_execution():
    src = SourceUnit.from_text("div.c", ASSERT_PROGRAM)
    plan = LoggingPlan("p", 0, (log_stmt(11, "den={}", ("den",), Position.AFTER),))
    instr = apply_plan(src, plan, C_RENDER)
    a = execute_unit(instr, C_TOOLCHAIN)
    b = execute_unit(instr, C_TOOLCHAIN)
    assert a.status == b.status
    assert [e.message for e in a.log_events] == [e.message for e in b.log_events]


def test_empty_compile_cmd_trivially_succeeds():
    src = SourceUnit.from_text("main.py", "print('hello')\n")
    assert compile_unit(src, PY_TOOLCHAIN).ok


def test_python_exception_outcome():
    program = (
        "import sys\n"
        "\n"
        "def main():\n"
        "    values = [3, 1]\n"
        "    total = values[5]\n"
        '    print("RESULT:%d" % total)\n'
        "\n"
        "main()\n"
    )
    src = SourceUnit.from_text("main.py", program)
    outcome = execute_unit(src, PY_TOOLCHAIN)
    assert outcome.status is ExecutionStatus.EXCEPTION
    assert outcome.exception_info.type_name == "IndexError"
    assert ("main.py", 5) in outcome.exception_info.frames


def test_python_instrumented_log_events():
    program = (
        "import sys\n"
        "\n"
        "def main():\n"
        "    count = 3\n"
        '    print("RESULT:%d" % count)\n'
        "\n"
        "main()\n"
    )
    src = SourceUnit.from_text("main.py", program)
    plan = LoggingPlan("p", 0, (log_stmt(5, "count={}", ("count",)),))
    instr = apply_plan(src, plan, PY_RENDER)
    outcome = execute_unit(instr, PY_TOOLCHAIN)
    assert outcome.status is ExecutionStatus.PASS
    assert [e.message for e in outcome.log_events] == ["count=3"]


def test_extract_log_events_shapes():
    text = "noise\nRELOG|debug|#7|x=1\nother\nRELOG|warn|#2|y=0\nRELOG|info|#0|plain\n"
    events = extract_log_events(text, PY_TOOLCHAIN)
    assert [e.sequence for e in events] == [1, 2, 3]
    assert events[0].source_marker == 7
    assert events[0].severity is Severity.DEBUG
    assert events[1].message == "y=0"
    assert extract_log_events("", PY_TOOLCHAIN) == ()


def test_missing_binary_raises_toolchain_unavailable():
    profile = type(PY_TOOLCHAIN)(
        **{**PY_TOOLCHAIN.__dict__, "run_cmd": "definitely-not-a-real-binary {main_file}"}
    )
    src = SourceUnit.from_text("main.py", "print(1)\n")
    with pytest.raises(ToolchainUnavailable):
        execute_unit(src, profile)
    with pytest.raises(ToolchainUnavailable):
        probe_commands(profile)


def test_stream_truncation_flagged():
    program = "import sys\nfor i in range(500):\n    print('x' * 80)\n"
    src = SourceUnit.from_text("main.py", program)
    profile = type(PY_TOOLCHAIN)(**{**PY_TOOLCHAIN.__dict__, "stream_cap_bytes": 512})
    outcome = execute_unit(src, profile)
    assert outcome.truncated
    assert len(outcome.stdout.encode()) <= 512
    assert outcome.status is ExecutionStatus.PASS


def test_profile_loads_from_toml(tmp_path):
    toml_text = (
        'name = "t"\n'
        "[toolchain]\n"
        'compile_cmd = ""\n'
        'run_cmd = "python3 {main_file}"\n'
        "timeout_s = 5\n"
        'log_marker = "RELOG|"\n'
        "[render]\n"
        'call_format = "print({args})"\n'
        'call_format_no_args = "print()"\n'
        'placeholder = "%s"\n'
        'comment_open = "#"\n'
    )
    path = tmp_path / "t.toml"
    path.write_text(toml_text)
    from relog.toolchain import load_profile

    toolchain, render = load_profile(path)
    assert toolchain.name == "t"
    assert toolchain.run_cmd == "python3 {main_file}"
    assert render.comment_open == "#"


def test_workspace_is_throwaway(tmp_path):
    src = SourceUnit.from_text("a.py", "print(1)\n")
    ws = materialize_workspace(src, parent=tmp_path)
    assert (ws / "a.py").read_text() == "print(1)\n"
    cleanup_workspace(ws)
    assert not ws.exists()
