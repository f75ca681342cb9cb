"""Deterministic fixture-corpus builder for harness and acceptance tests.

Three instance templates:
  A: assert failure, key variable assigned next to the failing line, so the
     stub loop converges in its first iteration.
  B: silent wrong value caught by a grep check; the key variable only gets
     logged after one critic-driven refinement round.
  C: indirect two-unit instance; the defect sits in a callee whose source is
     withheld, and the caller is instrumented.
"""
from __future__ import annotations

import json
import shutil
from pathlib import Path

PROFILE_SRC = Path(__file__).resolve().parents[1] / "src" / "relog" / "profiles" / "c-clang.json"

TEMPLATE_A = """\
#include <stdio.h>
#include <assert.h>

int main(void) {{
    int base = {base};
    int offset = base - {sub};
    assert(offset > 0);
    printf("RESULT:%d\\n", base / offset);
    return 0;
}}
"""

TEMPLATE_B = """\
#include <stdio.h>

static int scale(int value, int factor) {{
    int scaled = value * factor;
    return scaled;
}}

int main(void) {{
    int input = {input};
    int factor = {factor};
    int result = scale(input, factor);
    printf("RESULT:%d\\n", result);
    return 0;
}}
"""

TEMPLATE_C_CALLER = """\
#include <stdio.h>

int lookup(int key);

int main(void) {{
    int key = {key};
    int index = lookup(key);
    printf("RESULT:%d\\n", index);
    return 0;
}}
"""

TEMPLATE_C_LIB = """\
#include <assert.h>

int lookup(int key) {{
    int slot = key - {sub};
    assert(slot > 0);
    return 100 / slot;
}}
"""


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def make_instance_a(root: Path, name: str, base: int, corrupt: bool = False) -> dict:
    d = root / name
    _write(d / "main.c", TEMPLATE_A.format(base=base, sub=base))
    _write(d / "fixed_main.c", TEMPLATE_A.format(base=base, sub=base - 1))
    hints = {"key_variable": "offset", "violation": "offset=0"}
    if corrupt:
        hints["corrupt_plan"] = True
    return {
        "instance_id": name,
        "mode": "direct",
        "defective_unit": f"{name}/main.c",
        "fixed_unit": f"{name}/fixed_main.c",
        "tests": {"run": "./app"},
        "failing_tests": ["run"],
        "fault_lines": [["main.c", 6]],
        "hints": hints,
    }


def make_instance_b(root: Path, name: str, input_val: int, good: int, bad: int,
                    corrupt: bool = False) -> dict:
    d = root / name
    _write(d / "main.c", TEMPLATE_B.format(input=input_val, factor=bad))
    _write(d / "fixed_main.c", TEMPLATE_B.format(input=input_val, factor=good))
    expected = input_val * good
    hints = {"key_variable": "factor", "violation": f"factor={bad}"}
    if corrupt:
        hints["corrupt_plan"] = True
    return {
        "instance_id": name,
        "mode": "direct",
        "defective_unit": f"{name}/main.c",
        "fixed_unit": f"{name}/fixed_main.c",
        "tests": {
            "run": "./app",
            "expected": f"sh -c './app | grep -q ^RESULT:{expected}$'",
        },
        "failing_tests": ["expected"],
        "regression_tests": ["run"],
        "fault_lines": [["main.c", 10]],
        "hints": hints,
    }


def make_instance_c(root: Path, name: str, key: int) -> dict:
    d = root / name
    _write(d / "caller.c", TEMPLATE_C_CALLER.format(key=key))
    _write(d / "lib.c", TEMPLATE_C_LIB.format(sub=key))
    _write(d / "fixed_lib.c", TEMPLATE_C_LIB.format(sub=key - 1))
    return {
        "instance_id": name,
        "mode": "indirect",
        "defective_unit": f"{name}/lib.c",
        "fixed_unit": f"{name}/fixed_lib.c",
        "caller_units": [f"{name}/caller.c"],
        "tests": {"run": "./app"},
        "failing_tests": ["run"],
        "fault_lines": [["lib.c", 4]],
        "hints": {"key_variable": "key"},
    }


def write_manifest(root: Path, instances: list[dict]) -> Path:
    shutil.copy(PROFILE_SRC, root / "profile.json")
    manifest = {"toolchain_profile": "profile.json", "instances": instances}
    path = root / "manifest.json"
    _write(path, json.dumps(manifest, indent=2) + "\n")
    return path


def build_ablation_corpus(root: Path, count: int = 20) -> Path:
    """Half template A, half template B; every other instance of each half is
    marked corrupt_plan so the stub generator injects an uncompilable
    statement in 50% of plans overall."""
    root.mkdir(parents=True, exist_ok=True)
    instances = []
    half = count // 2
    for i in range(half):
        instances.append(make_instance_a(root, f"a-{i:02d}", base=7 + i, corrupt=i % 2 == 0))
    for i in range(count - half):
        instances.append(make_instance_b(
            root, f"b-{i:02d}", input_val=3 + i, good=4 + i, bad=2 + i, corrupt=i % 2 == 0))
    return write_manifest(root, instances)


def build_convergent_corpus(root: Path) -> Path:
    """Ten instances designed to reach a sufficient verdict within five
    iterations under the stub providers."""
    root.mkdir(parents=True, exist_ok=True)
    instances = []
    for i in range(4):
        instances.append(make_instance_a(root, f"a-{i:02d}", base=11 + i))
    for i in range(3):
        instances.append(make_instance_b(root, f"b-{i:02d}", input_val=5 + i, good=6 + i, bad=3 + i))
    for i in range(3):
        instances.append(make_instance_c(root, f"c-{i:02d}", key=9 + i))
    return write_manifest(root, instances)


def build_small_corpus(root: Path) -> Path:
    """One instance of each template, for fast unit tests."""
    root.mkdir(parents=True, exist_ok=True)
    return write_manifest(root, [
        make_instance_a(root, "a-00", base=9),
        make_instance_b(root, "b-00", input_val=5, good=7, bad=3),
        make_instance_c(root, "c-00", key=12),
    ])
