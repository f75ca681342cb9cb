import json

import pytest

from relog.gateway import (
    Gateway,
    MalformedAfterRetries,
    PromptEnvelope,
    ProviderUnavailable,
    RemoteProvider,
    ReplayMiss,
    ReplayProvider,
    ReplayStore,
    envelope_digest,
)
from relog.rulestub import StubProvider
from relog.schemas import (
    CRITIC_SCHEMA,
    DEBUG_SCHEMA,
    GENERATION_SCHEMA,
    REFINEMENT_SCHEMA,
    SchemaError,
    validate_payload,
)

NUMBERED_CODE = "\n".join(
    f"{i:4d} | {text}"
    for i, text in enumerate(
        [
            "#include <stdio.h>",
            "int main(void) {",
            "    int a = 1;",
            "",
            "    int b = 2;",
            "",
            "",
            "",
            "",
            "    int near_one = 5;",
            "    int near_two = near_one + 1;",
            "    int fail_here = near_two;",
            "    int after_one = 9;",
            "    printf(\"%d\", fail_here);",
            "    return 0;",
            "}",
        ],
        start=1,
    )
)

EXC_OUTCOME = json.dumps(
    {
        "status": "exception",
        "exit_code": 134,
        "exception": {"type_name": "AssertionFailure", "message": "boom", "frames": [["main.c", 12]]},
        "events": [],
        "stdout_tail": "",
        "stderr_tail": "",
    }
)

PASS_OUTCOME = json.dumps(
    {"status": "pass", "exit_code": 0, "exception": None, "events": [],
     "stdout_tail": "RESULT:1", "stderr_tail": ""}
)


def gen_envelope(outcome=EXC_OUTCOME, hints="{}"):
    return PromptEnvelope(
        template_id="generation",
        slots={
            "mode": "failure_guided",
            "goal": "expose the failing state",
            "code": NUMBERED_CODE,
            "outcome": outcome,
            "hints": hints,
        },
        expected_schema=GENERATION_SCHEMA,
    )


def test_stub_generation_anchors_near_failure_site():
    gw = Gateway(StubProvider())
    response = gw.complete(gen_envelope())
    statements = response.payload["statements"]
    assert statements, "failure-guided generation must produce statements"
    assert all(10 <= s["anchor_line"] <= 14 for s in statements)
    logged = {v for s in statements for v in s["variables"]}
    assert {"near_one", "near_two", "fail_here", "after_one"} <= logged


def test_stub_generation_fallback_logs_entry_and_return():
    gw = Gateway(StubProvider())
    response = gw.complete(gen_envelope(outcome=PASS_OUTCOME))
    statements = response.payload["statements"]
    templates = [s["template"] for s in statements]
    assert any("entering" in t for t in templates)
    assert any(t.startswith("returning") for t in templates)


def test_stub_generation_corrupt_hint_injects_undeclared_variable():
    gw = Gateway(StubProvider())
    response = gw.complete(gen_envelope(hints=json.dumps({"corrupt_plan": True})))
    assert any("__relog_ghost__" in s["variables"] for s in response.payload["statements"])


def test_stub_is_deterministic_per_envelope():
    env = gen_envelope()
    first = Gateway(StubProvider()).complete(env)
    second = Gateway(StubProvider()).complete(env)
    assert first.raw == second.raw
    assert first.digest == second.digest


def test_record_then_replay_returns_recorded_payload(tmp_path):
    store = ReplayStore(tmp_path / "recordings")
    env = gen_envelope()
    recorded = Gateway(StubProvider(), record_store=store).complete(env)
    assert len(store) == 1

    replay_gw = Gateway(ReplayProvider(store))
    replayed = replay_gw.complete(env)
    assert replayed.payload == recorded.payload
    assert replayed.attempts == 1
    assert replayed.provider == "replay"


def test_replay_miss_on_unknown_envelope(tmp_path):
    store = ReplayStore(tmp_path / "recordings")
    gw = Gateway(ReplayProvider(store))
    with pytest.raises(ReplayMiss):
        gw.complete(gen_envelope())


def test_replay_miss_on_mutated_source(tmp_path):
    store = ReplayStore(tmp_path / "recordings")
    Gateway(StubProvider(), record_store=store).complete(gen_envelope())
    mutated = gen_envelope()
    mutated.slots["code"] = NUMBERED_CODE.replace("int a = 1", "int a = 2")
    with pytest.raises(ReplayMiss):
        Gateway(ReplayProvider(store)).complete(mutated)


class ProseProvider:
    kind = "remote"

    def __init__(self):
        self.calls = 0

    def complete_raw(self, prompt, env, attempt):
        self.calls += 1
        return "I would add a log statement at line 3, great question!"


def test_malformed_output_exhausts_retries():
    provider = ProseProvider()
    gw = Gateway(provider, retry_limit=2)
    with pytest.raises(MalformedAfterRetries) as exc:
        gw.complete(gen_envelope())
    assert provider.calls == 3
    assert exc.value.attempts == 3
    assert "log statement" in exc.value.last_raw


class FlakyThenValidProvider:
    kind = "remote"

    def __init__(self, valid_raw):
        self.calls = 0
        self.valid_raw = valid_raw

    def complete_raw(self, prompt, env, attempt):
        self.calls += 1
        if self.calls < 2:
            return "not json"
        return self.valid_raw


def test_retry_recovers_on_second_attempt():
    plan = {"plan_id": "p", "revision": 0, "statements": []}
    gw = Gateway(FlakyThenValidProvider(json.dumps(plan)), retry_limit=2)
    response = gw.complete(gen_envelope())
    assert response.attempts == 2
    assert response.payload == plan


def test_missing_slot_rejected():
    env = PromptEnvelope(
        template_id="generation",
        slots={"mode": "failure_guided"},
        expected_schema=GENERATION_SCHEMA,
    )
    with pytest.raises(ValueError, match="missing slots"):
        Gateway(StubProvider()).complete(env)


def test_envelope_digest_depends_on_slots_and_template():
    a = gen_envelope()
    b = gen_envelope()
    assert envelope_digest(a, "v1") == envelope_digest(b, "v1")
    assert envelope_digest(a, "v1") != envelope_digest(a, "v2")
    c = gen_envelope(outcome=PASS_OUTCOME)
    assert envelope_digest(a, "v1") != envelope_digest(c, "v1")


def test_remote_provider_uses_transport_and_credentials(monkeypatch):
    seen = {}

    def transport(body):
        seen.update(body)
        return json.dumps({"plan_id": "p", "revision": 0, "statements": []})

    provider = RemoteProvider("http://example.invalid/v1", "test-model", transport=transport)
    gw = Gateway(provider)
    response = gw.complete(gen_envelope())
    assert response.payload["plan_id"] == "p"
    assert seen["model"] == "test-model"
    assert seen["messages"][0]["role"] == "user"

    monkeypatch.delenv("RELOG_TEST_KEY", raising=False)
    strict = RemoteProvider("http://example.invalid/v1", "m", credential_env="RELOG_TEST_KEY")
    with pytest.raises(ProviderUnavailable):
        strict._http_transport({})


def test_fenced_json_is_accepted():
    fenced = "```json\n{\"plan_id\": \"p\", \"revision\": 0, \"statements\": []}\n```"

    class Fenced:
        kind = "remote"

        def complete_raw(self, prompt, env, attempt):
            return fenced

    response = Gateway(Fenced()).complete(gen_envelope())
    assert response.payload["plan_id"] == "p"


# -- schema validators ----------------------------------------------------

def test_plan_schema_rejects_slot_mismatch():
    bad = {"plan_id": "p", "revision": 0, "statements": [
        {"anchor_line": 1, "position": "before", "severity": "info",
         "template": "a={} b={}", "variables": ["a"]}
    ]}
    with pytest.raises(SchemaError, match="slots"):
        validate_payload(GENERATION_SCHEMA, bad)


def test_critic_schema_requires_feedback_when_insufficient():
    bad = {"traceability": 1, "state_visibility": 0, "causal_linkage": 0,
           "sufficient": False, "feedback": [], "rationale": "weak"}
    with pytest.raises(SchemaError, match="feedback"):
        validate_payload(CRITIC_SCHEMA, bad)
    good = dict(bad, feedback=[{"action": "add", "target_anchor": None,
                                "subject": "x", "detail": "log x"}])
    validate_payload(CRITIC_SCHEMA, good)


def test_critic_schema_remove_requires_anchor():
    bad = {"traceability": 2, "state_visibility": 2, "causal_linkage": 2,
           "sufficient": False, "rationale": "",
           "feedback": [{"action": "remove", "target_anchor": None,
                         "subject": "x", "detail": "drop"}]}
    with pytest.raises(SchemaError, match="requires target_anchor"):
        validate_payload(CRITIC_SCHEMA, bad)


def test_edits_schema_shapes():
    good = {"edits": [
        {"action": "add", "statement": {"anchor_line": 3, "position": "before",
                                        "severity": "debug", "template": "x={}",
                                        "variables": ["x"]}},
        {"action": "remove", "target_anchor": 3},
        {"action": "modify", "target_anchor": 4, "changes": {"severity": "info"}},
    ]}
    validate_payload(REFINEMENT_SCHEMA, good)
    with pytest.raises(SchemaError):
        validate_payload(REFINEMENT_SCHEMA, {"edits": [{"action": "modify", "target_anchor": 4}]})


def test_debug_schema_patch_requires_detection():
    bad = {"defect_reported": False, "location": None, "explanation": "",
           "patch": {"kind": "replace_unit", "content": "int main(void){return 0;}"}}
    with pytest.raises(SchemaError, match="patch requires"):
        validate_payload(DEBUG_SCHEMA, bad)


def test_debug_schema_accepts_verdicts():
    validate_payload(DEBUG_SCHEMA, {
        "defect_reported": True,
        "location": {"file": "main.c", "line": 12},
        "explanation": "bad branch",
        "patch": {"kind": "line_edits",
                  "edits": [{"op": "replace", "line": 12, "text": "x = 1;"}]},
    })
    validate_payload(DEBUG_SCHEMA, {
        "defect_reported": False, "location": None, "explanation": "clean", "patch": None,
    })
