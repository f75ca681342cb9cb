"""Uniform structured-completion interface over remote, replay, and stub providers.

Every completion is an envelope (template + slots + expected schema). The
gateway renders the prompt, calls the provider, validates the payload, and
retries a bounded number of times on malformed output. With a record store
attached, validated payloads are persisted under the envelope digest so a
later replay run reproduces the session byte-for-byte.
"""
from __future__ import annotations

import hashlib
import json
import os
import re
import tempfile
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path

from relog.schemas import SchemaError, validate_payload

SLOT_TOKEN_RE = re.compile(r"\{([a-z_]+)\}")


class ProviderUnavailable(Exception):
    """The provider cannot be reached or cannot serve this envelope."""


class ReplayMiss(Exception):
    """No recording exists for the envelope digest."""

    def __init__(self, digest: str):
        super().__init__(f"no recorded completion for digest {digest}")
        self.digest = digest


class MalformedAfterRetries(Exception):
    """Provider kept returning schema-invalid output; carries the last raw text."""

    def __init__(self, message: str, last_raw: str, attempts: int):
        super().__init__(message)
        self.last_raw = last_raw
        self.attempts = attempts


class StoreWriteFailure(Exception):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    text: str

    @property
    def version(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()[:12]

    @property
    def required_slots(self) -> frozenset[str]:
        return frozenset(SLOT_TOKEN_RE.findall(self.text))

    def render(self, slots: dict[str, str]) -> str:
        # Verbatim substitution; slot values may contain braces (JSON).
        return SLOT_TOKEN_RE.sub(lambda m: slots[m.group(1)], self.text)


@dataclass(frozen=True)
class PromptEnvelope:
    template_id: str
    slots: dict[str, str]
    expected_schema: str
    budget: int = 2048


@dataclass(frozen=True)
class StructuredResponse:
    payload: dict
    raw: str
    provider: str
    attempts: int
    digest: str
    template_id: str
    schema: str


def envelope_digest(env: PromptEnvelope, template_version: str) -> str:
    doc = {
        "template_id": env.template_id,
        "template_version": template_version,
        "slots": dict(sorted(env.slots.items())),
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).hexdigest()


class ReplayStore:
    """Directory of digest-named JSON files; writes are atomic renames."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def get(self, digest: str) -> dict | None:
        path = self.root / f"{digest}.json"
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def put(self, digest: str, doc: dict) -> None:
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(doc, fh, sort_keys=True, indent=1)
            os.replace(tmp, self.root / f"{digest}.json")
        except OSError as exc:
            raise StoreWriteFailure(f"cannot persist recording: {exc}") from exc

    def __len__(self) -> int:
        return len(list(self.root.glob("*.json"))) if self.root.exists() else 0


class RemoteProvider:
    """Chat-completion-style HTTP endpoint.

    The credential is read from the environment variable named in the config;
    the key itself never appears in configuration files.
    """

    kind = "remote"

    def __init__(self, base_url: str, model: str, credential_env: str = "",
                 transport=None, timeout_s: float = 120.0):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.credential_env = credential_env
        self.transport = transport or self._http_transport
        self.timeout_s = timeout_s

    def complete_raw(self, prompt: str, env: PromptEnvelope, attempt: int) -> str:
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": env.budget,
            "temperature": 0,
        }
        try:
            return self.transport(body)
        except (urllib.error.URLError, OSError, TimeoutError) as exc:
            raise ProviderUnavailable(f"remote endpoint failed: {exc}") from exc

    def _http_transport(self, body: dict) -> str:
        headers = {"Content-Type": "application/json"}
        if self.credential_env:
            key = os.environ.get(self.credential_env)
            if not key:
                raise ProviderUnavailable(
                    f"credential environment variable {self.credential_env!r} is not set"
                )
            headers["Authorization"] = f"Bearer {key}"
        req = urllib.request.Request(
            f"{self.base_url}/chat/completions",
            data=json.dumps(body).encode("utf-8"),
            headers=headers,
        )
        with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
            doc = json.loads(resp.read().decode("utf-8"))
        return doc["choices"][0]["message"]["content"]


class ReplayProvider:
    """Serves recorded payloads by envelope digest; byte-deterministic."""

    kind = "replay"

    def __init__(self, store: ReplayStore):
        self.store = store

    def complete_raw(self, prompt: str, env: PromptEnvelope, attempt: int, digest: str = "") -> str:
        entry = self.store.get(digest)
        if entry is None:
            raise ReplayMiss(digest)
        return entry["raw"]


def _extract_json(text: str) -> dict:
    """Parse a JSON object from raw model text, tolerating code fences."""
    candidate = text.strip()
    fence = re.search(r"```(?:json)?\s*(.*?)```", candidate, re.DOTALL)
    if fence:
        candidate = fence.group(1).strip()
    if not candidate.startswith("{"):
        brace = candidate.find("{")
        if brace >= 0:
            candidate = candidate[brace:]
    try:
        doc = json.loads(candidate)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"response is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("response JSON must be an object")
    return doc


class Gateway:
    """Schema-validating completion front end with bounded retry."""

    def __init__(self, provider, templates_dir: str | Path | None = None,
                 retry_limit: int = 2, record_store: ReplayStore | None = None):
        self.provider = provider
        self.retry_limit = retry_limit
        self.record_store = record_store
        self.templates_dir = Path(templates_dir) if templates_dir else Path(__file__).parent / "templates"
        self._templates: dict[str, PromptTemplate] = {}
        self.calls: list[StructuredResponse] = []

    def template(self, template_id: str) -> PromptTemplate:
        if template_id not in self._templates:
            path = self.templates_dir / f"{template_id}.txt"
            self._templates[template_id] = PromptTemplate(template_id, path.read_text(encoding="utf-8"))
        return self._templates[template_id]

    def complete(self, env: PromptEnvelope) -> StructuredResponse:
        tpl = self.template(env.template_id)
        missing = tpl.required_slots - set(env.slots)
        if missing:
            raise ValueError(f"envelope missing slots {sorted(missing)} for {env.template_id}")
        digest = envelope_digest(env, tpl.version)
        prompt = tpl.render(env.slots)

        last_error = ""
        raw = ""
        attempts = 0
        while attempts <= self.retry_limit:
            attempts += 1
            raw = self._call_provider(prompt, env, attempts, digest, last_error)
            try:
                payload = _extract_json(raw)
                validate_payload(env.expected_schema, payload)
            except SchemaError as exc:
                last_error = str(exc)
                continue
            response = StructuredResponse(
                payload=payload,
                raw=raw,
                provider=self.provider.kind,
                attempts=attempts,
                digest=digest,
                template_id=env.template_id,
                schema=env.expected_schema,
            )
            if self.record_store is not None:
                self.record_store.put(digest, {
                    "digest": digest,
                    "template_id": env.template_id,
                    "schema": env.expected_schema,
                    "raw": raw,
                    "payload": payload,
                })
            self.calls.append(response)
            return response
        raise MalformedAfterRetries(
            f"provider returned schema-invalid output {attempts} times: {last_error}",
            last_raw=raw,
            attempts=attempts,
        )

    def _call_provider(self, prompt: str, env: PromptEnvelope, attempt: int,
                       digest: str, last_error: str) -> str:
        if last_error and self.provider.kind == "remote":
            prompt = f"{prompt}\n\nYour previous reply failed validation: {last_error}\nReply with corrected JSON only."
        if self.provider.kind == "replay":
            return self.provider.complete_raw(prompt, env, attempt, digest=digest)
        return self.provider.complete_raw(prompt, env, attempt)
