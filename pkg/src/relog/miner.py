"""Mine a repository's history for logging statements and their revisions.

Walks first-parent history, spots logging calls by configurable API patterns,
normalizes each call (string literals kept, other arguments tokenized), and
chains sightings into per-statement lineages by token overlap against the
lineage's latest sighting. Renames reported by the VCS are followed by
canonicalizing paths to their first-seen name.
"""
from __future__ import annotations

import json
import re
import subprocess
from dataclasses import dataclass, field

DEFAULT_API_PATTERNS = (
    r"\b(?P<api>(?:log|logger|logging|LOG|LOGGER)\.(?:trace|debug|info|warn|warning|error|fatal|critical))\s*\(",
    r"\b(?P<api>console\.(?:log|debug|info|warn|error))\s*\(",
)

JACCARD_THRESHOLD = 0.7


class RepoUnreadable(Exception):
    pass


@dataclass(frozen=True)
class StatementSighting:
    commit_id: str
    path: str
    line: int
    api_name: str
    normalized_template: str

    @property
    def content(self) -> tuple[str, str]:
        return (self.api_name, self.normalized_template)


@dataclass
class StatementLineage:
    lineage_id: str
    sightings: list[StatementSighting] = field(default_factory=list)

    @property
    def change_count(self) -> int:
        changes = 0
        for prev, cur in zip(self.sightings, self.sightings[1:]):
            if cur.content != prev.content:
                changes += 1
        return changes

    @property
    def latest(self) -> StatementSighting:
        return self.sightings[-1]


@dataclass(frozen=True)
class FrequencyDistribution:
    modified_share: float
    buckets: dict[str, float]  # percentages over lineages changed at least once
    lineage_count: int
    modified_count: int
    bucket_form: str = "1,2,>=3"

    def to_dict(self) -> dict:
        return {
            "modified_share": self.modified_share,
            "buckets": dict(self.buckets),
            "lineage_count": self.lineage_count,
            "modified_count": self.modified_count,
            "bucket_form": self.bucket_form,
        }


# -- call normalization -----------------------------------------------------

def _scan_call_args(text: str) -> list[tuple[str, str]]:
    """Split a call's argument text into ('lit', body) and ('code', chunk) tokens."""
    tokens: list[tuple[str, str]] = []
    buf = []
    i = 0
    quote = None
    depth = 0
    while i < len(text):
        ch = text[i]
        if quote:
            if ch == "\\" and i + 1 < len(text):
                buf.append(text[i:i + 2])
                i += 2
                continue
            if ch == quote:
                tokens.append(("lit", "".join(buf)))
                buf = []
                quote = None
            else:
                buf.append(ch)
            i += 1
            continue
        if ch in "\"'":
            if buf:
                tokens.append(("code", "".join(buf)))
                buf = []
            quote = ch
        elif ch == "(":
            depth += 1
            buf.append(ch)
        elif ch == ")":
            if depth == 0:
                break  # end of the call's argument list
            depth -= 1
            buf.append(ch)
        else:
            buf.append(ch)
        i += 1
    if buf:
        tokens.append(("code", "".join(buf)))
    return tokens


def normalize_call(args_text: str) -> str:
    """Literals kept verbatim, every other argument chunk becomes <arg>."""
    parts = []
    for kind, value in _scan_call_args(args_text):
        if kind == "lit":
            parts.append(f'"{value}"')
        else:
            for chunk in value.split(","):
                if re.search(r"[A-Za-z0-9_]", chunk):
                    parts.append("<arg>")
    return " ".join(parts)


def _token_set(api_name: str, normalized: str) -> frozenset[str]:
    tokens = {api_name}
    for m in re.finditer(r"\{\}|%[sdif]|<arg>|[A-Za-z0-9_]+", normalized):
        tokens.add(m.group(0))
    return frozenset(tokens)


def _jaccard(a: frozenset[str], b: frozenset[str]) -> float:
    if not a and not b:
        return 1.0
    union = a | b
    return len(a & b) / len(union) if union else 0.0


# -- repository scanning ------------------------------------------------------

def _git(repo: str, *args: str) -> str:
    try:
        proc = subprocess.run(
            ["git", "-C", repo, *args],
            capture_output=True, text=True, check=True,
        )
    except FileNotFoundError as exc:
        raise RepoUnreadable("git executable not found") from exc
    except subprocess.CalledProcessError as exc:
        raise RepoUnreadable(f"git {' '.join(args[:2])} failed: {exc.stderr.strip()}") from exc
    return proc.stdout


def find_statements(text: str, patterns: tuple[str, ...]) -> list[tuple[int, str, str]]:
    """(line, api_name, normalized_template) for every matched call in text."""
    compiled = [re.compile(p) for p in patterns]
    found = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        for pat in compiled:
            m = pat.search(line)
            if m:
                api = m.group("api") if "api" in pat.groupindex else m.group(0)
                found.append((lineno, api, normalize_call(line[m.end():])))
                break
    return found


def scan_repository(
    repo: str, patterns: tuple[str, ...] = DEFAULT_API_PATTERNS
) -> list[StatementSighting]:
    """One sighting per matched statement per commit touching its file.

    Commits are visited in first-parent topological order; renamed files keep
    their first-seen path so lineages survive renames.
    """
    if not patterns:
        raise ValueError("patterns must be non-empty")
    _git(repo, "rev-parse", "--git-dir")  # unreadable/non-repo paths fail here
    try:
        commits = _git(repo, "rev-list", "--first-parent", "--reverse", "HEAD").split()
    except RepoUnreadable:
        return []  # repository exists but has no commits yet
    sightings: list[StatementSighting] = []
    canonical: dict[str, str] = {}
    for commit in commits:
        raw = _git(repo, "diff-tree", "--root", "--no-commit-id", "--name-status", "-r", "-M", commit)
        for entry in raw.splitlines():
            fields = entry.split("\t")
            status = fields[0]
            if status.startswith("R") and len(fields) == 3:
                old, new = fields[1], fields[2]
                canonical[new] = canonical.get(old, old)
                path = new
            elif status in ("A", "M", "T") and len(fields) == 2:
                path = fields[1]
            else:
                continue  # deletions and exotic statuses produce no sightings
            try:
                content = _git(repo, "show", f"{commit}:{path}")
            except RepoUnreadable:
                continue
            key = canonical.get(path, path)
            for line, api, normalized in find_statements(content, patterns):
                sightings.append(StatementSighting(
                    commit_id=commit, path=key, line=line,
                    api_name=api, normalized_template=normalized,
                ))
    return sightings


# -- lineage tracking ---------------------------------------------------------

def track_lineages(
    sightings: list[StatementSighting], threshold: float = JACCARD_THRESHOLD
) -> list[StatementLineage]:
    """Chain sightings (ordered as scanned) into per-file statement lineages.

    A sighting joins the open lineage whose latest sighting has token-Jaccard
    >= threshold, nearest-line tie-break; otherwise it opens a new lineage.
    """
    by_file: dict[str, list[StatementLineage]] = {}
    counter = 0

    # group consecutive sightings by (path, commit) preserving scan order
    groups: list[tuple[str, str, list[StatementSighting]]] = []
    for s in sightings:
        if groups and groups[-1][0] == s.path and groups[-1][1] == s.commit_id:
            groups[-1][2].append(s)
        else:
            groups.append((s.path, s.commit_id, [s]))

    for path, commit, group in groups:
        lineages = by_file.setdefault(path, [])
        candidates = [l for l in lineages if l.latest.commit_id != commit]
        pairs = []
        for li, lineage in enumerate(candidates):
            ltok = _token_set(lineage.latest.api_name, lineage.latest.normalized_template)
            for si, s in enumerate(group):
                score = _jaccard(ltok, _token_set(s.api_name, s.normalized_template))
                if score >= threshold:
                    pairs.append((-score, abs(s.line - lineage.latest.line), li, si))
        pairs.sort()
        used_l: set[int] = set()
        used_s: set[int] = set()
        for neg_score, _, li, si in pairs:
            if li in used_l or si in used_s:
                continue
            used_l.add(li)
            used_s.add(si)
            candidates[li].sightings.append(group[si])
        for si, s in enumerate(group):
            if si not in used_s:
                counter += 1
                lineages.append(StatementLineage(lineage_id=f"lin-{counter:05d}", sightings=[s]))
    return [l for lineages in by_file.values() for l in lineages]


def frequency_report(lineages: list[StatementLineage]) -> FrequencyDistribution:
    """Fractions of lineages revised once, twice, or three-plus times."""
    total = len(lineages)
    modified = [l for l in lineages if l.change_count >= 1]
    if not modified:
        return FrequencyDistribution(
            modified_share=0.0, buckets={}, lineage_count=total, modified_count=0)
    counts = {"1": 0, "2": 0, ">=3": 0}
    for lineage in modified:
        cc = lineage.change_count
        counts["1" if cc == 1 else "2" if cc == 2 else ">=3"] += 1
    buckets = {k: 100.0 * v / len(modified) for k, v in counts.items() if v}
    return FrequencyDistribution(
        modified_share=len(modified) / total,
        buckets=buckets,
        lineage_count=total,
        modified_count=len(modified),
    )


def mine_repository(
    repo: str, patterns: tuple[str, ...] = DEFAULT_API_PATTERNS,
    threshold: float = JACCARD_THRESHOLD, project: str | None = None,
) -> dict:
    """Full pipeline: scan, track, report. Returns a JSON-able document."""
    sightings = scan_repository(repo, patterns)
    lineages = track_lineages(sightings, threshold)
    dist = frequency_report(lineages)
    doc = dist.to_dict()
    doc["project"] = project or repo.rstrip("/").split("/")[-1]
    doc["sighting_count"] = len(sightings)
    doc["jaccard_threshold"] = threshold
    doc["patterns"] = list(patterns)
    return doc


def lineages_to_csv(lineages: list[StatementLineage]) -> str:
    rows = ["lineage_id,path,first_commit,last_commit,sightings,change_count"]
    for l in lineages:
        rows.append(
            f"{l.lineage_id},{l.sightings[0].path},{l.sightings[0].commit_id[:12]},"
            f"{l.latest.commit_id[:12]},{len(l.sightings)},{l.change_count}"
        )
    return "\n".join(rows) + "\n"


def format_report(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"
