import subprocess

import pytest

from relog.miner import (
    DEFAULT_API_PATTERNS,
    RepoUnreadable,
    find_statements,
    frequency_report,
    mine_repository,
    normalize_call,
    scan_repository,
    track_lineages,
    StatementLineage,
    StatementSighting,
)


def git(repo, *args):
    subprocess.run(
        ["git", "-C", str(repo), "-c", "user.name=miner-test", "-c", "user.email=m@test",
         "-c", "commit.gpgsign=false", *args],
        check=True, capture_output=True, text=True,
    )


def make_repo(tmp_path, snapshots):
    """Build a repo from a list of {filename: content or None (delete)} snapshots."""
    repo = tmp_path / "repo"
    repo.mkdir()
    git(repo, "init", "-q")
    for i, snapshot in enumerate(snapshots):
        for name, content in snapshot.items():
            target = repo / name
            if content is None:
                git(repo, "rm", "-q", name)
            else:
                target.write_text(content, encoding="utf-8")
                git(repo, "add", name)
        git(repo, "commit", "-q", "-m", f"step {i}", "--allow-empty")
    return repo


STMT_LONG = 'logger.info("starting batch processor with {} workers and capacity {}", workers, capacity);'
STMT_LONG_EDIT = 'logger.info("starting batch processor with {} workers and limit {}", workers, limit);'
STMT_QUEUE = 'logger.debug("queue state size={} pending={} dropped={}", size, pending, dropped);'


def java_file(*statements, filler=""):
    body = "\n".join(f"        {s}" for s in statements)
    return f"class App {{\n    void run() {{\n{body}\n{filler}    }}\n}}\n"


def test_normalize_call_keeps_literals_and_tokenizes_args():
    normalized = normalize_call('"count={} items", cnt, total.size())')
    assert normalized == '"count={} items" <arg> <arg>'
    assert normalize_call('"plain message")') == '"plain message"'


def test_find_statements_matches_configured_apis_only():
    text = 'logger.info("hi {}", x);\nSystem.out.println("not a log");\nlog.warn("w");\n'
    found = find_statements(text, DEFAULT_API_PATTERNS)
    assert [(line, api) for line, api, _ in found] == [(1, "logger.info"), (3, "log.warn")]


def test_scan_single_commit_counts_statements(tmp_path):
    repo = make_repo(tmp_path, [{"app.java": java_file(STMT_LONG, STMT_QUEUE)}])
    sightings = scan_repository(str(repo))
    assert len(sightings) == 2
    assert {s.api_name for s in sightings} == {"logger.info", "logger.debug"}


def test_commit_not_touching_file_adds_no_sightings(tmp_path):
    repo = make_repo(tmp_path, [
        {"app.java": java_file(STMT_QUEUE)},
        {"other.txt": "nothing to see\n"},
    ])
    sightings = scan_repository(str(repo))
    assert len(sightings) == 1


def test_unchanged_statement_across_three_commits_is_one_lineage(tmp_path):
    repo = make_repo(tmp_path, [
        {"app.java": java_file(STMT_QUEUE)},
        {"app.java": java_file(STMT_QUEUE, filler="        int pad1;\n")},
        {"app.java": java_file(STMT_QUEUE, filler="        int pad1;\n        int pad2;\n")},
    ])
    lineages = track_lineages(scan_repository(str(repo)))
    assert len(lineages) == 1
    assert len(lineages[0].sightings) == 3
    assert lineages[0].change_count == 0


def test_single_edit_counts_one_change(tmp_path):
    repo = make_repo(tmp_path, [
        {"app.java": java_file(STMT_LONG)},
        {"app.java": java_file(STMT_LONG_EDIT)},
        {"app.java": java_file(STMT_LONG_EDIT, filler="        int pad;\n")},
    ])
    lineages = track_lineages(scan_repository(str(repo)))
    assert len(lineages) == 1
    assert lineages[0].change_count == 1


def test_unrelated_statements_split_into_two_lineages(tmp_path):
    repo = make_repo(tmp_path, [{"app.java": java_file(STMT_LONG, STMT_QUEUE)}])
    lineages = track_lineages(scan_repository(str(repo)))
    assert len(lineages) == 2
    assert all(l.change_count == 0 for l in lineages)


def test_rename_is_followed(tmp_path):
    repo = make_repo(tmp_path, [{"app.java": java_file(STMT_QUEUE)}])
    git(repo, "mv", "app.java", "core.java")
    git(repo, "commit", "-q", "-m", "rename")
    lineages = track_lineages(scan_repository(str(repo)))
    assert len(lineages) == 1
    assert len(lineages[0].sightings) == 2
    assert lineages[0].change_count == 0


def test_scripted_history_oracle(tmp_path):
    """Known edit script: statement A edited twice, B never, C edited three times."""
    a0 = 'logger.info("batch {} of {} finished in {} ms with {} retries", b, n, ms, r);'
    a1 = a0.replace("finished", "completed")
    a2 = a1.replace("retries", "replays")
    c0 = 'logger.warn("cache shard {} overflow: evicting {} cold entries now", shard, cold);'
    c1 = c0.replace("cold entries", "stale entries")
    c2 = c1.replace("evicting", "purging")
    c3 = c2.replace("overflow", "saturated")
    b = STMT_QUEUE

    repo = make_repo(tmp_path, [
        {"app.java": java_file(a0, b, c0)},
        {"app.java": java_file(a1, b, c1)},
        {"app.java": java_file(a1, b, c2)},
        {"app.java": java_file(a2, b, c3)},
    ])
    lineages = track_lineages(scan_repository(str(repo)))
    counts = sorted(l.change_count for l in lineages)
    assert counts == [0, 2, 3]

    dist = frequency_report(lineages)
    assert dist.lineage_count == 3
    assert dist.modified_count == 2
    assert dist.modified_share == pytest.approx(2 / 3)
    assert dist.buckets == {"2": pytest.approx(50.0), ">=3": pytest.approx(50.0)}


def make_lineage(change_count):
    sightings = [
        StatementSighting("c0", "f", 1, "logger.info", '"v0"'),
    ]
    for i in range(change_count):
        sightings.append(StatementSighting(f"c{i+1}", "f", 1, "logger.info", f'"v{i+1}"'))
    return StatementLineage("lin", sightings)


def test_frequency_report_examples():
    dist = frequency_report([make_lineage(0), make_lineage(0), make_lineage(1)])
    assert dist.modified_share == pytest.approx(1 / 3)
    assert dist.buckets == {"1": pytest.approx(100.0)}

    dist = frequency_report([make_lineage(c) for c in (1, 2, 3, 5)])
    assert dist.buckets == {
        "1": pytest.approx(25.0), "2": pytest.approx(25.0), ">=3": pytest.approx(50.0)
    }
    assert dist.modified_share == 1.0

    empty = frequency_report([])
    assert empty.modified_share == 0.0
    assert empty.buckets == {}


def test_frequency_report_order_independent():
    lineages = [make_lineage(c) for c in (0, 1, 1, 2, 4)]
    forward = frequency_report(lineages)
    backward = frequency_report(list(reversed(lineages)))
    assert forward == backward


def test_unreadable_repo(tmp_path):
    with pytest.raises(RepoUnreadable):
        scan_repository(str(tmp_path / "nope"))


def test_mine_repository_document(tmp_path):
    repo = make_repo(tmp_path, [
        {"app.java": java_file(STMT_LONG)},
        {"app.java": java_file(STMT_LONG_EDIT)},
    ])
    doc = mine_repository(str(repo), project="demo")
    assert doc["project"] == "demo"
    assert doc["lineage_count"] == 1
    assert doc["modified_share"] == 1.0
    assert doc["buckets"] == {"1": 100.0}
    assert doc["jaccard_threshold"] == 0.7
