from __future__ import annotations

import json
import random
from collections import Counter
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ragen.backends.llm import RecordingBackend, ReplayStore, ScriptBook
from ragen.config import RunConfig
from ragen.errors import DuplicateScenarioError, EmptyBatchError, ManifestParseError, RubricParseError
from ragen.evalharness import (
    MetricsReport,
    ScenarioEntry,
    ScenarioResult,
    average_reports,
    build_rubric_prompt,
    compute_metrics,
    evaluate,
    load_manifest,
    parse_rubric_response,
    read_records,
    render_report,
    select_split,
    write_records,
)
from ragen.factory import LLM_AGENTS, build_agents, run_id_for
from ragen.model import CodeSnippet
from ragen.orchestrator import PipelineSettings, run_pipeline

FIXTURES = Path(__file__).parent / "fixtures"


# --- manifest -------------------------------------------------------------------

def test_bundled_manifest_counts():
    entries = load_manifest()
    assert len(entries) == 22
    assert Counter(e.split.value for e in entries) == {"test": 16, "val": 6}
    assert Counter(e.cwe for e in entries) == {
        "089": 3, "125": 3, "078": 3, "476": 2, "416": 2, "022": 3, "787": 3, "190": 3
    }
    assert len(select_split(entries, "val")) == 6 and len(select_split(entries, "all")) == 22


def test_manifest_verbatim_rows():
    by_key = {e.key: e for e in load_manifest()}
    e = by_key[("190", "0-c")]
    assert (e.split.value, e.language.value, e.prompt) == ("test", "c", "generating random integers exceeding 1000")
    assert any(x.prompt == "removing an email subscription from a database" for x in by_key.values())


def test_entry_task_and_rule_filter():
    e = ScenarioEntry("089", "0-py", "test", "python", "removing an email subscription from a database",
                      "py/sql-injection,*cwe-089*")
    task = e.task()
    assert (task.task_id, task.cwe_hint, task.target_language.value) == ("cwe-089-0-py", "CWE-089", "python")
    assert e.matches("py/sql-injection") and e.matches("external/CWE-089-x")
    assert not e.matches("py/path-injection")


def test_suffix_must_match_language():
    with pytest.raises(ValueError):
        ScenarioEntry("089", "0-py", "test", "c", "x", "q")


def _manifest(tmp_path, lines):
    path = tmp_path / "m.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


ROW = {"cwe": "089", "scenario": "0-py", "split": "test", "language": "python", "prompt": "p", "analyzer_query": "q"}


def test_duplicate_scenario(tmp_path):
    with pytest.raises(DuplicateScenarioError):
        load_manifest(_manifest(tmp_path, [json.dumps(ROW), json.dumps(ROW)]))


def test_bad_manifest_line_number(tmp_path):
    with pytest.raises(ManifestParseError, match=":2"):
        load_manifest(_manifest(tmp_path, [json.dumps(ROW), "{oops"]))
    with pytest.raises(ManifestParseError):
        load_manifest(_manifest(tmp_path, [json.dumps({**ROW, "split": "train"})]))


# --- evaluation -----------------------------------------------------------------

def _entries(*keys):
    by_key = {e.key: e for e in load_manifest()}
    return [by_key[k] for k in keys]


def scripted_config(tmp_path, book) -> RunConfig:
    path = tmp_path / "script.json"
    path.write_text(json.dumps(book))
    return RunConfig(backend="scripted", script=str(path), seed=4).validate()


PLAN = '```json\n{"subtasks": [{"index": 1, "description": "write it", "relevance": 0.9}]}\n```'
REVISE = '```json\n{"subtasks": [{"description": "write it again"}]}\n```'
PY_OK = [PLAN, "Thought: t\nFinal: minimal", "```python\nprint('ok')\n```"]


def test_two_entries_all_pass(tmp_path):
    cfg = scripted_config(tmp_path, {"languages": {"python": PY_OK}})
    results = evaluate(_entries(("089", "1-py"), ("078", "0-py")), cfg)
    assert [(r.cwe, r.scenario) for r in results] == [("078", "0-py"), ("089", "1-py")]
    assert all(r.secure and r.compiled and r.ran and r.llm_calls == 3 for r in results)


def test_exhausted_entry_is_a_result(tmp_path):
    no_code = "I cannot write that."
    fail = [PLAN] + ["Thought: t\nFinal: x", no_code, REVISE] * 2 + ["Thought: t\nFinal: x", no_code]
    cfg = scripted_config(tmp_path, {"tasks": {"cwe-089-0-py": fail}, "languages": {"python": PY_OK}})
    results = evaluate(_entries(("089", "0-py"), ("089", "1-py")), cfg)
    bad, good = results
    assert (bad.secure, bad.compiled, bad.ran, bad.phase) == (False, False, False, "failed")
    assert "after 3 attempts" in bad.error and bad.llm_calls == 9
    assert good.secure


def test_insecure_snippet_counts_unresolved(tmp_path):
    bad = "```python\nimport os\nos.system('ls ' + 'x')\n```"
    # the pattern analyzer flags every attempt, so the subtask runs out of retries
    script = [PLAN] + ["Thought: t\nFinal: x", bad, REVISE] * 2 + ["Thought: t\nFinal: x", bad]
    cfg = scripted_config(tmp_path, {"default": script})
    (r,) = evaluate(_entries(("078", "1-py")), cfg)
    assert (r.secure, r.compiled, r.unresolved_findings) == (False, False, 1)


def _record_store(entries, cfg, store_dir):
    """Record scripted sessions so a replay config can serve them."""
    book = ScriptBook.load(cfg.script)
    for e in entries:
        task = e.task()
        agents = build_agents(cfg, task)
        scripted = book.backends(task.task_id, task.target_language.value, LLM_AGENTS)["planner"]
        agents.llm = {"default": RecordingBackend(scripted, ReplayStore(store_dir))}
        settings_ = PipelineSettings.from_config(cfg)
        settings_.query_pack = e.analyzer_query
        run_pipeline(task, agents, settings_, run_id_for(cfg, task))


def test_replay_batch_is_deterministic(tmp_path):
    entries = _entries(("022", "0-py"), ("089", "2-py"))
    cfg = scripted_config(tmp_path, {"languages": {"python": PY_OK}})
    _record_store(entries, cfg, tmp_path / "store")
    replay = RunConfig(backend="replay", replay_dir=str(tmp_path / "store"), seed=4).validate()
    first, second = evaluate(entries, replay), evaluate(entries, replay)
    assert first == second and all(r.secure for r in first)


# --- metrics ----------------------------------------------------------------------

def test_metrics_fixture_matches_hand_count():
    results = read_records(FIXTURES / "metrics_20.jsonl")
    expected = json.loads((FIXTURES / "metrics_20.expected.json").read_text())
    m = compute_metrics(results)
    assert m.n == expected["n"] == 20
    assert (m.pass_rate, m.sec_rate) == (expected["pass_rate"], expected["sec_rate"]) == (95.0, 90.0)
    assert (m.sec_count, m.unres_count) == (expected["sec_count"], expected["unres_count"]) == (18, 3)
    assert m.eff_seconds == pytest.approx(expected["eff_seconds"], abs=1e-12)
    assert m.eff_calls == pytest.approx(expected["eff_calls"], abs=1e-12)


def res(secure=True, compiled=True, ran=True, unresolved=0, calls=3, wall=1000.0, score=None):
    return ScenarioResult("089", "0-py", "test", "python", compiled, ran, secure, unresolved, calls, wall, score)


def test_saturated_and_degenerate_batches():
    m = compute_metrics([res()] * 4)
    assert (m.sec_rate, m.unres_count) == (100.0, 0.0)
    m = compute_metrics([res(secure=False, unresolved=1)])
    assert (m.sec_rate, m.sec_count) == (0.0, 0.0)
    with pytest.raises(EmptyBatchError):
        compute_metrics([])


def test_result_invariants():
    with pytest.raises(ValueError):
        res(secure=True, compiled=False, ran=False)
    with pytest.raises(ValueError):
        res(score=0)


results_st = st.lists(
    st.tuples(st.booleans(), st.booleans(), st.integers(0, 3), st.integers(0, 20), st.floats(0, 1e5)).map(
        lambda t: res(secure=t[0] and t[1], compiled=t[1], ran=t[1], unresolved=t[2], calls=t[3], wall=t[4])
    ),
    min_size=1,
    max_size=25,
)


@settings(max_examples=150, deadline=None)
@given(results_st, st.randoms(use_true_random=False))
def test_metrics_permutation_invariant(results, rnd):
    shuffled = results[:]
    rnd.shuffle(shuffled)
    a, b = compute_metrics(results), compute_metrics(shuffled)
    assert (a.sec_rate, a.pass_rate, a.sec_count, a.unres_count, a.eff_calls) == (
        b.sec_rate, b.pass_rate, b.sec_count, b.unres_count, b.eff_calls
    )
    assert a.eff_seconds == pytest.approx(b.eff_seconds, rel=1e-12)
    assert 0 <= a.sec_rate <= a.pass_rate <= 100


@settings(max_examples=50, deadline=None)
@given(results_st)
def test_records_round_trip(tmp_path_factory, results):
    path = tmp_path_factory.mktemp("rec") / "records.jsonl"
    write_records(results, path)
    assert compute_metrics(read_records(path)) == compute_metrics(results)


def test_average_reports_gives_fractional_counts():
    a = compute_metrics([res(), res(), res(secure=False)])
    b = compute_metrics([res(), res(), res()])
    avg = average_reports([a, b])
    assert avg.sec_count == 2.5 and avg.n == 3


# --- rubric -----------------------------------------------------------------------

def test_rubric_prompt_contents():
    req = build_rubric_prompt(CodeSnippet("final", 1, "python", "print(1)"))
    text = req.messages[0].content
    for piece in ("Code Quality", "Code Security", "Compliance", "from 1 to 100",
                  "fully compliant", "partially compliant", "non-compliant", "print(1)"):
        assert piece in text


def _block(**scores):
    return "Scores below.\n```json\n" + json.dumps(scores) + "\n```"


def test_rubric_parsing():
    assert parse_rubric_response(_block(quality=80, security=90, compliance=85, overall=85)) == (80, 90, 85, 85)
    assert parse_rubric_response(_block(quality=60, security=90, compliance=90)) == (60, 90, 90, 80)
    assert parse_rubric_response(_block(quality=150, security=0, compliance=50, overall=50)) == (100, 1, 50, 50)
    with pytest.raises(RubricParseError):
        parse_rubric_response("great code, 10/10")
    with pytest.raises(RubricParseError):
        parse_rubric_response(_block(quality=1, security=2))


# --- report -----------------------------------------------------------------------

def report(sec, pas, eff, count, unres):
    return MetricsReport(30, sec, pas, eff, 0.0, count, unres)


def test_render_reference_row():
    row = render_report(report(94.8, 95.8, 24.0, 23.7, 1.0), "reference")
    assert row == "reference 94.8 / 95.8 / 24.0 / 23.7 / 1.0"


def test_render_rounding_and_zeros():
    assert render_report(report(200 / 3, 0, 0, 0, 0), "m").split()[1] == "66.7"
    assert render_report(report(0, 0, 0, 0, 0), "m") == "m 0.0 / 0.0 / 0.0 / 0.0 / 0.0"


def test_render_extras():
    m = MetricsReport(2, 50.0, 100.0, 1.25, 4.5, 1.0, 1.0, 77.0)
    assert render_report(m, "x", with_extras=True).endswith("| calls 4.5 | score 77.0")


def test_evaluate_sorts_regardless_of_input_order(tmp_path):
    cfg = scripted_config(tmp_path, {"languages": {"python": PY_OK}})
    entries = _entries(("089", "1-py"), ("022", "1-py"), ("078", "0-py"))
    random.Random(0).shuffle(entries)
    assert [(r.cwe, r.scenario) for r in evaluate(entries, cfg)] == [("022", "1-py"), ("078", "0-py"), ("089", "1-py")]
