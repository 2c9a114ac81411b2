from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import httpx
import pytest

from ragen.backends.analyzer import (
    CommandAnalyzer,
    NullAnalyzer,
    PatternAnalyzer,
    StubAnalyzer,
    analyze,
    findings_to_sarif,
    parse_sarif,
)
from ragen.backends.llm import (
    ChatRequest,
    ChatResponse,
    LiveBackend,
    Message,
    ReplayBackend,
    ReplayStore,
    ScriptBook,
    ScriptedBackend,
    chat,
    record_session,
    request_digest,
)
from ragen.backends.search import FixtureSearch, HttpSearch, search
from ragen.errors import (
    AnalyzerUnavailableError,
    BackendError,
    ReplayMissError,
    ResultParseError,
    ScriptExhaustedError,
    ToolUnavailableError,
)
from ragen.model import AnalyzerFinding, Language, Severity

FIXTURES = Path(__file__).parent / "fixtures"


def req(text="hi", system=None):
    msgs = ([Message("system", system)] if system else []) + [Message("user", text)]
    return ChatRequest(tuple(msgs))


# --- chat requests -------------------------------------------------------------

def test_request_validation():
    with pytest.raises(ValueError):
        ChatRequest(())
    with pytest.raises(ValueError):
        ChatRequest((Message("assistant", "x"),))
    with pytest.raises(ValueError):
        Message("tool", "x")


def test_digest_ignores_field_order():
    a = ChatRequest.from_dict({"messages": [{"role": "user", "content": "x"}], "model": "m", "temperature": 0})
    b = ChatRequest.from_dict({"temperature": 0.0, "model": "m", "messages": [{"content": "x", "role": "user"}]})
    assert request_digest(a) == request_digest(b) == a.digest
    assert request_digest(a) != request_digest(req("y"))


def test_scripted_backend_serves_in_order():
    b = ScriptedBackend(["hello", "again"])
    assert chat(b, req()).content == "hello"
    assert b.chat(req()).content == "again"
    with pytest.raises(ScriptExhaustedError):
        b.chat(req())
    assert len(b.requests) == 3


def test_replay_lookup_and_strict_miss(tmp_path):
    store = ReplayStore(tmp_path)
    store.put(req("d"), ChatResponse("x"))
    assert ReplayBackend(store).chat(req("d")).content == "x"
    with pytest.raises(ReplayMissError):
        ReplayBackend(store).chat(req("other"))


def test_record_then_replay_is_identical(tmp_path):
    store = ReplayStore(tmp_path)
    rec = record_session(ScriptedBackend(["one", "two"]), store)
    assert rec.chat(req("a")).content == "one"
    assert rec.chat(req("b")).content == "two"
    assert len(store) == 2
    replay = ReplayBackend(store)
    assert replay.chat(req("a")) == ChatResponse("one", completion_tokens=1)
    assert replay.chat(req("b")).content == "two"


def test_rerecording_overwrites(tmp_path):
    store = ReplayStore(tmp_path)
    rec = record_session(ScriptedBackend(["first", "second"]), store)
    rec.chat(req("same"))
    rec.chat(req("same"))
    assert len(store) == 1
    assert ReplayBackend(store).chat(req("same")).content == "second"


def _failing_transport():
    def handler(request):
        raise AssertionError("network must not be used")

    return httpx.MockTransport(handler)


def test_replay_makes_no_network_calls(tmp_path):
    store = ReplayStore(tmp_path)
    store.put(req(), ChatResponse("cached"))
    live = LiveBackend("m", transport=_failing_transport())
    assert ReplayBackend(store, strict=False, fallback=live).chat(req()).content == "cached"


def test_live_backend_retries_transient_errors(monkeypatch):
    monkeypatch.setenv("RAGEN_API_KEY", "secret")
    calls = []

    def handler(request):
        calls.append(request)
        if len(calls) < 3:
            return httpx.Response(503)
        body = json.loads(request.content)
        assert body["model"] == "gpt-test" and body["temperature"] == 0.0
        assert request.headers["authorization"] == "Bearer secret"
        return httpx.Response(200, json={"choices": [{"message": {"content": "ok"}}], "usage": {"prompt_tokens": 3}})

    live = LiveBackend("gpt-test", base_url="http://llm.test/v1", backoff_s=0, transport=httpx.MockTransport(handler))
    resp = live.chat(req())
    assert resp.content == "ok" and resp.prompt_tokens == 3 and len(calls) == 3
    assert str(calls[0].url) == "http://llm.test/v1/chat/completions"


def test_live_backend_gives_up_after_retries():
    live = LiveBackend("m", max_retries=2, backoff_s=0, transport=httpx.MockTransport(lambda r: httpx.Response(500)))
    with pytest.raises(BackendError, match="3 attempts"):
        live.chat(req())


def test_live_backend_client_error_is_not_retried():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(401, text="denied")

    live = LiveBackend("m", backoff_s=0, transport=httpx.MockTransport(handler))
    with pytest.raises(BackendError, match="401"):
        live.chat(req())
    assert len(calls) == 1


def test_script_book_shapes():
    shared = ScriptBook.from_data(["a", "b"]).backends("t", "python", ["planner", "codegen"])
    assert shared["planner"] is shared["codegen"]
    per_agent = ScriptBook.from_data({"planner": ["p"]}).backends("t", "python", ["planner", "codegen"])
    assert per_agent["planner"].remaining == 1 and per_agent["codegen"].remaining == 0
    keyed = ScriptBook.from_data({"tasks": {"t1": ["x"]}, "languages": {"c": ["y"]}})
    assert keyed.backends("t1", "c", ["planner"])["planner"].chat(req()).content == "x"
    assert keyed.backends("t2", "c", ["planner"])["planner"].chat(req()).content == "y"
    with pytest.raises(ScriptExhaustedError):
        keyed.session("t2", "python")


# --- search ---------------------------------------------------------------------

def test_fixture_search_bundled_corpus():
    s = FixtureSearch.from_file()
    hits = search(s, "strcpy safety", 5)
    assert len(hits) == 2
    assert search(s, "  STRCPY   safety ", 1) == hits[:1]
    assert search(s, "nothing like this", 3) == []


def test_search_rejects_bad_k_and_missing_corpus(tmp_path):
    with pytest.raises(ValueError):
        FixtureSearch({}).search("q", 0)
    with pytest.raises(ToolUnavailableError):
        FixtureSearch.from_file(tmp_path / "missing.json")


def test_http_search_parses_results():
    def handler(request):
        assert request.url.params["q"] == "strcpy"
        return httpx.Response(200, json={"results": [{"title": "T", "url": "u", "snippet": "s", "score": 0.5}] * 4})

    hits = HttpSearch("http://search.test/q", transport=httpx.MockTransport(handler)).search("strcpy", 2)
    assert [h.title for h in hits] == ["T", "T"]


def test_http_search_failure_is_tool_unavailable():
    s = HttpSearch("http://search.test/q", transport=httpx.MockTransport(lambda r: httpx.Response(500)))
    with pytest.raises(ToolUnavailableError):
        s.search("x", 1)


# --- analyzer -------------------------------------------------------------------

def test_parse_one_result():
    (f,) = parse_sarif((FIXTURES / "sarif_one.sarif").read_text())
    assert (f.rule_id, f.severity, f.file, f.line) == ("py/sql-injection", Severity.ERROR, "main.py", 12)


def test_parse_empty_results():
    assert parse_sarif((FIXTURES / "sarif_empty.sarif").read_text()) == []


@pytest.mark.parametrize("text", [
    (FIXTURES / "sarif_bad.sarif").read_text(),
    "not json",
    "[]",
    '{"runs": {}}',
    '{"runs": [{"results": [{"ruleId": "r", "locations": []}]}]}',
    '{"runs": [{"results": [{"ruleId": "r", "locations": [{"physicalLocation": {"artifactLocation": {"uri": "f"}, "region": {"startLine": 0}}}]}]}]}',
])
def test_malformed_results_raise(text):
    with pytest.raises(ResultParseError):
        parse_sarif(text)


def test_sarif_round_trip():
    findings = [
        AnalyzerFinding("a/b", Severity.WARNING, "x.c", 3, "m1"),
        AnalyzerFinding("c/d", Severity.NOTE, "y.c", 9, "m2"),
    ]
    assert parse_sarif(json.dumps(findings_to_sarif(findings))) == findings


def test_stub_analyzer_repeats_last():
    stub = StubAnalyzer.from_sarif_files([FIXTURES / "sarif_empty.sarif", FIXTURES / "sarif_one.sarif"])
    assert [len(stub.analyze({}, Language.PYTHON)) for _ in range(3)] == [0, 1, 1]
    assert NullAnalyzer().analyze({"a.py": "x"}, Language.PYTHON) == []


def test_command_analyzer_runs_template(tmp_path):
    script = tmp_path / "fake_analyzer.py"
    script.write_text(
        "import json, pathlib, sys\n"
        "src, lang, out = sys.argv[1:4]\n"
        "names = sorted(p.name for p in pathlib.Path(src).iterdir())\n"
        "res = [{'ruleId': 'fake/' + lang, 'level': 'warning', 'message': {'text': n},"
        " 'locations': [{'physicalLocation': {'artifactLocation': {'uri': n}, 'region': {'startLine': 1}}}]} for n in names]\n"
        "pathlib.Path(out).write_text(json.dumps({'runs': [{'results': res}]}))\n"
    )
    tool = CommandAnalyzer(f"{sys.executable} {script} {{src_dir}} {{language}} {{out_file}}")
    (f,) = analyze(tool, {"main.c": "int main(){}"}, "c")
    assert (f.rule_id, f.file) == ("fake/c", "main.c")


def test_command_analyzer_spawn_failure():
    with pytest.raises(AnalyzerUnavailableError):
        CommandAnalyzer("/nonexistent/analyzer {src_dir}").analyze({"a.py": ""}, Language.PYTHON)
    with pytest.raises(AnalyzerUnavailableError):
        CommandAnalyzer(f"{sys.executable} -c 'raise SystemExit(1)'").analyze({"a.py": ""}, Language.PYTHON)


def test_pattern_analyzer_rules():
    bad_py = "cur.execute(f\"DELETE FROM s WHERE e='{email}'\")\nos.system('ls ' + d)\n"
    rules = {f.rule_id for f in PatternAnalyzer().analyze({"main.py": bad_py}, Language.PYTHON)}
    assert rules == {"py/sql-injection", "py/command-line-injection"}
    good_py = "cur.execute('DELETE FROM s WHERE e = ?', (email,))  # not os.system(\n"
    assert PatternAnalyzer().analyze({"main.py": good_py}, Language.PYTHON) == []
    (f,) = PatternAnalyzer().analyze({"main.c": "int main(){\n  strcpy(a, b);\n}"}, Language.C)
    assert (f.rule_id, f.line) == ("cpp/unbounded-write", 2)


def test_script_entry_point_runs():
    out = subprocess.run([sys.executable, "-m", "ragen", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "replay" in out.stdout
