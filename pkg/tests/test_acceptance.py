"""Acceptance suite: one test per criterion, each printing a single verdict line."""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import random
import shutil
import sys
import time
from collections import Counter
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
from helpers import HELLO, act, code, final, make_agents, plan_reply, revise_reply

from ragen.backends.analyzer import PatternAnalyzer, StubAnalyzer
from ragen.backends.sandbox import run_sandboxed
from ragen.cli import main as cli_main
from ragen.errors import GuardViolationError, IllegalTransitionError, PipelineFailedError
from ragen.evalharness import MetricsReport, compute_metrics, load_manifest, read_records, render_report
from ragen.extractor import extract_code
from ragen.fences import fence
from ragen.model import AnalyzerFinding, CodeSnippet, Evidence, Language, Severity
from ragen.orchestrator import (
    DEFAULT_RULES,
    TERMINAL_PHASES,
    Event,
    Limits,
    Phase,
    PipelineSettings,
    PipelineState,
    run_pipeline,
    sample_delays,
    step_state,
)
from ragen.searcher import fuse_evidence

FIXTURES = Path(__file__).parent / "fixtures"


@contextmanager
def criterion(capsys, number: int, title: str, budget_s: float | None = None):
    """Print one PASS/FAIL/SKIP line for the criterion, straight to the terminal."""
    start = time.perf_counter()

    def say(line: str) -> None:
        with capsys.disabled():
            sys.stdout.write(f"\n{line}\n")

    try:
        yield
        elapsed = time.perf_counter() - start
        if budget_s is not None:
            assert elapsed < budget_s, f"took {elapsed:.2f} s, budget {budget_s} s"
    except pytest.skip.Exception as exc:
        say(f"AC{number:02d} SKIP {title}: {exc}")
        raise
    except BaseException as exc:
        say(f"AC{number:02d} FAIL {title}: {type(exc).__name__}: {exc}")
        raise
    say(f"AC{number:02d} PASS {title} ({time.perf_counter() - start:.2f} s)")


HAPPY = ["init", "planning", "subtask_loop", "aggregating", "final_validation", "done"]
BAD = AnalyzerFinding("py/sql-injection", Severity.ERROR, "main.py", 1, "query built from string formatting")


def _events(traj):
    return [e.payload["event"] for e in traj.of_kind("transition")]


def test_ac01_pipeline_branch_coverage(capsys):
    with criterion(capsys, 1, "pipeline branch coverage", budget_s=5.0):
        # (a) happy path
        agents = make_agents(
            planner=[plan_reply("greet")],
            searcher=[act("search", "strcpy safety"), final("print it")],
            codegen=[code("python", "print('hi')")],
        )
        _, traj, _ = run_pipeline(HELLO, agents, PipelineSettings(seed=1))
        assert traj.phases() == HAPPY

        # (b) validation fail -> revise -> retry -> pass
        agents = make_agents(
            planner=[plan_reply("list files"), revise_reply("list files without a shell")],
            searcher=[final("os.system"), final("subprocess")],
            codegen=[code("python", "import os\nos.system('ls')"), code("python", "print('ok')")],
            analyzer=PatternAnalyzer(),
        )
        _, traj, _ = run_pipeline(HELLO, agents, PipelineSettings(seed=2))
        assert traj.phases() == HAPPY
        ev = _events(traj)
        assert ev.index("validation_fail") < ev.index("validation_pass")
        assert len(traj.of_kind("revision")) == 1

        # (c) retries exhausted
        agents = make_agents(
            planner=[plan_reply("exit"), revise_reply("again"), revise_reply("once more")],
            searcher=[final("x")] * 3,
            codegen=[code("python", "raise SystemExit(3)")] * 3,
        )
        with pytest.raises(PipelineFailedError) as info:
            run_pipeline(HELLO, agents, PipelineSettings(seed=3, max_retries=2))
        traj = info.value.trajectory
        assert traj.phases() == ["init", "planning", "subtask_loop", "failed"]
        assert _events(traj)[-1] == "retries_exhausted"

        # (d) final validation fail -> restart -> pass
        agents = make_agents(
            planner=[plan_reply("greet"), plan_reply("greet safely")],
            searcher=[final("x"), final("y")],
            codegen=[code("python", "print(1)"), code("python", "print(2)")],
            analyzer=StubAnalyzer([[], [BAD], [], []]),
        )
        _, traj, metrics = run_pipeline(HELLO, agents, PipelineSettings(seed=4, max_restarts=1))
        assert traj.phases() == HAPPY[:5] + HAPPY[1:]
        assert "final_fail" in _events(traj) and metrics.restart_count == 1

        # (e) restarts exhausted
        agents = make_agents(
            planner=[plan_reply("greet")] * 2,
            searcher=[final("x")] * 2,
            codegen=[code("python", "print(1)")] * 2,
            analyzer=StubAnalyzer([[], [BAD], [], [BAD]]),
        )
        with pytest.raises(PipelineFailedError) as info:
            run_pipeline(HELLO, agents, PipelineSettings(seed=5, max_restarts=1))
        traj = info.value.trajectory
        assert traj.phases() == HAPPY[:5] + HAPPY[1:5] + ["failed"]
        assert _events(traj)[-1] == "restarts_exhausted"


def test_ac02_replay_runs_are_byte_identical(capsys, tmp_path):
    replay = FIXTURES / "replay"
    argv = ["run", "--task", str(replay / "task_greeting.json"), "--config", str(replay / "run_replay.json"),
            "--seed", "7"]
    with criterion(capsys, 2, "replay determinism", budget_s=2.0):
        digests = []
        for name in ("first", "second"):
            assert cli_main([*argv, "--out", str(tmp_path / name)]) == 0
            digests.append(hashlib.sha256((tmp_path / name / "trace.jsonl").read_bytes()).hexdigest())
        assert digests[0] == digests[1]


def test_ac03_gamma_delay_moments(capsys):
    with criterion(capsys, 3, "gamma delay moments", budget_s=10.0):
        seconds = sample_delays(np.random.default_rng(20240601), 10**6) / 1000.0
        mean, var = float(seconds.mean()), float(seconds.var(ddof=1))
        # shape 2, scale 0.5: mean k*theta = 1.0, variance k*theta^2 = 0.5
        assert 0.99 <= mean <= 1.01, mean
        assert 0.48 <= var <= 0.52, var


def test_ac04_evidence_fusion(capsys):
    with criterion(capsys, 4, "evidence fusion weights"):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            n = int(rng.integers(1, 16))
            rel = rng.normal(0.0, float(rng.choice([0.1, 1.0, 10.0, 100.0])), size=n)
            shift = float(rng.uniform(-50, 50))
            w = np.array([e.weight for e in fuse_evidence([Evidence(i, "s", "p", float(r)) for i, r in enumerate(rel)])])
            ws = np.array([e.weight for e in fuse_evidence([Evidence(i, "s", "p", float(r + shift)) for i, r in enumerate(rel)])])
            assert (w >= 0).all()
            assert abs(math.fsum(w) - 1.0) <= 1e-9
            assert np.abs(w - ws).max() <= 1e-9
        pair = fuse_evidence([Evidence(1, "s", "a", 0.0), Evidence(2, "s", "b", math.log(2))])
        assert abs(pair[0].weight - 1 / 3) <= 1e-12 and abs(pair[1].weight - 2 / 3) <= 1e-12


def test_ac05_manifest_fidelity(capsys):
    with criterion(capsys, 5, "scenario manifest fidelity"):
        entries = load_manifest()
        assert len(entries) == 22
        assert Counter(e.split.value for e in entries) == {"test": 16, "val": 6}
        assert dict(Counter(e.cwe for e in entries)) == {
            "089": 3, "125": 3, "078": 3, "476": 2, "416": 2, "022": 3, "787": 3, "190": 3
        }
        assert "removing an email subscription from a database" in {e.prompt for e in entries}


def test_ac06_metrics_oracle(capsys):
    with criterion(capsys, 6, "metrics against hand count"):
        expected = json.loads((FIXTURES / "metrics_20.expected.json").read_text())
        m = compute_metrics(read_records(FIXTURES / "metrics_20.jsonl"))
        assert m.n == expected["n"] == 20
        assert m.pass_rate == expected["pass_rate"] == 95.0
        assert m.sec_rate == expected["sec_rate"] == 90.0
        assert m.sec_count == expected["sec_count"] == 18
        assert m.unres_count == expected["unres_count"] == 3


def test_ac07_report_formatting(capsys):
    with criterion(capsys, 7, "report row formatting"):
        row = render_report(MetricsReport(30, 94.8, 95.8, 24.0, 0.0, 23.7, 1.0), "reference")
        assert row == "reference 94.8 / 95.8 / 24.0 / 23.7 / 1.0"
        assert row.split(" ", 1)[1] == "94.8 / 95.8 / 24.0 / 23.7 / 1.0"


def _random_body(rnd: random.Random) -> str:
    alphabet = "abcxyz019 \t\n`'\"{}()[];#/*\\-+=<>é中"
    while True:
        body = "".join(rnd.choice(alphabet) for _ in range(rnd.randint(1, 200)))
        if "```" not in body:
            return body


def test_ac08_extractor_round_trip(capsys):
    with criterion(capsys, 8, "extractor round trip"):
        rnd = random.Random(8)
        for lang in itertools.islice(itertools.cycle(Language), 500):
            body = _random_body(rnd)
            found = extract_code(fence(lang, body), lang)
            assert [s.body for s in found] == [body], repr(body)
        multi = extract_code((FIXTURES / "multi_block.md").read_text(), "python")
        assert [s.body for s in multi] == ["def add(a, b):\n    return a + b", "print(add(1, 2))"]
        assert extract_code("plain prose without any fences", "python") == []


@pytest.mark.toolchain
def test_ac09_sandbox_reality_check(capsys):
    with criterion(capsys, 9, "sandbox reality check", budget_s=15.0):
        missing = [tool for tool in ("cc",) if shutil.which(tool) is None]
        if missing:
            pytest.skip(f"toolchain not found on PATH: {', '.join(missing)}")
        assert run_sandboxed(CodeSnippet("s1", 1, "python", "print(1)"))[:2] == (True, True)
        assert run_sandboxed(CodeSnippet("s1", 1, "c", "int main(){return 0;}"))[:2] == (True, True)
        compiled, ran, note = run_sandboxed(CodeSnippet("s1", 1, "python", "while True: pass"), timeout_ms=500)
        assert (compiled, ran) == (True, False) and "timeout" in note


def test_ac10_state_machine_soundness(capsys):
    with criterion(capsys, 10, "state machine soundness"):
        # every non-terminal phase has an outgoing rule; terminal ones have none
        for phase in Phase:
            outgoing = [r for r in DEFAULT_RULES if r.from_phase is phase]
            assert bool(outgoing) == (phase not in TERMINAL_PHASES), phase
        # the only rule into done is final_pass
        assert {(r.from_phase, r.event) for r in DEFAULT_RULES if r.to_phase is Phase.DONE} == {
            (Phase.FINAL_VALIDATION, Event.FINAL_PASS)
        }
        # exhaustive walk over concrete states confirms it with guards applied
        limits = Limits(max_retries=2, max_restarts=1)
        key = lambda s: (s.phase, tuple(sorted(s.retries.items())), s.restart_count)  # noqa: E731
        start = PipelineState(current_subtask="s1")
        frontier, seen, into_done = [start], {key(start)}, set()
        while frontier:
            nxt = []
            for state, event in itertools.product(frontier, Event):
                try:
                    succ = step_state(state, event, limits=limits, subtask_id="s1")
                except (IllegalTransitionError, GuardViolationError):
                    continue
                if succ.phase is Phase.DONE:
                    into_done.add((state.phase, event))
                if key(succ) not in seen:
                    seen.add(key(succ))
                    nxt.append(succ)
            frontier = nxt
        assert into_done == {(Phase.FINAL_VALIDATION, Event.FINAL_PASS)}
        assert {k[0] for k in seen} == set(Phase)
