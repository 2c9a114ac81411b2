"""Pipeline driver: guarded state machine, timed coordination graph and the
plan -> research -> generate -> validate loop with feedback and restarts.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import logging
import math
import threading
import time
import zlib
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from .backends.analyzer import Analyzer, NullAnalyzer
from .backends.llm import Backend, ChatRequest, ChatResponse, request_digest
from .backends.sandbox import SandboxRunner
from .codegen import CodeGen, aggregate
from .errors import (
    GuardViolationError,
    IllegalTransitionError,
    PipelineFailedError,
    RagenError,
    SubtaskExhaustedError,
)
from .extractor import KnowledgeStore, extract_code, extract_knowledge, validate_snippet
from .model import (
    Agent,
    CodeSnippet,
    DecompositionPlan,
    FailureKind,
    FeedbackNote,
    Modality,
    Subtask,
    SubtaskStatus,
    TaskSpec,
    TraceRecord,
    Trajectory,
    ValidationReport,
    Verdict,
    to_jsonable,
    topological_order,
)
from .planner import Planner
from .searcher import EpisodeStep, Searcher, fuse_evidence
from .trace import TraceLog

logger = logging.getLogger(__name__)

ORCHESTRATOR = "orchestrator"

# Inter-agent delay model: Gamma(shape=2, scale=0.5 s).
GAMMA_SHAPE = 2.0
GAMMA_SCALE_S = 0.5
DEFAULT_DELTA_MAX_MS = 5000.0


class Phase(str, Enum):
    INIT = "init"
    PLANNING = "planning"
    SUBTASK_LOOP = "subtask_loop"
    AGGREGATING = "aggregating"
    FINAL_VALIDATION = "final_validation"
    DONE = "done"
    FAILED = "failed"


TERMINAL_PHASES = (Phase.DONE, Phase.FAILED)


class Event(str, Enum):
    START = "start"
    PLAN_READY = "plan_ready"
    EPISODE_DONE = "episode_done"
    SNIPPET_READY = "snippet_ready"
    VALIDATION_PASS = "validation_pass"
    VALIDATION_FAIL = "validation_fail"
    RETRIES_EXHAUSTED = "retries_exhausted"
    ALL_SUBTASKS_DONE = "all_subtasks_done"
    FINAL_PASS = "final_pass"
    FINAL_FAIL = "final_fail"
    RESTARTS_EXHAUSTED = "restarts_exhausted"
    ABORT = "abort"


@dataclass(frozen=True)
class Limits:
    max_retries: int = 2
    max_restarts: int = 1
    deadline_ms: Optional[float] = None


def retry_key(subtask_id: Optional[str]) -> str:
    """Children of a split subtask share their root's retry budget."""
    return (subtask_id or "").split(".")[0]


@dataclass(frozen=True)
class PipelineState:
    phase: Phase = Phase.INIT
    current_subtask: Optional[str] = None
    retries: dict = field(default_factory=dict)
    restart_count: int = 0
    clock_ms: float = 0.0

    def retries_for(self, subtask_id: Optional[str]) -> int:
        return self.retries.get(retry_key(subtask_id), 0)


def _before_deadline(state: PipelineState, limits: Limits) -> bool:
    return limits.deadline_ms is None or state.clock_ms < limits.deadline_ms


GUARDS: dict[str, Callable[[PipelineState, Limits], bool]] = {
    "always": lambda s, lim: True,
    "before_deadline": _before_deadline,
    "retries_left": lambda s, lim: _before_deadline(s, lim) and s.retries_for(s.current_subtask) < lim.max_retries,
    "retries_spent": lambda s, lim: s.retries_for(s.current_subtask) >= lim.max_retries,
    "restarts_left": lambda s, lim: _before_deadline(s, lim) and s.restart_count < lim.max_restarts,
    "restarts_spent": lambda s, lim: s.restart_count >= lim.max_restarts,
}


@dataclass(frozen=True)
class TransitionRule:
    from_phase: Phase
    event: Event
    to_phase: Phase
    guard: str = "before_deadline"
    weight: float = 1.0


_P, _E = Phase, Event
DEFAULT_RULES: tuple[TransitionRule, ...] = (
    TransitionRule(_P.INIT, _E.START, _P.PLANNING),
    TransitionRule(_P.PLANNING, _E.PLAN_READY, _P.SUBTASK_LOOP),
    TransitionRule(_P.SUBTASK_LOOP, _E.EPISODE_DONE, _P.SUBTASK_LOOP),
    TransitionRule(_P.SUBTASK_LOOP, _E.SNIPPET_READY, _P.SUBTASK_LOOP),
    TransitionRule(_P.SUBTASK_LOOP, _E.VALIDATION_PASS, _P.SUBTASK_LOOP),
    TransitionRule(_P.SUBTASK_LOOP, _E.VALIDATION_FAIL, _P.SUBTASK_LOOP, "retries_left"),
    TransitionRule(_P.SUBTASK_LOOP, _E.RETRIES_EXHAUSTED, _P.FAILED, "retries_spent"),
    TransitionRule(_P.SUBTASK_LOOP, _E.ALL_SUBTASKS_DONE, _P.AGGREGATING),
    TransitionRule(_P.AGGREGATING, _E.SNIPPET_READY, _P.FINAL_VALIDATION),
    TransitionRule(_P.FINAL_VALIDATION, _E.FINAL_PASS, _P.DONE),
    TransitionRule(_P.FINAL_VALIDATION, _E.FINAL_FAIL, _P.PLANNING, "restarts_left"),
    TransitionRule(_P.FINAL_VALIDATION, _E.RESTARTS_EXHAUSTED, _P.FAILED, "restarts_spent"),
) + tuple(TransitionRule(p, _E.ABORT, _P.FAILED, "always") for p in Phase if p not in TERMINAL_PHASES)


def step_state(
    state: PipelineState,
    event: Event,
    rules: Sequence[TransitionRule] = DEFAULT_RULES,
    limits: Limits = Limits(),
    duration_ms: float = 0.0,
    subtask_id: Optional[str] = None,
) -> PipelineState:
    """Apply one event. The clock advances by ``duration_ms`` before guards are checked."""
    event = Event(event)
    candidates = [r for r in rules if r.from_phase is state.phase and r.event is event]
    if not candidates:
        raise IllegalTransitionError(f"no rule for event {event.value} in phase {state.phase.value}")
    probe = dataclasses.replace(
        state,
        clock_ms=state.clock_ms + max(0.0, duration_ms),
        current_subtask=subtask_id if subtask_id is not None else state.current_subtask,
    )
    enabled = [r for r in candidates if GUARDS[r.guard](probe, limits)]
    if not enabled:
        raise GuardViolationError(
            f"guard {candidates[0].guard} is false for {event.value} in {state.phase.value}"
        )
    if len(enabled) > 1:
        raise IllegalTransitionError(f"rule table is not deterministic for {state.phase.value}/{event.value}")
    rule = enabled[0]

    retries, restarts, current = probe.retries, probe.restart_count, probe.current_subtask
    if event is Event.VALIDATION_FAIL:
        key = retry_key(current)
        retries = {**retries, key: retries.get(key, 0) + 1}
    elif event is Event.FINAL_FAIL:
        restarts += 1
        retries, current = {}, None
    elif event in (Event.ALL_SUBTASKS_DONE, Event.PLAN_READY):
        current = None
    return dataclasses.replace(
        probe, phase=rule.to_phase, retries=retries, restart_count=restarts, current_subtask=current
    )


# --- delays and the coordination graph --------------------------------------

def sample_delay(rng: np.random.Generator, delta_max_ms: float = DEFAULT_DELTA_MAX_MS) -> float:
    """One inter-agent delay in ms, clamped to stay strictly below ``delta_max_ms``."""
    return _draw_delay(rng, delta_max_ms)[0]


def _draw_delay(rng: np.random.Generator, delta_max_ms: float) -> tuple[float, bool]:
    raw = float(rng.gamma(GAMMA_SHAPE, GAMMA_SCALE_S)) * 1000.0
    if raw >= delta_max_ms:
        return math.nextafter(delta_max_ms, 0.0), True
    return raw, False


def sample_delays(rng: np.random.Generator, n: int, delta_max_ms: float = DEFAULT_DELTA_MAX_MS) -> np.ndarray:
    """Vectorised form of :func:`sample_delay`; yields the same stream of values."""
    raw = rng.gamma(GAMMA_SHAPE, GAMMA_SCALE_S, size=n) * 1000.0
    return np.minimum(raw, math.nextafter(delta_max_ms, 0.0))


AGENT_ORDER = (Agent.PLANNER, Agent.SEARCHER, Agent.CODEGEN, Agent.EXTRACTOR)
EDGES = (
    (Agent.PLANNER, Agent.SEARCHER),
    (Agent.SEARCHER, Agent.CODEGEN),
    (Agent.CODEGEN, Agent.EXTRACTOR),
    (Agent.EXTRACTOR, Agent.PLANNER),
    (Agent.EXTRACTOR, Agent.CODEGEN),
)


@dataclass
class CoordinationGraph:
    delta_max_ms: float = DEFAULT_DELTA_MAX_MS
    nodes: dict = field(default_factory=lambda: {a: {"subtask": None, "messages": 0} for a in AGENT_ORDER})
    edges: dict = field(default_factory=lambda: {e: None for e in EDGES})
    clamped: int = 0

    def __post_init__(self):
        self._lock = threading.Lock()

    def record(self, src: Agent, dst: Agent, delay_ms: float, clamped: bool, subtask: Optional[str]) -> None:
        if (src, dst) not in self.edges:
            raise ValueError(f"no edge {src.value}->{dst.value}")
        if not delay_ms < self.delta_max_ms:
            raise ValueError("edge delay must stay below delta_max_ms")
        with self._lock:
            self.edges[(src, dst)] = delay_ms
            self.nodes[dst] = {"subtask": subtask, "messages": self.nodes[dst]["messages"] + 1}
            self.clamped += int(clamped)


# --- clocks ----------------------------------------------------------------

class SimulatedClock:
    """Logical clock advanced only by simulated delays."""

    def __init__(self, start_ms: float = 0.0):
        self._now = start_ms

    def now_ms(self) -> float:
        return self._now

    def advance(self, ms: float) -> None:
        self._now += ms

    def fork(self) -> "SimulatedClock":
        return SimulatedClock(self._now)

    def join(self, others: Sequence["SimulatedClock"]) -> None:
        self._now = max([self._now, *(o.now_ms() for o in others)])


class RealClock:
    """Wall time since run start; delays really sleep."""

    def __init__(self):
        self._t0 = time.monotonic()

    def now_ms(self) -> float:
        return (time.monotonic() - self._t0) * 1000.0

    def advance(self, ms: float) -> None:
        time.sleep(ms / 1000.0)

    def fork(self) -> "RealClock":
        return self

    def join(self, others) -> None:
        pass


# --- trace recording --------------------------------------------------------

@dataclass
class _Buffer:
    """Events produced by one subtask run, committed to the trace later."""

    subtask_index: int
    clock: object
    items: list = field(default_factory=list)

    def add(self, wall: float, kind: str, agent: str, payload: dict) -> None:
        self.items.append((wall, self.subtask_index, len(self.items), kind, agent, payload))


class Recorder:
    """Single owner of the trajectory. Worker threads write into buffers."""

    def __init__(self, run_id: str, clock, log: Optional[TraceLog] = None):
        self.trajectory = Trajectory(run_id)
        self.clock = clock
        self.log = log
        self._local = threading.local()
        self._lock = threading.Lock()
        self._next_step = 0
        self._step_map: dict = {}

    @property
    def buffer(self) -> Optional[_Buffer]:
        return getattr(self._local, "buffer", None)

    def now(self) -> float:
        buf = self.buffer
        return (buf.clock if buf else self.clock).now_ms()

    @contextmanager
    def buffered(self, buffer: _Buffer):
        self._local.buffer = buffer
        try:
            yield buffer
        finally:
            self._local.buffer = None

    def emit(self, kind: str, agent: str, payload: dict, wall_ms: Optional[float] = None) -> None:
        wall = self.now() if wall_ms is None else wall_ms
        payload = to_jsonable(payload)
        buf = self.buffer
        if buf is not None:
            buf.add(wall, kind, agent, payload)
        else:
            self.commit(wall, kind, agent, payload)

    def commit(self, wall: float, kind: str, agent: str, payload: dict) -> TraceRecord:
        with self._lock:
            if kind in ("reasoning", "action"):
                payload = dict(payload)
                key = (payload.get("subtask"), payload.get("attempt"), payload["step_index"])
                if kind == "reasoning":
                    self._step_map[key] = self._next_step
                    self._next_step += 1
                payload["local_index"] = payload["step_index"]
                payload["step_index"] = self._step_map.get(key, -1)
            last = self.trajectory.events[-1].wall_ms if self.trajectory.events else 0.0
            rec = TraceRecord(self.trajectory.run_id, len(self.trajectory.events), max(float(wall), last), kind, agent, payload)
            if self.log is not None:
                rec = self.log.append(rec)
            self.trajectory.events.append(rec)
            return rec


class TracedBackend:
    """Attributes every LLM call to one agent in the trace."""

    def __init__(self, inner: Backend, agent: Agent, recorder: Recorder):
        self.inner = inner
        self.agent = agent
        self.recorder = recorder

    def chat(self, request: ChatRequest) -> ChatResponse:
        response = self.inner.chat(request)
        self.recorder.emit(
            "llm_call",
            self.agent.value,
            {
                "digest": request_digest(request),
                "prompt_tokens": response.prompt_tokens,
                "completion_tokens": response.completion_tokens,
            },
        )
        return response


# --- agents and results -----------------------------------------------------

@dataclass
class Agents:
    planner: Planner
    searcher: Searcher
    codegen: CodeGen
    sandbox: SandboxRunner
    analyzer: Analyzer = field(default_factory=NullAnalyzer)
    llm: dict = field(default_factory=dict)  # agent name -> backend
    knowledge: KnowledgeStore = field(default_factory=KnowledgeStore)

    def backend(self, agent: Agent) -> Backend:
        return self.llm.get(agent.value) or self.llm["default"]


@dataclass
class PipelineSettings:
    seed: int = 0
    max_retries: int = 2
    max_restarts: int = 1
    delta_max_ms: float = DEFAULT_DELTA_MAX_MS
    delay_mode: str = "simulated"
    deadline_ms: Optional[float] = None
    run_timeout_ms: int = 10_000
    feedback_cap: int = 2000
    max_workers: int = 1
    query_pack: Optional[str] = None

    @classmethod
    def from_config(cls, config) -> "PipelineSettings":
        return cls(
            seed=config.seed or 0,
            max_retries=config.max_retries,
            max_restarts=config.max_restarts,
            delta_max_ms=config.delta_max_ms,
            delay_mode=config.delay_mode,
            deadline_ms=config.deadline_ms,
            run_timeout_ms=config.run_timeout_ms,
            feedback_cap=config.feedback_cap,
            max_workers=config.max_workers,
        )


@dataclass
class MetricsRecord:
    run_id: str
    task_id: str
    phase: str
    llm_calls: int
    wall_ms: float
    restart_count: int
    attempts: dict
    delays: int
    clamped_delays: int
    compiled: bool
    ran: bool
    verdict: Optional[str]
    findings: list
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return to_jsonable(self)


@dataclass
class _Outcome:
    subtask_id: str
    status: str  # validated | split | exhausted | error
    snippet: Optional[CodeSnippet] = None
    report: Optional[ValidationReport] = None
    attempts: int = 0
    error: Optional[BaseException] = None


def _failure_details(kind: FailureKind, report: Optional[ValidationReport], language: str) -> str:
    if kind is FailureKind.EXTRACTION_FAIL:
        return f"the reply contained no fenced {language} code block"
    if kind is FailureKind.SECURITY_FAIL:
        return "\n".join(f"{f.rule_id} at line {f.line}: {f.message}" for f in report.findings)
    return report.stderr_head or "the program exited with an error"


def _failure_kind(report: Optional[ValidationReport]) -> FailureKind:
    if report is None:
        return FailureKind.EXTRACTION_FAIL
    return FailureKind(report.verdict.value)


class Pipeline:
    def __init__(
        self,
        task: TaskSpec,
        agents: Agents,
        settings: PipelineSettings = PipelineSettings(),
        run_id: str = "run",
        log: Optional[TraceLog] = None,
        rules: Sequence[TransitionRule] = DEFAULT_RULES,
    ):
        self.task = task
        self.agents = agents
        self.settings = settings
        self.rules = rules
        self.limits = Limits(settings.max_retries, settings.max_restarts, settings.deadline_ms)
        self.clock = SimulatedClock() if settings.delay_mode == "simulated" else RealClock()
        self.recorder = Recorder(run_id, self.clock, log)
        self.graph = CoordinationGraph(settings.delta_max_ms)
        self.rng = np.random.default_rng(settings.seed)
        self.state = PipelineState()
        self.plan: Optional[DecompositionPlan] = None
        self._plan_lock = threading.Lock()
        self._retries_used: dict[str, int] = {}
        self._attempts: dict[str, int] = {}
        self._reasoning: list[str] = []
        self._validated: dict[str, CodeSnippet] = {}
        self._local = threading.local()
        self.llm = {
            a: TracedBackend(agents.backend(a), a, self.recorder) for a in (Agent.PLANNER, Agent.SEARCHER, Agent.CODEGEN)
        }

    @property
    def trajectory(self) -> Trajectory:
        return self.recorder.trajectory

    # state machine ----------------------------------------------------------

    def _fire(self, event: Event, subtask_id: Optional[str] = None) -> None:
        buf = self.recorder.buffer
        if buf is not None:
            buf.add(buf.clock.now_ms(), "__event__", ORCHESTRATOR, {"event": event.value, "subtask": subtask_id})
            return
        self._apply(event, self.clock.now_ms(), subtask_id)

    def _apply(self, event: Event, wall: float, subtask_id: Optional[str]) -> None:
        before = self.state
        self.state = step_state(
            before, event, self.rules, self.limits, duration_ms=wall - before.clock_ms, subtask_id=subtask_id
        )
        self.recorder.commit(
            wall,
            "transition",
            ORCHESTRATOR,
            {
                "from": before.phase.value,
                "event": event.value,
                "to": self.state.phase.value,
                "subtask": subtask_id,
                "retries": dict(sorted(self.state.retries.items())),
                "restart_count": self.state.restart_count,
                "clock_ms": self.state.clock_ms,
            },
        )

    def _commit_buffers(self, buffers: Sequence[_Buffer]) -> None:
        items = sorted(item for buf in buffers for item in buf.items)
        for wall, _, _, kind, agent, payload in items:
            if kind == "__event__":
                self._apply(Event(payload["event"]), wall, payload["subtask"])
            else:
                self.recorder.commit(wall, kind, agent, payload)

    # timing -------------------------------------------------------------------

    def _rng(self) -> np.random.Generator:
        return getattr(self._local, "rng", None) or self.rng

    def hop(self, src: Agent, dst: Agent, subtask_id: Optional[str] = None) -> float:
        delay, clamped = _draw_delay(self._rng(), self.settings.delta_max_ms)
        self.graph.record(src, dst, delay, clamped, subtask_id)
        buf = self.recorder.buffer
        clock = buf.clock if buf else self.clock
        self.recorder.emit(
            "delay", src.value, {"to": dst.value, "delay_ms": delay, "clamped": clamped, "subtask": subtask_id}
        )
        clock.advance(delay)
        return delay

    # subtask loop -----------------------------------------------------------

    def _context_for(self, subtask: Subtask) -> list[CodeSnippet]:
        """Validated snippets of all transitive dependencies, in plan order."""
        with self._plan_lock:
            plan = self.plan
        by_id = {s.subtask_id: s for s in plan.subtasks}
        needed, stack = set(), list(subtask.depends_on)
        while stack:
            sid = stack.pop()
            if sid in needed or sid not in by_id:
                continue
            needed.add(sid)
            stack.extend(by_id[sid].depends_on)
        return [self._validated[s.subtask_id] for s in topological_order(plan) if s.subtask_id in needed]

    def _validate_candidates(
        self, candidates: list[CodeSnippet], context: Sequence[CodeSnippet] = ()
    ) -> tuple[Optional[CodeSnippet], Optional[ValidationReport]]:
        first_report = None
        for cand in candidates:
            self.recorder.emit(
                "snippet",
                Agent.EXTRACTOR.value,
                {"subtask": cand.subtask_id, "attempt": cand.attempt, "language": cand.language.value,
                 "body": cand.body, "fenced_origin": cand.fenced_origin},
            )
            report = validate_snippet(
                cand, self.agents.sandbox, self.agents.analyzer, self.settings.run_timeout_ms,
                self.settings.query_pack, context,
            )
            self.recorder.emit("validation", Agent.EXTRACTOR.value, {**to_jsonable(report), "attempt": cand.attempt})
            added = self.agents.knowledge.extend(extract_knowledge(report, cand, len(self.recorder.trajectory.events)))
            if added:
                self.recorder.emit("knowledge", Agent.EXTRACTOR.value, {"items": added})
            if report.passed:
                return cand, report
            first_report = first_report or report
        return None, first_report

    def _attempt_loop(self, subtask: Subtask) -> _Outcome:
        task = self.task
        sid = subtask.subtask_id
        key = retry_key(sid)
        feedback: Optional[FeedbackNote] = None
        lang = task.target_language
        while True:
            attempt = self._retries_used.get(key, 0) + 1
            self._attempts[sid] = attempt
            self.hop(Agent.PLANNER, Agent.SEARCHER, sid)

            def observe(step: EpisodeStep, attempt=attempt):
                base = {"subtask": sid, "attempt": attempt, "step_index": step.reasoning.step_index}
                self.recorder.emit("reasoning", Agent.SEARCHER.value, {**base, "thought": step.reasoning.thought})
                if step.action is not None:
                    a = step.action
                    self.recorder.emit(
                        "action",
                        Agent.SEARCHER.value,
                        {**base, "tool": a.tool, "input": a.input, "observation": a.observation,
                         "elapsed_ms": a.elapsed_ms, "ok": a.ok, "reward": step.reward,
                         "transition": {"state": a.step_index, "action": a.tool, "next_state": a.step_index + 1}},
                    )

            context = "\n".join(f"- {r}" for r in self._reasoning)
            buf = self.recorder.buffer
            episode = self.agents.searcher.run_episode(
                subtask, self.llm[Agent.SEARCHER], task, context, buf.clock if buf else self.clock, observer=observe
            )
            if episode.failed:
                episode.terminal_summary = f"(research failed: {episode.error})"
            self.recorder.emit(
                "episode",
                Agent.SEARCHER.value,
                {"subtask": sid, "attempt": attempt, "summary": episode.terminal_summary, "steps": len(episode.steps),
                 "budget_exhausted": episode.budget_exhausted, "failed": episode.failed,
                 "rewards": [s.reward for s in episode.steps]},
            )
            self._fire(Event.EPISODE_DONE, sid)
            evidence = fuse_evidence(episode.evidence) if episode.evidence else []

            self.hop(Agent.SEARCHER, Agent.CODEGEN, sid)
            raw, _ = self.agents.codegen.generate_snippet(
                subtask, episode, evidence, feedback, self.llm[Agent.CODEGEN], task, attempt
            )
            self._fire(Event.SNIPPET_READY, sid)

            self.hop(Agent.CODEGEN, Agent.EXTRACTOR, sid)
            candidates = extract_code(raw, lang, sid, attempt)
            accepted, report = self._validate_candidates(candidates, self._context_for(subtask))
            self.hop(Agent.EXTRACTOR, Agent.PLANNER, sid)

            if accepted is not None:
                self._fire(Event.VALIDATION_PASS, sid)
                self.recorder.emit(
                    "trajectory_update", Agent.PLANNER.value, {"subtask": sid, "summary": episode.terminal_summary}
                )
                self._reasoning.append(f"{sid}: {episode.terminal_summary}")
                return _Outcome(sid, "validated", accepted, report, attempt)

            kind = _failure_kind(report)
            note = FeedbackNote(sid, attempt, kind, _failure_details(kind, report, lang.value), self.settings.feedback_cap)
            self.recorder.emit("feedback", Agent.EXTRACTOR.value, to_jsonable(note))
            if self._retries_used.get(key, 0) >= self.settings.max_retries:
                self._fire(Event.RETRIES_EXHAUSTED, sid)
                return _Outcome(sid, "exhausted", None, report, attempt)
            self._fire(Event.VALIDATION_FAIL, sid)
            self._retries_used[key] = self._retries_used.get(key, 0) + 1

            with self._plan_lock:
                self.plan = self.agents.planner.revise(
                    self.plan, note, self.llm[Agent.PLANNER], task, self.agents.knowledge.recent(10)
                )
                plan = self.plan
            self.recorder.emit("revision", Agent.PLANNER.value, {"subtask": sid, "plan": to_jsonable(plan)})
            if sid not in plan.ids():
                return _Outcome(sid, "split", None, report, attempt)
            subtask = plan.get(sid)
            feedback = note

    def _run_buffered(self, subtask: Subtask, clock) -> tuple[_Outcome, _Buffer]:
        buf = _Buffer(subtask.index, clock)
        self._local.rng = np.random.default_rng(
            [self.settings.seed, self.state.restart_count, zlib.crc32(subtask.subtask_id.encode())]
        )
        try:
            with self.recorder.buffered(buf):
                try:
                    outcome = self._attempt_loop(subtask)
                except RagenError as exc:
                    outcome = _Outcome(subtask.subtask_id, "error", error=exc, attempts=self._attempts.get(subtask.subtask_id, 0))
        finally:
            self._local.rng = None
        return outcome, buf

    def run_subtask(self, subtask: Subtask) -> tuple[ValidationReport, PipelineState]:
        """Run one subtask to validation, retrying with planner revisions."""
        outcome, buf = self._run_buffered(subtask, self.clock)
        self._commit_buffers([buf])
        return self._settle(outcome), self.state

    def _settle(self, outcome: _Outcome) -> Optional[ValidationReport]:
        if outcome.status == "error":
            raise outcome.error
        if outcome.status == "exhausted":
            raise SubtaskExhaustedError(outcome.subtask_id, outcome.attempts)
        if outcome.status == "validated":
            with self._plan_lock:
                self.plan = self.plan.with_subtask(
                    dataclasses.replace(self.plan.get(outcome.subtask_id), status=SubtaskStatus.VALIDATED)
                )
        return outcome.report

    def _run_batch(self, batch: list[Subtask]) -> list[_Outcome]:
        forks = [self.clock.fork() for _ in batch]
        with concurrent.futures.ThreadPoolExecutor(max_workers=self.settings.max_workers) as pool:
            results = list(pool.map(self._run_buffered, batch, forks))
        self.clock.join(forks)
        self._commit_buffers([buf for _, buf in results])
        return [o for o, _ in results]

    # whole run ------------------------------------------------------------------

    def _final_feedback(self, report: ValidationReport) -> FeedbackNote:
        kind = _failure_kind(report)
        return FeedbackNote(
            "final",
            self.state.restart_count + 1,
            kind,
            _failure_details(kind, report, self.task.target_language.value),
            self.settings.feedback_cap,
        )

    def _metrics(self, final_report: Optional[ValidationReport], error: Optional[str] = None) -> MetricsRecord:
        events = self.trajectory.events
        delays = [e for e in events if e.kind == "delay"]
        return MetricsRecord(
            run_id=self.trajectory.run_id,
            task_id=self.task.task_id,
            phase=self.state.phase.value,
            llm_calls=sum(1 for e in events if e.kind == "llm_call"),
            wall_ms=events[-1].wall_ms if events else 0.0,
            restart_count=self.state.restart_count,
            attempts=dict(sorted(self._attempts.items())),
            delays=len(delays),
            clamped_delays=sum(1 for e in delays if e.payload["clamped"]),
            compiled=bool(final_report and final_report.compiled),
            ran=bool(final_report and final_report.ran),
            verdict=final_report.verdict.value if final_report else None,
            findings=to_jsonable(list(final_report.findings)) if final_report else [],
            error=error,
        )

    def _fail(self, message: str, final_report=None, cause: Optional[BaseException] = None) -> PipelineFailedError:
        if self.state.phase not in TERMINAL_PHASES:
            self._apply(Event.ABORT, self.clock.now_ms(), None)
        self.recorder.emit("run_end", ORCHESTRATOR, {"phase": self.state.phase.value, "error": message})
        return PipelineFailedError(message, self.trajectory, self._metrics(final_report, message))

    def run(self) -> tuple[CodeSnippet, Trajectory, MetricsRecord]:
        task = self.task
        self.recorder.emit(
            "run_start",
            ORCHESTRATOR,
            {"task": to_jsonable(task), "seed": self.settings.seed, "limits": to_jsonable(self.limits),
             "delay_mode": self.settings.delay_mode, "delta_max_ms": self.settings.delta_max_ms},
        )
        self._fire(Event.START)
        plan_feedback: Optional[FeedbackNote] = None
        final_report: Optional[ValidationReport] = None
        try:
            while True:
                self._retries_used.clear()
                self._reasoning.clear()
                self.plan = self.agents.planner.decompose(
                    task, self.agents.knowledge.recent(10), self.llm[Agent.PLANNER], plan_feedback
                )
                self.recorder.emit("plan", Agent.PLANNER.value, to_jsonable(self.plan))
                self._fire(Event.PLAN_READY)

                self._validated = validated = {}
                while True:
                    pending = [s for s in self.plan.subtasks if s.subtask_id not in validated]
                    if not pending:
                        break
                    ready = [s for s in pending if all(d in validated for d in s.depends_on)]
                    parallel = self.plan.modality is Modality.PARALLEL and self.settings.max_workers > 1
                    if parallel and len(ready) > 1:
                        outcomes = self._run_batch(ready)
                    else:
                        outcome, buf = self._run_buffered(ready[0], self.clock)
                        self._commit_buffers([buf])
                        outcomes = [outcome]
                    for outcome in outcomes:
                        try:
                            self._settle(outcome)
                        except SubtaskExhaustedError as exc:
                            raise self._fail(str(exc), outcome.report, exc) from exc
                        if outcome.status == "validated":
                            validated[outcome.subtask_id] = outcome.snippet

                self._fire(Event.ALL_SUBTASKS_DONE)
                self.hop(Agent.EXTRACTOR, Agent.CODEGEN)
                final = aggregate(
                    [validated[sid] for sid in self.plan.ids()], self.plan, task.target_language,
                    attempt=self.state.restart_count + 1,
                )
                self.recorder.emit("aggregate", Agent.CODEGEN.value, {"attempt": final.attempt, "body": final.body})
                self.hop(Agent.CODEGEN, Agent.EXTRACTOR)
                self._fire(Event.SNIPPET_READY)
                final_report = validate_snippet(
                    final, self.agents.sandbox, self.agents.analyzer, self.settings.run_timeout_ms, self.settings.query_pack
                )
                self.recorder.emit("validation", Agent.EXTRACTOR.value, {**to_jsonable(final_report), "attempt": final.attempt})
                added = self.agents.knowledge.extend(extract_knowledge(final_report, final, len(self.trajectory.events)))
                if added:
                    self.recorder.emit("knowledge", Agent.EXTRACTOR.value, {"items": added})
                self.hop(Agent.EXTRACTOR, Agent.PLANNER)

                if final_report.passed:
                    self._fire(Event.FINAL_PASS)
                    self.recorder.emit("run_end", ORCHESTRATOR, {"phase": self.state.phase.value, "error": None})
                    return final, self.trajectory, self._metrics(final_report)

                plan_feedback = self._final_feedback(final_report)
                self.recorder.emit("feedback", Agent.EXTRACTOR.value, to_jsonable(plan_feedback))
                if self.state.restart_count < self.settings.max_restarts:
                    self._fire(Event.FINAL_FAIL)
                    continue
                self._fire(Event.RESTARTS_EXHAUSTED)
                raise self._fail(
                    f"final validation failed after {self.state.restart_count} restarts", final_report
                )
        except PipelineFailedError:
            raise
        except (RagenError, GuardViolationError) as exc:
            raise self._fail(f"{type(exc).__name__}: {exc}", final_report, exc) from exc


def run_pipeline(
    task: TaskSpec,
    agents: Agents,
    settings: PipelineSettings = PipelineSettings(),
    run_id: str = "run",
    log: Optional[TraceLog] = None,
) -> tuple[CodeSnippet, Trajectory, MetricsRecord]:
    return Pipeline(task, agents, settings, run_id, log).run()
