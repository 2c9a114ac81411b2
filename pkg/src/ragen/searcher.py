"""ReAct reasoning/acting loop with tool calls and evidence weighting."""

from __future__ import annotations

import concurrent.futures
import math
import re
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Protocol, Sequence, Union

from .backends.llm import Backend, ChatRequest, Message
from .backends.search import render_hits
from .errors import DirectiveParseError, EmptyEvidenceError, UnknownToolError
from .model import ActionRecord, Agent, Evidence, ReasoningStep, Subtask, TaskSpec, to_jsonable
from .templates import Templates

DEFAULT_STEP_BUDGET = 6
DEFAULT_OBSERVATION_CAP = 4000
DEFAULT_DIRECTIVE_ATTEMPTS = 2


# --- directives -------------------------------------------------------------

@dataclass(frozen=True)
class Act:
    tool: str
    input: str


@dataclass(frozen=True)
class Finish:
    summary: str


Directive = Union[Act, Finish]

_THOUGHT = re.compile(r"Thought:\s*(.*?)\s*(?=\bAction:|\bFinal:|\Z)", re.DOTALL)
_ACTION = re.compile(r"\bAction:\s*([A-Za-z_][\w-]*)\s*\[([^\n]*)\]")
_FINAL = re.compile(r"\bFinal:\s*(.*?)\s*\Z", re.DOTALL)


def parse_directive(text: str) -> tuple[str, Directive]:
    """Split a model reply into (thought, directive); whichever directive comes first wins."""
    action = _ACTION.search(text)
    final = _FINAL.search(text)
    if final and not final.group(1):
        final = None
    if not action and not final:
        raise DirectiveParseError("no Action or Final directive found")
    m = _THOUGHT.search(text)
    thought = m.group(1).strip() if m else ""
    if action and (not final or action.start() < final.start()):
        return thought, Act(action.group(1), action.group(2).strip())
    return thought, Finish(final.group(1))


def render_directive(thought: str, directive: Directive) -> str:
    if isinstance(directive, Act):
        return f"Thought: {thought}\nAction: {directive.tool}[{directive.input}]"
    return f"Thought: {thought}\nFinal: {directive.summary}"


# --- tools -----------------------------------------------------------------

@dataclass(frozen=True)
class ToolResult:
    text: str
    relevance: Optional[float] = None


class Tool(Protocol):
    def __call__(self, query: str) -> ToolResult: ...


@dataclass(frozen=True)
class ToolDescriptor:
    name: str
    description: str
    timeout_ms: int = 10_000
    enabled: bool = True


class SearchTool:
    """Wraps a search adapter as a tool; relevance is the best hit score."""

    def __init__(self, adapter, k: int = 3):
        self.adapter = adapter
        self.k = k

    def __call__(self, query: str) -> ToolResult:
        hits = self.adapter.search(query, self.k)
        if not hits:
            return ToolResult("", None)
        return ToolResult(render_hits(hits), max(h.score for h in hits))


class ToolRegistry:
    def __init__(self):
        self._tools: dict[str, tuple[ToolDescriptor, Callable[[str], ToolResult]]] = {}

    def register(self, descriptor: ToolDescriptor, fn: Callable[[str], ToolResult]) -> None:
        if descriptor.name in self._tools:
            raise ValueError(f"tool {descriptor.name!r} already registered")
        self._tools[descriptor.name] = (descriptor, fn)

    def get(self, name: str) -> tuple[ToolDescriptor, Callable[[str], ToolResult]]:
        entry = self._tools.get(name)
        if entry is None or not entry[0].enabled:
            raise UnknownToolError(f"no enabled tool named {name!r}")
        return entry

    def descriptors(self) -> list[ToolDescriptor]:
        return [d for d, _ in self._tools.values() if d.enabled]

    def describe(self) -> str:
        return "\n".join(f"- {d.name}: {d.description}" for d in self.descriptors()) or "- none"


class Clock(Protocol):
    def now_ms(self) -> float: ...


class WallClock:
    def __init__(self):
        self._t0 = time.monotonic()

    def now_ms(self) -> float:
        return (time.monotonic() - self._t0) * 1000.0


# A timed-out tool call is abandoned, not interrupted: its thread keeps
# running until the tool returns.
_tool_pool = concurrent.futures.ThreadPoolExecutor(max_workers=8, thread_name_prefix="ragen-tool")


def act_step(
    directive: Act, registry: ToolRegistry, clock: Clock, observation_cap: int = DEFAULT_OBSERVATION_CAP,
    step_index: int = 0,
) -> tuple[ActionRecord, Optional[float]]:
    """Execute one tool call. Returns the record and the tool-reported relevance."""
    descriptor, fn = registry.get(directive.tool)
    start = clock.now_ms()
    future = _tool_pool.submit(fn, directive.input)
    relevance = None
    try:
        result = future.result(timeout=descriptor.timeout_ms / 1000.0)
        observation, ok, relevance = result.text[:observation_cap], True, result.relevance
    except concurrent.futures.TimeoutError:
        future.cancel()
        observation, ok = "timeout", False
    except Exception as exc:  # tool failures become observations
        observation, ok = f"error: {exc}"[:observation_cap], False
    elapsed = clock.now_ms() - start
    if observation == "timeout" and not ok:
        elapsed = max(elapsed, float(descriptor.timeout_ms))
    return ActionRecord(step_index, directive.tool, directive.input, observation, elapsed, ok), relevance


def score_action(record: ActionRecord) -> float:
    """Diagnostic reward: +1 useful observation, 0 empty, -1 failed call."""
    if not record.ok:
        return -1.0
    return 1.0 if record.observation else 0.0


def fuse_evidence(evidence: Sequence[Evidence]) -> list[Evidence]:
    """Softmax weights over relevance scores, order preserved."""
    if not evidence:
        raise EmptyEvidenceError("cannot weight an empty evidence set")
    scores = [float(e.relevance) for e in evidence]
    if not all(math.isfinite(s) for s in scores):
        raise ValueError("relevance scores must be finite")
    top = max(scores)
    exps = [math.exp(s - top) for s in scores]
    total = math.fsum(exps)
    return [replace(e, weight=x / total) for e, x in zip(evidence, exps)]


# --- episodes --------------------------------------------------------------

@dataclass(frozen=True)
class EpisodeStep:
    reasoning: ReasoningStep
    action: Optional[ActionRecord] = None
    reward: float = 0.0


@dataclass
class ReActEpisode:
    subtask_id: str
    steps: list[EpisodeStep] = field(default_factory=list)
    terminal_summary: str = ""
    step_budget: int = DEFAULT_STEP_BUDGET
    budget_exhausted: bool = False
    failed: bool = False
    error: str = ""
    evidence: list[Evidence] = field(default_factory=list)

    @property
    def terminal(self) -> bool:
        return bool(self.terminal_summary) or self.failed

    def to_dict(self) -> dict:
        return to_jsonable(self)

    def scratchpad(self) -> str:
        lines = []
        for s in self.steps:
            lines.append(f"Thought: {s.reasoning.thought}")
            if s.action is not None:
                lines.append(f"Action: {s.action.tool}[{s.action.input}]")
                lines.append(f"Observation: {s.action.observation or '(no results)'}")
        return "\n".join(lines) or "(nothing yet)"


class Searcher:
    def __init__(
        self,
        registry: ToolRegistry,
        templates: Optional[Templates] = None,
        step_budget: int = DEFAULT_STEP_BUDGET,
        observation_cap: int = DEFAULT_OBSERVATION_CAP,
        directive_attempts: int = DEFAULT_DIRECTIVE_ATTEMPTS,
        model: str = "default",
    ):
        self.registry = registry
        self.templates = templates or Templates()
        self.step_budget = step_budget
        self.observation_cap = observation_cap
        self.directive_attempts = directive_attempts
        self.model = model

    def reason_step(
        self,
        subtask: Subtask,
        episode: ReActEpisode,
        llm: Backend,
        task: Optional[TaskSpec] = None,
        context: str = "",
        clock: Optional[Clock] = None,
    ) -> tuple[ReasoningStep, Directive]:
        if episode.terminal or len(episode.steps) >= episode.step_budget:
            raise ValueError("episode is terminal or out of budget")
        language = task.target_language.value if task else "python"
        system = self.templates.render("searcher_system", language=language, tools=self.registry.describe())
        user = self.templates.render(
            "searcher_user",
            task_description=task.description if task else subtask.parent_task,
            subtask_description=subtask.description,
            context=context or "(none)",
            scratchpad=episode.scratchpad(),
        )
        messages = [Message("system", system), Message("user", user)]
        error = None
        for _ in range(self.directive_attempts):
            reply = llm.chat(ChatRequest(tuple(messages), model=self.model)).content
            try:
                thought, directive = parse_directive(reply)
                break
            except DirectiveParseError as exc:
                error = exc
                messages += [
                    Message("assistant", reply),
                    Message("user", "Reply with a Thought line followed by an Action or Final line."),
                ]
        else:
            raise DirectiveParseError(f"no directive after {self.directive_attempts} replies: {error}")
        wall = clock.now_ms() if clock else 0.0
        return ReasoningStep(len(episode.steps), Agent.SEARCHER, thought, wall), directive

    def run_episode(
        self,
        subtask: Subtask,
        llm: Backend,
        task: Optional[TaskSpec] = None,
        context: str = "",
        clock: Optional[Clock] = None,
        budget: Optional[int] = None,
        observer: Optional[Callable[[EpisodeStep], None]] = None,
    ) -> ReActEpisode:
        """Alternate reasoning and tool calls until Final or the step budget runs out.

        ``observer`` is called with each completed step, in order.
        """
        clock = clock or WallClock()
        notify = observer or (lambda step: None)
        episode = ReActEpisode(subtask.subtask_id, step_budget=budget or self.step_budget)
        last_observation = ""
        while len(episode.steps) < episode.step_budget:
            try:
                step, directive = self.reason_step(subtask, episode, llm, task, context, clock)
            except DirectiveParseError as exc:
                episode.failed = True
                episode.error = str(exc)
                return episode
            if isinstance(directive, Finish):
                episode.steps.append(EpisodeStep(step))
                notify(episode.steps[-1])
                episode.terminal_summary = directive.summary
                return episode
            try:
                record, relevance = act_step(directive, self.registry, clock, self.observation_cap, step.step_index)
            except UnknownToolError as exc:
                record, relevance = ActionRecord(step.step_index, directive.tool, directive.input, f"error: {exc}", 0.0, False), None
            episode.steps.append(EpisodeStep(step, record, score_action(record)))
            notify(episode.steps[-1])
            if record.ok and record.observation:
                last_observation = record.observation
                episode.evidence.append(
                    Evidence(len(episode.evidence) + 1, record.tool, record.observation, relevance or 0.0)
                )
        episode.budget_exhausted = True
        if last_observation:
            episode.terminal_summary = f"(step budget exhausted) last observation: {last_observation}"
        else:
            last_thought = episode.steps[-1].reasoning.thought if episode.steps else ""
            episode.terminal_summary = f"(step budget exhausted) {last_thought or 'no findings'}"
        return episode
