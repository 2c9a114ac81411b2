"""Shared domain types, run identifiers and plan validation."""

from __future__ import annotations

import dataclasses
import heapq
import itertools
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Iterable, Optional


class Language(str, Enum):
    PYTHON = "python"
    C = "c"
    CPP = "cpp"

    @property
    def line_comment(self) -> str:
        return "#" if self is Language.PYTHON else "//"

    @property
    def extension(self) -> str:
        return {"python": ".py", "c": ".c", "cpp": ".cpp"}[self.value]


class SubtaskStatus(str, Enum):
    PENDING = "pending"
    IN_PROGRESS = "in_progress"
    VALIDATED = "validated"
    FAILED = "failed"


class Modality(str, Enum):
    SEQUENTIAL = "sequential"
    PARALLEL = "parallel"
    HIERARCHICAL = "hierarchical"


class Agent(str, Enum):
    PLANNER = "planner"
    SEARCHER = "searcher"
    CODEGEN = "codegen"
    EXTRACTOR = "extractor"


class Severity(str, Enum):
    ERROR = "error"
    WARNING = "warning"
    NOTE = "note"

    @classmethod
    def parse(cls, value: Any) -> "Severity":
        """Map an analyzer level onto the enum; anything unrecognised is a warning."""
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            return cls.WARNING


class Verdict(str, Enum):
    PASS = "pass"
    FUNCTIONAL_FAIL = "functional_fail"
    SECURITY_FAIL = "security_fail"


class FailureKind(str, Enum):
    FUNCTIONAL_FAIL = "functional_fail"
    SECURITY_FAIL = "security_fail"
    EXTRACTION_FAIL = "extraction_fail"


def to_jsonable(obj: Any) -> Any:
    """Convert dataclasses, enums and tuples into plain JSON-compatible values."""
    if isinstance(obj, Enum):
        return obj.value
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if hasattr(obj, "item") and callable(obj.item):  # numpy scalars
        return obj.item()
    return obj


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    description: str
    target_language: Language
    inputs: tuple[str, ...] = ()
    outputs: tuple[str, ...] = ()
    cwe_hint: Optional[str] = None

    def __post_init__(self):
        if not self.task_id:
            raise ValueError("task_id must be non-empty")
        if not self.description or not self.description.strip():
            raise ValueError("task description must be non-empty")
        object.__setattr__(self, "target_language", Language(self.target_language))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))

    @classmethod
    def from_dict(cls, data: dict) -> "TaskSpec":
        return cls(
            task_id=data["task_id"],
            description=data["description"],
            target_language=Language(data["target_language"]),
            inputs=tuple(data.get("inputs", ())),
            outputs=tuple(data.get("outputs", ())),
            cwe_hint=data.get("cwe_hint"),
        )


@dataclass(frozen=True)
class Subtask:
    subtask_id: str
    parent_task: str
    index: int
    description: str
    depends_on: tuple[str, ...] = ()
    status: SubtaskStatus = SubtaskStatus.PENDING
    revisions: int = 0

    def __post_init__(self):
        object.__setattr__(self, "depends_on", tuple(self.depends_on))
        object.__setattr__(self, "status", SubtaskStatus(self.status))


@dataclass(frozen=True)
class DecompositionPlan:
    modality: Modality
    subtasks: tuple[Subtask, ...]
    relevance_threshold: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "modality", Modality(self.modality))
        object.__setattr__(self, "subtasks", tuple(self.subtasks))

    def get(self, subtask_id: str) -> Subtask:
        for s in self.subtasks:
            if s.subtask_id == subtask_id:
                return s
        raise KeyError(subtask_id)

    def ids(self) -> list[str]:
        return [s.subtask_id for s in self.subtasks]

    def with_subtask(self, subtask: Subtask) -> "DecompositionPlan":
        subtasks = tuple(subtask if s.subtask_id == subtask.subtask_id else s for s in self.subtasks)
        return dataclasses.replace(self, subtasks=subtasks)

    @classmethod
    def from_dict(cls, data: dict) -> "DecompositionPlan":
        return cls(
            modality=Modality(data["modality"]),
            subtasks=tuple(Subtask(**s) for s in data["subtasks"]),
            relevance_threshold=data.get("relevance_threshold", 0.2),
        )


@dataclass(frozen=True)
class ReasoningStep:
    step_index: int
    agent: Agent
    thought: str
    wall_ms: float = 0.0


@dataclass(frozen=True)
class ActionRecord:
    step_index: int
    tool: str
    input: str
    observation: str
    elapsed_ms: float
    ok: bool


@dataclass(frozen=True)
class Evidence:
    source_id: int
    tool: str
    payload: str
    relevance: float
    weight: float = 0.0


@dataclass(frozen=True)
class CodeSnippet:
    subtask_id: str
    attempt: int
    language: Language
    body: str
    fenced_origin: bool = True

    def __post_init__(self):
        if not self.body:
            raise ValueError("snippet body must be non-empty")
        if self.attempt < 1:
            raise ValueError("attempt numbers start at 1")
        object.__setattr__(self, "language", Language(self.language))


@dataclass(frozen=True)
class AnalyzerFinding:
    rule_id: str
    severity: Severity
    file: str
    line: int
    message: str

    def __post_init__(self):
        if not self.rule_id:
            raise ValueError("rule_id must be non-empty")
        if self.line < 1:
            raise ValueError("line numbers start at 1")
        object.__setattr__(self, "severity", Severity.parse(self.severity))


def verdict_for(compiled: bool, ran: bool, findings: Iterable[AnalyzerFinding]) -> Verdict:
    """Total verdict function: pass iff compiled, ran and analyzer-clean."""
    if not (compiled and ran):
        return Verdict.FUNCTIONAL_FAIL
    if any(True for _ in findings):
        return Verdict.SECURITY_FAIL
    return Verdict.PASS


@dataclass(frozen=True)
class ValidationReport:
    subject: str  # subtask id, or "final"
    compiled: bool
    ran: bool
    findings: tuple[AnalyzerFinding, ...] = ()
    verdict: Optional[Verdict] = None
    stderr_head: str = ""

    def __post_init__(self):
        object.__setattr__(self, "findings", tuple(self.findings))
        expected = verdict_for(self.compiled, self.ran, self.findings)
        if self.verdict is None:
            object.__setattr__(self, "verdict", expected)
        elif Verdict(self.verdict) is not expected:
            raise ValueError(f"verdict {self.verdict} inconsistent with stage results ({expected.value})")
        else:
            object.__setattr__(self, "verdict", Verdict(self.verdict))
        if self.ran and not self.compiled:
            raise ValueError("ran=True requires compiled=True")

    @property
    def passed(self) -> bool:
        return self.verdict is Verdict.PASS

    @classmethod
    def from_dict(cls, data: dict) -> "ValidationReport":
        return cls(
            subject=data["subject"],
            compiled=data["compiled"],
            ran=data["ran"],
            findings=tuple(AnalyzerFinding(**f) for f in data.get("findings", ())),
            verdict=data.get("verdict"),
            stderr_head=data.get("stderr_head", ""),
        )


@dataclass(frozen=True)
class FeedbackNote:
    subtask_id: str
    attempt: int
    failure_kind: FailureKind
    details: str
    cap: int = field(default=2000, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "failure_kind", FailureKind(self.failure_kind))
        if len(self.details) > self.cap:
            object.__setattr__(self, "details", self.details[: self.cap])


@dataclass(frozen=True)
class KnowledgeItem:
    text: str
    tags: tuple[str, ...] = ()
    source_subtask: str = ""
    created_at_step: int = 0

    def __post_init__(self):
        if not self.text:
            raise ValueError("knowledge text must be non-empty")
        object.__setattr__(self, "tags", tuple(self.tags))

    @property
    def key(self) -> tuple[frozenset, str]:
        return frozenset(self.tags), self.text


# Trace records. The payload is already JSON-compatible so a record
# serialises and deserialises without loss.
@dataclass(frozen=True)
class TraceRecord:
    run_id: str
    seq: int
    wall_ms: float
    kind: str
    agent: str
    payload: dict

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "seq": self.seq,
            "wall_ms": self.wall_ms,
            "kind": self.kind,
            "agent": self.agent,
            "payload": self.payload,
        }


@dataclass
class Trajectory:
    run_id: str
    events: list[TraceRecord] = field(default_factory=list)

    def of_kind(self, *kinds: str) -> list[TraceRecord]:
        return [e for e in self.events if e.kind in kinds]

    def phases(self) -> list[str]:
        """Visited phases in order, starting from the initial one."""
        transitions = self.of_kind("transition")
        if not transitions:
            return []
        out = [transitions[0].payload["from"]]
        for t in transitions:
            if t.payload["to"] != out[-1]:
                out.append(t.payload["to"])
        return out

    def reasoning_steps(self) -> list[ReasoningStep]:
        return [
            ReasoningStep(
                step_index=e.payload["step_index"],
                agent=Agent(e.agent),
                thought=e.payload["thought"],
                wall_ms=e.wall_ms,
            )
            for e in self.of_kind("reasoning")
        ]

    def action_records(self) -> list[ActionRecord]:
        return [
            ActionRecord(**{k: e.payload[k] for k in ("step_index", "tool", "input", "observation", "elapsed_ms", "ok")})
            for e in self.of_kind("action")
        ]


def check_alternation(trajectory: Trajectory) -> list[str]:
    """Return violations of the reason-before-act ordering of a trajectory."""
    problems = []
    seen: dict[int, int] = {}
    last_index = -1
    for e in trajectory.events:
        if e.kind == "reasoning":
            idx = e.payload["step_index"]
            if idx <= last_index:
                problems.append(f"reasoning step_index {idx} not increasing (seq {e.seq})")
            last_index = max(last_index, idx)
            seen[idx] = seen.get(idx, 0) + 1
        elif e.kind == "action":
            idx = e.payload["step_index"]
            if seen.get(idx, 0) != 1:
                problems.append(f"action at step {idx} has no unique earlier reasoning step (seq {e.seq})")
    walls = [e.wall_ms for e in trajectory.events]
    if any(b < a for a, b in zip(walls, walls[1:])):
        problems.append("events not ordered by wall time")
    return problems


_id_lock = threading.Lock()
_id_counter = itertools.count()
_last_stamp = ""


def new_run_id() -> str:
    """Unique, lexically sortable id: UTC timestamp (non-decreasing) plus a counter."""
    global _last_stamp
    with _id_lock:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
        if stamp < _last_stamp:
            stamp = _last_stamp
        _last_stamp = stamp
        return f"{stamp}-{next(_id_counter):08d}"


def find_cycle(graph: dict[str, Iterable[str]]) -> Optional[list[str]]:
    """Return one dependency cycle as a node path (first node repeated), or None."""
    white, grey, black = 0, 1, 2
    color = {n: white for n in graph}
    stack: list[str] = []

    def visit(node: str) -> Optional[list[str]]:
        color[node] = grey
        stack.append(node)
        for dep in graph.get(node, ()):
            if dep not in color:
                continue
            if color[dep] == grey:
                return stack[stack.index(dep):] + [dep]
            if color[dep] == white:
                found = visit(dep)
                if found:
                    return found
        stack.pop()
        color[node] = black
        return None

    for node in graph:
        if color[node] == white:
            found = visit(node)
            if found:
                return found
    return None


def validate_plan(plan: DecompositionPlan) -> list[str]:
    """Check plan invariants. Violations are returned as messages, never raised."""
    violations: list[str] = []
    subtasks = plan.subtasks
    if not subtasks:
        return ["plan has no subtasks"]
    if not 0.0 <= plan.relevance_threshold <= 1.0:
        violations.append(f"relevance threshold {plan.relevance_threshold} outside [0, 1]")

    ids = [s.subtask_id for s in subtasks]
    if len(set(ids)) != len(ids):
        violations.append("duplicate subtask ids")
    indices = [s.index for s in subtasks]
    if len(set(indices)) != len(indices):
        violations.append("duplicate subtask indices")
    if any(i < 0 for i in indices):
        violations.append("negative subtask index")
    for s in subtasks:
        if not s.description.strip():
            violations.append(f"subtask {s.subtask_id} has empty description")
        for dep in s.depends_on:
            if dep not in ids:
                violations.append(f"subtask {s.subtask_id} depends on unknown subtask {dep}")
            elif dep == s.subtask_id:
                violations.append(f"subtask {s.subtask_id} depends on itself")

    graph = {s.subtask_id: s.depends_on for s in subtasks}
    cycle = find_cycle(graph)
    if cycle:
        violations.append("dependency cycle: " + " -> ".join(cycle))

    if plan.modality is Modality.PARALLEL:
        if any(s.depends_on for s in subtasks):
            violations.append("parallel plan has dependency")
    elif plan.modality is Modality.SEQUENTIAL:
        ordered = sorted(subtasks, key=lambda s: s.index)
        for prev, cur in zip([None, *ordered], ordered):
            expected = () if prev is None else (prev.subtask_id,)
            if tuple(cur.depends_on) != expected:
                violations.append("sequential plan is not a linear dependency chain")
                break
    return violations


def topological_order(plan: DecompositionPlan) -> list[Subtask]:
    """Dependency order; ready subtasks are taken by ascending index."""
    by_id = {s.subtask_id: s for s in plan.subtasks}
    remaining = {s.subtask_id: {d for d in s.depends_on if d in by_id} for s in plan.subtasks}
    heap = [(s.index, s.subtask_id) for s in plan.subtasks if not remaining[s.subtask_id]]
    heapq.heapify(heap)
    out = []
    while heap:
        _, sid = heapq.heappop(heap)
        out.append(by_id[sid])
        for other, deps in remaining.items():
            if sid in deps:
                deps.discard(sid)
                if not deps and by_id[other] not in out:
                    heapq.heappush(heap, (by_id[other].index, other))
    if len(out) != len(by_id):
        raise ValueError("plan dependency graph has a cycle")
    return out
