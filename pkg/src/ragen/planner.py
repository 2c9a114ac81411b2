"""Task decomposition and feedback-driven revision."""

from __future__ import annotations

import dataclasses
import logging
from typing import Optional, Sequence

from .backends.llm import Backend, ChatRequest, Message
from .errors import MalformedPlanError, PreconditionError
from .fences import first_json_block
from .model import (
    DecompositionPlan,
    FeedbackNote,
    KnowledgeItem,
    Modality,
    Subtask,
    SubtaskStatus,
    TaskSpec,
    validate_plan,
)
from .templates import Templates

logger = logging.getLogger(__name__)

__all__ = ["FeedbackNote", "Planner", "decompose", "revise", "select_modality", "format_lessons"]

DEFAULT_RELEVANCE_THRESHOLD = 0.2
DEFAULT_MAX_PARSE_RETRIES = 2
MAX_LESSONS = 10

_REASK = "Your reply could not be parsed ({error}). Reply again with only the fenced json block."


def select_modality(
    task: TaskSpec, subtask_count: int, *, has_dependencies: bool = False, all_independent: bool = False
) -> Modality:
    """Rule-based modality choice.

    One subtask is sequential; declared dependencies make the plan
    hierarchical; all-independent subtasks run in parallel; anything else
    defaults to a sequential chain.
    """
    if subtask_count < 1:
        raise PreconditionError("subtask_count must be at least 1")
    if subtask_count == 1:
        return Modality.SEQUENTIAL
    if has_dependencies:
        return Modality.HIERARCHICAL
    if all_independent:
        return Modality.PARALLEL
    return Modality.SEQUENTIAL


def format_lessons(knowledge: Sequence[KnowledgeItem], limit: int = MAX_LESSONS) -> str:
    items = list(knowledge)[-limit:] if limit > 0 else []
    return "\n".join(f"- {k.text}" for k in items) or "- none yet"


def _format_list(items: Sequence[str]) -> str:
    return "\n".join(f"- {i}" for i in items) or "- none given"


def _ask_structured(llm: Backend, prompt: str, parse, max_parse_retries: int, model: str):
    """Ask for a structured reply, re-asking up to ``max_parse_retries`` times."""
    messages = [Message("user", prompt)]
    last_error = "no reply"
    for _ in range(max_parse_retries + 1):
        reply = llm.chat(ChatRequest(tuple(messages), model=model)).content
        try:
            return parse(reply)
        except MalformedPlanError as exc:
            last_error = str(exc)
            logger.info("unparseable planner reply: %s", exc)
            messages += [Message("assistant", reply), Message("user", _REASK.format(error=exc))]
    raise MalformedPlanError(f"no parseable plan after {max_parse_retries + 1} replies: {last_error}")


def _parse_subtask_rows(reply: str, require_relevance: bool) -> list[dict]:
    data = first_json_block(reply)
    if not isinstance(data, dict) or not isinstance(data.get("subtasks"), list) or not data["subtasks"]:
        raise MalformedPlanError("expected a json object with a non-empty subtasks list")
    rows = []
    for pos, row in enumerate(data["subtasks"], 1):
        if not isinstance(row, dict):
            raise MalformedPlanError(f"subtask {pos} is not an object")
        desc = row.get("description")
        if not isinstance(desc, str) or not desc.strip():
            raise MalformedPlanError(f"subtask {pos} has no description")
        try:
            index = int(row.get("index", pos))
            relevance = float(row.get("relevance", 1.0))
            depends = [int(d) for d in row.get("depends_on", []) or []]
        except (TypeError, ValueError) as exc:
            raise MalformedPlanError(f"subtask {pos}: {exc}") from exc
        if require_relevance and not 0.0 <= relevance <= 1.0:
            relevance = min(1.0, max(0.0, relevance))
        rows.append(
            {
                "index": index,
                "description": desc.strip(),
                "relevance": relevance,
                "depends_on": depends,
                "independent": bool(row.get("independent", False)),
            }
        )
    if len({r["index"] for r in rows}) != len(rows):
        raise MalformedPlanError("duplicate subtask indices")
    known = {r["index"] for r in rows}
    for r in rows:
        if any(d not in known or d == r["index"] for d in r["depends_on"]):
            raise MalformedPlanError(f"subtask {r['index']} depends on an unknown index")
    return rows


def _build_plan(task: TaskSpec, rows: list[dict], threshold: float) -> DecompositionPlan:
    rows = sorted(rows, key=lambda r: r["index"])
    kept = [r for r in rows if r["relevance"] >= threshold]
    if not kept:
        kept = [max(rows, key=lambda r: r["relevance"])]
    kept_idx = {r["index"] for r in kept}

    has_deps = any(d in kept_idx for r in kept for d in r["depends_on"])
    all_independent = all(r["independent"] for r in kept)
    modality = select_modality(task, len(kept), has_dependencies=has_deps, all_independent=all_independent)

    id_of = {r["index"]: f"s{pos}" for pos, r in enumerate(kept, 1)}
    subtasks = []
    for pos, r in enumerate(kept):
        if modality is Modality.SEQUENTIAL:
            deps = (id_of[kept[pos - 1]["index"]],) if pos else ()
        elif modality is Modality.PARALLEL:
            deps = ()
        else:
            deps = tuple(id_of[d] for d in r["depends_on"] if d in id_of)
        subtasks.append(Subtask(id_of[r["index"]], task.task_id, pos, r["description"], deps))
    plan = DecompositionPlan(modality, tuple(subtasks), threshold)
    problems = validate_plan(plan)
    if problems:
        raise MalformedPlanError("; ".join(problems))
    return plan


class Planner:
    def __init__(
        self,
        templates: Optional[Templates] = None,
        relevance_threshold: float = DEFAULT_RELEVANCE_THRESHOLD,
        max_parse_retries: int = DEFAULT_MAX_PARSE_RETRIES,
        model: str = "default",
    ):
        self.templates = templates or Templates()
        self.relevance_threshold = relevance_threshold
        self.max_parse_retries = max_parse_retries
        self.model = model

    def decompose(
        self,
        task: TaskSpec,
        knowledge: Sequence[KnowledgeItem],
        llm: Backend,
        feedback: Optional[FeedbackNote] = None,
    ) -> DecompositionPlan:
        prompt = self.templates.render(
            "planner_decompose",
            language=task.target_language.value,
            task_description=task.description,
            inputs=_format_list(task.inputs),
            outputs=_format_list(task.outputs),
            security=f"the program must not contain CWE-{task.cwe_hint.removeprefix('CWE-')} weaknesses"
            if task.cwe_hint else "follow secure coding practice",
            lessons=format_lessons(knowledge),
            feedback=feedback.details if feedback else "none",
        )

        def parse(reply: str) -> DecompositionPlan:
            rows = _parse_subtask_rows(reply, require_relevance=True)
            return _build_plan(task, rows, self.relevance_threshold)

        return _ask_structured(llm, prompt, parse, self.max_parse_retries, self.model)

    def revise(
        self,
        plan: DecompositionPlan,
        feedback: FeedbackNote,
        llm: Backend,
        task: Optional[TaskSpec] = None,
        knowledge: Sequence[KnowledgeItem] = (),
    ) -> DecompositionPlan:
        """Rewrite (or split) the failed subtask; every other subtask keeps its id."""
        try:
            target = plan.get(feedback.subtask_id)
        except KeyError:
            raise PreconditionError(f"feedback for unknown subtask {feedback.subtask_id!r}") from None

        prompt = self.templates.render(
            "planner_revise",
            task_description=task.description if task else target.parent_task,
            subtask_id=target.subtask_id,
            subtask_description=target.description,
            failure_kind=feedback.failure_kind.value,
            feedback=feedback.details or "no details",
            lessons=format_lessons(knowledge),
        )

        def parse(reply: str) -> list[str]:
            data = first_json_block(reply)
            rows = data.get("subtasks") if isinstance(data, dict) else None
            if not isinstance(rows, list) or not rows:
                raise MalformedPlanError("expected a json object with a non-empty subtasks list")
            descs = []
            for row in rows:
                desc = row.get("description") if isinstance(row, dict) else None
                if not isinstance(desc, str) or not desc.strip():
                    raise MalformedPlanError("revised subtask has no description")
                descs.append(desc.strip())
            return descs

        descriptions = _ask_structured(llm, prompt, parse, self.max_parse_retries, self.model)
        return split_subtask(plan, target.subtask_id, descriptions)


def split_subtask(plan: DecompositionPlan, subtask_id: str, descriptions: Sequence[str]) -> DecompositionPlan:
    """Replace one subtask by a rewrite (one description) or a chain of children."""
    target = plan.get(subtask_id)
    if len(descriptions) == 1:
        revised = dataclasses.replace(
            target, description=descriptions[0], revisions=target.revisions + 1, status=SubtaskStatus.PENDING
        )
        return plan.with_subtask(revised)

    children = []
    prev_deps = target.depends_on
    for k, desc in enumerate(descriptions, 1):
        child = Subtask(
            f"{subtask_id}.{k}", target.parent_task, 0, desc, prev_deps, SubtaskStatus.PENDING, target.revisions + 1
        )
        children.append(child)
        prev_deps = (child.subtask_id,)
    last = children[-1].subtask_id

    subtasks = []
    for s in plan.subtasks:
        if s.subtask_id == subtask_id:
            subtasks.extend(children)
        else:
            deps = tuple(last if d == subtask_id else d for d in s.depends_on)
            subtasks.append(dataclasses.replace(s, depends_on=deps))
    subtasks = [dataclasses.replace(s, index=i) for i, s in enumerate(subtasks)]

    modality = plan.modality
    if modality is Modality.PARALLEL:
        modality = Modality.HIERARCHICAL
    revised = DecompositionPlan(modality, tuple(subtasks), plan.relevance_threshold)
    problems = validate_plan(revised)
    if problems:
        raise MalformedPlanError("; ".join(problems))
    return revised


def decompose(task, knowledge, llm, **kwargs) -> DecompositionPlan:
    return Planner(**kwargs).decompose(task, knowledge, llm)


def revise(plan, feedback, llm, **kwargs) -> DecompositionPlan:
    return Planner(**kwargs).revise(plan, feedback, llm)
