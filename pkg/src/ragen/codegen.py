"""Generation prompt assembly and final-program aggregation."""

from __future__ import annotations

from typing import Optional, Sequence

from .backends.llm import Backend, ChatRequest, Message
from .errors import LanguageMismatchError, MissingSnippetError, PreconditionError
from .model import CodeSnippet, DecompositionPlan, Evidence, FeedbackNote, Language, Modality, Subtask, TaskSpec, topological_order
from .templates import Templates

DEFAULT_PROMPT_CAP = 12_000

CWE_NAMES = {
    "022": "path traversal",
    "078": "OS command injection",
    "089": "SQL injection",
    "125": "out-of-bounds read",
    "190": "integer overflow",
    "416": "use after free",
    "476": "NULL pointer dereference",
    "787": "out-of-bounds write",
}


def cwe_number(hint: str) -> str:
    digits = "".join(ch for ch in hint if ch.isdigit())
    return digits.zfill(3) if digits else hint


def security_directive(cwe_hint: Optional[str]) -> str:
    if not cwe_hint:
        return "Follow secure coding practice: validate inputs and handle every error."
    num = cwe_number(cwe_hint)
    name = CWE_NAMES.get(num)
    label = f"CWE-{num}" + (f" ({name})" if name else "")
    return f"Security requirement: avoid the {label} weakness class entirely."


def order_evidence(evidence: Sequence[Evidence]) -> list[Evidence]:
    return sorted(evidence, key=lambda e: (-e.weight, e.source_id))


def provenance_comment(language: Language, subtask_id: str, attempt: int) -> str:
    return f"{Language(language).line_comment} subtask:{subtask_id} attempt:{attempt}"


class CodeGen:
    def __init__(self, templates: Optional[Templates] = None, prompt_cap: int = DEFAULT_PROMPT_CAP, model: str = "default"):
        self.templates = templates or Templates()
        self.prompt_cap = prompt_cap
        self.model = model

    def build_prompt(
        self,
        task: TaskSpec,
        subtask: Subtask,
        summary: str,
        evidence: Sequence[Evidence],
        feedback: Optional[FeedbackNote] = None,
    ) -> str:
        lang = task.target_language

        def assemble(ev: Sequence[Evidence], summary_text: str, feedback_text: str) -> str:
            ev_text = "\n\n".join(
                f"[source {e.source_id}, {e.tool}, weight {e.weight:.3f}]\n{e.payload}" for e in ev
            ) or "(none)"
            return self.templates.render(
                f"codegen_{lang.value}",
                language=lang.value,
                task_description=task.description,
                subtask_description=subtask.description,
                summary=summary_text or "(none)",
                evidence=ev_text,
                security_directive=security_directive(task.cwe_hint),
                feedback=feedback_text,
            )

        feedback_text = ""
        if feedback is not None:
            feedback_text = (
                f"The previous attempt {feedback.attempt} failed ({feedback.failure_kind.value}). Fix this:\n"
                f"{feedback.details}"
            )
        ordered = order_evidence(evidence)
        prompt = assemble(ordered, summary, feedback_text)
        while len(prompt) > self.prompt_cap and ordered:
            ordered = ordered[:-1]
            prompt = assemble(ordered, summary, feedback_text)
        if len(prompt) > self.prompt_cap:
            overflow = len(prompt) - self.prompt_cap
            summary = summary[: max(0, len(summary) - overflow)]
            prompt = assemble(ordered, summary, feedback_text)
        return prompt[: self.prompt_cap]

    def generate_snippet(
        self,
        subtask: Subtask,
        episode,
        evidence: Sequence[Evidence],
        feedback: Optional[FeedbackNote],
        llm: Backend,
        task: TaskSpec,
        attempt: int = 1,
    ) -> tuple[str, int]:
        """Ask the model for code. Returns the raw reply verbatim and the attempt number."""
        if not episode.terminal:
            raise PreconditionError("episode must be terminal before generation")
        if evidence and abs(sum(e.weight for e in evidence) - 1.0) > 1e-6:
            raise PreconditionError("evidence must be fused before generation")
        prompt = self.build_prompt(task, subtask, episode.terminal_summary, evidence, feedback)
        reply = llm.chat(ChatRequest((Message("user", prompt),), model=self.model))
        return reply.content, attempt


def aggregate(
    snippets: Sequence[CodeSnippet], plan: DecompositionPlan, language: Language, attempt: int = 1
) -> CodeSnippet:
    """Concatenate validated snippets into one program with provenance comments."""
    language = Language(language)
    by_id: dict[str, CodeSnippet] = {}
    for s in snippets:
        if Language(s.language) is not language:
            raise LanguageMismatchError(f"snippet for {s.subtask_id} is {s.language.value}, expected {language.value}")
        by_id[s.subtask_id] = s
    missing = [sid for sid in plan.ids() if sid not in by_id]
    if missing:
        raise MissingSnippetError(f"no validated snippet for {', '.join(missing)}")

    if plan.modality is Modality.PARALLEL:
        order = sorted(plan.subtasks, key=lambda s: s.index)
    else:
        order = topological_order(plan)
    parts = []
    for sub in order:
        snip = by_id[sub.subtask_id]
        body = snip.body if snip.body.endswith("\n") else snip.body + "\n"
        parts.append(f"{provenance_comment(language, snip.subtask_id, snip.attempt)}\n{body}")
    return CodeSnippet("final", attempt, language, "\n".join(parts), fenced_origin=False)
