"""Code extraction, validation and lesson distillation."""

from __future__ import annotations

import dataclasses
import threading
from typing import Iterable, Optional, Sequence

from .backends.analyzer import Analyzer
from .backends.sandbox import SandboxRunner
from .fences import find_blocks, tag_language
from .model import CodeSnippet, KnowledgeItem, Language, ValidationReport, Verdict


def extract_code(
    raw: str, expected_language: Language, subtask_id: str = "", attempt: int = 1
) -> list[CodeSnippet]:
    """Fenced code blocks of ``raw`` that can hold ``expected_language`` code.

    Blocks tagged with a different language (or a non-language tag such as
    ``json``) are skipped; untagged blocks are kept.
    """
    expected_language = Language(expected_language)
    out = []
    for tag, body in find_blocks(raw):
        if tag and tag_language(tag) is not expected_language:
            continue
        if not body:
            continue
        out.append(CodeSnippet(subtask_id, attempt, expected_language, body, fenced_origin=True))
    return out


def with_context(snippet: CodeSnippet, context: Sequence[CodeSnippet]) -> tuple[CodeSnippet, int]:
    """Prepend already-validated snippets; returns the program and the line offset of ``snippet``."""
    if not context:
        return snippet, 0
    prefix = "".join(c.body if c.body.endswith("\n") else c.body + "\n" for c in context)
    program = dataclasses.replace(snippet, body=prefix + snippet.body)
    return program, prefix.count("\n")


def validate_snippet(
    snippet: CodeSnippet,
    sandbox: SandboxRunner,
    analyzer: Analyzer,
    timeout_ms: Optional[int] = None,
    query_pack: Optional[str] = None,
    context: Sequence[CodeSnippet] = (),
) -> ValidationReport:
    """Compile, run, then analyze. A failed stage skips the later ones.

    ``context`` snippets (validated dependencies) run ahead of ``snippet`` so
    it can use what they define. Finding lines inside ``snippet`` are reported
    relative to it; findings in the context keep their program line.
    """
    program, offset = with_context(snippet, context)
    result = sandbox.run(program, timeout_ms)
    if not (result.compiled and result.ran):
        return ValidationReport(snippet.subtask_id, result.compiled, result.ran, (), stderr_head=result.stderr_head)
    filename = f"main{snippet.language.extension}"
    findings = analyzer.analyze({filename: program.body}, snippet.language, query_pack)
    if offset:
        findings = [dataclasses.replace(f, line=f.line - offset) if f.line > offset else f for f in findings]
    return ValidationReport(snippet.subtask_id, True, True, tuple(findings), stderr_head=result.stderr_head)


def _error_line(stderr: str) -> str:
    lines = [ln.strip() for ln in stderr.splitlines() if ln.strip()]
    for ln in lines:
        if "error" in ln.lower() or "timeout" in ln.lower():
            return ln
    return lines[0] if lines else "program failed without diagnostics"


def extract_knowledge(report: ValidationReport, snippet: CodeSnippet, step: int = 0) -> list[KnowledgeItem]:
    lang = snippet.language.value
    sid = snippet.subtask_id
    if report.verdict is Verdict.PASS:
        return [KnowledgeItem(f"pattern succeeded for {sid}", (lang, "pass"), sid, step)]
    if report.verdict is Verdict.SECURITY_FAIL:
        items = []
        seen = set()
        for f in report.findings:
            if f.rule_id in seen:
                continue
            seen.add(f.rule_id)
            items.append(KnowledgeItem(f"avoid {f.rule_id}: {f.message}", (lang, f.rule_id), sid, step))
        return items
    return [KnowledgeItem(f"{sid} failed: {_error_line(report.stderr_head)}", (lang, "functional"), sid, step)]


class KnowledgeStore:
    """Insertion-ordered lessons, deduplicated by (tag set, text)."""

    def __init__(self, items: Iterable[KnowledgeItem] = ()):
        self._items: list[KnowledgeItem] = []
        self._keys: set = set()
        self._lock = threading.Lock()
        self.extend(items)

    def add(self, item: KnowledgeItem) -> bool:
        with self._lock:
            if item.key in self._keys:
                return False
            self._keys.add(item.key)
            self._items.append(item)
            return True

    def extend(self, items: Iterable[KnowledgeItem]) -> list[KnowledgeItem]:
        return [i for i in items if self.add(i)]

    def recent(self, n: int = 10) -> list[KnowledgeItem]:
        return list(self._items[-n:]) if n > 0 else []

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(list(self._items))
