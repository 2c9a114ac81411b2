"""Adapters for everything outside the process: LLMs, search, analyzers, sandbox."""

from .analyzer import (
    Analyzer,
    CommandAnalyzer,
    NullAnalyzer,
    PatternAnalyzer,
    StubAnalyzer,
    analyze,
    findings_to_sarif,
    parse_sarif,
)
from .llm import (
    ChatRequest,
    ChatResponse,
    LiveBackend,
    Message,
    RecordingBackend,
    ReplayBackend,
    ReplayStore,
    ScriptBook,
    ScriptedBackend,
    chat,
    record_session,
    request_digest,
)
from .sandbox import SandboxResult, SandboxRunner, run_sandboxed
from .search import FixtureSearch, HttpSearch, SearchHit, render_hits, search

__all__ = [
    "Analyzer", "CommandAnalyzer", "NullAnalyzer", "PatternAnalyzer", "StubAnalyzer",
    "analyze", "findings_to_sarif", "parse_sarif",
    "ChatRequest", "ChatResponse", "LiveBackend", "Message", "RecordingBackend",
    "ReplayBackend", "ReplayStore", "ScriptBook", "ScriptedBackend", "chat",
    "record_session", "request_digest",
    "SandboxResult", "SandboxRunner", "run_sandboxed",
    "FixtureSearch", "HttpSearch", "SearchHit", "render_hits", "search",
]
