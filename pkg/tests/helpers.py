"""Builders for scripted model replies used across the test suite."""

from __future__ import annotations

import json

from ragen.backends.analyzer import NullAnalyzer
from ragen.backends.llm import ScriptedBackend
from ragen.backends.sandbox import SandboxRunner
from ragen.backends.search import FixtureSearch
from ragen.codegen import CodeGen
from ragen.model import TaskSpec
from ragen.orchestrator import Agents
from ragen.planner import Planner
from ragen.searcher import SearchTool, Searcher, ToolDescriptor, ToolRegistry


def plan_reply(*descriptions, relevance=0.9, depends=None, independent=False) -> str:
    rows = []
    for i, desc in enumerate(descriptions, 1):
        rows.append(
            {
                "index": i,
                "description": desc,
                "relevance": relevance if not isinstance(relevance, (list, tuple)) else relevance[i - 1],
                "depends_on": (depends or {}).get(i, []),
                "independent": independent,
            }
        )
    return "Here is the plan.\n```json\n" + json.dumps({"subtasks": rows}) + "\n```\n"


def revise_reply(*descriptions) -> str:
    return "```json\n" + json.dumps({"subtasks": [{"description": d} for d in descriptions]}) + "\n```"


def act(tool: str, query: str, thought: str = "need references") -> str:
    return f"Thought: {thought}\nAction: {tool}[{query}]"


def final(summary: str, thought: str = "enough") -> str:
    return f"Thought: {thought}\nFinal: {summary}"


def code(lang: str, body: str) -> str:
    return f"Generated code:\n```{lang}\n{body}\n```\n"


def registry(corpus=None) -> ToolRegistry:
    reg = ToolRegistry()
    search = FixtureSearch(corpus) if corpus is not None else FixtureSearch.from_file()
    reg.register(ToolDescriptor("search", "web search"), SearchTool(search))
    return reg


def make_agents(planner=(), searcher=(), codegen=(), analyzer=None, sandbox=None) -> Agents:
    return Agents(
        planner=Planner(),
        searcher=Searcher(registry()),
        codegen=CodeGen(),
        sandbox=sandbox or SandboxRunner(timeout_ms=5000),
        analyzer=analyzer or NullAnalyzer(),
        llm={
            "planner": ScriptedBackend(planner),
            "searcher": ScriptedBackend(searcher),
            "codegen": ScriptedBackend(codegen),
        },
    )


HELLO = TaskSpec("hello", "print a greeting", "python")
