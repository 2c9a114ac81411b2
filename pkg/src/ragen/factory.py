"""Build agents and backends from a run configuration."""

from __future__ import annotations

import secrets
from pathlib import Path
from typing import Optional

from .backends.analyzer import CommandAnalyzer, NullAnalyzer, PatternAnalyzer, StubAnalyzer
from .backends.llm import LiveBackend, RecordingBackend, ReplayBackend, ReplayStore, ScriptBook
from .backends.sandbox import SandboxRunner
from .backends.search import FixtureSearch, HttpSearch
from .codegen import CodeGen
from .config import RunConfig
from .errors import ConfigError
from .extractor import KnowledgeStore
from .model import Agent, TaskSpec, new_run_id
from .orchestrator import Agents
from .planner import Planner
from .searcher import SearchTool, Searcher, ToolDescriptor, ToolRegistry
from .templates import Templates

LLM_AGENTS = (Agent.PLANNER.value, Agent.SEARCHER.value, Agent.CODEGEN.value)

_TOOL_DESCRIPTIONS = {
    "fixture_search": "web search over reference material; input is a short query",
    "http_search": "web search; input is a short query",
}


def resolve_seed(config: RunConfig) -> RunConfig:
    """Fill in a generated seed so the snapshot records what was used."""
    if config.seed is not None:
        return config
    return config.with_overrides(seed=secrets.randbelow(2**31))


def run_id_for(config: RunConfig, task: TaskSpec) -> str:
    """Offline backends get a reproducible id so repeated runs are byte-identical."""
    if config.backend in ("replay", "scripted"):
        return f"{task.task_id}-seed{config.seed or 0}"
    return new_run_id()


def build_llms(config: RunConfig, task: TaskSpec, script: Optional[ScriptBook] = None) -> dict:
    if config.backend == "scripted":
        book = script or ScriptBook.load(config.script)
        return book.backends(task.task_id, task.target_language.value, LLM_AGENTS)
    if config.backend == "replay":
        backend = ReplayBackend(ReplayStore(config.replay_dir), strict=True)
    else:
        backend = LiveBackend(
            config.model,
            base_url=config.base_url,
            api_key_env=config.api_key_env,
            max_retries=config.http_retries,
            max_in_flight=config.max_in_flight,
        )
        if config.backend == "record":
            backend = RecordingBackend(backend, ReplayStore(config.replay_dir))
    return {"default": backend}


def build_registry(config: RunConfig) -> ToolRegistry:
    registry = ToolRegistry()
    for entry in config.tools:
        kind = entry.get("kind", "fixture_search")
        if kind == "fixture_search":
            adapter = FixtureSearch.from_file(entry.get("corpus"))
        else:
            if not entry.get("endpoint"):
                raise ConfigError(f"tool {entry['name']}: http_search needs an endpoint")
            adapter = HttpSearch(entry["endpoint"])
        descriptor = ToolDescriptor(
            entry["name"],
            entry.get("description", _TOOL_DESCRIPTIONS[kind]),
            int(entry.get("timeout_ms", 10_000)),
            bool(entry.get("enabled", True)),
        )
        registry.register(descriptor, SearchTool(adapter, int(entry.get("k", 3))))
    return registry


def build_analyzer(config: RunConfig):
    spec = config.analyzer
    kind = spec.get("kind", "pattern")
    if kind == "pattern":
        return PatternAnalyzer()
    if kind == "stub":
        return StubAnalyzer.from_sarif_files(spec.get("sarif", []))
    if kind == "command":
        return CommandAnalyzer(spec["command"], spec.get("query_pack", ""), float(spec.get("timeout_s", 600)))
    return NullAnalyzer()


def build_sandbox(config: RunConfig) -> SandboxRunner:
    opts = dict(config.sandbox)
    for key in ("c_flags", "cpp_flags", "link_flags"):
        if key in opts:
            opts[key] = tuple(opts[key])
    try:
        return SandboxRunner(timeout_ms=config.run_timeout_ms, **opts)
    except TypeError as exc:
        raise ConfigError(f"bad sandbox options: {exc}") from exc


def build_agents(config: RunConfig, task: TaskSpec, script: Optional[ScriptBook] = None) -> Agents:
    templates = Templates(Path(config.template_dir) if config.template_dir else None)
    return Agents(
        planner=Planner(templates, config.relevance_threshold, config.max_parse_retries, config.model),
        searcher=Searcher(
            build_registry(config), templates, config.step_budget, config.observation_cap, model=config.model
        ),
        codegen=CodeGen(templates, config.prompt_cap, config.model),
        sandbox=build_sandbox(config),
        analyzer=build_analyzer(config),
        llm=build_llms(config, task, script),
        knowledge=KnowledgeStore(),
    )
