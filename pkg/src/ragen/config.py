"""Run configuration: loading, validation and the resolved snapshot."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .backends.llm import DEFAULT_API_KEY_ENV, DEFAULT_BASE_URL
from .errors import ConfigError

BACKENDS = ("live", "replay", "scripted", "record")
DELAY_MODES = ("simulated", "real")
ANALYZER_KINDS = ("pattern", "stub", "command", "none")
TOOL_KINDS = ("fixture_search", "http_search")

# keys holding file paths, resolved against the config file's directory
_PATH_KEYS = ("template_dir", "replay_dir", "script")


def _default_tools() -> list[dict]:
    return [{"name": "search", "kind": "fixture_search"}]


@dataclass
class RunConfig:
    backend: str = "replay"
    model: str = "gpt-3.5-turbo"
    base_url: str = DEFAULT_BASE_URL
    api_key_env: str = DEFAULT_API_KEY_ENV
    seed: Optional[int] = None
    step_budget: int = 6
    max_retries: int = 2
    max_restarts: int = 1
    delta_max_ms: float = 5000.0
    delay_mode: str = "simulated"
    deadline_ms: Optional[float] = None
    tools: list = field(default_factory=_default_tools)
    template_dir: Optional[str] = None
    observation_cap: int = 4000
    prompt_cap: int = 12_000
    feedback_cap: int = 2000
    relevance_threshold: float = 0.2
    max_parse_retries: int = 2
    replay_dir: Optional[str] = None
    script: Optional[str] = None
    analyzer: dict = field(default_factory=lambda: {"kind": "pattern"})
    sandbox: dict = field(default_factory=dict)
    run_timeout_ms: int = 10_000
    max_workers: int = 1
    max_in_flight: int = 4
    http_retries: int = 2

    def validate(self) -> "RunConfig":
        def bad(msg):
            raise ConfigError(msg)

        if self.backend not in BACKENDS:
            bad(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.delay_mode not in DELAY_MODES:
            bad(f"delay_mode must be one of {DELAY_MODES}")
        for name in ("step_budget", "observation_cap", "prompt_cap", "feedback_cap", "run_timeout_ms", "max_workers", "max_in_flight"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                bad(f"{name} must be a positive integer")
        for name in ("max_retries", "max_restarts", "max_parse_retries", "http_retries"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                bad(f"{name} must be a non-negative integer")
        if not (isinstance(self.delta_max_ms, (int, float)) and self.delta_max_ms > 0):
            bad("delta_max_ms must be positive")
        if not 0.0 <= float(self.relevance_threshold) <= 1.0:
            bad("relevance_threshold must lie in [0, 1]")
        if self.seed is not None and (not isinstance(self.seed, int) or self.seed < 0):
            bad("seed must be a non-negative integer")
        if self.backend in ("replay", "record") and not self.replay_dir:
            bad(f"backend {self.backend} needs replay_dir")
        if self.backend == "scripted" and not self.script:
            bad("backend scripted needs a script file")
        kind = self.analyzer.get("kind", "pattern") if isinstance(self.analyzer, dict) else None
        if kind not in ANALYZER_KINDS:
            bad(f"analyzer.kind must be one of {ANALYZER_KINDS}")
        if kind == "command" and not self.analyzer.get("command"):
            bad("analyzer kind command needs a command template")
        names = set()
        for tool in self.tools:
            if not isinstance(tool, dict) or "name" not in tool:
                bad("each tool entry needs a name")
            if tool.get("kind", "fixture_search") not in TOOL_KINDS:
                bad(f"tool {tool['name']}: kind must be one of {TOOL_KINDS}")
            if tool["name"] in names:
                bad(f"duplicate tool name {tool['name']}")
            names.add(tool["name"])
        return self

    @classmethod
    def from_dict(cls, data: dict, base_dir: Optional[Path] = None) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        data = dict(data)
        if base_dir is not None:
            for key in _PATH_KEYS:
                if data.get(key):
                    data[key] = str((base_dir / data[key]).resolve())
            if isinstance(data.get("analyzer"), dict) and data["analyzer"].get("sarif"):
                data["analyzer"] = dict(data["analyzer"])
                data["analyzer"]["sarif"] = [str((base_dir / p).resolve()) for p in data["analyzer"]["sarif"]]
            tools = []
            for tool in data.get("tools", _default_tools()):
                tool = dict(tool)
                if tool.get("corpus"):
                    tool["corpus"] = str((base_dir / tool["corpus"]).resolve())
                tools.append(tool)
            data["tools"] = tools
        return cls(**data).validate()

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data, base_dir=path.parent.resolve())

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        changes = {k: v for k, v in overrides.items() if v is not None}
        return dataclasses.replace(self, **changes).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def write_snapshot(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
