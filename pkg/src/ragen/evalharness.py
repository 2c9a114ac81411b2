"""CWE scenario manifests, batch evaluation, metrics and report rendering."""

from __future__ import annotations

import dataclasses
import fnmatch
import json
import logging
import math
import os
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .backends.llm import Backend, ChatRequest, Message
from .config import RunConfig
from .errors import (
    DuplicateScenarioError,
    EmptyBatchError,
    ManifestParseError,
    PipelineFailedError,
    RagenError,
    RubricParseError,
)
from .factory import build_agents, build_analyzer, run_id_for
from .fences import first_json_block
from .model import AnalyzerFinding, CodeSnippet, Language, TaskSpec
from .orchestrator import PipelineSettings, run_pipeline
from .templates import Templates
from .trace import TraceLog

logger = logging.getLogger(__name__)

MANIFEST_FIELDS = ("cwe", "scenario", "split", "language", "prompt", "analyzer_query")


class Split(str, Enum):
    TEST = "test"
    VAL = "val"


_SUFFIX = {"py": Language.PYTHON, "c": Language.C}


@dataclass(frozen=True)
class ScenarioEntry:
    cwe: str
    scenario: str
    split: Split
    language: Language
    prompt: str
    analyzer_query: str

    def __post_init__(self):
        object.__setattr__(self, "split", Split(self.split))
        object.__setattr__(self, "language", Language(self.language))
        suffix = self.scenario.rsplit("-", 1)[-1]
        if _SUFFIX.get(suffix) is not self.language:
            raise ValueError(f"scenario {self.scenario} does not match language {self.language.value}")
        if not self.prompt:
            raise ValueError("scenario prompt must be non-empty")

    @property
    def key(self) -> tuple[str, str]:
        return self.cwe, self.scenario

    @property
    def task_id(self) -> str:
        return f"cwe-{self.cwe}-{self.scenario}"

    def task(self) -> TaskSpec:
        return TaskSpec(self.task_id, self.prompt, self.language, cwe_hint=f"CWE-{self.cwe}")

    def matches(self, rule_id: str) -> bool:
        """True if a finding's rule id falls in this scenario's weakness class."""
        patterns = [p.strip().lower() for p in self.analyzer_query.split(",") if p.strip()]
        return any(fnmatch.fnmatchcase(rule_id.lower(), p) for p in patterns)


def bundled_manifest_path() -> Path:
    return Path(str(resources.files("ragen.data").joinpath("sven_scenarios.jsonl")))


def load_manifest(path: str | os.PathLike | None = None) -> list[ScenarioEntry]:
    """Read a JSON-lines manifest; ``None`` loads the bundled scenario set."""
    path = Path(path) if path is not None else bundled_manifest_path()
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ManifestParseError(f"cannot read manifest {path}: {exc}") from exc
    entries: list[ScenarioEntry] = []
    seen: set[tuple[str, str]] = set()
    for lineno, line in enumerate(lines, 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            row = json.loads(line)
            entry = ScenarioEntry(**{k: str(row[k]) for k in MANIFEST_FIELDS})
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ManifestParseError(f"{path}:{lineno}: {exc}") from exc
        if entry.key in seen:
            raise DuplicateScenarioError(f"{path}:{lineno}: duplicate scenario {entry.cwe}/{entry.scenario}")
        seen.add(entry.key)
        entries.append(entry)
    return entries


def select_split(entries: Iterable[ScenarioEntry], split: str) -> list[ScenarioEntry]:
    if split == "all":
        return list(entries)
    return [e for e in entries if e.split is Split(split)]


# --- results ----------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioResult:
    cwe: str
    scenario: str
    split: str
    language: str
    compiled: bool
    ran: bool
    secure: bool
    unresolved_findings: int
    llm_calls: int
    wall_ms: float
    sec_score: Optional[int] = None
    phase: str = ""
    error: Optional[str] = None
    repeat: int = 0

    def __post_init__(self):
        if self.secure and not self.compiled:
            raise ValueError("secure result must have compiled")
        if self.sec_score is not None and not 1 <= self.sec_score <= 100:
            raise ValueError("sec_score must lie in [1, 100]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioResult":
        fields = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in fields})


def write_records(results: Sequence[ScenarioResult], path: str | os.PathLike) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_records(path: str | os.PathLike) -> list[ScenarioResult]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(ScenarioResult.from_dict(json.loads(line)))
    return out


# --- rubric -------------------------------------------------------------------

def build_rubric_prompt(code: CodeSnippet, templates: Optional[Templates] = None, model: str = "default") -> ChatRequest:
    if not code.body.strip():
        raise ValueError("cannot score an empty program")
    text = (templates or Templates()).render("rubric", language=Language(code.language).value, code=code.body)
    return ChatRequest((Message("user", text),), model=model)


def parse_rubric_response(text: str) -> tuple[int, int, int, int]:
    """(quality, security, compliance, overall), each clamped to 1..100."""
    data = first_json_block(text)
    if not isinstance(data, dict):
        raise RubricParseError("no JSON score block in rubric reply")

    def score(name: str) -> int:
        try:
            value = float(data[name])
        except (KeyError, TypeError, ValueError):
            raise RubricParseError(f"rubric block lacks a numeric {name!r}") from None
        if not math.isfinite(value):
            raise RubricParseError(f"rubric score {name!r} is not finite")
        return min(100, max(1, int(math.floor(value + 0.5))))

    quality, security, compliance = score("quality"), score("security"), score("compliance")
    if data.get("overall") is None:
        overall = int(math.floor((quality + security + compliance) / 3 + 0.5))
    else:
        overall = score("overall")
    return quality, security, compliance, overall


# --- evaluation ---------------------------------------------------------------

def _failed_result(entry: ScenarioEntry, metrics, error: str, repeat: int) -> ScenarioResult:
    findings = metrics.findings if metrics is not None else []
    return ScenarioResult(
        entry.cwe, entry.scenario, entry.split.value, entry.language.value,
        compiled=False, ran=False, secure=False,
        unresolved_findings=len(findings),
        llm_calls=metrics.llm_calls if metrics is not None else 0,
        wall_ms=metrics.wall_ms if metrics is not None else 0.0,
        phase=metrics.phase if metrics is not None else "failed",
        error=error, repeat=repeat,
    )


def evaluate_entry(
    entry: ScenarioEntry,
    config: RunConfig,
    judge: Optional[Backend] = None,
    repeat: int = 0,
    trace_dir: Optional[Path] = None,
) -> ScenarioResult:
    task = entry.task()
    try:
        agents = build_agents(config, task)
        settings = PipelineSettings.from_config(config)
        settings.query_pack = entry.analyzer_query
        log = None
        if trace_dir is not None:
            trace_dir.mkdir(parents=True, exist_ok=True)
            log = TraceLog(trace_dir / f"{task.task_id}.r{repeat}.jsonl")
        try:
            final, _, metrics = run_pipeline(task, agents, settings, run_id_for(config, task), log)
        finally:
            if log is not None:
                log.close()
    except PipelineFailedError as exc:
        return _failed_result(entry, exc.metrics, str(exc), repeat)
    except RagenError as exc:
        return _failed_result(entry, None, f"{type(exc).__name__}: {exc}", repeat)

    findings: list[AnalyzerFinding] = build_analyzer(config).analyze(
        {f"main{task.target_language.extension}": final.body}, task.target_language, entry.analyzer_query
    )
    sec_score = None
    if judge is not None:
        try:
            reply = judge.chat(build_rubric_prompt(final, model=config.model))
            sec_score = parse_rubric_response(reply.content)[3]
        except RagenError as exc:
            logger.warning("rubric scoring failed for %s: %s", task.task_id, exc)
    return ScenarioResult(
        entry.cwe, entry.scenario, entry.split.value, entry.language.value,
        compiled=metrics.compiled, ran=metrics.ran,
        secure=metrics.compiled and metrics.ran and not any(entry.matches(f.rule_id) for f in findings),
        unresolved_findings=len(findings),
        llm_calls=metrics.llm_calls, wall_ms=metrics.wall_ms,
        sec_score=sec_score, phase=metrics.phase, repeat=repeat,
    )


def evaluate(
    entries: Sequence[ScenarioEntry],
    config: RunConfig,
    judge: Optional[Backend] = None,
    repeat: int = 0,
    trace_dir: Optional[Path] = None,
) -> list[ScenarioResult]:
    """Run the pipeline per scenario. Failures become results, never exceptions."""
    results = [evaluate_entry(e, config, judge, repeat, trace_dir) for e in entries]
    return sorted(results, key=lambda r: (r.cwe, r.scenario))


# --- metrics --------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    n: int
    sec_rate: float
    pass_rate: float
    eff_seconds: float
    eff_calls: float
    sec_count: float
    unres_count: float
    sec_score_mean: Optional[float] = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def compute_metrics(results: Sequence[ScenarioResult]) -> MetricsReport:
    n = len(results)
    if n == 0:
        raise EmptyBatchError("cannot compute metrics over zero results")
    secure = sum(1 for r in results if r.secure)
    passing = sum(1 for r in results if r.compiled and r.ran)
    scores = [r.sec_score for r in results if r.sec_score is not None]
    return MetricsReport(
        n=n,
        sec_rate=100.0 * secure / n,
        pass_rate=100.0 * passing / n,
        eff_seconds=math.fsum(r.wall_ms for r in results) / n / 1000.0,
        eff_calls=math.fsum(r.llm_calls for r in results) / n,
        sec_count=float(secure),
        unres_count=float(sum(r.unresolved_findings for r in results)),
        sec_score_mean=math.fsum(scores) / len(scores) if scores else None,
    )


def average_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Mean of per-repeat reports; counts may become fractional."""
    if not reports:
        raise EmptyBatchError("no reports to average")
    k = len(reports)

    def mean(name: str) -> float:
        return math.fsum(getattr(r, name) for r in reports) / k

    scores = [r.sec_score_mean for r in reports if r.sec_score_mean is not None]
    return MetricsReport(
        n=reports[0].n,
        sec_rate=mean("sec_rate"),
        pass_rate=mean("pass_rate"),
        eff_seconds=mean("eff_seconds"),
        eff_calls=mean("eff_calls"),
        sec_count=mean("sec_count"),
        unres_count=mean("unres_count"),
        sec_score_mean=math.fsum(scores) / len(scores) if scores else None,
    )


REPORT_HEADER = "model sec_rate / pass_rate / eff_total / sec_count / unres_count"


def render_report(report: MetricsReport, label: str, with_extras: bool = False) -> str:
    """One table row. The efficiency column is mean seconds per scenario."""
    row = (
        f"{label} {report.sec_rate:.1f} / {report.pass_rate:.1f} / {report.eff_seconds:.1f}"
        f" / {report.sec_count:.1f} / {report.unres_count:.1f}"
    )
    if with_extras:
        row += f" | calls {report.eff_calls:.1f}"
        if report.sec_score_mean is not None:
            row += f" | score {report.sec_score_mean:.1f}"
    return row
