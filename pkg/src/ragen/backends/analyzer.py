"""Static analyzer adapters and the SARIF-subset result parser.

Only ``runs[].results[]`` entries are consumed, and from each result only
``ruleId``, ``level``, the first physical location (uri + startLine) and
``message.text``.
"""

from __future__ import annotations

import json
import os
import re
import shlex
import subprocess
import tempfile
from pathlib import Path
from typing import Iterable, Mapping, Optional, Protocol, Sequence

from ..errors import AnalyzerUnavailableError, ResultParseError
from ..model import AnalyzerFinding, Language, Severity


class Analyzer(Protocol):
    def analyze(
        self, files: Mapping[str, str], language: Language, query_pack: Optional[str] = None
    ) -> list[AnalyzerFinding]: ...


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ResultParseError(msg)


def parse_sarif(text: str) -> list[AnalyzerFinding]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ResultParseError(f"result file is not JSON: {exc}") from exc
    _require(isinstance(doc, dict), "top level must be an object")
    runs = doc.get("runs")
    _require(isinstance(runs, list), "missing runs array")

    findings = []
    for r, run in enumerate(runs):
        _require(isinstance(run, dict), f"runs[{r}] must be an object")
        results = run.get("results", [])
        _require(isinstance(results, list), f"runs[{r}].results must be an array")
        for i, res in enumerate(results):
            where = f"runs[{r}].results[{i}]"
            _require(isinstance(res, dict), f"{where} must be an object")
            rule_id = res.get("ruleId") or (res.get("rule") or {}).get("id")
            _require(isinstance(rule_id, str) and rule_id != "", f"{where} has no ruleId")

            message = res.get("message", {})
            _require(isinstance(message, dict), f"{where}.message must be an object")
            text_msg = message.get("text", message.get("markdown", ""))
            _require(isinstance(text_msg, str), f"{where}.message.text must be a string")

            locations = res.get("locations")
            _require(isinstance(locations, list) and locations, f"{where} has no locations")
            try:
                phys = locations[0]["physicalLocation"]
                uri = phys["artifactLocation"]["uri"]
                line = phys.get("region", {}).get("startLine", 1)
            except (KeyError, TypeError) as exc:
                raise ResultParseError(f"{where} location malformed: {exc}") from exc
            _require(isinstance(uri, str), f"{where} uri must be a string")
            _require(isinstance(line, int) and not isinstance(line, bool) and line >= 1, f"{where} bad startLine")

            findings.append(
                AnalyzerFinding(
                    rule_id=rule_id,
                    severity=Severity.parse(res.get("level", "warning")),
                    file=uri,
                    line=line,
                    message=text_msg,
                )
            )
    return findings


def findings_to_sarif(findings: Iterable[AnalyzerFinding], tool: str = "ragen") -> dict:
    """Inverse of parse_sarif for the consumed subset; used by fixtures and stubs."""
    return {
        "version": "2.1.0",
        "runs": [
            {
                "tool": {"driver": {"name": tool}},
                "results": [
                    {
                        "ruleId": f.rule_id,
                        "level": f.severity.value,
                        "message": {"text": f.message},
                        "locations": [
                            {"physicalLocation": {"artifactLocation": {"uri": f.file}, "region": {"startLine": f.line}}}
                        ],
                    }
                    for f in findings
                ],
            }
        ],
    }


class NullAnalyzer:
    """Reports nothing. For runs where no analyzer is configured."""

    def analyze(self, files, language, query_pack=None):
        return []


class StubAnalyzer:
    """Returns canned findings instead of spawning a tool.

    ``sequence`` holds one findings list per call; once exhausted the last
    entry repeats.
    """

    def __init__(self, sequence: Sequence[Sequence[AnalyzerFinding]] = ((),)):
        self.sequence = [list(s) for s in sequence] or [[]]
        self.calls = 0

    @classmethod
    def from_sarif_files(cls, paths: Sequence[str | os.PathLike]) -> "StubAnalyzer":
        seq = []
        for p in paths:
            try:
                seq.append(parse_sarif(Path(p).read_text(encoding="utf-8")))
            except OSError as exc:
                raise AnalyzerUnavailableError(f"stub result file unreadable: {exc}") from exc
        return cls(seq)

    def analyze(self, files, language, query_pack=None):
        out = self.sequence[min(self.calls, len(self.sequence) - 1)]
        self.calls += 1
        return list(out)


class CommandAnalyzer:
    """Runs an external analyzer from a command template.

    The template may use ``{src_dir}``, ``{language}``, ``{out_file}`` and
    ``{query_pack}``; the command must write a SARIF file to ``{out_file}``.
    """

    def __init__(self, command_template: str, default_query_pack: str = "", timeout_s: float = 600.0):
        self.command_template = command_template
        self.default_query_pack = default_query_pack
        self.timeout_s = timeout_s

    def analyze(self, files, language, query_pack=None):
        language = Language(language)
        with tempfile.TemporaryDirectory(prefix="ragen-analyze-") as tmp:
            src_dir = Path(tmp) / "src"
            src_dir.mkdir()
            for name, body in files.items():
                (src_dir / name).write_text(body, encoding="utf-8")
            out_file = Path(tmp) / "results.sarif"
            cmd = self.command_template.format(
                src_dir=shlex.quote(str(src_dir)),
                language=language.value,
                out_file=shlex.quote(str(out_file)),
                query_pack=shlex.quote(query_pack or self.default_query_pack),
            )
            try:
                proc = subprocess.run(
                    shlex.split(cmd), cwd=tmp, capture_output=True, text=True, timeout=self.timeout_s
                )
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise AnalyzerUnavailableError(f"analyzer failed to start: {exc}") from exc
            if proc.returncode != 0:
                raise AnalyzerUnavailableError(
                    f"analyzer exited {proc.returncode}: {proc.stderr.strip()[:500]}"
                )
            if not out_file.exists():
                raise AnalyzerUnavailableError("analyzer produced no result file")
            return parse_sarif(out_file.read_text(encoding="utf-8"))


# Offline regex rules. These are a rough stand-in for a real analyzer so that
# demos and the evaluation harness produce meaningful verdicts without CodeQL.
_PATTERN_RULES: dict[Language, list[tuple[str, str, re.Pattern]]] = {
    Language.PYTHON: [
        ("py/sql-injection", "query built from string formatting",
         re.compile(r"\.execute(?:many)?\(\s*(?:f[\"']|[\"'][^\"']*[\"']\s*(?:%|\+|\.format))")),
        ("py/command-line-injection", "shell command built from process input",
         re.compile(r"\bos\.(?:system|popen)\(|shell\s*=\s*True")),
        ("py/tarslip", "archive extracted without member validation",
         re.compile(r"\.extractall\((?![^)]*filter\s*=)")),
        ("py/code-injection", "dynamic evaluation of data",
         re.compile(r"(?<![\w.])(?:eval|exec)\(")),
    ],
    Language.C: [
        ("cpp/unbounded-write", "unbounded copy into a fixed-size buffer",
         re.compile(r"\b(?:strcpy|strcat|sprintf|vsprintf)\s*\(")),
        ("cpp/dangerous-function-overflow", "use of gets",
         re.compile(r"\bgets\s*\(")),
    ],
}
_PATTERN_RULES[Language.CPP] = _PATTERN_RULES[Language.C]


class PatternAnalyzer:
    def analyze(self, files, language, query_pack=None):
        rules = _PATTERN_RULES[Language(language)]
        findings = []
        for name in sorted(files):
            for lineno, line in enumerate(files[name].splitlines(), 1):
                code = line.split("#", 1)[0] if Language(language) is Language.PYTHON else line.split("//", 1)[0]
                for rule_id, message, pattern in rules:
                    if pattern.search(code):
                        findings.append(AnalyzerFinding(rule_id, Severity.ERROR, name, lineno, message))
        return findings


def analyze(analyzer: Analyzer, files: Mapping[str, str], language, query_pack: Optional[str] = None):
    return analyzer.analyze(files, Language(language), query_pack)
