"""Compile-and-run harness with per-run temp directories and wall-clock timeouts.

Isolation is process + temporary directory only. Generated code runs with
the invoking user's privileges; do not point this at untrusted models on a
machine you care about.
"""

from __future__ import annotations

import os
import shutil
import signal
import subprocess
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

from ..errors import SandboxUnavailableError
from ..model import CodeSnippet, Language

STDERR_HEAD_LINES = 20
STDERR_HEAD_CHARS = 2000


@dataclass(frozen=True)
class SandboxResult:
    compiled: bool
    ran: bool
    stderr_head: str = ""


def _head(text: str, workdir: str) -> str:
    text = text.replace(workdir, "<sandbox>")
    lines = text.strip().splitlines()[:STDERR_HEAD_LINES]
    return "\n".join(lines)[:STDERR_HEAD_CHARS]


def _run(cmd: list[str], cwd: str, timeout_s: float) -> tuple[int | None, str]:
    """Run cmd with empty stdin; returns (exit code or None on timeout, stderr)."""
    proc = subprocess.Popen(
        cmd,
        cwd=cwd,
        stdin=subprocess.DEVNULL,
        stdout=subprocess.DEVNULL,
        stderr=subprocess.PIPE,
        start_new_session=True,
    )
    try:
        _, err = proc.communicate(timeout=timeout_s)
    except subprocess.TimeoutExpired:
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        proc.communicate()
        return None, ""
    return proc.returncode, err.decode("utf-8", errors="replace")


class SandboxRunner:
    def __init__(
        self,
        timeout_ms: int = 10_000,
        python: str = sys.executable,
        c_compiler: str = "cc",
        cpp_compiler: str = "c++",
        c_flags: tuple[str, ...] = ("-std=c11", "-O0"),
        cpp_flags: tuple[str, ...] = ("-std=c++17", "-O0"),
        link_flags: tuple[str, ...] = ("-lm",),
        compile_timeout_ms: int = 60_000,
    ):
        self.timeout_ms = timeout_ms
        self.python = python
        self.compilers = {Language.C: c_compiler, Language.CPP: cpp_compiler}
        self.flags = {Language.C: tuple(c_flags), Language.CPP: tuple(cpp_flags)}
        self.link_flags = tuple(link_flags)
        self.compile_timeout_ms = compile_timeout_ms

    def available(self, language: Language) -> bool:
        tool = self.python if Language(language) is Language.PYTHON else self.compilers[Language(language)]
        return shutil.which(tool) is not None

    def run(self, snippet: CodeSnippet, timeout_ms: int | None = None) -> SandboxResult:
        timeout_s = (timeout_ms if timeout_ms is not None else self.timeout_ms) / 1000.0
        lang = Language(snippet.language)
        if not self.available(lang):
            missing = self.python if lang is Language.PYTHON else self.compilers[lang]
            raise SandboxUnavailableError(f"toolchain not found: {missing}")

        with tempfile.TemporaryDirectory(prefix="ragen-sbx-") as workdir:
            src = Path(workdir) / f"main{lang.extension}"
            src.write_text(snippet.body, encoding="utf-8")

            if lang is Language.PYTHON:
                try:
                    compile(snippet.body, "main.py", "exec")
                except (SyntaxError, ValueError) as exc:
                    where = f" (line {exc.lineno})" if getattr(exc, "lineno", None) else ""
                    return SandboxResult(False, False, f"{type(exc).__name__}: {getattr(exc, 'msg', exc)}{where}")
                cmd = [self.python, "-I", src.name]
            else:
                binary = Path(workdir) / "prog"
                compile_cmd = [self.compilers[lang], *self.flags[lang], src.name, "-o", binary.name, *self.link_flags]
                code, err = _run(compile_cmd, workdir, self.compile_timeout_ms / 1000.0)
                if code is None:
                    return SandboxResult(False, False, "compiler timed out")
                if code != 0:
                    return SandboxResult(False, False, _head(err, workdir))
                cmd = [str(binary)]

            code, err = _run(cmd, workdir, timeout_s)
            if code is None:
                return SandboxResult(True, False, f"timeout after {int(timeout_s * 1000)} ms")
            if code != 0:
                head = _head(err, workdir) or f"exit status {code}"
                return SandboxResult(True, False, head)
            return SandboxResult(True, True, "")


def run_sandboxed(snippet: CodeSnippet, timeout_ms: int = 10_000, runner: SandboxRunner | None = None):
    result = (runner or SandboxRunner()).run(snippet, timeout_ms)
    return result.compiled, result.ran, result.stderr_head
