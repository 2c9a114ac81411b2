"""Exception hierarchy shared by every agent and adapter."""

from __future__ import annotations


class RagenError(Exception):
    """Base class for all package errors."""


# backends
class BackendError(RagenError):
    """LLM backend unreachable or returned an unusable response."""


class ReplayMissError(BackendError):
    """Strict replay lookup found no recording for a request digest."""


class ScriptExhaustedError(BackendError):
    """A scripted backend was asked for more responses than it holds."""


class StoreWriteError(RagenError):
    """A replay store or trace log could not be written."""


class ToolUnavailableError(RagenError):
    pass


class AnalyzerUnavailableError(RagenError):
    pass


class ResultParseError(RagenError):
    """Analyzer result file is not valid for the supported SARIF subset."""


class SandboxUnavailableError(RagenError):
    """Required interpreter or compiler is missing."""


# agents
class MalformedPlanError(RagenError):
    pass


class DirectiveParseError(RagenError):
    pass


class UnknownToolError(RagenError):
    pass


class EmptyEvidenceError(RagenError):
    pass


class MissingSnippetError(RagenError):
    pass


class LanguageMismatchError(RagenError):
    pass


class PreconditionError(RagenError):
    """An operation was called with arguments that violate its contract."""


# orchestration
class IllegalTransitionError(RagenError):
    pass


class GuardViolationError(RagenError):
    pass


class SubtaskExhaustedError(RagenError):
    def __init__(self, subtask_id: str, attempts: int):
        super().__init__(f"subtask {subtask_id} failed after {attempts} attempts")
        self.subtask_id = subtask_id
        self.attempts = attempts


class PipelineFailedError(RagenError):
    """Raised when a run ends in the failed phase. Carries the full trajectory."""

    def __init__(self, message: str, trajectory=None, metrics=None):
        super().__init__(message)
        self.trajectory = trajectory
        self.metrics = metrics


# evaluation and config
class ConfigError(RagenError):
    pass


class ManifestParseError(RagenError):
    pass


class DuplicateScenarioError(ManifestParseError):
    pass


class EmptyBatchError(RagenError):
    pass


class RubricParseError(RagenError):
    pass


class TraceCorruptError(RagenError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line
