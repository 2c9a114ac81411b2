"""Multi-agent secure code generation: plan, research, generate, validate."""

from .config import RunConfig
from .errors import PipelineFailedError, RagenError
from .model import CodeSnippet, DecompositionPlan, Language, TaskSpec, Trajectory
from .orchestrator import Pipeline, PipelineSettings, run_pipeline

__all__ = [
    "RunConfig", "PipelineFailedError", "RagenError", "CodeSnippet", "DecompositionPlan",
    "Language", "TaskSpec", "Trajectory", "Pipeline", "PipelineSettings", "run_pipeline",
]
__version__ = "0.1.0"
