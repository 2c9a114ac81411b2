"""A full pipeline run with canned model replies, then a look at its trace.

Scripted backends stand in for the language model, so this runs offline and
gives the same trace every time. Run with ``python demos/02_scripted_run.py``.
"""

from __future__ import annotations

import json
import tempfile
from pathlib import Path

from ragen.backends.analyzer import PatternAnalyzer
from ragen.backends.llm import ScriptedBackend
from ragen.backends.sandbox import SandboxRunner
from ragen.backends.search import FixtureSearch
from ragen.cli import main as ragen
from ragen.codegen import CodeGen
from ragen.model import TaskSpec
from ragen.orchestrator import Agents, PipelineSettings, run_pipeline
from ragen.planner import Planner
from ragen.searcher import SearchTool, Searcher, ToolDescriptor, ToolRegistry
from ragen.trace import TraceLog


def plan(*steps):
    rows = [{"index": i, "description": s, "relevance": 0.9} for i, s in enumerate(steps, 1)]
    return "```json\n" + json.dumps({"subtasks": rows}) + "\n```"


task = TaskSpec(
    "unsubscribe", "removing an email subscription from a database", "python", cwe_hint="CWE-089"
)

# %% the first snippet builds its query with an f-string, which the analyzer rejects;
# the planner rewrites the subtask and the second attempt uses a placeholder
replies = {
    "planner": [
        plan("create the table and remove one address"),
        '```json\n{"subtasks": [{"description": "delete with a ? placeholder"}]}\n```',
    ],
    "searcher": [
        "Thought: how do I pass values to sqlite safely?\nAction: search[parameterized sql query python sqlite3]",
        "Thought: placeholders it is.\nFinal: bind the address as a parameter",
        "Thought: same advice applies.\nFinal: bind the address as a parameter",
    ],
    "codegen": [
        "```python\nimport sqlite3\ndb = sqlite3.connect(':memory:')\ndb.execute('CREATE TABLE subs (email TEXT)')\n"
        "email = 'a@example.com'\ndb.execute(f\"DELETE FROM subs WHERE email = '{email}'\")\n```",
        "```python\nimport sqlite3\ndb = sqlite3.connect(':memory:')\ndb.execute('CREATE TABLE subs (email TEXT)')\n"
        "email = 'a@example.com'\ndb.execute('DELETE FROM subs WHERE email = ?', (email,))\n```",
    ],
}

registry = ToolRegistry()
registry.register(ToolDescriptor("search", "web search"), SearchTool(FixtureSearch.from_file()))
agents = Agents(
    planner=Planner(),
    searcher=Searcher(registry),
    codegen=CodeGen(),
    sandbox=SandboxRunner(timeout_ms=5000),
    analyzer=PatternAnalyzer(),
    llm={name: ScriptedBackend(r) for name, r in replies.items()},
)

# %% run it, writing the trace to a temporary directory
out = Path(tempfile.mkdtemp(prefix="ragen-demo-"))
with TraceLog(out / "trace.jsonl") as log:
    final, trajectory, metrics = run_pipeline(task, agents, PipelineSettings(seed=3), run_id="demo", log=log)

print(final.body)
print("phases:", " -> ".join(trajectory.phases()))
print("attempts:", metrics.attempts, " llm calls:", metrics.llm_calls, f" simulated wall: {metrics.wall_ms:.0f} ms")

# %% what the analyzer said about the first attempt
for event in trajectory.of_kind("feedback"):
    print("feedback:", event.payload["details"])

# %% the same trace through the replay command, searcher events only
ragen(["replay", "--trace", str(out / "trace.jsonl"), "--agent", "searcher"])
