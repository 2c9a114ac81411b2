"""Command-line entry points: ``ragen run``, ``ragen eval`` and ``ragen replay``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .backends.llm import LiveBackend, ReplayBackend, ReplayStore
from .config import BACKENDS, RunConfig
from .errors import ConfigError, ManifestParseError, PipelineFailedError, RagenError, TraceCorruptError
from .evalharness import (
    REPORT_HEADER,
    average_reports,
    compute_metrics,
    evaluate,
    load_manifest,
    render_report,
    select_split,
    write_records,
)
from .factory import build_agents, resolve_seed, run_id_for
from .model import TaskSpec
from .orchestrator import PipelineSettings, run_pipeline
from .trace import TraceLog, iter_trace

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2

logger = logging.getLogger("ragen")


def _err(msg: str) -> None:
    print(f"ragen: {msg}", file=sys.stderr)


def _load_config(args) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {
        "seed": getattr(args, "seed", None),
        "backend": getattr(args, "backend", None),
        "step_budget": getattr(args, "max_steps", None),
        "max_retries": getattr(args, "max_retries", None),
    }
    for key in ("script", "replay_dir"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = str(Path(value).resolve())
    return resolve_seed(config.with_overrides(**overrides))


def _load_task(path: str) -> TaskSpec:
    try:
        return TaskSpec.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load task {path}: {exc}") from exc


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_run(args) -> int:
    try:
        config = _load_config(args)
        task = _load_task(args.task)
        agents = build_agents(config, task)
    except (ConfigError, RagenError, OSError, ValueError) as exc:
        _err(f"configuration error: {exc}")
        return EXIT_CONFIG

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace_path = out / "trace.jsonl"
    if trace_path.exists():
        trace_path.unlink()
    for stale in out.glob("final.*"):
        stale.unlink()
    config.write_snapshot(out / "config.resolved.json")

    with TraceLog(trace_path) as log:
        try:
            final, _, metrics = run_pipeline(
                task, agents, PipelineSettings.from_config(config), run_id_for(config, task), log
            )
        except PipelineFailedError as exc:
            if exc.metrics is not None:
                _write_json(out / "metrics.json", exc.metrics.to_dict())
            _err(f"run failed: {exc}")
            return EXIT_FAILED
    (out / f"final{task.target_language.extension}").write_text(final.body, encoding="utf-8")
    _write_json(out / "metrics.json", metrics.to_dict())
    print(f"done: {out / ('final' + task.target_language.extension)}")
    return EXIT_OK


def _judge_backend(config: RunConfig, kind: Optional[str]):
    if kind is None:
        return None
    if kind == "replay":
        return ReplayBackend(ReplayStore(config.replay_dir))
    return LiveBackend(config.model, config.base_url, config.api_key_env, max_retries=config.http_retries)


def cmd_eval(args) -> int:
    try:
        config = _load_config(args)
        entries = select_split(load_manifest(args.manifest), args.split)
        judge = _judge_backend(config, args.judge)
    except ManifestParseError as exc:
        _err(f"manifest error: {exc}")
        return EXIT_CONFIG
    except (ConfigError, RagenError, OSError) as exc:
        _err(f"configuration error: {exc}")
        return EXIT_CONFIG
    if not entries:
        _err(f"no scenarios in split {args.split}")
        return EXIT_CONFIG

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config.write_snapshot(out / "config.resolved.json")
    all_results, reports = [], []
    for rep in range(args.repeats):
        results = evaluate(entries, config, judge, repeat=rep, trace_dir=out / "traces" if args.traces else None)
        all_results.extend(results)
        reports.append(compute_metrics(results))
    report = average_reports(reports)
    write_records(all_results, out / "records.jsonl")
    _write_json(out / "metrics.json", {"mean": report.to_dict(), "repeats": [r.to_dict() for r in reports]})
    table = f"{REPORT_HEADER}\n{render_report(report, args.label, with_extras=True)}\n"
    (out / "report.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


def _summary(rec) -> str:
    p = rec.payload
    kind = rec.kind
    if kind == "transition":
        return f"{p['from']} --{p['event']}--> {p['to']}"
    if kind == "delay":
        return f"-> {p['to']} {p['delay_ms']:.1f} ms" + (" (clamped)" if p.get("clamped") else "")
    if kind == "reasoning":
        return f"step {p['step_index']}: {p['thought']}"
    if kind == "action":
        return f"step {p['step_index']}: {p['tool']}[{p['input']}] ok={p['ok']} reward={p['reward']:+.0f}"
    if kind == "validation":
        return f"{p['subject']}: {p['verdict']} ({len(p['findings'])} findings)"
    if kind == "feedback":
        return f"{p['subtask_id']} attempt {p['attempt']}: {p['failure_kind']}"
    if kind == "llm_call":
        return f"digest {p['digest'][:12]}"
    if kind == "plan":
        return f"{p['modality']}: " + ", ".join(s["subtask_id"] for s in p["subtasks"])
    if kind in ("snippet", "aggregate"):
        return f"{p.get('subtask', 'final')} attempt {p['attempt']}, {len(p['body'].splitlines())} lines"
    if kind == "episode":
        return f"{p['subtask']}: {p['steps']} steps, summary: {p['summary']}"
    text = json.dumps(p, sort_keys=True)
    return text if len(text) <= 120 else text[:117] + "..."


def _parse_range(text: str) -> tuple[int, int]:
    try:
        if ":" in text:
            lo, hi = text.split(":", 1)
            return int(lo or 0), int(hi) if hi else sys.maxsize
        n = int(text)
        return n, n
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad step range {text!r}; use N or N:M") from None


def cmd_replay(args) -> int:
    lo, hi = args.step if args.step else (0, sys.maxsize)
    lines = []
    try:
        for rec in iter_trace(args.trace):
            if not lo <= rec.seq <= hi:
                continue
            if args.agent and rec.agent != args.agent:
                continue
            lines.append(f"[{rec.seq:05d}] {rec.wall_ms:10.1f} ms  {rec.agent:<12} {rec.kind:<16} {_summary(rec)}")
    except TraceCorruptError as exc:
        _err(f"corrupt trace {args.trace}: {exc}")
        return EXIT_CONFIG
    except OSError as exc:
        _err(f"cannot read trace {args.trace}: {exc}")
        return EXIT_CONFIG
    for line in lines:
        print(line)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ragen", description="Multi-agent secure code generation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="generate code for one task")
    run.add_argument("--task", required=True, help="task JSON file")
    run.add_argument("--config", help="run configuration JSON file")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", default="runs/latest", help="output directory")
    run.add_argument("--backend", choices=BACKENDS)
    run.add_argument("--script", help="scripted session file (scripted backend)")
    run.add_argument("--replay-dir", dest="replay_dir", help="recording directory (replay/record backends)")
    run.add_argument("--max-steps", dest="max_steps", type=int, help="ReAct step budget")
    run.add_argument("--max-retries", dest="max_retries", type=int)
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="evaluate over a scenario manifest")
    ev.add_argument("--manifest", help="manifest file (default: bundled scenario set)")
    ev.add_argument("--config", help="run configuration JSON file")
    ev.add_argument("--split", choices=("test", "val", "all"), default="all")
    ev.add_argument("--repeats", type=int, default=1)
    ev.add_argument("--out", default="runs/eval")
    ev.add_argument("--seed", type=int)
    ev.add_argument("--backend", choices=BACKENDS)
    ev.add_argument("--script")
    ev.add_argument("--replay-dir", dest="replay_dir")
    ev.add_argument("--judge", choices=("live", "replay"), help="score final programs with the rubric")
    ev.add_argument("--label", default="ragen", help="row label in the report")
    ev.add_argument("--traces", action="store_true", help="keep one trace file per scenario")
    ev.set_defaults(func=cmd_eval)

    rp = sub.add_parser("replay", help="print a recorded trace")
    rp.add_argument("--trace", required=True)
    rp.add_argument("--step", type=_parse_range, help="sequence number N or range N:M")
    rp.add_argument("--agent", help="only events from this agent")
    rp.set_defaults(func=cmd_replay)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if getattr(args, "repeats", 1) < 1:
        _err("--repeats must be at least 1")
        return EXIT_CONFIG
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
