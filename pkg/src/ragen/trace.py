"""Append-only JSON-lines trace log and its reader."""

from __future__ import annotations

import json
import os
import threading
from pathlib import Path
from typing import Iterator, Optional

from .errors import StoreWriteError, TraceCorruptError
from .model import TraceRecord, Trajectory

REQUIRED_KEYS = ("run_id", "seq", "wall_ms", "kind", "agent", "payload")


def dumps_record(record: TraceRecord) -> str:
    return json.dumps(record.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def loads_record(line: str, lineno: int = 0) -> TraceRecord:
    try:
        data = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TraceCorruptError(f"not valid JSON ({exc.msg})", lineno) from None
    if not isinstance(data, dict) or any(k not in data for k in REQUIRED_KEYS):
        raise TraceCorruptError("record is missing required fields", lineno)
    if not isinstance(data["seq"], int) or not isinstance(data["payload"], dict):
        raise TraceCorruptError("bad seq or payload type", lineno)
    return TraceRecord(**{k: data[k] for k in REQUIRED_KEYS})


class TraceLog:
    """Single-writer append-only log. Reopening an existing file resumes its seq."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self._lock = threading.Lock()
        self.next_seq = 0
        if self.path.exists():
            last = None
            for last in iter_trace(self.path):
                pass
            if last is not None:
                self.next_seq = last.seq + 1
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = self.path.open("a", encoding="utf-8")
        except OSError as exc:
            raise StoreWriteError(f"cannot open trace log {self.path}: {exc}") from exc

    def append(self, record: TraceRecord) -> TraceRecord:
        with self._lock:
            if record.seq != self.next_seq:
                record = TraceRecord(record.run_id, self.next_seq, record.wall_ms, record.kind, record.agent, record.payload)
            try:
                self._fh.write(dumps_record(record) + "\n")
                self._fh.flush()
            except (OSError, ValueError) as exc:
                raise StoreWriteError(f"cannot append to {self.path}: {exc}") from exc
            self.next_seq += 1
            return record

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def append_event(log: TraceLog, event: TraceRecord) -> TraceRecord:
    """Append one record; the log assigns the next sequence number."""
    return log.append(event)


def iter_trace(path: str | os.PathLike) -> Iterator[TraceRecord]:
    prev_seq: Optional[int] = None
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.endswith("\n"):
                raise TraceCorruptError("truncated record", lineno)
            if not line.strip():
                continue
            rec = loads_record(line, lineno)
            if prev_seq is not None and rec.seq <= prev_seq:
                raise TraceCorruptError(f"seq {rec.seq} does not increase", lineno)
            prev_seq = rec.seq
            yield rec


def read_trace(path: str | os.PathLike) -> Trajectory:
    records = list(iter_trace(path))
    run_id = records[0].run_id if records else ""
    return Trajectory(run_id, records)


def write_trajectory(trajectory: Trajectory, path: str | os.PathLike) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in trajectory.events:
            fh.write(dumps_record(rec) + "\n")
