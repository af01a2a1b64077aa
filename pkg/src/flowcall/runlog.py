"""Run records: the line-oriented event log and the printable transcript.

Every run (CLI or service) emits a sequence of typed events. This module
gives them a stable serialized form — one JSON object per line in
``events.jsonl`` — renders the human-facing transcript layout, and provides
the normalization used by golden tests and ``replay`` (timestamps, run IDs,
and object addresses are run-varying and get rewritten to fixed tokens).
"""

from __future__ import annotations

import json
import os
import re
import time
from dataclasses import dataclass

EVENTS_FILENAME = "events.jsonl"
TRANSCRIPT_FILENAME = "transcript.txt"
RECORD_FILENAME = "record.json"

_ADDR_RE = re.compile(r"0x[0-9a-f]+")
_RUN_ID_RE = re.compile(r"run_[0-9a-f]{12}")
_TS_RE = re.compile(r"\b\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}(?:\.\d+)?(?:Z|[+-]\d{2}:\d{2})?\b")


@dataclass(frozen=True)
class EventRecord:
    seq: int
    ts: float
    type: str
    data: dict

    def to_json(self) -> str:
        return json.dumps(
            {"seq": self.seq, "ts": self.ts, "type": self.type, "data": self.data},
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "EventRecord":
        obj = json.loads(line)
        return cls(seq=obj["seq"], ts=obj["ts"], type=obj["type"], data=obj["data"])


def normalize(text: str) -> str:
    """Rewrite run-varying tokens so equal runs compare byte-identical."""
    text = _ADDR_RE.sub("0xADDR", text)
    text = _RUN_ID_RE.sub("run_NORM", text)
    text = _TS_RE.sub("TS", text)
    return text


def render_event(event_type: str, data: dict) -> str:
    """Render one event in the printable transcript layout, or '' if silent."""
    if event_type == "dispatch":
        return (
            "Function Calling\n"
            f"Function Name:  {data['function']}\n"
            f"Function Args:  {data['args']!r}\n"
            f"<AppFuture at {data.get('handle', '0x0')} state={data.get('future_state', 'pending')}>\n"
            "\n"
            f"Task scheduled with AppFuture id: {data['future_id']}\n"
            "\n"
        )
    if event_type == "error_forwarded":
        return f"Function Calling Error\n{data['error']}\n\n"
    if event_type == "done":
        return (data.get("content") or "DONE") + "\n"
    if event_type == "aborted":
        detail = data.get("detail", "")
        suffix = f" ({detail})" if detail else ""
        return f"ABORTED: {data['reason']}{suffix}\n"
    if event_type == "plan_created":
        lines = ["Plan:"]
        for step in data.get("steps", []):
            binding = step.get("files") if step.get("files") is not None else step.get("uses")
            lines.append(f"  {step['index']}. {step['task']}  {binding!r}")
        return "\n".join(lines) + "\n\n"
    if event_type == "step_outcome":
        failed = sorted(k for k, ok in (data.get("checks") or {}).items() if not ok)
        suffix = f"  failed checks: {failed}" if failed else ""
        return (
            f"Step {data['step_index']} ({data['task']}) attempt {data['attempt']}: "
            f"{data['verdict']}{suffix}\n"
        )
    if event_type == "remediation":
        return f"Step {data['step_index']} remediation: {data['kind']}\n"
    if event_type == "escalation_raised":
        return f"Escalation {data['escalation_id']}: {data['question']}\n"
    if event_type == "escalation_answered":
        return f"Escalation {data['escalation_id']} answered: {data['decision']}\n"
    if event_type == "plan_finished":
        status = data["status"].upper()
        reason = data.get("reason")
        return f"PLAN {status}" + (f": {reason}\n" if reason else "\n")
    return ""


def render_transcript(events) -> str:
    """The printable transcript for any sequence of events with .type/.data."""
    return "".join(render_event(event.type, event.data) for event in events)


class RunWriter:
    """Appends events for one run to disk and accumulates the transcript.

    Usage: call ``emit(type, data)`` for every event, then ``finalize`` with
    the terminal status. Files land in the run directory next to the future
    output directories.
    """

    def __init__(self, run_dir: str):
        self.run_dir = run_dir
        os.makedirs(run_dir, exist_ok=True)
        self._seq = 0
        self._events_path = os.path.join(run_dir, EVENTS_FILENAME)
        self._transcript_path = os.path.join(run_dir, TRANSCRIPT_FILENAME)
        self._record_path = os.path.join(run_dir, RECORD_FILENAME)
        self.events: list[EventRecord] = []

    def emit(self, event_type: str, data: dict) -> EventRecord:
        record = EventRecord(seq=self._seq, ts=time.time(), type=event_type, data=data)
        self._seq += 1
        self.events.append(record)
        with open(self._events_path, "a", encoding="utf-8") as fh:
            fh.write(record.to_json() + "\n")
        return record

    def finalize(self, record: dict):
        with open(self._transcript_path, "w", encoding="utf-8") as fh:
            fh.write(render_transcript(self.events))
        with open(self._record_path, "w", encoding="utf-8") as fh:
            json.dump(record, fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_events(path: str) -> list[EventRecord]:
    """Load an events.jsonl file (or the file inside a run directory)."""
    if os.path.isdir(path):
        path = os.path.join(path, EVENTS_FILENAME)
    events = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                events.append(EventRecord.from_json(line))
    return events
