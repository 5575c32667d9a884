"""Append-only event trace of one pipeline run.

Every step of the loop lands here as a typed event, and the revise events
carry full report snapshots, so a finished run can be audited or its final
report reconstructed from the JSONL file alone.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from .errors import MalformedTrace

EVENT_TYPES = ("draft", "sample", "describe", "assess", "retrieve", "revise", "terminate")


@dataclass
class TraceEvent:
    round_index: int
    type: str
    payload: dict
    wall_time_ms: float

    def to_dict(self) -> dict:
        return {
            "round": self.round_index,
            "type": self.type,
            "payload": self.payload,
            "wall_time_ms": self.wall_time_ms,
        }


class IterationTrace:
    """Ordered event log with the loop's structural invariants enforced.

    Rounds never decrease, at most one terminate event is accepted and it
    must come last.
    """

    def __init__(self, slide_id: str = ""):
        self.slide_id = slide_id
        self.events: list[TraceEvent] = []
        self._t0 = time.monotonic()

    def append(self, event_type: str, round_index: int, payload: dict) -> TraceEvent:
        if event_type not in EVENT_TYPES:
            raise ValueError(f"unknown event type {event_type!r}")
        if self.events:
            if self.events[-1].type == "terminate":
                raise ValueError("trace already terminated")
            if round_index < self.events[-1].round_index:
                raise ValueError(
                    f"round {round_index} after round {self.events[-1].round_index}"
                )
        event = TraceEvent(
            round_index=round_index,
            type=event_type,
            payload=payload,
            wall_time_ms=(time.monotonic() - self._t0) * 1000.0,
        )
        self.events.append(event)
        return event

    def terminated(self) -> bool:
        return bool(self.events) and self.events[-1].type == "terminate"

    def write_jsonl(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            for event in self.events:
                fh.write(json.dumps(event.to_dict(), ensure_ascii=False) + "\n")
        return path


def read_events(path: str | Path) -> list[TraceEvent]:
    """Parse a trace file back into events, validating the stream shape."""
    events: list[TraceEvent] = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise MalformedTrace(f"cannot read trace: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            event = TraceEvent(
                round_index=int(raw["round"]),
                type=raw["type"],
                payload=raw["payload"],
                wall_time_ms=float(raw["wall_time_ms"]),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise MalformedTrace(f"line {lineno}: {exc}") from exc
        if event.type not in EVENT_TYPES:
            raise MalformedTrace(f"line {lineno}: unknown event type {event.type!r}")
        events.append(event)
    if not events:
        raise MalformedTrace("trace holds no events")
    terminates = [e for e in events if e.type == "terminate"]
    if len(terminates) != 1 or events[-1].type != "terminate":
        raise MalformedTrace("trace must end with exactly one terminate event")
    rounds = [e.round_index for e in events]
    if any(b < a for a, b in zip(rounds, rounds[1:])):
        raise MalformedTrace("event rounds must be non-decreasing")
    return events


def replay_final_report(events: list[TraceEvent]) -> dict:
    """Reconstruct the final report dict from the event stream alone.

    The last revise snapshot is the final report: termination either follows
    a revise (budget) or returns the previous round's report untouched
    (qc_pass / only-non-evidenceable), which is that same snapshot.
    """
    revisions = [e for e in events if e.type == "revise"]
    if not revisions:
        raise MalformedTrace("trace holds no revise events to replay")
    return revisions[-1].payload["report"]
