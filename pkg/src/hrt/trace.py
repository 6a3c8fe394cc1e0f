"""Structured tracing of runtime events.

Events are dicts with at least ``kind`` and ``seq`` (a global monotonic
sequence number). Task lifecycle events carry
``{task_id, state, device, virtual_time}``; kernel and transfer events carry
``{device, stream, start, end}`` intervals used by timeline and overlap
checks. When a sink path is set, events are also appended as JSON lines.
"""

from __future__ import annotations

import json
from typing import Any, IO, Optional


class Tracer:
    def __init__(self, sink_path: Optional[str] = None):
        self.events: list[dict[str, Any]] = []
        self._seq = 0
        self._fh: Optional[IO[str]] = open(sink_path, "w") if sink_path else None

    def emit(self, kind: str, **fields: Any) -> dict[str, Any]:
        self._seq += 1
        event = {"kind": kind, "seq": self._seq, **fields}
        self.events.append(event)
        if self._fh is not None:
            self._fh.write(json.dumps(event) + "\n")
        return event

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def of_kind(self, *kinds: str) -> list[dict[str, Any]]:
        return [e for e in self.events if e["kind"] in kinds]

    def clear(self) -> None:
        self.events.clear()


class NullTracer(Tracer):
    """Tracer that records nothing; used when tracing is disabled."""

    def __init__(self) -> None:
        super().__init__(None)

    def emit(self, kind: str, **fields: Any) -> dict[str, Any]:
        return {}
