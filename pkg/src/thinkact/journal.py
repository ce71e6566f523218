"""Append-only JSONL journals with replay and compaction.

One journal per entity; every state transition is an appended event, made
durable (flush + fsync) before the caller proceeds. State is rebuilt by
folding events at startup, so a crash between append and response can lose
at most the unacknowledged event, never a confirmed one.
"""

from __future__ import annotations

import json
import os
import threading
from pathlib import Path

__all__ = ["Journal"]


class Journal:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def append(self, event: dict) -> None:
        """Durably append one event."""
        line = json.dumps(event, sort_keys=True)
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
                fh.flush()
                os.fsync(fh.fileno())

    def replay(self) -> list[dict]:
        """All events in append order; tolerates a torn final line."""
        if not self.path.exists():
            return []
        events = []
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    events.append(json.loads(line))
                except ValueError:
                    break  # torn tail from a crash mid-write
        return events

    def compact(self, events: list[dict]) -> None:
        """Atomically rewrite the journal to exactly these events."""
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        with self._lock:
            with open(tmp, "w", encoding="utf-8") as fh:
                for event in events:
                    fh.write(json.dumps(event, sort_keys=True) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, self.path)
