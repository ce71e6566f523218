"""Two-scope thinking context: a global store every prompt sees, plus
per-call local stores that never leak into other calls' prompts.

Stores are immutable; every operation returns a new store. The global side
is byte-budgeted with oldest-first eviction (evicted keys accumulate in the
store's audit trail); local entries live until their call scope is closed,
at which point they are dropped unless explicitly promoted to global.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Mapping

from .protocol import Scope, ActionCall, is_neutralized

__all__ = [
    "ContextEntry",
    "ContextError",
    "ContextStore",
    "PromptView",
    "assemble_prompt",
    "close_scope",
    "record",
    "store_from_json",
    "store_to_json",
]


class ContextError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class ContextEntry:
    key: str
    value: str
    scope: Scope
    origin_call_id: int | None = None
    turn_index: int = 0
    bytes: int = field(default=-1)

    def __post_init__(self):
        if self.bytes < 0:
            object.__setattr__(self, "bytes", len(self.value.encode("utf-8")))
        if self.scope is Scope.LOCAL and self.origin_call_id is None:
            raise ContextError("LOCAL_WITHOUT_ORIGIN",
                               f"local entry {self.key!r} must carry its origin call id")
        if self.turn_index < 0:
            raise ContextError("BAD_TURN_INDEX", "turn_index must be non-negative")


@dataclass(frozen=True)
class ContextStore:
    budget_bytes: int
    global_entries: tuple[ContextEntry, ...] = ()
    local_entries: Mapping[int, tuple[ContextEntry, ...]] = field(
        default_factory=lambda: MappingProxyType({}))
    eviction_audit: tuple[str, ...] = ()

    def __post_init__(self):
        if self.budget_bytes <= 0:
            raise ContextError("BAD_BUDGET", "budget_bytes must be positive")
        if not isinstance(self.local_entries, MappingProxyType):
            object.__setattr__(self, "local_entries", MappingProxyType(dict(self.local_entries)))

    @property
    def global_bytes(self) -> int:
        return sum(e.bytes for e in self.global_entries)

    def local_for(self, call_id: int) -> tuple[ContextEntry, ...]:
        return self.local_entries.get(call_id, ())


@dataclass(frozen=True)
class PromptView:
    rendered: str
    included_keys: tuple[tuple[Scope, str], ...]
    dropped_keys: tuple[tuple[Scope, str], ...]


def _check_value(entry: ContextEntry) -> None:
    if not is_neutralized(entry.value):
        raise ContextError("NOT_NEUTRALIZED",
                           f"value for {entry.key!r} contains unescaped protocol characters")


def record(store: ContextStore, entry: ContextEntry) -> ContextStore:
    """Append an entry to its scope.

    Global entries are subject to the byte budget: the oldest entries are
    evicted until the store fits, and their keys are appended to the store's
    eviction audit. Recording a key that already exists in the same
    scope+origin raises KEY_COLLISION.
    """
    _check_value(entry)
    if entry.scope is Scope.GLOBAL:
        if any(e.key == entry.key for e in store.global_entries):
            raise ContextError("KEY_COLLISION", f"global key {entry.key!r} already recorded")
        if entry.bytes > store.budget_bytes:
            raise ContextError(
                "OVER_BUDGET",
                f"entry {entry.key!r} is {entry.bytes} bytes, larger than the whole "
                f"global budget of {store.budget_bytes}")
        entries = list(store.global_entries) + [entry]
        evicted = list(store.eviction_audit)
        total = sum(e.bytes for e in entries)
        while total > store.budget_bytes:
            victim = entries.pop(0)
            evicted.append(victim.key)
            total -= victim.bytes
        return replace(store, global_entries=tuple(entries), eviction_audit=tuple(evicted))

    existing = store.local_for(entry.origin_call_id)
    if any(e.key == entry.key for e in existing):
        raise ContextError(
            "KEY_COLLISION",
            f"local key {entry.key!r} already recorded for call {entry.origin_call_id}")
    locals_ = dict(store.local_entries)
    locals_[entry.origin_call_id] = existing + (entry,)
    return replace(store, local_entries=MappingProxyType(locals_))


def _render_line(entry: ContextEntry) -> str:
    letter = "G" if entry.scope is Scope.GLOBAL else "L"
    return f"[ctx scope={letter} key={entry.key}]{entry.value}[/ctx]"


def assemble_prompt(store: ContextStore, current_call: ActionCall | None = None) -> PromptView:
    """Render the context the policy may see next.

    Every surviving global entry appears in insertion order; local entries
    appear only for the current call. Locals of every other call are listed
    as dropped, making isolation auditable. Read-only and idempotent.
    """
    included: list[ContextEntry] = list(store.global_entries)
    current_id = current_call.id if current_call is not None else None
    if current_id is not None:
        included.extend(store.local_for(current_id))
    dropped: list[tuple[Scope, str]] = []
    for call_id in store.local_entries:
        if call_id != current_id:
            dropped.extend((e.scope, e.key) for e in store.local_entries[call_id])
    return PromptView(
        rendered="\n".join(_render_line(e) for e in included),
        included_keys=tuple((e.scope, e.key) for e in included),
        dropped_keys=tuple(dropped),
    )


def close_scope(store: ContextStore, call_id: int, promote: list[str]) -> ContextStore:
    """Close a call's local scope, promoting the listed keys to global.

    Promotion re-records each entry under the global scope in the order
    given, so the budget and eviction rules apply; everything else in the
    scope is discarded.
    """
    if call_id not in store.local_entries:
        raise ContextError("UNKNOWN_SCOPE", f"no local scope for call id {call_id}")
    entries = {e.key: e for e in store.local_for(call_id)}
    for key in promote:
        if key not in entries:
            raise ContextError("UNKNOWN_KEY",
                               f"key {key!r} not present in local scope {call_id}")
    locals_ = dict(store.local_entries)
    del locals_[call_id]
    out = replace(store, local_entries=MappingProxyType(locals_))
    for key in promote:
        src = entries[key]
        out = record(out, ContextEntry(
            key=src.key, value=src.value, scope=Scope.GLOBAL,
            origin_call_id=src.origin_call_id, turn_index=src.turn_index))
    return out


# ---------------------------------------------------------------------------
# snapshot persistence

def _entry_to_dict(entry: ContextEntry) -> dict:
    return {
        "key": entry.key,
        "value": entry.value,
        "scope": entry.scope.value,
        "origin_call_id": entry.origin_call_id,
        "turn_index": entry.turn_index,
        "bytes": entry.bytes,
    }


def _entry_from_dict(data: dict) -> ContextEntry:
    return ContextEntry(
        key=data["key"],
        value=data["value"],
        scope=Scope(data["scope"]),
        origin_call_id=data["origin_call_id"],
        turn_index=data["turn_index"],
        bytes=data["bytes"],
    )


def store_to_json(store: ContextStore) -> str:
    return json.dumps({
        "budget_bytes": store.budget_bytes,
        "global": [_entry_to_dict(e) for e in store.global_entries],
        "local": {str(cid): [_entry_to_dict(e) for e in entries]
                  for cid, entries in sorted(store.local_entries.items())},
        "eviction_audit": list(store.eviction_audit),
    }, sort_keys=True)


def store_from_json(text: str) -> ContextStore:
    data = json.loads(text)
    return ContextStore(
        budget_bytes=data["budget_bytes"],
        global_entries=tuple(_entry_from_dict(e) for e in data["global"]),
        local_entries={int(cid): tuple(_entry_from_dict(e) for e in entries)
                       for cid, entries in data["local"].items()},
        eviction_audit=tuple(data["eviction_audit"]),
    )
