"""Action registry and sandboxed dispatch.

Four actions are built in and execute inline: ``clock_now`` (injectable
clock), ``calc_eval`` (arithmetic over decimals), and ``mem_get`` /
``mem_put`` (episode memory backed by the global thinking context).
External actions go over a newline-delimited JSON wire protocol:

    request:  {"id": 3, "name": "search", "args": {...}}\\n
    response: {"id": 3, "status": "ok", "payload": "..."}\\n

Every dispatch passes the security gauntlet in order: allowlist, argument
schema, rate limits. Nothing aborts; denials and failures come back as the
result status, and every payload is truncated then entity-escaped before it
can reach a transcript or a context store.
"""

from __future__ import annotations

import json
import re
import socket
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Callable, Protocol

from .context import ContextEntry, ContextError, ContextStore, record
from .protocol import ActionCall, ActionResult, ResultStatus, Scalar, Scope, neutralize, unescape_text

__all__ = [
    "ActionError",
    "ActionSpec",
    "ActionKind",
    "AuditLog",
    "BUILTIN_NAMES",
    "CallCounters",
    "DispatchRecord",
    "FixedClock",
    "LineStreamClient",
    "MemoryHandle",
    "PolicyVerdict",
    "Registry",
    "ScalarType",
    "SecurityPolicy",
    "StubClient",
    "calc_evaluate",
    "dispatch",
    "eval_builtin",
    "policy_from_json",
    "policy_to_json",
]

MAX_TIMEOUT_MS = 60_000


class ActionError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class ActionKind(Enum):
    BUILT_IN = "built_in"
    EXTERNAL = "external"


class ScalarType(Enum):
    INT = "int"
    FLOAT = "float"
    STRING = "string"
    BOOL = "bool"


class PolicyVerdict(Enum):
    ALLOWED = "allowed"
    DENIED_ALLOWLIST = "denied_allowlist"
    DENIED_SCHEMA = "denied_schema"
    DENIED_RATE = "denied_rate"


@dataclass(frozen=True)
class ActionSpec:
    name: str
    kind: ActionKind
    arg_schema: dict[str, ScalarType]
    timeout_ms: int = 5_000
    max_payload_bytes: int = 4_096

    def __post_init__(self):
        if not re.fullmatch(r"[a-z][a-z0-9_]*", self.name) or len(self.name) > 64:
            raise ActionError("BAD_NAME", f"invalid action name {self.name!r}")
        if not (0 < self.timeout_ms <= MAX_TIMEOUT_MS):
            raise ActionError("BAD_TIMEOUT",
                              f"timeout_ms must be in (0, {MAX_TIMEOUT_MS}], got {self.timeout_ms}")
        if self.max_payload_bytes <= 0:
            raise ActionError("BAD_PAYLOAD_CAP", "max_payload_bytes must be positive")


@dataclass(frozen=True)
class SecurityPolicy:
    allowlist: frozenset[str]
    max_calls_per_turn: int = 8
    max_calls_per_episode: int = 64
    neutralize_results: bool = True
    deny_on_schema_mismatch: bool = True

    def __post_init__(self):
        object.__setattr__(self, "allowlist", frozenset(self.allowlist))
        if self.max_calls_per_turn <= 0 or self.max_calls_per_episode <= 0:
            raise ActionError("BAD_LIMIT", "call limits must be positive")
        if self.max_calls_per_turn > self.max_calls_per_episode:
            raise ActionError("BAD_LIMIT",
                              "per-turn limit cannot exceed the per-episode limit")


@dataclass
class CallCounters:
    turn_calls: int = 0
    episode_calls: int = 0

    def begin_turn(self) -> None:
        self.turn_calls = 0


@dataclass(frozen=True)
class DispatchRecord:
    call: ActionCall
    result: ActionResult
    latency_ms: float
    policy_verdict: PolicyVerdict


BUILTIN_SPECS = (
    ActionSpec("clock_now", ActionKind.BUILT_IN, {}, timeout_ms=1_000, max_payload_bytes=64),
    ActionSpec("calc_eval", ActionKind.BUILT_IN, {"expr": ScalarType.STRING},
               timeout_ms=1_000, max_payload_bytes=256),
    ActionSpec("mem_get", ActionKind.BUILT_IN, {"key": ScalarType.STRING},
               timeout_ms=1_000, max_payload_bytes=4_096),
    ActionSpec("mem_put", ActionKind.BUILT_IN,
               {"key": ScalarType.STRING, "value": ScalarType.STRING},
               timeout_ms=1_000, max_payload_bytes=256),
)
BUILTIN_NAMES = frozenset(s.name for s in BUILTIN_SPECS)


class Registry:
    """Named action specs; the four built-ins are always pre-registered."""

    def __init__(self):
        self._specs: dict[str, ActionSpec] = {s.name: s for s in BUILTIN_SPECS}

    def register(self, spec: ActionSpec) -> "Registry":
        if spec.name in self._specs:
            raise ActionError("DUPLICATE_NAME", f"action {spec.name!r} already registered")
        self._specs[spec.name] = spec
        return self

    def get(self, name: str) -> ActionSpec | None:
        return self._specs.get(name)

    def names(self) -> set[str]:
        return set(self._specs)

    def check_policy(self, policy: SecurityPolicy) -> None:
        unknown = policy.allowlist - set(self._specs)
        if unknown:
            raise ActionError("UNKNOWN_ALLOWLIST",
                              f"allowlist names not registered: {sorted(unknown)}")


# ---------------------------------------------------------------------------
# built-in actions

class FixedClock:
    """Deterministic clock for tests and reproducible task environments."""

    def __init__(self, at: datetime):
        if at.tzinfo is None:
            at = at.replace(tzinfo=timezone.utc)
        self.at = at

    def __call__(self) -> datetime:
        return self.at


def _system_clock() -> datetime:
    return datetime.now(timezone.utc)


def _iso_utc(dt: datetime) -> str:
    dt = dt.astimezone(timezone.utc)
    if dt.microsecond:
        return dt.strftime("%Y-%m-%dT%H:%M:%S.%f") + "Z"
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


_NUM_RE = re.compile(r"\d+(?:\.\d+)?")


def calc_evaluate(expr: str) -> float:
    """Evaluate +, -, *, / and parentheses over decimal literals.

    Raises ValueError on syntax errors and ZeroDivisionError on division by
    zero. No unary operators, variables, or functions.
    """
    pos = 0
    n = len(expr)

    def skip_ws() -> None:
        nonlocal pos
        while pos < n and expr[pos] in " \t":
            pos += 1

    def parse_expr() -> float:
        nonlocal pos
        value = parse_term()
        while True:
            skip_ws()
            if pos < n and expr[pos] in "+-":
                op = expr[pos]
                pos += 1
                rhs = parse_term()
                value = value + rhs if op == "+" else value - rhs
            else:
                return value

    def parse_term() -> float:
        nonlocal pos
        value = parse_atom()
        while True:
            skip_ws()
            if pos < n and expr[pos] in "*/":
                op = expr[pos]
                pos += 1
                rhs = parse_atom()
                if op == "*":
                    value = value * rhs
                else:
                    if rhs == 0:
                        raise ZeroDivisionError("division by zero")
                    value = value / rhs
            else:
                return value

    def parse_atom() -> float:
        nonlocal pos
        skip_ws()
        if pos < n and expr[pos] == "(":
            pos += 1
            value = parse_expr()
            skip_ws()
            if pos >= n or expr[pos] != ")":
                raise ValueError("missing closing parenthesis")
            pos += 1
            return value
        m = _NUM_RE.match(expr, pos)
        if m is None:
            raise ValueError(f"expected a number at position {pos}")
        pos = m.end()
        return float(m.group())

    value = parse_expr()
    skip_ws()
    if pos != n:
        raise ValueError(f"unexpected trailing input at position {pos}")
    return value


def format_number(value: float) -> str:
    if abs(value - round(value)) < 1e-9 and abs(value) < 1e15:
        return str(int(round(value)))
    return repr(value)


class MemoryHandle:
    """Mutable reference to the episode's context store.

    The store itself is immutable; built-ins that write memory rebind this
    handle so the caller observes the updated store after dispatch.
    """

    def __init__(self, store: ContextStore, turn_index: int = 0):
        self.store = store
        self.turn_index = turn_index


def eval_builtin(
    name: str,
    args: dict[str, Scalar],
    call_id: int = 0,
    clock: Callable[[], datetime] | None = None,
    memory: MemoryHandle | None = None,
) -> ActionResult:
    """Execute a built-in action inline. Payloads are raw (not yet escaped);
    dispatch neutralizes them before they can enter a transcript."""
    if name not in BUILTIN_NAMES:
        raise ActionError("UNKNOWN_BUILTIN", f"{name!r} is not a built-in action")

    def done(status: ResultStatus, payload: str) -> ActionResult:
        return ActionResult(call_id=call_id, status=status, payload=payload)

    if name == "clock_now":
        return done(ResultStatus.OK, _iso_utc((clock or _system_clock)()))

    if name == "calc_eval":
        expr = args.get("expr")
        if not isinstance(expr, str):
            return done(ResultStatus.ERROR, "calc_eval requires a string 'expr'")
        try:
            return done(ResultStatus.OK, format_number(calc_evaluate(expr)))
        except ZeroDivisionError:
            return done(ResultStatus.ERROR, "division by zero")
        except ValueError as exc:
            return done(ResultStatus.ERROR, f"bad expression: {exc}")

    if memory is None:
        return done(ResultStatus.ERROR, f"{name} requires an episode memory")

    if name == "mem_put":
        key, value = args.get("key"), args.get("value")
        if not isinstance(key, str) or not isinstance(value, str):
            return done(ResultStatus.ERROR, "mem_put requires string 'key' and 'value'")
        entry = ContextEntry(key=key, value=neutralize(value), scope=Scope.GLOBAL,
                             origin_call_id=call_id or None, turn_index=memory.turn_index)
        try:
            memory.store = record(memory.store, entry)
        except ContextError as exc:
            return done(ResultStatus.ERROR, f"memory write failed: {exc.code}")
        return done(ResultStatus.OK, "stored")

    # mem_get
    key = args.get("key")
    if not isinstance(key, str):
        return done(ResultStatus.ERROR, "mem_get requires a string 'key'")
    for entry in memory.store.global_entries:
        if entry.key == key:
            return done(ResultStatus.OK, unescape_text(entry.value))
    return done(ResultStatus.ERROR, f"unknown key {key!r}")


# ---------------------------------------------------------------------------
# external actions over the wire

class ExternalClient(Protocol):
    def call(self, req_id: int, name: str, args: dict[str, Scalar], timeout_ms: int) -> tuple[str, str]:
        """Returns (status, payload); raises TimeoutError on deadline."""


class StubClient:
    """In-process stand-in for an external action service."""

    def __init__(self, handler: Callable[[str, dict[str, Scalar]], tuple[str, str]]):
        self.handler = handler

    def call(self, req_id: int, name: str, args: dict[str, Scalar], timeout_ms: int) -> tuple[str, str]:
        return self.handler(name, args)


class LineStreamClient:
    """Newline-delimited JSON request/response over a TCP byte stream."""

    def __init__(self, host: str, port: int):
        self.host = host
        self.port = port

    def call(self, req_id: int, name: str, args: dict[str, Scalar], timeout_ms: int) -> tuple[str, str]:
        deadline = timeout_ms / 1000.0
        with socket.create_connection((self.host, self.port), timeout=deadline) as conn:
            conn.settimeout(deadline)
            request = json.dumps({"id": req_id, "name": name, "args": args}) + "\n"
            try:
                conn.sendall(request.encode("utf-8"))
                line = self._read_line(conn)
            except socket.timeout:
                raise TimeoutError(f"no response within {timeout_ms} ms") from None
        response = json.loads(line)
        if response.get("id") != req_id:
            return "error", f"response id {response.get('id')} does not match request {req_id}"
        status = response.get("status", "error")
        payload = response.get("payload", "")
        if status not in ("ok", "error") or not isinstance(payload, str):
            return "error", "malformed response"
        return status, payload

    @staticmethod
    def _read_line(conn: socket.socket) -> str:
        chunks = []
        while True:
            data = conn.recv(4096)
            if not data:
                break
            chunks.append(data)
            if b"\n" in data:
                break
        return b"".join(chunks).split(b"\n", 1)[0].decode("utf-8")


def serve_stub_tcp(handler: Callable[[str, dict], tuple[str, str]], host: str = "127.0.0.1"):
    """Start a threaded one-request-per-connection stub server.

    Returns (port, shutdown). Used by tests to exercise the wire protocol
    over a real byte stream.
    """
    server = socket.create_server((host, 0))
    port = server.getsockname()[1]
    stop = threading.Event()

    def loop() -> None:
        server.settimeout(0.2)
        while not stop.is_set():
            try:
                conn, _ = server.accept()
            except socket.timeout:
                continue
            with conn:
                data = b""
                while b"\n" not in data:
                    chunk = conn.recv(4096)
                    if not chunk:
                        break
                    data += chunk
                if not data:
                    continue
                try:
                    req = json.loads(data.split(b"\n", 1)[0].decode("utf-8"))
                    status, payload = handler(req["name"], req.get("args", {}))
                    reply = {"id": req.get("id"), "status": status, "payload": payload}
                except Exception as exc:  # malformed request: report, keep serving
                    reply = {"id": None, "status": "error", "payload": str(exc)}
                conn.sendall((json.dumps(reply) + "\n").encode("utf-8"))
        server.close()

    thread = threading.Thread(target=loop, daemon=True)
    thread.start()

    def shutdown() -> None:
        stop.set()
        thread.join(timeout=2)

    return port, shutdown


# ---------------------------------------------------------------------------
# dispatch

def _truncate_utf8(text: str, limit: int) -> str:
    raw = text.encode("utf-8")
    if len(raw) <= limit:
        return text
    return raw[:limit].decode("utf-8", errors="ignore")


def _check_args(spec: ActionSpec, args: dict[str, Scalar]) -> bool:
    if set(args) != set(spec.arg_schema):
        return False
    for key, expected in spec.arg_schema.items():
        value = args[key]
        if expected is ScalarType.INT:
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif expected is ScalarType.FLOAT:
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif expected is ScalarType.STRING:
            ok = isinstance(value, str)
        else:
            ok = isinstance(value, bool)
        if not ok:
            return False
    return True


def dispatch(
    registry: Registry,
    policy: SecurityPolicy,
    call: ActionCall,
    counters: CallCounters,
    memory: MemoryHandle | None = None,
    clock: Callable[[], datetime] | None = None,
    external: ExternalClient | None = None,
    latency_clock: Callable[[], float] = time.monotonic,
) -> DispatchRecord:
    """Run one action call through policy checks and execution.

    Never raises for call-level problems: denials and execution failures are
    encoded in the result status. The payload is truncated to the spec's cap
    and entity-escaped before being recorded.
    """
    registry.check_policy(policy)
    started = latency_clock()

    def finish(verdict: PolicyVerdict, status: ResultStatus, payload: str) -> DispatchRecord:
        result = ActionResult(call_id=call.id, status=status,
                              payload=neutralize(payload) if policy.neutralize_results
                              else payload)
        return DispatchRecord(call=call, result=result,
                              latency_ms=max(0.0, (latency_clock() - started) * 1000.0),
                              policy_verdict=verdict)

    if call.name not in policy.allowlist:
        return finish(PolicyVerdict.DENIED_ALLOWLIST, ResultStatus.DENIED,
                      f"action {call.name!r} not in allowlist")
    spec = registry.get(call.name)
    if spec is None:
        return finish(PolicyVerdict.DENIED_ALLOWLIST, ResultStatus.DENIED,
                      f"action {call.name!r} not registered")
    args = call.args_dict
    if not _check_args(spec, args) and policy.deny_on_schema_mismatch:
        return finish(PolicyVerdict.DENIED_SCHEMA, ResultStatus.DENIED,
                      f"arguments do not match the schema for {call.name!r}")
    if counters.turn_calls >= policy.max_calls_per_turn:
        return finish(PolicyVerdict.DENIED_RATE, ResultStatus.DENIED,
                      "per-turn call limit reached")
    if counters.episode_calls >= policy.max_calls_per_episode:
        return finish(PolicyVerdict.DENIED_RATE, ResultStatus.DENIED,
                      "per-episode call limit reached")

    counters.turn_calls += 1
    counters.episode_calls += 1

    if spec.kind is ActionKind.BUILT_IN:
        try:
            result = eval_builtin(call.name, args, call_id=call.id, clock=clock, memory=memory)
            status, payload = result.status, _truncate_utf8(result.payload, spec.max_payload_bytes)
        except ActionError as exc:
            status, payload = ResultStatus.ERROR, str(exc)
        return finish(PolicyVerdict.ALLOWED, status, payload)

    if external is None:
        return finish(PolicyVerdict.ALLOWED, ResultStatus.ERROR,
                      "no external client configured")
    try:
        wire_status, payload = external.call(call.id, call.name, args, spec.timeout_ms)
    except TimeoutError:
        return finish(PolicyVerdict.ALLOWED, ResultStatus.TIMEOUT,
                      f"timed out after {spec.timeout_ms} ms")
    except (OSError, ValueError) as exc:
        return finish(PolicyVerdict.ALLOWED, ResultStatus.ERROR, f"transport failure: {exc}")
    status = ResultStatus.OK if wire_status == "ok" else ResultStatus.ERROR
    return finish(PolicyVerdict.ALLOWED, status, _truncate_utf8(payload, spec.max_payload_bytes))


# ---------------------------------------------------------------------------
# audit and policy files

def record_to_dict(rec: DispatchRecord) -> dict:
    return {
        "call": {"id": rec.call.id, "name": rec.call.name,
                 "scope": rec.call.scope.value, "args": rec.call.args_dict},
        "result": {"call_id": rec.result.call_id, "status": rec.result.status.value,
                   "payload": rec.result.payload},
        "latency_ms": rec.latency_ms,
        "policy_verdict": rec.policy_verdict.value,
    }


class AuditLog:
    """Append-only JSONL trail of dispatch records."""

    def __init__(self, path):
        self.path = path
        self._lock = threading.Lock()

    def append(self, rec: DispatchRecord) -> None:
        line = json.dumps(record_to_dict(rec), sort_keys=True)
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    def load(self) -> list[dict]:
        try:
            with open(self.path, encoding="utf-8") as fh:
                return [json.loads(line) for line in fh if line.strip()]
        except FileNotFoundError:
            return []


def policy_to_json(policy: SecurityPolicy) -> str:
    return json.dumps({
        "allowlist": sorted(policy.allowlist),
        "max_calls_per_turn": policy.max_calls_per_turn,
        "max_calls_per_episode": policy.max_calls_per_episode,
        "neutralize_results": policy.neutralize_results,
        "deny_on_schema_mismatch": policy.deny_on_schema_mismatch,
    }, sort_keys=True)


def policy_from_json(text: str) -> SecurityPolicy:
    data = json.loads(text)
    return SecurityPolicy(
        allowlist=frozenset(data["allowlist"]),
        max_calls_per_turn=data["max_calls_per_turn"],
        max_calls_per_episode=data["max_calls_per_episode"],
        neutralize_results=data.get("neutralize_results", True),
        deny_on_schema_mismatch=data.get("deny_on_schema_mismatch", True),
    )
