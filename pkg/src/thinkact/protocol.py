"""Transcript markup: grammar, parser, serializer, validator, mutations.

A transcript document is a flat sequence of four elements:

    <think>escaped text, optionally containing PLAN: lines</think>
    <act id="1" name="calc_eval" scope="local">{"expr":"2+2"}</act>
    <result id="1" status="ok">escaped payload</result>
    <answer>escaped text</answer>

``&lt; &gt; &amp;`` entity escaping applies inside every content position, so
a payload can never smuggle new elements into the transcript. Arguments are
a JSON object with string keys and scalar values, serialized with sorted
keys and no whitespace; the same canonical form is used as the argument
digest in PLAN declarations.

Elements group into turns: think/act/answer belong to the generating policy
(ASSISTANT), results to the RUNTIME. Within an assistant turn the shape is
thinking first, then either one or more action calls or exactly one answer.
Parsing is best-effort and total: malformed input yields a partial
trajectory plus a list of violations, never an exception (inputs that break
the size or encoding preconditions raise `OversizeError` / `EncodingError`).

Offsets in spans and violations are byte offsets into the UTF-8 document.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Union

__all__ = [
    "ActionCall",
    "ActionResult",
    "AnswerBlock",
    "EncodingError",
    "InvalidTrajectoryError",
    "Item",
    "OversizeError",
    "PlanDecl",
    "ProtocolError",
    "ResultStatus",
    "Role",
    "Scope",
    "TagName",
    "ThinkBlock",
    "Trajectory",
    "Turn",
    "UnsupportedMutationError",
    "Violation",
    "ViolationKind",
    "canonical_args",
    "extract_plan_decls",
    "is_identifier",
    "is_neutralized",
    "mutate",
    "neutralize",
    "parse",
    "serialize",
    "serialize_with_spans",
    "unescape_text",
    "validate",
]

MAX_DOCUMENT_BYTES = 1 << 20
MAX_IDENT_LEN = 64

_IDENT_RE = re.compile(r"[a-z][a-z0-9_]*\Z")

Scalar = Union[str, int, float, bool]


class ProtocolError(Exception):
    """Base for contract failures raised by this module."""


class OversizeError(ProtocolError):
    """Document exceeds the 1 MiB cap."""


class EncodingError(ProtocolError):
    """Byte input is not valid UTF-8."""


class InvalidTrajectoryError(ProtocolError):
    """serialize() was given a trajectory that breaks an invariant."""


class UnsupportedMutationError(ProtocolError):
    """mutate() cannot synthesize the requested violation for this shape."""


class TagName(Enum):
    THINK = "think"
    ACT = "act"
    RESULT = "result"
    ANSWER = "answer"


class Role(Enum):
    USER = "user"
    ASSISTANT = "assistant"
    RUNTIME = "runtime"


class Scope(Enum):
    GLOBAL = "global"
    LOCAL = "local"


class ResultStatus(Enum):
    OK = "ok"
    ERROR = "error"
    TIMEOUT = "timeout"
    DENIED = "denied"


class ViolationKind(Enum):
    UNCLOSED_TAG = "unclosed_tag"
    UNKNOWN_TAG = "unknown_tag"
    ACT_OUTSIDE_THINK_TURN = "act_outside_think_turn"
    MISSING_ANSWER = "missing_answer"
    DUPLICATE_ID = "duplicate_id"
    BAD_ESCAPE = "bad_escape"
    ORPHAN_RESULT = "orphan_result"
    EMPTY_ANSWER = "empty_answer"


@dataclass(frozen=True)
class Violation:
    kind: ViolationKind
    span: tuple[int, int]
    note: str = ""


@dataclass(frozen=True)
class PlanDecl:
    """Machine-checkable intent line inside a think block.

    Written as ``PLAN: name {"arg":1} -> expected`` on its own line; the
    args digest is the canonical JSON form so it can be compared directly
    against an action call's serialized arguments.
    """

    action_name: str
    args_digest: str
    expected: str = ""


@dataclass(frozen=True)
class ThinkBlock:
    text: str
    declarations: tuple[PlanDecl, ...] = ()
    span: tuple[int, int] = field(default=(0, 0), compare=False)

    @classmethod
    def make(cls, text: str, span: tuple[int, int] = (0, 0)) -> "ThinkBlock":
        """Build a block with declarations derived from the text."""
        return cls(text=text, declarations=tuple(extract_plan_decls(text)), span=span)


@dataclass(frozen=True)
class ActionCall:
    id: int
    name: str
    scope: Scope
    args: tuple[tuple[str, Scalar], ...] = ()

    @classmethod
    def make(cls, id: int, name: str, scope: Scope, args: dict[str, Scalar] | None = None) -> "ActionCall":
        return cls(id=id, name=name, scope=scope, args=tuple(sorted((args or {}).items())))

    @property
    def args_dict(self) -> dict[str, Scalar]:
        return dict(self.args)

    @property
    def args_digest(self) -> str:
        return canonical_args(self.args_dict)


@dataclass(frozen=True)
class ActionResult:
    call_id: int
    status: ResultStatus
    payload: str  # stored in neutralized (entity-escaped) form


@dataclass(frozen=True)
class AnswerBlock:
    text: str


Item = Union[ThinkBlock, ActionCall, ActionResult, AnswerBlock]


@dataclass(frozen=True)
class Turn:
    role: Role
    items: tuple[Item, ...]


@dataclass(frozen=True)
class Trajectory:
    task_id: str
    turns: tuple[Turn, ...]
    terminal: bool

    def action_calls(self) -> list[ActionCall]:
        return [it for t in self.turns for it in t.items if isinstance(it, ActionCall)]

    def action_results(self) -> list[ActionResult]:
        return [it for t in self.turns for it in t.items if isinstance(it, ActionResult)]

    def answer(self) -> AnswerBlock | None:
        """The answer of the last assistant turn, if that turn ends in one."""
        for turn in reversed(self.turns):
            if turn.role is Role.ASSISTANT:
                if turn.items and isinstance(turn.items[-1], AnswerBlock):
                    return turn.items[-1]
                return None
        return None


# ---------------------------------------------------------------------------
# escaping

def neutralize(text: str) -> str:
    """Entity-escape text so it cannot introduce protocol tags."""
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def unescape_text(text: str) -> str:
    return text.replace("&lt;", "<").replace("&gt;", ">").replace("&amp;", "&")


_NEUTRAL_RE = re.compile(r"[<>]|&(?!(?:amp|lt|gt);)")


def is_neutralized(text: str) -> bool:
    """True if text has no raw angle brackets and only the three entities."""
    return _NEUTRAL_RE.search(text) is None


def is_identifier(name: str) -> bool:
    return len(name) <= MAX_IDENT_LEN and _IDENT_RE.match(name) is not None


def canonical_args(args: dict[str, Scalar]) -> str:
    """Canonical JSON form: sorted keys, compact separators, scalars only."""
    for key, value in args.items():
        if not isinstance(key, str):
            raise InvalidTrajectoryError(f"argument key {key!r} is not a string")
        if not isinstance(value, (str, int, float, bool)):
            raise InvalidTrajectoryError(f"argument {key!r} has non-scalar value {value!r}")
    return json.dumps(args, sort_keys=True, separators=(",", ":"))


_PLAN_RE = re.compile(r"\s*PLAN:\s*([a-z][a-z0-9_]*)\s*(\{.*\})\s*(?:->\s*(.*?))?\s*\Z")


def extract_plan_decls(text: str) -> list[PlanDecl]:
    """Pull PLAN: lines out of think text.

    Lines that do not match the syntax (bad identifier, no braces) are plain
    prose, not an error. The braces content is canonicalized through JSON
    when possible so digests compare reliably.
    """
    decls: list[PlanDecl] = []
    for line in text.split("\n"):
        m = _PLAN_RE.match(line)
        if m is None:
            continue
        name, braces, expected = m.group(1), m.group(2), m.group(3) or ""
        if len(name) > MAX_IDENT_LEN:
            continue
        try:
            parsed = json.loads(braces)
        except ValueError:
            digest = braces.strip()
        else:
            if isinstance(parsed, dict) and all(
                isinstance(v, (str, int, float, bool)) for v in parsed.values()
            ):
                digest = json.dumps(parsed, sort_keys=True, separators=(",", ":"))
            else:
                digest = braces.strip()
        decls.append(PlanDecl(action_name=name, args_digest=digest, expected=expected.strip()))
    return decls


def plan_line(name: str, args: dict[str, Scalar], expected: str = "") -> str:
    """Render the canonical PLAN: line declaring an intended call."""
    line = f"PLAN: {name} {canonical_args(args)}"
    if expected:
        line += f" -> {expected}"
    return line


# ---------------------------------------------------------------------------
# byte-offset mapping (spans are byte offsets; the scanner works on str)

class _ByteMap:
    def __init__(self, document: str):
        self._ascii = document.isascii()
        if not self._ascii:
            offsets = [0] * (len(document) + 1)
            total = 0
            for i, ch in enumerate(document):
                offsets[i] = total
                total += len(ch.encode("utf-8"))
            offsets[len(document)] = total
            self._offsets = offsets

    def __call__(self, index: int) -> int:
        if self._ascii:
            return index
        return self._offsets[index]


# ---------------------------------------------------------------------------
# parsing

_KNOWN_TAG_RE = re.compile(r"<(/?)(think|act|result|answer)((?:\s+[a-z_]+=\"[^\"<>]*\")*)\s*>")
_ANY_TAG_RE = re.compile(r"</?[A-Za-z][^<>]*>")
_ATTR_RE = re.compile(r"([a-z_]+)=\"([^\"<>]*)\"")
_ENTITY_RE = re.compile(r"&(amp|lt|gt);")

_STATUS_VALUES = {s.value: s for s in ResultStatus}
_SCOPE_VALUES = {s.value: s for s in Scope}


@dataclass
class _RawElement:
    tag: TagName
    attrs: dict[str, str]
    content: str  # raw, still escaped
    span: tuple[int, int]


class _Scanner:
    """Single pass over the document, recovering at the next tag on errors."""

    def __init__(self, document: str):
        self.doc = document
        self.bmap = _ByteMap(document)
        self.violations: list[Violation] = []
        self.elements: list[_RawElement] = []

    def bspan(self, start: int, end: int) -> tuple[int, int]:
        return (self.bmap(start), self.bmap(end))

    def flag(self, kind: ViolationKind, start: int, end: int, note: str) -> None:
        self.violations.append(Violation(kind, self.bspan(start, end), note))

    def run(self) -> None:
        doc = self.doc
        n = len(doc)
        pos = 0
        open_tag: TagName | None = None
        open_attrs: dict[str, str] = {}
        open_start = 0
        content_parts: list[str] = []

        def close_open(end: int) -> None:
            nonlocal open_tag
            assert open_tag is not None
            self.elements.append(
                _RawElement(open_tag, open_attrs, "".join(content_parts), (open_start, end))
            )
            open_tag = None

        while pos < n:
            lt = doc.find("<", pos)
            if lt == -1:
                if open_tag is not None:
                    content_parts.append(doc[pos:])
                else:
                    self._check_loose_text(doc[pos:], pos)
                pos = n
                break
            if lt > pos:
                if open_tag is not None:
                    content_parts.append(doc[pos:lt])
                else:
                    self._check_loose_text(doc[pos:lt], pos)
            m = _KNOWN_TAG_RE.match(doc, lt)
            if m is not None:
                closing, name, attr_text = m.group(1) == "/", m.group(2), m.group(3)
                tag = TagName(name)
                attrs, attrs_ok = self._parse_attrs(tag, closing, attr_text, lt, m.end())
                if not attrs_ok:
                    # malformed known tag: treated like an unknown tag token
                    if open_tag is not None:
                        self.flag(ViolationKind.BAD_ESCAPE, lt, lt + 1,
                                  "raw '<' in content must be escaped as &lt;")
                        content_parts.append("<")
                        pos = lt + 1
                        continue
                    pos = m.end()
                    continue
                if open_tag is not None:
                    if closing and tag is open_tag:
                        close_open(m.end())
                        pos = m.end()
                        continue
                    # any other well-formed protocol tag terminates the open
                    # element early: report it unclosed and reprocess the tag
                    self.flag(ViolationKind.UNCLOSED_TAG, open_start, lt,
                              f"<{open_tag.value}> not closed before next tag")
                    close_open(lt)
                    continue
                if closing:
                    self.flag(ViolationKind.UNCLOSED_TAG, lt, m.end(),
                              f"unmatched closing tag </{tag.value}>")
                    pos = m.end()
                    continue
                open_tag = tag
                open_attrs = attrs
                open_start = lt
                content_parts = []
                pos = m.end()
                continue
            m = _ANY_TAG_RE.match(doc, lt)
            if m is not None and open_tag is None:
                self.flag(ViolationKind.UNKNOWN_TAG, lt, m.end(),
                          f"unknown tag {doc[lt:m.end()]!r}")
                pos = m.end()
                continue
            # raw '<' that opens nothing recognizable: an escaping violation,
            # kept literally in content, ignored at top level
            self.flag(ViolationKind.BAD_ESCAPE, lt, lt + 1,
                      "raw '<' in content must be escaped as &lt;")
            if open_tag is not None:
                content_parts.append("<")
            pos = lt + 1
        if open_tag is not None:
            self.flag(ViolationKind.UNCLOSED_TAG, open_start, n,
                      f"<{open_tag.value}> still open at end of document")
            close_open(n)

    def _check_loose_text(self, chunk: str, start: int) -> None:
        # top-level prose is ignored, but broken entities are still flagged
        self._scan_entities(chunk, start)

    def _scan_entities(self, chunk: str, start: int) -> None:
        idx = 0
        while True:
            amp = chunk.find("&", idx)
            if amp == -1:
                return
            if _ENTITY_RE.match(chunk, amp) is None:
                self.flag(ViolationKind.BAD_ESCAPE, start + amp, start + amp + 1,
                          "bare '&' must be escaped as &amp;")
            idx = amp + 1

    def _parse_attrs(
        self, tag: TagName, closing: bool, attr_text: str, start: int, end: int
    ) -> tuple[dict[str, str], bool]:
        attrs = dict(_ATTR_RE.findall(attr_text))
        if closing:
            if attr_text.strip():
                self.flag(ViolationKind.UNKNOWN_TAG, start, end,
                          f"closing tag </{tag.value}> carries attributes")
                return {}, False
            return {}, True
        if tag in (TagName.THINK, TagName.ANSWER):
            if attr_text.strip():
                self.flag(ViolationKind.UNKNOWN_TAG, start, end,
                          f"<{tag.value}> takes no attributes")
                return {}, False
            return {}, True
        expected = {"id", "name", "scope"} if tag is TagName.ACT else {"id", "status"}
        if set(attrs) != expected:
            self.flag(ViolationKind.UNKNOWN_TAG, start, end,
                      f"<{tag.value}> requires attributes {sorted(expected)}")
            return {}, False
        if not attrs["id"].isdigit() or int(attrs["id"]) < 1:
            self.flag(ViolationKind.UNKNOWN_TAG, start, end,
                      f"<{tag.value}> id must be a positive integer")
            return {}, False
        if tag is TagName.ACT:
            if not is_identifier(attrs["name"]):
                self.flag(ViolationKind.UNKNOWN_TAG, start, end,
                          f"action name {attrs['name']!r} is not a valid identifier")
                return {}, False
            if attrs["scope"] not in _SCOPE_VALUES:
                self.flag(ViolationKind.UNKNOWN_TAG, start, end,
                          f"scope must be one of {sorted(_SCOPE_VALUES)}")
                return {}, False
        else:
            if attrs["status"] not in _STATUS_VALUES:
                self.flag(ViolationKind.UNKNOWN_TAG, start, end,
                          f"status must be one of {sorted(_STATUS_VALUES)}")
                return {}, False
        return attrs, True


def _unescape_content(scanner: _Scanner, raw: str, abs_start: int) -> str:
    scanner._scan_entities(raw, abs_start)
    return unescape_text(raw)


def _build_items(scanner: _Scanner) -> list[tuple[Item, tuple[int, int]]]:
    items: list[tuple[Item, tuple[int, int]]] = []
    for el in scanner.elements:
        content_start = el.span[0]  # approximate origin for entity spans
        if el.tag is TagName.THINK:
            text = _unescape_content(scanner, el.content, content_start)
            items.append((ThinkBlock.make(text, span=scanner.bspan(*el.span)), el.span))
        elif el.tag is TagName.ANSWER:
            text = _unescape_content(scanner, el.content, content_start)
            items.append((AnswerBlock(text), el.span))
        elif el.tag is TagName.ACT:
            args_text = _unescape_content(scanner, el.content, content_start).strip()
            args: dict[str, Scalar] = {}
            if args_text:
                try:
                    parsed = json.loads(args_text)
                except ValueError:
                    parsed = None
                if (
                    isinstance(parsed, dict)
                    and all(isinstance(k, str) for k in parsed)
                    and all(isinstance(v, (str, int, float, bool)) for v in parsed.values())
                ):
                    args = parsed
                else:
                    scanner.flag(ViolationKind.UNKNOWN_TAG, *el.span,
                                 note="act arguments are not a canonical JSON object of scalars")
            call = ActionCall.make(
                id=int(el.attrs["id"]),
                name=el.attrs["name"],
                scope=_SCOPE_VALUES[el.attrs["scope"]],
                args=args,
            )
            items.append((call, el.span))
        else:
            scanner._scan_entities(el.content, content_start)
            result = ActionResult(
                call_id=int(el.attrs["id"]),
                status=_STATUS_VALUES[el.attrs["status"]],
                payload=el.content,
            )
            items.append((result, el.span))
    return items


def _group_turns(items: Iterable[Item]) -> list[Turn]:
    """Canonical turn grouping of a flat element stream.

    Runtime results form runs of their own; within an assistant turn the
    phases are thinking -> acting|answering, and any element that cannot
    extend the current phase starts a new turn.
    """
    turns: list[Turn] = []
    cur: list[Item] = []
    cur_role: Role | None = None
    phase = "thinking"

    def flush() -> None:
        nonlocal cur
        if cur:
            turns.append(Turn(role=cur_role, items=tuple(cur)))
            cur = []

    for item in items:
        role = Role.RUNTIME if isinstance(item, ActionResult) else Role.ASSISTANT
        if role is not cur_role:
            flush()
            cur_role = role
            phase = "thinking"
        elif role is Role.ASSISTANT:
            if isinstance(item, ThinkBlock) and phase != "thinking":
                flush()
                phase = "thinking"
            elif isinstance(item, ActionCall) and phase == "done":
                flush()
                phase = "thinking"
            elif isinstance(item, AnswerBlock) and phase != "thinking":
                flush()
                phase = "thinking"
        cur.append(item)
        if isinstance(item, ActionCall):
            phase = "acting"
        elif isinstance(item, AnswerBlock):
            phase = "done"
    flush()
    return turns


def _is_terminal(turns: Iterable[Turn]) -> bool:
    for turn in reversed(list(turns)):
        if turn.role is Role.ASSISTANT:
            return bool(turn.items) and isinstance(turn.items[-1], AnswerBlock)
    return False


def parse(document: str | bytes, task_id: str = "") -> tuple[Trajectory, list[Violation]]:
    """Parse a transcript document, best-effort.

    Returns the trajectory together with every violation found, both lexical
    (unclosed/unknown tags, escaping) and structural (turn shape, ids,
    orphan results, missing answer). A document with an empty violation list
    satisfies every invariant.
    """
    if isinstance(document, bytes):
        if len(document) > MAX_DOCUMENT_BYTES:
            raise OversizeError(f"document is {len(document)} bytes, cap is {MAX_DOCUMENT_BYTES}")
        try:
            document = document.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise EncodingError(str(exc)) from None
    elif len(document.encode("utf-8")) > MAX_DOCUMENT_BYTES:
        raise OversizeError(f"document exceeds {MAX_DOCUMENT_BYTES} bytes")

    scanner = _Scanner(document)
    scanner.run()
    placed = _build_items(scanner)
    turns = _group_turns(item for item, _ in placed)
    trajectory = Trajectory(task_id=task_id, turns=tuple(turns), terminal=_is_terminal(turns))

    span_of = {id(item): scanner.bspan(*span) for item, span in placed}
    violations = scanner.violations + _structural_violations(trajectory, span_of)
    return trajectory, violations


# ---------------------------------------------------------------------------
# validation

def _structural_violations(
    trajectory: Trajectory, span_of: dict[int, tuple[int, int]] | None = None
) -> list[Violation]:
    spans = span_of or {}

    def span(item: Item) -> tuple[int, int]:
        got = spans.get(id(item))
        if got is not None:
            return got
        if isinstance(item, ThinkBlock):
            return item.span
        return (0, 0)

    out: list[Violation] = []

    for turn in trajectory.turns:
        if turn.role is Role.RUNTIME:
            for item in turn.items:
                if not isinstance(item, ActionResult):
                    out.append(Violation(
                        ViolationKind.ACT_OUTSIDE_THINK_TURN, span(item),
                        f"{type(item).__name__} inside a runtime turn"))
            continue
        if turn.role is not Role.ASSISTANT:
            continue
        misplaced = [it for it in turn.items if isinstance(it, ActionResult)]
        for item in misplaced:
            out.append(Violation(ViolationKind.ORPHAN_RESULT, span(item),
                                 "result authored inside an assistant turn"))
        items = [it for it in turn.items if not isinstance(it, ActionResult)]
        first_non_think = next(
            (i for i, it in enumerate(items) if not isinstance(it, ThinkBlock)), len(items))
        tail = items[first_non_think:]
        anchor = items[0] if items else None
        if not tail:
            out.append(Violation(
                ViolationKind.MISSING_ANSWER,
                span(anchor) if anchor is not None else (0, 0),
                "assistant turn has no action call or answer"))
        elif all(isinstance(it, ActionCall) for it in tail):
            if first_non_think == 0:
                out.append(Violation(ViolationKind.ACT_OUTSIDE_THINK_TURN, span(tail[0]),
                                     "action call with no thinking before it in its turn"))
        elif len(tail) == 1 and isinstance(tail[0], AnswerBlock):
            pass
        else:
            note = ("assistant turn mixes action calls with an answer"
                    if any(isinstance(it, AnswerBlock) for it in tail)
                    and any(isinstance(it, ActionCall) for it in tail)
                    else "assistant turn items out of thinking-then-acting order")
            out.append(Violation(ViolationKind.MISSING_ANSWER, span(tail[0]), note))

    for turn in trajectory.turns:
        for item in turn.items:
            if isinstance(item, AnswerBlock) and not item.text.strip():
                out.append(Violation(ViolationKind.EMPTY_ANSWER, span(item), "answer is blank"))

    seen_ids: set[int] = set()
    last_id = 0
    for call in trajectory.action_calls():
        if call.id < 1:
            out.append(Violation(ViolationKind.DUPLICATE_ID, span(call),
                                 f"action id {call.id} is not positive"))
        elif call.id in seen_ids:
            out.append(Violation(ViolationKind.DUPLICATE_ID, span(call),
                                 f"duplicate action id {call.id}"))
        elif call.id < last_id:
            out.append(Violation(ViolationKind.DUPLICATE_ID, span(call),
                                 f"action id {call.id} not strictly increasing"))
        if not is_identifier(call.name):
            out.append(Violation(ViolationKind.UNKNOWN_TAG, span(call),
                                 f"action name {call.name!r} is not a valid identifier"))
        seen_ids.add(call.id)
        last_id = max(last_id, call.id)

    calls_in_order: list[int] = []
    resulted: set[int] = set()
    for turn in trajectory.turns:
        for item in turn.items:
            if isinstance(item, ActionCall):
                calls_in_order.append(item.id)
            elif isinstance(item, ActionResult):
                if item.call_id not in calls_in_order:
                    out.append(Violation(ViolationKind.ORPHAN_RESULT, span(item),
                                         f"result references unknown call id {item.call_id}"))
                elif item.call_id in resulted:
                    out.append(Violation(ViolationKind.ORPHAN_RESULT, span(item),
                                         f"second result for call id {item.call_id}"))
                else:
                    resulted.add(item.call_id)
                if not is_neutralized(item.payload):
                    out.append(Violation(ViolationKind.BAD_ESCAPE, span(item),
                                         "result payload is not neutralized"))

    actual_terminal = _is_terminal(trajectory.turns)
    if not actual_terminal:
        out.append(Violation(ViolationKind.MISSING_ANSWER, (0, 0),
                             "trajectory does not end with an answer"))
    if trajectory.terminal != actual_terminal:
        out.append(Violation(ViolationKind.MISSING_ANSWER, (0, 0),
                             "terminal flag does not match the turns"))
    return out


def validate(trajectory: Trajectory) -> list[Violation]:
    """Structural validation of an in-memory trajectory.

    Deterministic and total; returns an empty list exactly when the
    trajectory satisfies every invariant. Lexical problems (escaping,
    unclosed tags) only exist at the document level and are reported by
    `parse` instead.
    """
    return _structural_violations(trajectory)


# ---------------------------------------------------------------------------
# serialization

def _render_item(item: Item) -> str:
    if isinstance(item, ThinkBlock):
        return f"<think>{neutralize(item.text)}</think>"
    if isinstance(item, ActionCall):
        return (
            f'<act id="{item.id}" name="{item.name}" scope="{item.scope.value}">'
            f"{neutralize(canonical_args(item.args_dict))}</act>"
        )
    if isinstance(item, ActionResult):
        return f'<result id="{item.call_id}" status="{item.status.value}">{item.payload}</result>'
    if isinstance(item, AnswerBlock):
        return f"<answer>{neutralize(item.text)}</answer>"
    raise InvalidTrajectoryError(f"unknown item type {type(item).__name__}")


def serialize_with_spans(
    trajectory: Trajectory, check: bool = True
) -> tuple[str, list[tuple[Item, tuple[int, int]]]]:
    """Serialize and report each item's byte span in the output document.

    Canonical form: one element per line, single newline separators, stable
    across runs. With ``check`` the trajectory must be violation-free.
    """
    if check:
        problems = validate(trajectory)
        if problems:
            raise InvalidTrajectoryError(
                f"trajectory breaks {len(problems)} invariant(s): {problems[0].note}")
    parts: list[str] = []
    spans: list[tuple[Item, tuple[int, int]]] = []
    offset = 0
    for turn in trajectory.turns:
        for item in turn.items:
            rendered = _render_item(item)
            if parts:
                offset += 1  # newline separator
            start = offset
            offset += len(rendered.encode("utf-8"))
            parts.append(rendered)
            spans.append((item, (start, offset)))
    return "\n".join(parts), spans


def serialize(trajectory: Trajectory, check: bool = True) -> str:
    """Canonical document text; `parse` of the output reproduces the input
    (for violation-free trajectories in canonical turn grouping)."""
    text, _ = serialize_with_spans(trajectory, check=check)
    return text


# ---------------------------------------------------------------------------
# mutation (test corpus synthesis)

def _element_spans(doc: str) -> list[tuple[TagName, int, int]]:
    scanner = _Scanner(doc)
    scanner.run()
    return [(el.tag, el.span[0], el.span[1]) for el in scanner.elements]


def _closer_len(tag: TagName) -> int:
    return len(f"</{tag.value}>")


def _inject(doc: str, kind: ViolationKind, rng: random.Random) -> str | None:
    """Apply one text-level edit that produces `kind`, or None if the
    document shape does not support it."""
    spans = _element_spans(doc)

    def insertion_points() -> list[int]:
        pts = [0] + [end for _, _, end in spans] + [len(doc)]
        return sorted(set(pts))

    if kind is ViolationKind.UNCLOSED_TAG:
        if not spans:
            return doc + "<think>left open"
        tag, start, end = rng.choice(spans)
        return doc[: end - _closer_len(tag)] + doc[end:]

    if kind is ViolationKind.UNKNOWN_TAG:
        at = rng.choice(insertion_points())
        return doc[:at] + "<mystery>" + doc[at:]

    if kind is ViolationKind.ACT_OUTSIDE_THINK_TURN:
        # preferred: strip the thinking that precedes an existing call
        for i, (tag, start, end) in enumerate(spans):
            if tag is TagName.ACT:
                think_spans = []
                for ptag, pstart, pend in reversed(spans[:i]):
                    if ptag is TagName.THINK:
                        think_spans.append((pstart, pend))
                    else:
                        break
                if think_spans:
                    cut = doc
                    for tstart, tend in think_spans:
                        cut = cut[:tstart] + cut[tend:]
                    return cut
        max_id = _max_call_id(doc)
        return doc + f'\n<act id="{max_id + 1}" name="noop" scope="local">{{}}</act>'

    if kind is ViolationKind.MISSING_ANSWER:
        answers = [(s, e) for tag, s, e in spans if tag is TagName.ANSWER]
        if not answers:
            return None
        start, end = answers[-1]
        return doc[:start] + doc[end:]

    if kind is ViolationKind.DUPLICATE_ID:
        acts = [(s, e) for tag, s, e in spans if tag is TagName.ACT]
        if acts:
            start, end = rng.choice(acts)
            return doc[:end] + doc[start:end] + doc[end:]
        dup = '<act id="1" name="noop" scope="local">{}</act>'
        return doc + "\n" + dup + dup

    if kind is ViolationKind.BAD_ESCAPE:
        text_elements = [
            (tag, s, e) for tag, s, e in spans if tag in (TagName.THINK, TagName.ANSWER)
        ]
        if not text_elements:
            return None
        tag, start, end = rng.choice(text_elements)
        opener_end = doc.index(">", start) + 1
        return doc[:opener_end] + " & " + doc[opener_end:]

    if kind is ViolationKind.ORPHAN_RESULT:
        ghost_id = _max_call_id(doc) + 99
        at = rng.choice(insertion_points())
        ghost = f'<result id="{ghost_id}" status="ok">ghost</result>'
        return doc[:at] + ghost + doc[at:]

    if kind is ViolationKind.EMPTY_ANSWER:
        answers = [(s, e) for tag, s, e in spans if tag is TagName.ANSWER]
        if not answers:
            return None
        start, end = answers[-1]
        return doc[:start] + "<answer></answer>" + doc[end:]

    return None


def _max_call_id(doc: str) -> int:
    ids = [int(m.group(1)) for m in re.finditer(r'<act id="(\d+)"', doc)]
    return max(ids, default=0)


def mutate(trajectory: Trajectory, kind: ViolationKind, seed: int) -> str:
    """Produce a document exhibiting at least the requested violation.

    Deterministic for a given (trajectory, kind, seed). The input must be
    violation-free so the synthesized defect is the only class introduced
    intentionally.
    """
    doc = serialize(trajectory)
    rng = random.Random(seed)
    mutated = _inject(doc, kind, rng)
    if mutated is None:
        raise UnsupportedMutationError(
            f"cannot synthesize {kind.value} for this trajectory shape")
    return mutated
