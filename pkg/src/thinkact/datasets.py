"""Synthetic task dataset: generation, reference transcripts, SFT pairs.

Every action task is built so its gold answer is exactly what executing the
required actions in the stub environment produces (the payload of the final
required action), which keeps the whole reward stack checkable without any
human-collected data. The stub environment is deterministic per task: the
clock is fixed from the task seed and memory starts empty.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from typing import Sequence

from . import actions as act
from .context import ContextEntry, ContextStore, close_scope, record as ctx_record
from .protocol import (
    ActionCall,
    ActionResult,
    AnswerBlock,
    Role,
    Scalar,
    Scope,
    ThinkBlock,
    Trajectory,
    Turn,
    plan_line,
    serialize_with_spans,
    validate,
)
from .rewards import TaskKind

import random

__all__ = [
    "ActionTask",
    "DataError",
    "EpisodeOutcome",
    "SftPair",
    "generate_tasks",
    "read_tasks_jsonl",
    "render_reference",
    "run_scripted_episode",
    "task_clock",
    "to_sft_pair",
    "write_tasks_jsonl",
]

CLOCK_BASE = datetime(2024, 1, 1, tzinfo=timezone.utc)


class DataError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class ActionTask:
    task_id: str
    instruction: str
    required_actions: tuple[tuple[str, tuple[tuple[str, Scalar], ...]], ...]
    gold_answer: str | None
    kind: TaskKind
    seed: int

    def actions_as_dicts(self) -> list[tuple[str, dict[str, Scalar]]]:
        return [(name, dict(args)) for name, args in self.required_actions]


@dataclass(frozen=True)
class SftPair:
    prompt: str
    completion: str
    mask_spans: tuple[tuple[int, int], ...]


def task_clock(task: ActionTask) -> act.FixedClock:
    """Deterministic per-task wall clock, derived from the task seed."""
    return act.FixedClock(CLOCK_BASE + timedelta(seconds=task.seed % 31_536_000))


def _freeze_actions(pairs: Sequence[tuple[str, dict[str, Scalar]]]):
    return tuple((name, tuple(sorted(args.items()))) for name, args in pairs)


# ---------------------------------------------------------------------------
# generation

def _apportion(n: int, mix: dict[TaskKind, float]) -> dict[TaskKind, int]:
    total = sum(mix.values())
    if abs(total - 1.0) > 1e-9 or any(f < 0 for f in mix.values()):
        raise DataError("BAD_MIX", f"kind fractions must be non-negative and sum to 1, got {mix}")
    kinds = [k for k in TaskKind if k in mix]
    counts = {k: int(n * mix[k]) for k in kinds}
    leftover = n - sum(counts.values())
    by_remainder = sorted(
        kinds, key=lambda k: (-(n * mix[k] - int(n * mix[k])), list(TaskKind).index(k)))
    for k in by_remainder[:leftover]:
        counts[k] += 1
    return counts


def _gen_calc_chain(rng: random.Random) -> tuple[str, list[tuple[str, dict]], str]:
    steps = rng.randint(1, 3)
    value = float(rng.randint(2, 9))
    exprs = []
    for i in range(steps):
        operand = rng.randint(2, 9)
        op = rng.choice("+-*") if i else "+"
        expr = f"{act.format_number(value)}{op}{operand}"
        value = act.calc_evaluate(expr)
        exprs.append(expr)
    gold = act.format_number(value)
    instruction = (
        "Work the arithmetic chain with the calculator, one expression at a time: "
        + "; ".join(exprs) + ". Report only the final value."
    )
    return instruction, [("calc_eval", {"expr": e}) for e in exprs], gold


def _gen_clock_lookup(task_seed: int) -> tuple[str, list[tuple[str, dict]], str]:
    clock = act.FixedClock(CLOCK_BASE + timedelta(seconds=task_seed % 31_536_000))
    gold = act.eval_builtin("clock_now", {}, clock=clock).payload
    instruction = "Look up the current UTC time and report it exactly as returned."
    return instruction, [("clock_now", {})], gold


def _gen_memory_roundtrip(rng: random.Random) -> tuple[str, list[tuple[str, dict]], str]:
    key = f"note_{rng.randrange(16**6):06x}"
    value = f"v{rng.randrange(100000)}"
    instruction = (
        f"Store the value '{value}' in memory under the key '{key}', read it back, "
        "and report the stored value."
    )
    return instruction, [("mem_put", {"key": key, "value": value}),
                         ("mem_get", {"key": key})], value


_REASONING_SHAPES = (
    ("{a} crates hold {b} jars each, and {c} loose jars sit on the shelf. "
     "How many jars are there in total?", lambda a, b, c: a * b + c),
    ("A courier makes {a} trips carrying {b} parcels per trip, then returns {c} parcels. "
     "How many parcels were delivered?", lambda a, b, c: a * b - c),
    ("{a} teams of {b} runners each enter a relay; {c} more runners join individually. "
     "How many runners take part?", lambda a, b, c: a * b + c),
)

_OTHER_PROMPTS = (
    "Write a one-sentence status update for the project journal.",
    "Suggest a short, friendly subject line for a weekly newsletter.",
    "Draft a two-line note thanking a colleague for their review.",
)


def generate_tasks(n: int, seed: int, mix: dict[TaskKind, float]) -> list[ActionTask]:
    """Deterministic synthetic tasks apportioned across kinds.

    Action tasks draw 1-3 required calls from the built-in templates and
    carry a gold answer that is re-derived by actually executing them;
    generation fails loudly if the two ever disagree.
    """
    if n < 0:
        raise DataError("BAD_MIX", "n must be non-negative")
    counts = _apportion(n, mix)
    rng = random.Random(seed)
    tasks: list[ActionTask] = []
    index = 0
    for kind in TaskKind:
        for _ in range(counts.get(kind, 0)):
            task_seed = rng.getrandbits(32)
            task_id = f"t{seed}-{index:05d}-{kind.value}"
            index += 1
            if kind is TaskKind.ACTION:
                template = rng.choice(("calc", "clock", "memory"))
                if template == "calc":
                    instruction, required, gold = _gen_calc_chain(rng)
                elif template == "clock":
                    instruction, required, gold = _gen_clock_lookup(task_seed)
                else:
                    instruction, required, gold = _gen_memory_roundtrip(rng)
                task = ActionTask(task_id, instruction, _freeze_actions(required),
                                  gold, kind, task_seed)
                produced = _execute_required(task)[-1]
                if produced.status.value != "ok" or produced.payload != gold:
                    raise DataError(
                        "SELF_CHECK",
                        f"task {task_id} gold {gold!r} does not match executed "
                        f"payload {produced.payload!r}")
            elif kind is TaskKind.REASONING:
                shape, fn = _REASONING_SHAPES[rng.randrange(len(_REASONING_SHAPES))]
                a, b, c = rng.randint(2, 9), rng.randint(2, 9), rng.randint(1, 9)
                task = ActionTask(task_id, shape.format(a=a, b=b, c=c), (),
                                  str(fn(a, b, c)), kind, task_seed)
            else:
                prompt = _OTHER_PROMPTS[rng.randrange(len(_OTHER_PROMPTS))]
                task = ActionTask(task_id, prompt, (), None, kind, task_seed)
            tasks.append(task)
    return tasks


# ---------------------------------------------------------------------------
# stub environment execution

def _stub_runtime(task: ActionTask, registry: act.Registry | None = None):
    registry = registry or act.Registry()
    policy = act.SecurityPolicy(allowlist=frozenset(registry.names()),
                                max_calls_per_turn=16, max_calls_per_episode=64)
    memory = act.MemoryHandle(ContextStore(budget_bytes=65_536))
    counters = act.CallCounters()
    return registry, policy, memory, counters, task_clock(task)


def _call_scope(name: str) -> Scope:
    return Scope.GLOBAL if name == "mem_put" else Scope.LOCAL


def _execute_required(task: ActionTask, registry: act.Registry | None = None) -> list[ActionResult]:
    registry, policy, memory, counters, clock = _stub_runtime(task, registry)
    results = []
    for i, (name, args) in enumerate(task.actions_as_dicts()):
        call = ActionCall.make(i + 1, name, _call_scope(name), args)
        counters.begin_turn()
        rec = act.dispatch(registry, policy, call, counters, memory=memory, clock=clock)
        results.append(rec.result)
    return results


@dataclass
class EpisodeOutcome:
    trajectory: Trajectory
    records: list[act.DispatchRecord]
    timeline: list[dict]
    store: ContextStore


def run_scripted_episode(
    task: ActionTask,
    registry: act.Registry | None = None,
    policy: act.SecurityPolicy | None = None,
    external: act.ExternalClient | None = None,
) -> EpisodeOutcome:
    """Play the task's reference script through the full dispatch stack.

    Each required call gets its own thinking turn declaring it, the result
    payload is recorded into the thinking context under the call's scope,
    and local scopes are closed after their result lands. The timeline logs
    every context transition for inspection.
    """
    registry = registry or act.Registry()
    for name, _ in task.required_actions:
        if registry.get(name) is None:
            raise DataError("UNSATISFIABLE", f"required action {name!r} is not registered")
    if policy is None:
        policy = act.SecurityPolicy(allowlist=frozenset(registry.names()),
                                    max_calls_per_turn=16, max_calls_per_episode=64)
    memory = act.MemoryHandle(ContextStore(budget_bytes=65_536))
    counters = act.CallCounters()
    clock = task_clock(task)

    turns: list[Turn] = []
    records: list[act.DispatchRecord] = []
    timeline: list[dict] = []
    turn_index = 0
    for i, (name, args) in enumerate(task.actions_as_dicts()):
        call = ActionCall.make(i + 1, name, _call_scope(name), args)
        think = ThinkBlock.make(
            f"Step {i + 1}: run {name} next.\n{plan_line(name, args)}")
        turns.append(Turn(Role.ASSISTANT, (think, call)))
        counters.begin_turn()
        memory.turn_index = turn_index
        before_global = {e.key for e in memory.store.global_entries}
        rec = act.dispatch(registry, policy, call, counters,
                           memory=memory, clock=clock, external=external)
        records.append(rec)
        for entry in memory.store.global_entries:
            if entry.key not in before_global:
                timeline.append({"event": "recorded", "scope": "global", "key": entry.key,
                                 "call_id": call.id, "turn_index": turn_index})
        turns.append(Turn(Role.RUNTIME, (rec.result,)))
        turn_index += 2
        result_key = f"result_{call.id}"
        entry = ContextEntry(key=result_key, value=rec.result.payload, scope=call.scope,
                             origin_call_id=call.id, turn_index=turn_index - 1)
        memory.store = ctx_record(memory.store, entry)
        timeline.append({"event": "recorded", "scope": call.scope.value, "key": result_key,
                         "call_id": call.id, "turn_index": turn_index - 1})
        if call.scope is Scope.LOCAL:
            memory.store = close_scope(memory.store, call.id, [])
            timeline.append({"event": "scope_closed", "call_id": call.id,
                             "turn_index": turn_index - 1})
    answer_text = task.gold_answer if task.gold_answer is not None else f"Acknowledged ({task.task_id})."
    closing = "I have what I need; answering now." if task.required_actions \
        else "No tool work needed; answering directly."
    turns.append(Turn(Role.ASSISTANT, (ThinkBlock.make(closing), AnswerBlock(answer_text))))
    trajectory = Trajectory(task_id=task.task_id, turns=tuple(turns), terminal=True)
    for key in memory.store.eviction_audit:
        timeline.append({"event": "evicted", "scope": "global", "key": key})
    return EpisodeOutcome(trajectory=trajectory, records=records,
                          timeline=timeline, store=memory.store)


def render_reference(task: ActionTask, registry: act.Registry | None = None) -> Trajectory:
    """The dataset's demonstration transcript for a task.

    Violation-free by construction: every required call is declared in the
    think block right before it, executed in order, and the answer is gold.
    """
    outcome = run_scripted_episode(task, registry=registry)
    problems = validate(outcome.trajectory)
    if problems:
        raise DataError("SELF_CHECK",
                        f"reference for {task.task_id} is invalid: {problems[0].note}")
    return outcome.trajectory


def to_sft_pair(task: ActionTask, reference: Trajectory) -> SftPair:
    """Prompt/completion pair with runtime-authored regions masked.

    The mask spans cover exactly the result elements in the canonical
    serialization, so environment text is never a training target.
    """
    if reference.task_id != task.task_id:
        raise DataError("MISMATCH",
                        f"reference is for {reference.task_id!r}, task is {task.task_id!r}")
    completion, spans = serialize_with_spans(reference)
    masks = tuple(span for item, span in spans if isinstance(item, ActionResult))
    return SftPair(prompt=task.instruction, completion=completion, mask_spans=masks)


# ---------------------------------------------------------------------------
# JSONL persistence (closed schema)

_TASK_FIELDS = {"task_id", "instruction", "required_actions", "gold_answer", "kind", "seed"}
_ACTION_FIELDS = {"name", "args"}


def _task_to_record(task: ActionTask) -> dict:
    return {
        "task_id": task.task_id,
        "instruction": task.instruction,
        "required_actions": [{"name": name, "args": dict(args)}
                             for name, args in task.required_actions],
        "gold_answer": task.gold_answer,
        "kind": task.kind.value,
        "seed": task.seed,
    }


def _task_from_record(data: dict, lineno: int) -> ActionTask:
    if not isinstance(data, dict):
        raise DataError("SCHEMA", f"line {lineno}: record is not an object")
    if set(data) != _TASK_FIELDS:
        raise DataError("SCHEMA",
                        f"line {lineno}: fields {sorted(set(data) ^ _TASK_FIELDS)} unexpected "
                        "or missing")
    if not isinstance(data["task_id"], str) or not isinstance(data["instruction"], str):
        raise DataError("SCHEMA", f"line {lineno}: task_id and instruction must be strings")
    if data["gold_answer"] is not None and not isinstance(data["gold_answer"], str):
        raise DataError("SCHEMA", f"line {lineno}: gold_answer must be a string or null")
    if not isinstance(data["seed"], int) or isinstance(data["seed"], bool):
        raise DataError("SCHEMA", f"line {lineno}: seed must be an integer")
    try:
        kind = TaskKind(data["kind"])
    except ValueError:
        raise DataError("SCHEMA", f"line {lineno}: unknown kind {data['kind']!r}") from None
    actions = []
    if not isinstance(data["required_actions"], list):
        raise DataError("SCHEMA", f"line {lineno}: required_actions must be a list")
    for item in data["required_actions"]:
        if not isinstance(item, dict) or set(item) != _ACTION_FIELDS:
            raise DataError("SCHEMA", f"line {lineno}: bad required_actions entry {item!r}")
        if not isinstance(item["name"], str) or not isinstance(item["args"], dict):
            raise DataError("SCHEMA", f"line {lineno}: bad required_actions entry {item!r}")
        for k, v in item["args"].items():
            if not isinstance(k, str) or not isinstance(v, (str, int, float, bool)):
                raise DataError("SCHEMA", f"line {lineno}: args must map strings to scalars")
        actions.append((item["name"], item["args"]))
    return ActionTask(
        task_id=data["task_id"],
        instruction=data["instruction"],
        required_actions=_freeze_actions(actions),
        gold_answer=data["gold_answer"],
        kind=kind,
        seed=data["seed"],
    )


def write_tasks_jsonl(path, tasks: list[ActionTask]) -> None:
    """One task per line, ordered by task_id, LF endings, UTF-8."""
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for task in sorted(tasks, key=lambda t: t.task_id):
                fh.write(json.dumps(_task_to_record(task), sort_keys=True) + "\n")
    except OSError as exc:
        raise DataError("IO", f"cannot write {path}: {exc}") from exc


def read_tasks_jsonl(path) -> list[ActionTask]:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DataError("IO", f"cannot read {path}: {exc}") from exc
    tasks = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except ValueError as exc:
            raise DataError("SCHEMA", f"line {lineno}: not valid JSON: {exc}") from None
        tasks.append(_task_from_record(data, lineno))
    return tasks
