"""Shared generators for property and fuzz tests."""

from __future__ import annotations

import random
import string

from thinkact.protocol import (
    ActionCall,
    ActionResult,
    AnswerBlock,
    ResultStatus,
    Role,
    Scope,
    ThinkBlock,
    Trajectory,
    Turn,
    neutralize,
    plan_line,
)

_TEXT_ALPHABET = string.ascii_letters + string.digits + " .,:;!?'\"<>&()-_\n"


def random_text(rng: random.Random, max_len: int = 40) -> str:
    return "".join(rng.choice(_TEXT_ALPHABET) for _ in range(rng.randint(0, max_len)))


def random_args(rng: random.Random) -> dict:
    args = {}
    for _ in range(rng.randint(0, 3)):
        key = "k" + "".join(rng.choice(string.ascii_lowercase) for _ in range(3))
        kind = rng.randrange(4)
        if kind == 0:
            args[key] = rng.randint(-100, 100)
        elif kind == 1:
            args[key] = round(rng.uniform(-10, 10), 4)
        elif kind == 2:
            args[key] = rng.choice([True, False])
        else:
            args[key] = random_text(rng, 12)
    return args


def random_trajectory(rng: random.Random) -> Trajectory:
    """A violation-free trajectory in canonical turn grouping.

    Exercises escaping (raw <, >, & in text), PLAN declarations, all result
    statuses, both call scopes, and calls with or without results.
    """
    turns: list[Turn] = []
    next_id = 1
    for _ in range(rng.randint(0, 3)):
        thinks = []
        for _ in range(rng.randint(1, 2)):
            text = random_text(rng)
            if rng.random() < 0.5:
                name = rng.choice(("calc_eval", "mem_get", "probe"))
                text += ("\n" if text else "") + plan_line(name, random_args(rng))
            thinks.append(ThinkBlock.make(text))
        calls = []
        for _ in range(rng.randint(1, 2)):
            calls.append(ActionCall.make(
                next_id,
                rng.choice(("calc_eval", "mem_get", "mem_put", "probe")),
                rng.choice((Scope.GLOBAL, Scope.LOCAL)),
                random_args(rng),
            ))
            next_id += 1
        turns.append(Turn(Role.ASSISTANT, tuple(thinks) + tuple(calls)))
        results = []
        for call in calls:
            if rng.random() < 0.85:
                results.append(ActionResult(
                    call_id=call.id,
                    status=rng.choice(list(ResultStatus)),
                    payload=neutralize(random_text(rng)),
                ))
        if results:
            turns.append(Turn(Role.RUNTIME, tuple(results)))
    closing = [ThinkBlock.make(random_text(rng))] if rng.random() < 0.7 else []
    answer = AnswerBlock(random_text(rng, 20).strip() or "done")
    turns.append(Turn(Role.ASSISTANT, tuple(closing) + (answer,)))
    return Trajectory(task_id=f"task-{rng.randrange(1000)}", turns=tuple(turns), terminal=True)


_FRAGMENTS = (
    "<think>", "</think>", "<act ", "</act>", "<result ", "</result>",
    "<answer>", "</answer>", 'id="1"', 'name="x"', 'scope="local"', 'status="ok"',
    "&lt;", "&amp;", "&gt;", "&", "<", ">", '"', "{", "}", "PLAN: ", "\n", " ",
    "<act id=\"2\" name=\"y\" scope=\"global\">{}</act>", "<mystery>", "</nope>",
)


def random_noise_document(rng: random.Random, max_len: int = 200) -> bytes:
    """Byte noise for totality fuzzing: raw bytes, tag soup, or a blend."""
    mode = rng.randrange(3)
    if mode == 0:
        return bytes(rng.randrange(256) for _ in range(rng.randint(0, max_len)))
    if mode == 1:
        return "".join(rng.choice(_FRAGMENTS)
                       for _ in range(rng.randint(0, 40))).encode("utf-8")
    blend = []
    for _ in range(rng.randint(0, 30)):
        if rng.random() < 0.5:
            blend.append(rng.choice(_FRAGMENTS).encode("utf-8"))
        else:
            blend.append(bytes(rng.randrange(256) for _ in range(rng.randint(1, 6))))
    return b"".join(blend)
