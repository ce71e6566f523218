"""HTTP service: episodes, trajectory inspection and scoring, the pairwise
labeling queue, and optimization-run step logs.

All state lives in append-only journals under the data directory, replayed
at startup, so a crash-restart preserves every acknowledged transition.
Queue items are leased for ten minutes by GET /queue/next; a leased item
that is never labeled simply becomes visible again when the lease expires.
Labeling is exactly-once: the first POST wins, later ones get 409.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from pathlib import Path
from typing import Callable, Literal

from fastapi import FastAPI, Response
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import training
from .datasets import ActionTask, read_tasks_jsonl, run_scripted_episode
from .journal import Journal
from .protocol import (
    ActionCall,
    ActionResult,
    AnswerBlock,
    ThinkBlock,
    Trajectory,
    parse,
    serialize,
    unescape_text,
)
from .rewards import PairwiseModel, model_from_json, score_trajectory
from .actions import SecurityPolicy

__all__ = ["create_app", "LEASE_SECONDS", "trajectory_view"]

LEASE_SECONDS = 600.0


# ---------------------------------------------------------------------------
# request bodies

class EpisodeRequest(BaseModel):
    task_id: str
    policy_ref: str = "SCRIPTED"
    seed: int = 0
    limits: dict[str, int] | None = None


class LabelRequest(BaseModel):
    choice: Literal["A", "B"]
    labeler: str = Field(min_length=1)


class EnqueueRequest(BaseModel):
    pair_id: str = Field(min_length=1)
    task_id: str = ""
    trajectory_a: str
    trajectory_b: str


# ---------------------------------------------------------------------------
# views

def _item_view(item) -> dict:
    if isinstance(item, ThinkBlock):
        return {"type": "think", "text": item.text,
                "declarations": [{"action_name": d.action_name,
                                  "args_digest": d.args_digest,
                                  "expected": d.expected} for d in item.declarations]}
    if isinstance(item, ActionCall):
        return {"type": "act", "id": item.id, "name": item.name,
                "scope": item.scope.value, "args": item.args_dict}
    if isinstance(item, ActionResult):
        return {"type": "result", "call_id": item.call_id,
                "status": item.status.value, "payload": unescape_text(item.payload)}
    if isinstance(item, AnswerBlock):
        return {"type": "answer", "text": item.text}
    return {"type": "unknown"}


def trajectory_view(document: str, task_id: str = "") -> dict:
    """Server-side parse tree: the one place grammar logic runs for the UI."""
    trajectory, violations = parse(document, task_id=task_id)
    return {
        "turns": [{"role": turn.role.value,
                   "items": [_item_view(i) for i in turn.items]}
                  for turn in trajectory.turns],
        "violations": [{"kind": v.kind.value, "span": list(v.span), "note": v.note}
                       for v in violations],
        "terminal": trajectory.terminal,
    }


# ---------------------------------------------------------------------------
# state

class _QueueItem:
    __slots__ = ("pair_id", "task_id", "a", "b", "status", "label", "labeler",
                 "labeled_at", "lease_until", "enqueued_at")

    def __init__(self, pair_id: str, task_id: str, a: str, b: str, enqueued_at: float):
        self.pair_id = pair_id
        self.task_id = task_id
        self.a = a
        self.b = b
        self.status = "PENDING"
        self.label: str | None = None
        self.labeler: str | None = None
        self.labeled_at: float | None = None
        self.lease_until = 0.0
        self.enqueued_at = enqueued_at


class _State:
    def __init__(self, data_dir: Path, clock: Callable[[], float]):
        self.data_dir = data_dir
        self.clock = clock
        self.lock = threading.Lock()
        self.tasks: dict[str, ActionTask] = {}
        tasks_file = data_dir / "tasks.jsonl"
        if tasks_file.exists():
            self.tasks = {t.task_id: t for t in read_tasks_jsonl(tasks_file)}
        self.preference_model: PairwiseModel | None = None
        model_file = data_dir / "model.json"
        if model_file.exists():
            self.preference_model = model_from_json(model_file.read_text(encoding="utf-8"))

        self.traj_journal = Journal(data_dir / "trajectories.jsonl")
        self.queue_journal = Journal(data_dir / "queue.jsonl")
        self.trajectories: dict[str, dict] = {}
        for event in self.traj_journal.replay():
            if event.get("op") == "put":
                self.trajectories[event["id"]] = event
        self.queue: dict[str, _QueueItem] = {}
        self.queue_order: list[str] = []
        for event in self.queue_journal.replay():
            self._fold_queue_event(event)

    def _fold_queue_event(self, event: dict) -> None:
        op = event.get("op")
        if op == "enqueue":
            item = _QueueItem(event["pair_id"], event.get("task_id", ""),
                              event["a"], event["b"], event.get("at", 0.0))
            self.queue[item.pair_id] = item
            self.queue_order.append(item.pair_id)
        elif op == "lease":
            item = self.queue.get(event["pair_id"])
            if item is not None:
                item.lease_until = event["until"]
        elif op == "label":
            item = self.queue.get(event["pair_id"])
            if item is not None:
                item.status = "LABELED"
                item.label = event["choice"]
                item.labeler = event.get("labeler")
                item.labeled_at = event.get("at")
        elif op == "skip":
            item = self.queue.get(event["pair_id"])
            if item is not None and item.status == "PENDING":
                item.status = "SKIPPED"

    def put_trajectory(self, task_id: str, document: str, timeline: list[dict]) -> str:
        traj_id = hashlib.sha256(f"{task_id}\n{document}".encode("utf-8")).hexdigest()[:16]
        if traj_id not in self.trajectories:
            event = {"op": "put", "id": traj_id, "task_id": task_id,
                     "document": document, "context_timeline": timeline}
            self.traj_journal.append(event)
            self.trajectories[traj_id] = event
        return traj_id


def _queue_item_payload(item: _QueueItem, state: _State) -> dict:
    task = state.tasks.get(item.task_id)
    return {
        "pair_id": item.pair_id,
        "task_id": item.task_id,
        "task_instruction": task.instruction if task else "",
        "a": {"document": item.a, "parsed": trajectory_view(item.a, item.task_id)},
        "b": {"document": item.b, "parsed": trajectory_view(item.b, item.task_id)},
    }


# ---------------------------------------------------------------------------
# app factory

def create_app(data_dir: str | Path, clock: Callable[[], float] = time.time) -> FastAPI:
    """Build the service over a data directory.

    The clock is injectable so lease expiry is testable without waiting.
    """
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    state = _State(data_dir, clock)
    app = FastAPI(title="thinkact", version="0.1.0")
    app.state.store = state

    @app.post("/episodes")
    def run_episode(req: EpisodeRequest):
        task = state.tasks.get(req.task_id)
        if task is None:
            return JSONResponse({"error": f"unknown task {req.task_id!r}"}, status_code=404)
        policy_overrides = req.limits or {}
        if req.policy_ref == "SCRIPTED":
            sec = SecurityPolicy(
                allowlist=frozenset({"clock_now", "calc_eval", "mem_get", "mem_put"}),
                max_calls_per_turn=policy_overrides.get("max_calls_per_turn", 16),
                max_calls_per_episode=policy_overrides.get("max_calls_per_episode", 64),
            )
            outcome = run_scripted_episode(task, policy=sec)
            document = serialize(outcome.trajectory, check=False)
            timeline = outcome.timeline
        else:
            ckpt = data_dir / "checkpoints" / f"{req.policy_ref}.json"
            if not ckpt.exists():
                return JSONResponse({"error": f"unknown policy {req.policy_ref!r}"},
                                    status_code=404)
            policy = training.load_policy(ckpt)
            batch = training.sample(policy, [task], 1, seed=req.seed)
            document = batch.documents[0]
            timeline = []
        trajectory, violations = parse(document, task_id=task.task_id)
        with state.lock:
            traj_id = state.put_trajectory(task.task_id, document, timeline)
        breakdown = score_trajectory(trajectory, task, violations=violations,
                                     document=document,
                                     preference_model=state.preference_model)
        return {"trajectory_id": traj_id, "task_id": task.task_id,
                "violations": [v.kind.value for v in violations],
                "breakdown": breakdown.to_dict()}

    @app.get("/trajectories/{traj_id}")
    def get_trajectory(traj_id: str):
        record = state.trajectories.get(traj_id)
        if record is None:
            return JSONResponse({"error": "unknown trajectory"}, status_code=404)
        return {"id": traj_id, "task_id": record["task_id"],
                "document": record["document"],
                "parsed": trajectory_view(record["document"], record["task_id"]),
                "context_timeline": record.get("context_timeline", [])}

    @app.post("/trajectories/{traj_id}/score")
    def score(traj_id: str):
        record = state.trajectories.get(traj_id)
        if record is None:
            return JSONResponse({"error": "unknown trajectory"}, status_code=404)
        task = state.tasks.get(record["task_id"])
        if task is None:
            return JSONResponse({"error": f"task {record['task_id']!r} not loaded"},
                                status_code=404)
        trajectory, violations = parse(record["document"], task_id=task.task_id)
        breakdown = score_trajectory(trajectory, task, violations=violations,
                                     document=record["document"],
                                     preference_model=state.preference_model)
        return breakdown.to_dict()

    @app.post("/queue/items", status_code=201)
    def enqueue(req: EnqueueRequest):
        with state.lock:
            if req.pair_id in state.queue:
                return JSONResponse({"error": "pair already enqueued"}, status_code=409)
            event = {"op": "enqueue", "pair_id": req.pair_id, "task_id": req.task_id,
                     "a": req.trajectory_a, "b": req.trajectory_b, "at": state.clock()}
            state.queue_journal.append(event)
            state._fold_queue_event(event)
        return {"pair_id": req.pair_id, "status": "PENDING"}

    @app.get("/queue/next")
    def queue_next():
        now = state.clock()
        with state.lock:
            for pair_id in state.queue_order:
                item = state.queue[pair_id]
                if item.status != "PENDING" or item.lease_until > now:
                    continue
                event = {"op": "lease", "pair_id": pair_id, "until": now + LEASE_SECONDS}
                state.queue_journal.append(event)
                state._fold_queue_event(event)
                return _queue_item_payload(item, state)
        return Response(status_code=204)

    @app.post("/queue/{pair_id}/label")
    def label(pair_id: str, req: LabelRequest):
        with state.lock:
            item = state.queue.get(pair_id)
            if item is None:
                return JSONResponse({"error": "unknown pair"}, status_code=404)
            if item.status == "LABELED":
                return JSONResponse({"error": "already labeled", "label": item.label},
                                    status_code=409)
            event = {"op": "label", "pair_id": pair_id, "choice": req.choice,
                     "labeler": req.labeler, "at": state.clock()}
            state.queue_journal.append(event)
            state._fold_queue_event(event)
        return {"pair_id": pair_id, "status": "LABELED", "label": req.choice}

    @app.get("/queue/stats")
    def queue_stats():
        with state.lock:
            counts: dict[str, int] = {"PENDING": 0, "LABELED": 0, "SKIPPED": 0}
            labels = []
            for pair_id in state.queue_order:
                item = state.queue[pair_id]
                counts[item.status] += 1
                if item.status == "LABELED":
                    labels.append({"pair_id": pair_id, "label": item.label,
                                   "labeler": item.labeler})
            return {"counts": counts, "labels": labels}

    @app.get("/runs/{run_id}/steps")
    def run_steps(run_id: str):
        path = data_dir / "runs" / run_id / "steps.jsonl"
        if not path.exists():
            return JSONResponse({"error": "unknown run"}, status_code=404)
        steps = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()
                 if line.strip()]
        return {"run_id": run_id, "steps": steps}

    return app
