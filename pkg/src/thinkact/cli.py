"""Command-line pipeline: generate data, render references, run episodes,
score transcripts, collect labeled pairs, fit the reward model, optimize
and evaluate policies, and serve the HTTP API.

Exit codes: 0 success, 1 validation error, 2 IO error.
"""

from __future__ import annotations

import hashlib
import json
import sys
from pathlib import Path

import click

from . import training
from .actions import ActionError
from .context import ContextError
from .datasets import (
    ActionTask,
    DataError,
    generate_tasks,
    read_tasks_jsonl,
    render_reference,
    run_scripted_episode,
    to_sft_pair,
    write_tasks_jsonl,
)
from .journal import Journal
from .protocol import ProtocolError, parse, serialize
from .rewards import (
    ConsistencyLabel,
    LabelSource,
    Preferred,
    RewardError,
    TaskKind,
    fit_pairwise,
    model_from_json,
    model_to_json,
    score_trajectory,
)
from .training import TrainingError


class CliError(Exception):
    pass


def _parse_mix(text: str) -> dict[TaskKind, float]:
    mix: dict[TaskKind, float] = {}
    for part in text.split(","):
        if not part.strip():
            continue
        try:
            name, value = part.split("=")
            mix[TaskKind(name.strip())] = float(value)
        except ValueError:
            raise CliError(f"bad mix entry {part!r}; expected kind=fraction") from None
    return mix


def _load_tasks(path: str) -> dict[str, ActionTask]:
    return {t.task_id: t for t in read_tasks_jsonl(path)}


def _doc_id(document: str) -> tuple[str, str]:
    digest = hashlib.sha256(document.encode("utf-8")).hexdigest()
    return digest[:16], digest


@click.group()
def cli():
    """Thinking/action transcript pipeline."""


@cli.command("gen-data")
@click.option("--n", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--mix", default="action=1.0", show_default=True,
              help="comma-separated kind=fraction entries")
@click.option("--out", type=click.Path(), required=True)
def gen_data(n, seed, mix, out):
    """Generate a synthetic task dataset as JSONL."""
    tasks = generate_tasks(n, seed, _parse_mix(mix))
    write_tasks_jsonl(out, tasks)
    click.echo(f"wrote {len(tasks)} tasks to {out}")


@cli.command("render-refs")
@click.option("--tasks", "tasks_path", type=click.Path(exists=False), required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--sft-out", type=click.Path(), default=None,
              help="also write prompt/completion pairs with result masks")
def render_refs(tasks_path, out, sft_out):
    """Render the reference transcript for every task."""
    tasks = read_tasks_jsonl(tasks_path)
    sft_lines = []
    try:
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            for task in tasks:
                reference = render_reference(task)
                document = serialize(reference)
                fh.write(json.dumps({"task_id": task.task_id, "document": document},
                                    sort_keys=True) + "\n")
                if sft_out:
                    pair = to_sft_pair(task, reference)
                    sft_lines.append({"task_id": task.task_id, "prompt": pair.prompt,
                                      "completion": pair.completion,
                                      "mask_spans": [list(s) for s in pair.mask_spans]})
        if sft_out:
            with open(sft_out, "w", encoding="utf-8", newline="\n") as fh:
                for line in sft_lines:
                    fh.write(json.dumps(line, sort_keys=True) + "\n")
    except OSError as exc:
        raise DataError("IO", str(exc)) from exc
    click.echo(f"rendered {len(tasks)} references to {out}")


@cli.command("run-episode")
@click.option("--task", "task_id", required=True)
@click.option("--data-dir", type=click.Path(), required=True)
@click.option("--policy", "policy_ref", default="SCRIPTED", show_default=True)
@click.option("--seed", type=int, default=0)
def run_episode(task_id, data_dir, policy_ref, seed):
    """Run one episode and persist the trajectory in the data directory."""
    data_dir = Path(data_dir)
    tasks = _load_tasks(data_dir / "tasks.jsonl")
    task = tasks.get(task_id)
    if task is None:
        raise CliError(f"unknown task {task_id!r}")
    if policy_ref == "SCRIPTED":
        outcome = run_scripted_episode(task)
        document = serialize(outcome.trajectory)
        timeline = outcome.timeline
    else:
        policy = training.load_policy(data_dir / "checkpoints" / f"{policy_ref}.json")
        batch = training.sample(policy, [task], 1, seed=seed)
        document, timeline = batch.documents[0], []
    traj_id, _ = _doc_id(f"{task.task_id}\n{document}")
    Journal(data_dir / "trajectories.jsonl").append(
        {"op": "put", "id": traj_id, "task_id": task.task_id,
         "document": document, "context_timeline": timeline})
    trajectory, violations = parse(document, task_id=task.task_id)
    breakdown = score_trajectory(trajectory, task, violations=violations, document=document)
    click.echo(json.dumps({"trajectory_id": traj_id,
                           "breakdown": breakdown.to_dict()}, sort_keys=True))


@cli.command("score")
@click.option("--task", "task_id", required=True)
@click.option("--in", "doc_path", type=click.Path(), required=True)
@click.option("--tasks", "tasks_path", type=click.Path(), required=True)
@click.option("--model", "model_path", type=click.Path(), default=None)
def score(task_id, doc_path, tasks_path, model_path):
    """Score a transcript document; prints the reward breakdown as JSON."""
    tasks = _load_tasks(tasks_path)
    task = tasks.get(task_id)
    if task is None:
        raise CliError(f"unknown task {task_id!r}")
    try:
        document = Path(doc_path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError("IO", str(exc)) from exc
    model = None
    if model_path:
        model = model_from_json(Path(model_path).read_text(encoding="utf-8"))
    trajectory, violations = parse(document, task_id=task.task_id)
    breakdown = score_trajectory(trajectory, task, violations=violations,
                                 document=document, preference_model=model)
    click.echo(json.dumps(breakdown.to_dict(), sort_keys=True))


@cli.command("collect")
@click.option("--tasks", "tasks_path", type=click.Path(), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--k", type=int, default=3, show_default=True, help="samples per policy")
@click.option("--pairs-out", type=click.Path(), required=True)
@click.option("--trajectories-out", type=click.Path(), required=True)
def collect(tasks_path, seed, k, pairs_out, trajectories_out):
    """Sample a spread of policies and write oracle-labeled pairs."""
    tasks = read_tasks_jsonl(tasks_path)
    labels = training.collect_labels(tasks, seed=seed, k_per_policy=k)
    documents: dict[str, dict] = {}

    def ref(trajectory) -> dict:
        document = serialize(trajectory, check=False)
        short, full = _doc_id(document)
        documents.setdefault(short, {"id": short, "sha256": full,
                                     "task_id": trajectory.task_id,
                                     "document": document})
        return {"id": short, "sha256": full}

    try:
        with open(pairs_out, "w", encoding="utf-8", newline="\n") as fh:
            for label in labels:
                fh.write(json.dumps({
                    "a": ref(label.trajectory_a), "b": ref(label.trajectory_b),
                    "preferred": label.preferred.value, "source": label.source.value,
                }, sort_keys=True) + "\n")
        with open(trajectories_out, "w", encoding="utf-8", newline="\n") as fh:
            for short in sorted(documents):
                fh.write(json.dumps(documents[short], sort_keys=True) + "\n")
    except OSError as exc:
        raise DataError("IO", str(exc)) from exc
    click.echo(f"wrote {len(labels)} labels over {len(documents)} trajectories")


@cli.command("fit-rm")
@click.option("--pairs", "pairs_path", type=click.Path(), required=True)
@click.option("--trajectories", "traj_path", type=click.Path(), required=True)
@click.option("--l2", type=float, default=1.0, show_default=True)
@click.option("--max-iter", type=int, default=300, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def fit_rm(pairs_path, traj_path, l2, max_iter, out):
    """Fit the pairwise consistency reward model from a label file."""
    try:
        traj_lines = Path(traj_path).read_text(encoding="utf-8").splitlines()
        pair_lines = Path(pairs_path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError("IO", str(exc)) from exc
    by_id: dict[str, dict] = {}
    for line in traj_lines:
        if line.strip():
            record = json.loads(line)
            by_id[record["id"]] = record

    def resolve(ref: dict):
        record = by_id.get(ref["id"])
        if record is None:
            raise DataError("SCHEMA", f"pair references unknown trajectory {ref['id']}")
        if record["sha256"] != ref["sha256"]:
            raise DataError("SCHEMA", f"content hash mismatch for {ref['id']}")
        trajectory, _ = parse(record["document"], task_id=record["task_id"])
        return trajectory

    labels = []
    for line in pair_lines:
        if not line.strip():
            continue
        record = json.loads(line)
        labels.append(ConsistencyLabel(
            trajectory_a=resolve(record["a"]), trajectory_b=resolve(record["b"]),
            preferred=Preferred(record["preferred"]),
            source=LabelSource(record["source"])))
    model = fit_pairwise(labels, l2=l2, max_iter=max_iter)
    try:
        Path(out).write_text(model_to_json(model), encoding="utf-8")
    except OSError as exc:
        raise DataError("IO", str(exc)) from exc
    click.echo(json.dumps({"labels": len(labels),
                           "final_loss": model.fit_meta["final_loss"],
                           "iterations": model.fit_meta["iterations"]}))


@cli.command("optimize")
@click.option("--tasks", "tasks_path", type=click.Path(), required=True)
@click.option("--data-dir", type=click.Path(), required=True)
@click.option("--run-id", default=None, help="defaults to run-<seed>-<iters>")
@click.option("--iters", type=int, default=200, show_default=True)
@click.option("--lr", type=float, default=0.1, show_default=True)
@click.option("--k", type=int, default=4, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--model", "model_path", default="ORACLE", show_default=True,
              help="path to a fitted model file, or ORACLE")
def optimize_cmd(tasks_path, data_dir, run_id, iters, lr, k, seed, model_path):
    """Optimize a policy and write the step log plus a checkpoint."""
    tasks = read_tasks_jsonl(tasks_path)
    if model_path == "ORACLE":
        reward_model = "ORACLE"
    else:
        reward_model = model_from_json(Path(model_path).read_text(encoding="utf-8"))
    run_id = run_id or f"run-{seed}-{iters}"
    run_dir = Path(data_dir) / "runs" / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    config = training.RunConfig(iters=iters, n_tasks=len(tasks), k_per_task=k,
                                lr=lr, seed=seed)
    steps = training.optimize(training.neutral_policy(), tasks, reward_model,
                              iters=iters, lr=lr, seed=seed, k_per_task=k)
    try:
        training.write_steps_jsonl(run_dir / "steps.jsonl", steps)
        (run_dir / "config.json").write_text(json.dumps(config.to_dict(), sort_keys=True),
                                             encoding="utf-8")
        ckpt_dir = Path(data_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        training.save_policy(ckpt_dir / f"{run_id}.json", steps[-1].theta_after)
    except OSError as exc:
        raise DataError("IO", str(exc)) from exc
    click.echo(json.dumps({"run_id": run_id,
                           "first_reward": steps[0].mean_total_reward,
                           "last_reward": steps[-1].mean_total_reward}))


@cli.command("evaluate")
@click.option("--tasks", "tasks_path", type=click.Path(), required=True)
@click.option("--ckpt", "ckpt_path", type=click.Path(), default=None,
              help="policy checkpoint; neutral policy if omitted")
@click.option("--n", type=int, default=4, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def evaluate_cmd(tasks_path, ckpt_path, n, seed):
    """Evaluate a policy; prints per-kind means as JSON."""
    tasks = read_tasks_jsonl(tasks_path)
    policy = training.load_policy(ckpt_path) if ckpt_path else training.neutral_policy()
    summary = training.evaluate(policy, tasks, n=n, seed=seed)
    click.echo(json.dumps(summary.to_dict(), sort_keys=True))


@cli.command("serve")
@click.option("--data-dir", type=click.Path(), required=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8080, show_default=True)
def serve(data_dir, host, port):
    """Serve the HTTP API."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(data_dir), host=host, port=port)


def main() -> None:
    try:
        cli(standalone_mode=False)
    except (DataError,) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2 if exc.code == "IO" else 1)
    except (CliError, ProtocolError, ContextError, ActionError, RewardError,
            TrainingError, click.ClickException) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    except click.Abort:
        sys.exit(1)
    except OSError as exc:
        click.echo(f"io error: {exc}", err=True)
        sys.exit(2)


if __name__ == "__main__":
    main()
