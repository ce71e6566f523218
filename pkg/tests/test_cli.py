import json
import subprocess
import sys

import pytest

SCRIPT = [sys.executable, "-m", "thinkact.cli"]


def run_cli(*args, cwd=None):
    # go through main() so the exit-code contract is what's under test
    code = ("import thinkact.cli, sys; sys.argv = ['thinkact'] + %r; "
            "thinkact.cli.main()" % (list(args),))
    return subprocess.run([sys.executable, "-c", code], capture_output=True,
                          text=True, cwd=cwd)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    result = run_cli("gen-data", "--n", "40", "--seed", "7",
                     "--mix", "action=0.5,reasoning=0.3,other=0.2",
                     "--out", str(root / "tasks.jsonl"))
    assert result.returncode == 0, result.stderr
    return root


def first_task_id(workspace, kind="action"):
    for line in (workspace / "tasks.jsonl").read_text().splitlines():
        record = json.loads(line)
        if record["kind"] == kind:
            return record["task_id"]
    raise AssertionError("no task of kind " + kind)


def test_gen_data_counts(workspace):
    lines = (workspace / "tasks.jsonl").read_text().splitlines()
    assert len(lines) == 40
    kinds = [json.loads(l)["kind"] for l in lines]
    assert kinds.count("action") == 20
    assert kinds.count("reasoning") == 12
    assert kinds.count("other") == 8


def test_gen_data_bad_mix_exits_1(workspace):
    result = run_cli("gen-data", "--n", "5", "--mix", "action=0.9",
                     "--out", str(workspace / "bad.jsonl"))
    assert result.returncode == 1


def test_render_refs_and_score_reference(workspace):
    result = run_cli("render-refs", "--tasks", str(workspace / "tasks.jsonl"),
                     "--out", str(workspace / "refs.jsonl"),
                     "--sft-out", str(workspace / "sft.jsonl"))
    assert result.returncode == 0, result.stderr
    refs = {json.loads(l)["task_id"]: json.loads(l)["document"]
            for l in (workspace / "refs.jsonl").read_text().splitlines()}
    task_id = first_task_id(workspace)
    (workspace / "good.traj").write_text(refs[task_id], encoding="utf-8")
    result = run_cli("score", "--task", task_id, "--in", str(workspace / "good.traj"),
                     "--tasks", str(workspace / "tasks.jsonl"))
    assert result.returncode == 0, result.stderr
    breakdown = json.loads(result.stdout)
    assert breakdown["total"] == 1.0
    assert breakdown["kind"] == "action"
    assert set(breakdown) == {"kind", "format", "consistency", "total"}


def test_score_unknown_task_exits_1(workspace):
    result = run_cli("score", "--task", "ghost", "--in", str(workspace / "good.traj"),
                     "--tasks", str(workspace / "tasks.jsonl"))
    assert result.returncode == 1


def test_score_missing_file_exits_2(workspace):
    result = run_cli("score", "--task", first_task_id(workspace),
                     "--in", str(workspace / "missing.traj"),
                     "--tasks", str(workspace / "tasks.jsonl"))
    assert result.returncode == 2


def test_run_episode_missing_task_exits_1(workspace):
    data_dir = workspace / "data"
    data_dir.mkdir(exist_ok=True)
    (data_dir / "tasks.jsonl").write_text((workspace / "tasks.jsonl").read_text())
    result = run_cli("run-episode", "--task", "missing", "--data-dir", str(data_dir))
    assert result.returncode == 1


def test_run_episode_scripted(workspace):
    data_dir = workspace / "data"
    data_dir.mkdir(exist_ok=True)
    (data_dir / "tasks.jsonl").write_text((workspace / "tasks.jsonl").read_text())
    result = run_cli("run-episode", "--task", first_task_id(workspace),
                     "--data-dir", str(data_dir))
    assert result.returncode == 0, result.stderr
    body = json.loads(result.stdout)
    assert body["breakdown"]["total"] == 1.0
    assert (data_dir / "trajectories.jsonl").exists()


def test_collect_fit_optimize_evaluate_pipeline(workspace):
    small = workspace / "small.jsonl"
    result = run_cli("gen-data", "--n", "6", "--seed", "3", "--mix", "action=1.0",
                     "--out", str(small))
    assert result.returncode == 0
    result = run_cli("collect", "--tasks", str(small), "--seed", "1", "--k", "2",
                     "--pairs-out", str(workspace / "pairs.jsonl"),
                     "--trajectories-out", str(workspace / "trajs.jsonl"))
    assert result.returncode == 0, result.stderr
    assert (workspace / "pairs.jsonl").read_text().strip()

    result = run_cli("fit-rm", "--pairs", str(workspace / "pairs.jsonl"),
                     "--trajectories", str(workspace / "trajs.jsonl"),
                     "--out", str(workspace / "model.json"))
    assert result.returncode == 0, result.stderr
    model = json.loads((workspace / "model.json").read_text())
    assert len(model["weights"]) == 6

    data_dir = workspace / "data"
    data_dir.mkdir(exist_ok=True)
    result = run_cli("optimize", "--tasks", str(small), "--data-dir", str(data_dir),
                     "--run-id", "smoke", "--iters", "5", "--k", "2",
                     "--model", str(workspace / "model.json"))
    assert result.returncode == 0, result.stderr
    steps_file = data_dir / "runs" / "smoke" / "steps.jsonl"
    assert len(steps_file.read_text().splitlines()) == 5
    assert (data_dir / "checkpoints" / "smoke.json").exists()

    result = run_cli("evaluate", "--tasks", str(small),
                     "--ckpt", str(data_dir / "checkpoints" / "smoke.json"),
                     "--n", "2", "--seed", "1")
    assert result.returncode == 0, result.stderr
    summary = json.loads(result.stdout)
    assert "action" in summary["per_kind"]


def test_fit_rm_detects_hash_mismatch(workspace, tmp_path):
    pairs = tmp_path / "pairs.jsonl"
    trajs = tmp_path / "trajs.jsonl"
    trajs.write_text(json.dumps({"id": "x", "sha256": "deadbeef", "task_id": "t",
                                 "document": "<answer>a</answer>"}) + "\n")
    pairs.write_text(json.dumps({
        "a": {"id": "x", "sha256": "WRONG"}, "b": {"id": "x", "sha256": "deadbeef"},
        "preferred": "A", "source": "oracle"}) + "\n")
    result = run_cli("fit-rm", "--pairs", str(pairs), "--trajectories", str(trajs),
                     "--out", str(tmp_path / "m.json"))
    assert result.returncode == 1
