"""Desk-scale training loop: sample transcripts from a parameterized
stochastic policy, label pairs with the consistency oracle, and optimize
the policy against composed rewards with a clipped policy gradient.

The policy is a vector of logits, one Bernoulli per decision the generator
makes: whether to declare each required call in its thinking, whether the
final answer is correct, and whether to inject each violation class into
the emitted document. Every sample's log-probability is the exact sum of
its Bernoulli choices, which keeps the REINFORCE-style gradient exact and
runs bit-identically for a given seed.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field, replace

import numpy as np

from . import actions as act
from .context import ContextStore
from .datasets import ActionTask, task_clock
from .protocol import (
    ActionCall,
    AnswerBlock,
    Role,
    Scope,
    ThinkBlock,
    Trajectory,
    Turn,
    ViolationKind,
    parse,
    plan_line,
    serialize,
)
from .protocol import _inject  # shared violation-synthesis edits
from .rewards import (
    ConsistencyLabel,
    LabelSource,
    PairwiseModel,
    Preferred,
    RewardError,
    TaskKind,
    compose,
    consistency_oracle,
    format_reward,
    rule_reward,
    score_pairwise,
)

__all__ = [
    "DEFAULT_RUN_CONFIG",
    "EvalSummary",
    "OptimStep",
    "PolicyParams",
    "RunConfig",
    "SampleBatch",
    "TEMPLATES",
    "TrainingError",
    "evaluate",
    "load_policy",
    "make_pairs",
    "neutral_policy",
    "optimize",
    "sample",
    "saturated_policy",
    "save_policy",
    "splitmix64",
]

TEMPLATES = ("calc_chain", "clock_lookup", "memory_roundtrip")
VIOLATION_ORDER = tuple(ViolationKind)
N_PARAMS = len(TEMPLATES) + 1 + len(VIOLATION_ORDER)
_ANSWER_IDX = len(TEMPLATES)
_VIOLATION_BASE = len(TEMPLATES) + 1
LOGIT_CLAMP = 50.0


class TrainingError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class PolicyParams:
    theta: tuple[float, ...]
    version: int = 0

    def __post_init__(self):
        if len(self.theta) != N_PARAMS:
            raise TrainingError("SHAPE", f"theta must have {N_PARAMS} entries")
        if not all(math.isfinite(x) for x in self.theta):
            raise TrainingError("NON_FINITE", "theta entries must be finite")
        if any(abs(x) > LOGIT_CLAMP for x in self.theta):
            raise TrainingError("UNCLAMPED", f"logits must stay within +/-{LOGIT_CLAMP}")

    def as_array(self) -> np.ndarray:
        return np.array(self.theta, dtype=np.float64)


def neutral_policy() -> PolicyParams:
    return PolicyParams(theta=(0.0,) * N_PARAMS)


def saturated_policy(good: bool = True) -> PolicyParams:
    """All decisions pinned: declare always/never, answer right/wrong,
    violations never/always."""
    hi, lo = LOGIT_CLAMP, -LOGIT_CLAMP
    declare = (hi if good else lo,) * len(TEMPLATES)
    answer = (hi if good else lo,)
    violations = (lo if good else hi,) * len(VIOLATION_ORDER)
    return PolicyParams(theta=declare + answer + violations)


@dataclass
class SampleBatch:
    trajectories: list[Trajectory]
    logprobs: list[float]
    task_refs: list[str]
    policy_version: int
    documents: list[str] = field(default_factory=list)
    violations: list[list] = field(default_factory=list)
    oracle_scores: list[float] = field(default_factory=list)
    draws: list[list[tuple[int, int]]] = field(default_factory=list)
    task_kinds: list[TaskKind] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.trajectories)


@dataclass(frozen=True)
class OptimStep:
    iteration: int
    mean_total_reward: float
    mean_format: float
    mean_consistency: float
    kl_estimate: float
    theta_after: PolicyParams

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "mean_total_reward": self.mean_total_reward,
            "mean_format": self.mean_format,
            "mean_consistency": self.mean_consistency,
            "kl_estimate": self.kl_estimate,
            "theta_after": list(self.theta_after.theta),
            "policy_version": self.theta_after.version,
        }


def splitmix64(x: int) -> int:
    """SplitMix64 finalizer; deterministic stream splitting for seeds."""
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def _sample_seed(master: int, task_index: int, draw_index: int) -> int:
    return splitmix64(splitmix64(master ^ (task_index << 24)) ^ draw_index)


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def _log_bernoulli(p: float, x: int) -> float:
    p = min(max(p, 1e-15), 1.0 - 1e-15)
    return math.log(p) if x else math.log(1.0 - p)


def _template_index(task: ActionTask) -> int | None:
    if not task.required_actions:
        return None
    first = task.required_actions[0][0]
    if first == "calc_eval":
        return TEMPLATES.index("calc_chain")
    if first == "clock_now":
        return TEMPLATES.index("clock_lookup")
    return TEMPLATES.index("memory_roundtrip")


def _execute_for_sampling(task: ActionTask) -> list:
    """Run the task's required built-ins directly; cheap path for sampling."""
    memory = act.MemoryHandle(ContextStore(budget_bytes=65_536))
    clock = task_clock(task)
    results = []
    for i, (name, args) in enumerate(task.actions_as_dicts()):
        results.append(act.eval_builtin(name, args, call_id=i + 1,
                                        clock=clock, memory=memory))
    return results


def _one_sample(
    task: ActionTask, theta: np.ndarray, rng: random.Random
) -> tuple[Trajectory, str, list, float, float, list[tuple[int, int]]]:
    """Returns (trajectory, document, violations, logprob, oracle, draws)."""
    draws: list[tuple[int, int]] = []
    logprob = 0.0

    def bern(idx: int) -> int:
        nonlocal logprob
        p = _sigmoid(float(theta[idx]))
        x = 1 if rng.random() < p else 0
        draws.append((idx, x))
        logprob += _log_bernoulli(p, x)
        return x

    tmpl = _template_index(task)
    results = _execute_for_sampling(task) if task.required_actions else []

    turns: list[Turn] = []
    for i, (name, args) in enumerate(task.actions_as_dicts()):
        declared = bern(tmpl)
        text = f"Step {i + 1}: considering {name}."
        if declared:
            text += "\n" + plan_line(name, args)
        call = ActionCall.make(i + 1, name,
                               Scope.GLOBAL if name == "mem_put" else Scope.LOCAL, args)
        turns.append(Turn(Role.ASSISTANT, (ThinkBlock.make(text), call)))
        result = results[i]
        turns.append(Turn(Role.RUNTIME, (result,)))

    if task.gold_answer is not None:
        correct = bern(_ANSWER_IDX)
        answer_text = task.gold_answer if correct else f"guess-{rng.randrange(10**9)}"
    else:
        answer_text = f"Acknowledged ({task.task_id})."
    turns.append(Turn(Role.ASSISTANT,
                      (ThinkBlock.make("Wrapping up."), AnswerBlock(answer_text))))
    trajectory = Trajectory(task_id=task.task_id, turns=tuple(turns), terminal=True)
    document = serialize(trajectory)

    injected = False
    for offset, kind in enumerate(VIOLATION_ORDER):
        if bern(_VIOLATION_BASE + offset):
            edited = _inject(document, kind, rng)
            if edited is not None:
                document = edited
                injected = True

    if injected:
        trajectory, violations = parse(document, task_id=task.task_id)
    else:
        violations = []

    try:
        oracle = consistency_oracle(trajectory, task)
    except RewardError:
        oracle = 0.0
    return trajectory, document, violations, logprob, oracle, draws


def sample(
    policy: PolicyParams,
    tasks: list[ActionTask],
    k_per_task: int,
    seed: int,
) -> SampleBatch:
    """k stochastic transcripts per task; bit-identical for a given seed."""
    if not tasks:
        raise TrainingError("EMPTY_TASKS", "need at least one task")
    if k_per_task < 1:
        raise TrainingError("BAD_K", "k_per_task must be >= 1")
    theta = policy.as_array()
    batch = SampleBatch(trajectories=[], logprobs=[], task_refs=[],
                        policy_version=policy.version)
    for ti, task in enumerate(tasks):
        for j in range(k_per_task):
            rng = random.Random(_sample_seed(seed, ti, j))
            traj, doc, violations, logprob, oracle, draws = _one_sample(task, theta, rng)
            batch.trajectories.append(traj)
            batch.logprobs.append(logprob)
            batch.task_refs.append(task.task_id)
            batch.documents.append(doc)
            batch.violations.append(violations)
            batch.oracle_scores.append(oracle)
            batch.draws.append(draws)
            batch.task_kinds.append(task.kind)
    return batch


def merge_batches(batches: list[SampleBatch]) -> SampleBatch:
    """Concatenate batches (e.g. from different policies) into one pool so
    within-task pairs can compare across policies. Version is meaningless
    for a merged pool and recorded as -1."""
    merged = SampleBatch(trajectories=[], logprobs=[], task_refs=[], policy_version=-1)
    for b in batches:
        merged.trajectories.extend(b.trajectories)
        merged.logprobs.extend(b.logprobs)
        merged.task_refs.extend(b.task_refs)
        merged.documents.extend(b.documents)
        merged.violations.extend(b.violations)
        merged.oracle_scores.extend(b.oracle_scores)
        merged.draws.extend(b.draws)
        merged.task_kinds.extend(b.task_kinds)
    return merged


def collect_labels(
    tasks: list[ActionTask],
    seed: int,
    k_per_policy: int = 3,
    n_random_policies: int = 5,
) -> list[ConsistencyLabel]:
    """Oracle-labeled pairs from a spread of policies.

    The pool mixes the neutral policy, random policies, and three clean
    correct-answer policies that differ only in how reliably they declare
    their calls; the last group supplies pairs where declaration is the sole
    difference, which keeps the fitted model sensitive to it instead of
    leaning entirely on answer agreement.
    """
    rng = random.Random(splitmix64(seed))
    batches = [sample(neutral_policy(), tasks, k_per_policy, seed=splitmix64(seed ^ 1))]
    for pi in range(n_random_policies):
        theta = tuple(rng.uniform(-3.0, 3.0) for _ in range(N_PARAMS))
        batches.append(sample(PolicyParams(theta=theta), tasks, k_per_policy,
                              seed=splitmix64(seed ^ (2 + pi))))
    for pi, declare in enumerate((-2.0, 0.0, 2.0)):
        theta = (declare,) * len(TEMPLATES) + (4.0,) + (-4.0,) * len(VIOLATION_ORDER)
        batches.append(sample(PolicyParams(theta=theta), tasks, k_per_policy,
                              seed=splitmix64(seed ^ (100 + pi))))
    return make_pairs(merge_batches(batches))


def make_pairs(batch: SampleBatch) -> list[ConsistencyLabel]:
    """All within-task pairs with distinct oracle scores, higher preferred."""
    by_task: dict[str, list[int]] = {}
    for i, ref in enumerate(batch.task_refs):
        by_task.setdefault(ref, []).append(i)
    labels: list[ConsistencyLabel] = []
    for ref in by_task:
        indices = by_task[ref]
        for a_pos in range(len(indices)):
            for b_pos in range(a_pos + 1, len(indices)):
                ia, ib = indices[a_pos], indices[b_pos]
                sa, sb = batch.oracle_scores[ia], batch.oracle_scores[ib]
                if sa == sb:
                    continue
                labels.append(ConsistencyLabel(
                    trajectory_a=batch.trajectories[ia],
                    trajectory_b=batch.trajectories[ib],
                    preferred=Preferred.A if sa > sb else Preferred.B,
                    source=LabelSource.ORACLE,
                ))
    return labels


# ---------------------------------------------------------------------------
# optimization

def _score_sample(
    batch: SampleBatch, i: int, task: ActionTask,
    reward_model: PairwiseModel | str,
    preference_model: PairwiseModel | None,
) -> tuple[float, float, float]:
    """(total, format, second-component) for sample i."""
    fmt = format_reward(batch.violations[i])
    kind = task.kind
    if kind is TaskKind.ACTION:
        if isinstance(reward_model, PairwiseModel):
            second = score_pairwise(reward_model, batch.trajectories[i],
                                    violations=batch.violations[i],
                                    document=batch.documents[i])
        else:
            second = batch.oracle_scores[i]
        parts = {"format": fmt, "consistency": second}
    elif kind is TaskKind.REASONING:
        try:
            second = float(rule_reward(batch.trajectories[i], task.gold_answer or "", 1e-9))
        except RewardError:
            second = 0.0
        parts = {"format": fmt, "rule": second}
    else:
        model = preference_model or (reward_model if isinstance(reward_model, PairwiseModel) else None)
        second = (score_pairwise(model, batch.trajectories[i],
                                 violations=batch.violations[i],
                                 document=batch.documents[i])
                  if model is not None else 0.5)
        parts = {"format": fmt, "preference": second}
    return compose(kind, parts).total, fmt, second


def _bern_kl(p: float, q: float) -> float:
    p = min(max(p, 1e-12), 1 - 1e-12)
    q = min(max(q, 1e-12), 1 - 1e-12)
    return p * math.log(p / q) + (1 - p) * math.log((1 - p) / (1 - q))


def optimize(
    policy: PolicyParams,
    tasks: list[ActionTask],
    reward_model: PairwiseModel | str,
    iters: int,
    lr: float,
    seed: int,
    k_per_task: int = 4,
    clip: float = 0.2,
    epochs: int = 4,
    preference_model: PairwiseModel | None = None,
) -> list[OptimStep]:
    """Clipped policy-gradient ascent against composed rewards.

    Per iteration: sample a batch, compute advantages against the batch
    mean, then take `epochs` ascent steps of size lr on the clipped
    surrogate, with each sample's importance ratio (new policy vs. the
    sampling policy) clipped to [1-clip, 1+clip] and samples outside the
    trust region contributing no gradient. Logits are clamped to +/-50
    after every step. Pass "ORACLE" as the reward model to score
    consistency with the oracle directly.
    """
    if iters < 1:
        raise TrainingError("BAD_ITERS", "iters must be >= 1")
    if lr < 0:
        raise TrainingError("BAD_LR", "lr must be non-negative")
    if isinstance(reward_model, str) and reward_model != "ORACLE":
        raise TrainingError("BAD_MODEL", "reward_model must be a PairwiseModel or 'ORACLE'")
    task_by_id = {t.task_id: t for t in tasks}
    steps: list[OptimStep] = []
    current = policy
    for it in range(iters):
        theta = current.as_array()
        batch = sample(current, tasks, k_per_task, splitmix64(seed ^ (it + 1)))
        n = len(batch)
        totals = np.zeros(n)
        fmts = np.zeros(n)
        action_oracle: list[float] = []
        for i in range(n):
            task = task_by_id[batch.task_refs[i]]
            total, fmt, _ = _score_sample(batch, i, task, reward_model, preference_model)
            totals[i] = total
            fmts[i] = fmt
            if task.kind is TaskKind.ACTION:
                action_oracle.append(batch.oracle_scores[i])
        if not np.all(np.isfinite(totals)):
            raise TrainingError("DIVERGED", f"non-finite reward at iteration {it}")

        advantages = totals - totals.mean()
        new_theta = theta.copy()
        for _ in range(max(1, epochs)):
            grad = np.zeros(N_PARAMS)
            probs = [_sigmoid(float(z)) for z in new_theta]
            for i in range(n):
                new_logprob = sum(_log_bernoulli(probs[idx], x) for idx, x in batch.draws[i])
                ratio = math.exp(min(max(new_logprob - batch.logprobs[i], -50.0), 50.0))
                if advantages[i] >= 0 and ratio > 1.0 + clip:
                    continue  # surrogate is flat outside the trust region
                if advantages[i] < 0 and ratio < 1.0 - clip:
                    continue
                weight = min(max(ratio, 1.0 - clip), 1.0 + clip) * advantages[i] / n
                for idx, x in batch.draws[i]:
                    grad[idx] += weight * (x - probs[idx])
            new_theta = np.clip(new_theta + lr * grad, -LOGIT_CLAMP, LOGIT_CLAMP)

        kl = sum(_bern_kl(_sigmoid(float(a)), _sigmoid(float(b)))
                 for a, b in zip(theta, new_theta))
        current = PolicyParams(theta=tuple(float(x) for x in new_theta),
                               version=current.version + 1)
        steps.append(OptimStep(
            iteration=it,
            mean_total_reward=float(totals.mean()),
            mean_format=float(fmts.mean()),
            mean_consistency=float(np.mean(action_oracle)) if action_oracle else 0.0,
            kl_estimate=float(kl),
            theta_after=current,
        ))
    return steps


# ---------------------------------------------------------------------------
# evaluation

@dataclass(frozen=True)
class EvalSummary:
    per_kind: dict
    overall_total: float

    def to_dict(self) -> dict:
        return {"per_kind": self.per_kind, "overall_total": self.overall_total}


def evaluate(
    policy: PolicyParams,
    tasks: list[ActionTask],
    n: int,
    seed: int,
    preference_model: PairwiseModel | None = None,
) -> EvalSummary:
    """Pure evaluation with oracle-grade components, no parameter updates.

    Consistency and rule components use ground truth; the preference
    component uses the supplied model, or a neutral 0.5 without one.
    """
    if n < 1:
        raise TrainingError("BAD_N", "n must be >= 1")
    batch = sample(policy, tasks, n, seed)
    task_by_id = {t.task_id: t for t in tasks}
    sums: dict[TaskKind, dict[str, float]] = {}
    counts: dict[TaskKind, int] = {}
    all_totals: list[float] = []
    for i in range(len(batch)):
        task = task_by_id[batch.task_refs[i]]
        total, fmt, second = _score_sample(batch, i, task, "ORACLE", preference_model)
        kind = task.kind
        agg = sums.setdefault(kind, {"format": 0.0, "second": 0.0, "total": 0.0})
        agg["format"] += fmt
        agg["second"] += second
        agg["total"] += total
        counts[kind] = counts.get(kind, 0) + 1
        all_totals.append(total)
    second_name = {TaskKind.ACTION: "consistency", TaskKind.REASONING: "rule",
                   TaskKind.OTHER: "preference"}
    per_kind = {}
    for kind, agg in sums.items():
        c = counts[kind]
        per_kind[kind.value] = {
            "format": agg["format"] / c,
            second_name[kind]: agg["second"] / c,
            "total": agg["total"] / c,
            "count": c,
        }
    return EvalSummary(per_kind=per_kind,
                       overall_total=float(np.mean(all_totals)) if all_totals else 0.0)


# ---------------------------------------------------------------------------
# run configuration and persistence

@dataclass(frozen=True)
class RunConfig:
    iters: int = 200
    n_tasks: int = 32
    k_per_task: int = 4
    lr: float = 0.1
    seed: int = 0
    task_seed: int = 0
    clip: float = 0.2
    mix: dict = field(default_factory=lambda: {"action": 1.0})

    def to_dict(self) -> dict:
        return {"iters": self.iters, "n_tasks": self.n_tasks,
                "k_per_task": self.k_per_task, "lr": self.lr, "seed": self.seed,
                "task_seed": self.task_seed, "clip": self.clip, "mix": dict(self.mix)}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return cls(**data)


DEFAULT_RUN_CONFIG = RunConfig()


def save_policy(path, policy: PolicyParams) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"theta": list(policy.theta), "version": policy.version}, fh)


def load_policy(path) -> PolicyParams:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return PolicyParams(theta=tuple(data["theta"]), version=data.get("version", 0))


def write_steps_jsonl(path, steps: list[OptimStep]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for step in steps:
            fh.write(json.dumps(step.to_dict(), sort_keys=True) + "\n")
