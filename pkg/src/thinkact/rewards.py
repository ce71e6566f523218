"""Reward scoring: format conformance, thinking/action consistency, rule
correctness, and learned pairwise preference.

Task kinds compose two components each, equally weighted:

    action     -> format + consistency
    reasoning  -> format + rule
    other      -> format + preference

The consistency oracle measures whether executed calls were declared in the
thinking that immediately precedes them and whether the answer agrees with
the task's expected value; the learned pairwise model predicts the same
ordering from six trajectory-local features, so it can score samples
without ever seeing a gold answer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .protocol import (
    ActionCall,
    ActionResult,
    AnswerBlock,
    ThinkBlock,
    Trajectory,
    Violation,
    ViolationKind,
    serialize,
    unescape_text,
    validate,
)

__all__ = [
    "ConsistencyLabel",
    "FEATURE_NAMES",
    "LabelSource",
    "PENALTIES",
    "PairwiseModel",
    "Preferred",
    "RewardBreakdown",
    "RewardError",
    "TaskKind",
    "compose",
    "consistency_oracle",
    "featurize",
    "fit_pairwise",
    "format_reward",
    "model_from_json",
    "model_to_json",
    "rule_reward",
    "score_pairwise",
]


class RewardError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class TaskKind(Enum):
    ACTION = "action"
    REASONING = "reasoning"
    OTHER = "other"


class Preferred(Enum):
    A = "A"
    B = "B"


class LabelSource(Enum):
    ORACLE = "oracle"
    HUMAN = "human"


PENALTIES: dict[ViolationKind, float] = {
    ViolationKind.UNCLOSED_TAG: 0.4,
    ViolationKind.UNKNOWN_TAG: 0.2,
    ViolationKind.ACT_OUTSIDE_THINK_TURN: 0.2,
    ViolationKind.MISSING_ANSWER: 0.3,
    ViolationKind.DUPLICATE_ID: 0.2,
    ViolationKind.BAD_ESCAPE: 0.1,
    ViolationKind.ORPHAN_RESULT: 0.2,
    ViolationKind.EMPTY_ANSWER: 0.2,
}

_COMPONENTS_BY_KIND: dict[TaskKind, frozenset[str]] = {
    TaskKind.ACTION: frozenset({"format", "consistency"}),
    TaskKind.REASONING: frozenset({"format", "rule"}),
    TaskKind.OTHER: frozenset({"format", "preference"}),
}


@dataclass(frozen=True)
class RewardBreakdown:
    kind: TaskKind
    format: float
    consistency: float | None = None
    rule: float | None = None
    preference: float | None = None
    total: float = 0.0

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind.value, "format": self.format, "total": self.total}
        for name in ("consistency", "rule", "preference"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out


def format_reward(violations: list[Violation]) -> float:
    """1.0 minus the summed per-kind penalties, floored at zero."""
    return max(0.0, 1.0 - sum(PENALTIES[v.kind] for v in violations))


# ---------------------------------------------------------------------------
# consistency

def _nearest_think_decls(turn_items, call_index) -> tuple | None:
    for item in reversed(turn_items[:call_index]):
        if isinstance(item, ThinkBlock):
            return item.declarations
    return None


def _call_declaration_stats(trajectory: Trajectory) -> tuple[int, int]:
    """(declared, executed) over calls that have a result."""
    resulted = {r.call_id for r in trajectory.action_results()}
    declared = 0
    executed = 0
    for turn in trajectory.turns:
        for idx, item in enumerate(turn.items):
            if not isinstance(item, ActionCall) or item.id not in resulted:
                continue
            executed += 1
            decls = _nearest_think_decls(turn.items, idx)
            if decls and any(
                d.action_name == item.name and d.args_digest == item.args_digest
                for d in decls
            ):
                declared += 1
    return declared, executed


def _declared_fraction(trajectory: Trajectory) -> float:
    declared, executed = _call_declaration_stats(trajectory)
    return 1.0 if executed == 0 else declared / executed


def _last_ok_payload(trajectory: Trajectory) -> str | None:
    payload = None
    for result in trajectory.action_results():
        if result.status.value == "ok":
            payload = result.payload
    return None if payload is None else unescape_text(payload)


def consistency_oracle(trajectory: Trajectory, task) -> float:
    """Ground-truth consistency in [0, 1].

    Half the score is the fraction of executed calls declared in the
    immediately preceding think block (1 when there are no executed calls);
    the other half is exact answer agreement with the task's expected value.
    The task only needs a ``gold_answer`` attribute.
    """
    answer = trajectory.answer()
    if answer is None:
        raise RewardError("NOT_TERMINAL", "trajectory has no final answer")
    gold = getattr(task, "gold_answer", None)
    answer_bit = 1.0 if gold is not None and answer.text.strip() == str(gold).strip() else 0.0
    return 0.5 * _declared_fraction(trajectory) + 0.5 * answer_bit


def rule_reward(trajectory: Trajectory, gold: str, numeric_tol: float = 0.0) -> int:
    """1 if the answer matches gold exactly after trimming, or numerically
    within tolerance when both sides parse as numbers; else 0."""
    answer = trajectory.answer()
    if answer is None:
        raise RewardError("NOT_TERMINAL", "trajectory has no final answer")
    got, want = answer.text.strip(), gold.strip()
    if got == want:
        return 1
    try:
        return 1 if abs(float(got) - float(want)) <= numeric_tol else 0
    except ValueError:
        return 0


# ---------------------------------------------------------------------------
# pairwise preference model

FEATURE_NAMES = (
    "declared-fraction",
    "undeclared-act-count",
    "answer-consistency-bit",
    "violation-count",
    "action-count",
    "length-normalized",
)

_LENGTH_NORM_BYTES = 2048.0


def featurize(
    trajectory: Trajectory,
    violations: list[Violation] | None = None,
    document: str | None = None,
) -> np.ndarray:
    """Six trajectory-local features, no gold answers involved.

    The answer-consistency bit compares the final answer against the last
    successful result payload, the model's stand-in for task agreement.
    """
    if violations is None:
        violations = validate(trajectory)
    if document is None:
        document = serialize(trajectory, check=False)
    declared, executed = _call_declaration_stats(trajectory)
    answer = trajectory.answer()
    last_payload = _last_ok_payload(trajectory)
    if answer is None:
        answer_bit = 0.0
    elif last_payload is None:
        answer_bit = 1.0
    else:
        answer_bit = 1.0 if answer.text.strip() == last_payload.strip() else 0.0
    return np.array([
        1.0 if executed == 0 else declared / executed,
        float(executed - declared),
        answer_bit,
        float(len(violations)),
        float(len(trajectory.action_calls())),
        min(1.0, len(document.encode("utf-8")) / _LENGTH_NORM_BYTES),
    ])


@dataclass(frozen=True)
class ConsistencyLabel:
    trajectory_a: Trajectory
    trajectory_b: Trajectory
    preferred: Preferred
    source: LabelSource

    def __post_init__(self):
        if self.trajectory_a == self.trajectory_b:
            raise RewardError("IDENTICAL_PAIR", "label sides must differ")


@dataclass(frozen=True)
class PairwiseModel:
    weights: tuple[float, ...]
    feature_names: tuple[str, ...] = FEATURE_NAMES
    fit_meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.weights) != len(self.feature_names):
            raise RewardError("SHAPE", "one weight per feature required")


def _sigmoid(z: np.ndarray | float):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))


def _softplus(z: np.ndarray):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def fit_pairwise(
    labels: list[ConsistencyLabel],
    l2: float = 1e-3,
    max_iter: int = 200,
) -> PairwiseModel:
    """Fit logistic pairwise preference weights by gradient descent.

    Minimizes sum(log(1 + exp(-(s_preferred - s_other)))) + l2 * ||w||^2
    with backtracking step halving, so the recorded loss never increases.
    """
    if len(labels) < 2:
        raise RewardError("TOO_FEW_LABELS", "need at least 2 labels")
    if l2 <= 0:
        raise RewardError("BAD_L2", "l2 must be positive")
    deltas = np.zeros((len(labels), len(FEATURE_NAMES)))
    for i, label in enumerate(labels):
        fa = featurize(label.trajectory_a)
        fb = featurize(label.trajectory_b)
        deltas[i] = fa - fb if label.preferred is Preferred.A else fb - fa
    if not np.any(np.abs(deltas) > 0):
        raise RewardError("DEGENERATE", "every pair has identical features")

    w = np.zeros(len(FEATURE_NAMES))

    def loss(weights: np.ndarray) -> float:
        return float(np.sum(_softplus(-deltas @ weights)) + l2 * weights @ weights)

    history = [loss(w)]
    step = 1.0
    for _ in range(max_iter):
        margins = deltas @ w
        grad = -(deltas.T @ _sigmoid(-margins)) + 2.0 * l2 * w
        gnorm = float(np.linalg.norm(grad))
        if gnorm < 1e-12:
            break
        current = history[-1]
        while step > 1e-12:
            candidate = w - step * grad
            candidate_loss = loss(candidate)
            if candidate_loss <= current:
                w = candidate
                history.append(candidate_loss)
                step = min(step * 1.5, 1.0)
                break
            step *= 0.5
        else:
            break
    return PairwiseModel(
        weights=tuple(float(x) for x in w),
        fit_meta={"iterations": len(history) - 1, "final_loss": history[-1],
                  "loss_history": history},
    )


def score_pairwise(
    model: PairwiseModel,
    trajectory: Trajectory,
    violations: list[Violation] | None = None,
    document: str | None = None,
) -> float:
    """logistic(w . features(trajectory)) in [0, 1]."""
    features = featurize(trajectory, violations=violations, document=document)
    return float(_sigmoid(np.dot(np.asarray(model.weights), features)))


# ---------------------------------------------------------------------------
# composition

def compose(kind: TaskKind, parts: dict[str, float]) -> RewardBreakdown:
    """Combine exactly the components the task kind requires.

    total = 0.5 * format + 0.5 * (the kind's second component).
    """
    required = _COMPONENTS_BY_KIND[kind]
    extra = set(parts) - required
    if extra:
        raise RewardError("EXTRA_COMPONENT",
                          f"{kind.value} does not take {sorted(extra)}")
    missing = required - set(parts)
    if missing:
        raise RewardError("MISSING_COMPONENT",
                          f"{kind.value} requires {sorted(missing)}")
    for name, value in parts.items():
        if not 0.0 <= float(value) <= 1.0:
            raise RewardError("OUT_OF_RANGE", f"{name}={value} outside [0, 1]")
    if "rule" in parts and float(parts["rule"]) not in (0.0, 1.0):
        raise RewardError("OUT_OF_RANGE", "rule reward must be 0 or 1")
    second = next(iter(required - {"format"}))
    total = 0.5 * float(parts["format"]) + 0.5 * float(parts[second])
    return RewardBreakdown(
        kind=kind,
        format=float(parts["format"]),
        consistency=parts.get("consistency"),
        rule=parts.get("rule"),
        preference=parts.get("preference"),
        total=total,
    )


def score_trajectory(
    trajectory: Trajectory,
    task,
    violations: list[Violation] | None = None,
    document: str | None = None,
    preference_model: PairwiseModel | None = None,
) -> RewardBreakdown:
    """Full per-kind breakdown for one trajectory.

    The task needs ``kind`` and ``gold_answer`` attributes. Consistency and
    rule components fall back to 0 when the trajectory never answers; the
    preference component is the model score, or a neutral 0.5 without one.
    """
    if violations is None:
        violations = validate(trajectory)
    fmt = format_reward(violations)
    kind = task.kind
    if kind is TaskKind.ACTION:
        try:
            second = consistency_oracle(trajectory, task)
        except RewardError:
            second = 0.0
        return compose(kind, {"format": fmt, "consistency": second})
    if kind is TaskKind.REASONING:
        try:
            second = float(rule_reward(trajectory, task.gold_answer or "", 1e-9))
        except RewardError:
            second = 0.0
        return compose(kind, {"format": fmt, "rule": second})
    pref = (score_pairwise(preference_model, trajectory, violations=violations,
                           document=document)
            if preference_model is not None else 0.5)
    return compose(kind, {"format": fmt, "preference": pref})


# ---------------------------------------------------------------------------
# model persistence

def model_to_json(model: PairwiseModel) -> str:
    meta = {k: v for k, v in model.fit_meta.items() if k != "loss_history"}
    return json.dumps({
        "feature_names": list(model.feature_names),
        "weights": list(model.weights),
        "fit_meta": meta,
    }, sort_keys=True)


def model_from_json(text: str) -> PairwiseModel:
    data = json.loads(text)
    return PairwiseModel(
        weights=tuple(data["weights"]),
        feature_names=tuple(data["feature_names"]),
        fit_meta=data.get("fit_meta", {}),
    )
