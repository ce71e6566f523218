"""Structured thinking/action transcript engine and desk-scale training loop.

The pieces, bottom up:

- `protocol`: the transcript grammar (think / act / result / answer),
  best-effort parser, canonical serializer, validator, and violation
  synthesis for test corpora.
- `context`: global vs. per-call local thinking context with byte budgets,
  oldest-first eviction, and promotion on scope close.
- `actions`: action registry, security policy (allowlist, schema, rate
  limits), built-in actions, and the newline-JSON wire client, with every
  payload neutralized before it can re-enter a transcript.
- `rewards`: format / consistency / rule / preference components, the
  pairwise preference model, and the per-task-kind composition.
- `datasets`: synthetic task generation with executable gold answers,
  reference transcripts, and SFT prompt/completion pairs.
- `training`: stochastic policy sampling, oracle-labeled pair collection,
  and clipped policy-gradient optimization.
- `service` / `cli`: the HTTP API (episodes, scoring, labeling queue) and
  the pipeline command line.
"""

from . import actions, context, datasets, protocol, rewards, training
from .protocol import Trajectory, parse, serialize, validate
from .rewards import RewardBreakdown, TaskKind, compose, format_reward

__version__ = "0.1.0"

__all__ = [
    "RewardBreakdown",
    "TaskKind",
    "Trajectory",
    "actions",
    "compose",
    "context",
    "datasets",
    "format_reward",
    "parse",
    "protocol",
    "rewards",
    "serialize",
    "training",
    "validate",
]
