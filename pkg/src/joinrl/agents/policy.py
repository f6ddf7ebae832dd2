"""Trained policies: persistence, greedy planning and ensembles."""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from ..neuralnet import Mlp, apply_mask, read_weights, save_weights


class TrainingError(RuntimeError):
    pass


class PolicyError(ValueError):
    pass


class PolicyKind(str, Enum):
    DQN = "DQN"
    DDQN = "DDQN"
    PPO = "PPO"


def config_digest(kind, config: dict) -> str:
    blob = json.dumps({"kind": PolicyKind(kind).value, "config": config}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainingMetrics:
    """Per-interval training series: step, mean loss, mean episode reward, epsilon or entropy."""

    rows: list[dict] = field(default_factory=list)

    def record(self, step: int, losses, episode_rewards, *, epsilon: float | None = None, entropy: float | None = None) -> None:
        self.rows.append({
            "step": step,
            "loss": float(np.mean(losses)) if len(losses) else float("nan"),
            "mean_episode_reward": float(np.mean(episode_rewards)) if len(episode_rewards) else float("nan"),
            "epsilon": "" if epsilon is None else float(epsilon),
            "entropy": "" if entropy is None else float(entropy),
        })

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, ["step", "loss", "mean_episode_reward", "epsilon", "entropy"], lineterminator="\n")
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


@dataclass
class Policy:
    kind: PolicyKind
    net: Mlp
    seed: int
    config: dict
    config_digest: str
    steps: int
    catalog_digest: str
    masking: str = "connected"
    metrics: TrainingMetrics = field(default_factory=TrainingMetrics, repr=False)

    def __post_init__(self):
        self.kind = PolicyKind(self.kind)

    @property
    def n_actions(self) -> int:
        return self.net.n_outputs - (1 if self.kind == PolicyKind.PPO else 0)

    def scores(self, obs: np.ndarray) -> np.ndarray:
        """Q-values (DQN/DDQN) or policy logits (PPO) for one observation."""
        out = self.net.forward(obs)
        return out[..., :-1] if self.kind == PolicyKind.PPO else out

    def meta(self) -> dict:
        return {
            "kind": self.kind.value,
            "seed": self.seed,
            "config": self.config,
            "config_digest": self.config_digest,
            "steps": self.steps,
            "catalog_digest": self.catalog_digest,
            "masking": self.masking,
        }


def save_policy(policy: Policy, path) -> None:
    save_weights(policy.net, path, policy.meta())


def load_policy(path, *, catalog=None) -> Policy:
    net, meta = read_weights(path)
    try:
        policy = Policy(meta["kind"], net, meta["seed"], meta["config"], meta["config_digest"], meta["steps"],
                        meta["catalog_digest"], meta.get("masking", "connected"))
    except KeyError as exc:
        raise PolicyError(f"{path}: policy metadata lacks {exc}") from None
    if config_digest(policy.kind, policy.config) != policy.config_digest:
        raise PolicyError(f"{path}: config digest does not match the stored config")
    if catalog is not None and catalog.digest() != policy.catalog_digest:
        raise PolicyError(f"{path}: trained on catalog {policy.catalog_digest}, got {catalog.digest()}")
    return policy


@dataclass(frozen=True)
class PlannedQuery:
    plan: object
    cost: float
    latency: float  # seconds
    forward_passes: int


def plan_query(policy: Policy, query, env) -> PlannedQuery:
    """Greedy rollout: one network evaluation per join, masked argmax each time."""
    if policy.catalog_digest != env.catalog.digest():
        raise PolicyError("policy was trained on a different catalog")
    start = time.perf_counter()
    outcome = env.reset(query)
    passes = 0
    while not outcome.done:
        scores = policy.scores(outcome.observation.flattened)
        passes += 1
        outcome = env.step(apply_mask(scores, outcome.mask).argmax())
    latency = time.perf_counter() - start
    return PlannedQuery(env.final_plan(), outcome.cost, latency, passes)


def ensemble_plan(policies, query, env) -> tuple[object, float, int]:
    """Plan with every policy and keep the cheapest plan; ties go to the lowest index."""
    if not policies:
        raise PolicyError("ensemble needs at least one policy")
    best = None
    for idx, policy in enumerate(policies):
        planned = plan_query(policy, query, env)
        if best is None or planned.cost < best[1]:
            best = (planned.plan, planned.cost, idx)
    return best
