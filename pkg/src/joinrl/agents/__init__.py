"""Reinforcement-learning agents for join ordering."""

from .dqn import (
    DQN_PRESETS,
    DqnConfig,
    DqnVariant,
    ddqn_target,
    ddqn_targets,
    dqn_preset,
    dqn_target,
    dqn_targets,
    n_step_return,
    train_dqn,
)
from .policy import (
    PlannedQuery,
    Policy,
    PolicyError,
    PolicyKind,
    TrainingError,
    TrainingMetrics,
    ensemble_plan,
    load_policy,
    plan_query,
    save_policy,
)
from .ppo import PPO_PRESETS, PpoConfig, clipped_objective, gae, ppo_losses, ppo_preset, train_ppo
from .replay import PrioritizedReplayBuffer, ReplayBuffer, SumTree, Transition, priority_of, sample_batch

PRESETS = {**DQN_PRESETS, **PPO_PRESETS}


def preset(name: str, **overrides):
    """Look up any agent preset by name (``dqn-*``, ``ddqn-*``, ``ppo-*``)."""
    if name in PPO_PRESETS:
        return ppo_preset(name, **overrides)
    return dqn_preset(name, **overrides)


def train(kind: str, env, train_queries, config, seed: int = 0) -> Policy:
    kind = PolicyKind(kind.upper())
    if kind == PolicyKind.PPO:
        return train_ppo(env, train_queries, config, seed)
    variant = DqnVariant.DOUBLE_PER if kind == PolicyKind.DDQN else DqnVariant.VANILLA
    return train_dqn(env, train_queries, config, seed, variant)
