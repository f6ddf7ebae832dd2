"""Proximal policy optimization with a masked categorical policy and a shared value head."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, replace

import numpy as np

from ..neuralnet import Adam, Mlp, NetworkError, masked_log_softmax
from .policy import Policy, PolicyKind, TrainingError, TrainingMetrics, config_digest


@dataclass(frozen=True)
class PpoConfig:
    total_steps: int = 200_000
    clip: float = 0.3
    hidden: tuple[int, ...] = (256, 256)
    gamma: float = 1.0
    gae_lambda: float = 0.95
    epochs: int = 4
    minibatch_size: int = 128
    rollout_steps: int = 2048
    vf_coef: float = 0.5
    ent_coef: float = 0.01
    lr: float = 1e-4
    max_grad_norm: float | None = 0.5
    normalize_advantages: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.clip > 0:
            raise ValueError("clip coefficient must be positive")
        if self.total_steps < 1 or self.rollout_steps < 1 or self.epochs < 1 or self.minibatch_size < 1:
            raise ValueError("total_steps, rollout_steps, epochs and minibatch_size must be positive")
        if not 0 < self.gamma <= 1 or not 0 <= self.gae_lambda <= 1:
            raise ValueError("gamma must be in (0, 1] and gae_lambda in [0, 1]")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["hidden"] = list(self.hidden)
        return doc


PPO_PRESETS = {
    "ppo-paper": PpoConfig(total_steps=200_000, clip=0.3, hidden=(256, 256)),
    "ppo-desk": PpoConfig(),
}


def ppo_preset(name: str, **overrides) -> PpoConfig:
    try:
        config = PPO_PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown PPO preset {name!r}; known: {', '.join(PPO_PRESETS)}") from None
    if name == "ppo-paper":
        warnings.warn("preset 'ppo-paper' fixes only the published budget, clip and layer sizes", stacklevel=2)
    return replace(config, **overrides)


def clipped_objective(ratio, advantage, clip: float) -> np.ndarray:
    """Per-sample ``min(r * A, clip(r, 1 - eps, 1 + eps) * A)``."""
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - clip, 1.0 + clip) * advantage)


def gae(rewards, values, dones, last_value: float, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and value targets for one rollout."""
    n = len(rewards)
    adv = np.zeros(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        next_value = last_value if t == n - 1 else values[t + 1]
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
    return adv, adv + np.asarray(values)


@dataclass
class PpoLosses:
    policy_loss: float
    value_loss: float
    entropy: float
    total: float
    grad_out: np.ndarray  # d total / d network outputs
    ratio: np.ndarray


def ppo_losses(obs, actions, masks, advantages, returns, old_log_probs, net: Mlp, config: PpoConfig, acts=None, outputs=None) -> PpoLosses:
    """Clipped surrogate, value and entropy terms for a minibatch, with the output gradient.

    ``total = policy_loss + vf_coef * value_loss - ent_coef * entropy``.
    """
    if outputs is None:
        outputs, acts = net.forward_cached(obs)
    logits, values = outputs[:, :-1], outputs[:, -1]
    masks = np.asarray(masks, dtype=bool)
    logp_all = masked_log_softmax(logits, masks)
    probs = np.where(masks, np.exp(logp_all), 0.0)
    rows = np.arange(len(actions))
    logp = logp_all[rows, actions]
    with np.errstate(over="ignore"):
        ratio = np.exp(logp - old_log_probs)
    if not np.all(np.isfinite(ratio)):
        raise TrainingError("non-finite probability ratio; old log-probabilities are stale")
    adv = np.asarray(advantages, dtype=np.float64)
    objective = clipped_objective(ratio, adv, config.clip)
    policy_loss = -float(objective.mean())
    value_err = values - returns
    value_loss = float(np.mean(value_err**2))
    plogp = np.where(masks, probs * logp_all, 0.0)
    ent_each = -plogp.sum(axis=1)
    entropy = float(ent_each.mean())
    b = len(actions)

    # the unclipped term is the active minimum exactly when r * A <= clip(r) * A
    active = ratio * adv <= np.clip(ratio, 1.0 - config.clip, 1.0 + config.clip) * adv
    d_logp = -(active * ratio * adv) / b
    grad_logits = -probs * d_logp[:, None]
    grad_logits[rows, actions] += d_logp
    # d(-ent_coef * H)/dz_k = ent_coef * p_k * (log p_k + H) / b
    grad_logits += config.ent_coef * (plogp + probs * ent_each[:, None]) / b
    grad_logits = np.where(masks, grad_logits, 0.0)
    grad_out = np.zeros_like(outputs)
    grad_out[:, :-1] = grad_logits
    grad_out[:, -1] = config.vf_coef * 2.0 * value_err / b
    total = policy_loss + config.vf_coef * value_loss - config.ent_coef * entropy
    return PpoLosses(policy_loss, value_loss, entropy, total, grad_out, ratio)


def _sample(logp_row: np.ndarray, mask_row: np.ndarray, rng: np.random.Generator) -> int:
    probs = np.where(mask_row, np.exp(logp_row), 0.0)
    cdf = np.cumsum(probs)
    action = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    valid = np.flatnonzero(mask_row)
    # guard the right edge against round-off
    return action if action < len(mask_row) and mask_row[action] else int(valid[-1])


def train_ppo(env, train_queries, config: PpoConfig, seed: int = 0) -> Policy:
    """On-policy training: collect ``rollout_steps`` transitions, then several epochs of minibatch updates."""
    queries = list(train_queries)
    if not queries:
        raise TrainingError("empty training set")
    seq = np.random.SeedSequence(seed)
    init_seed, stream_seed = seq.spawn(2)
    rng = np.random.default_rng(stream_seed)
    n_actions = env.actions.size
    net = Mlp([env.observation_size, *config.hidden, n_actions + 1], seed=np.random.default_rng(init_seed))
    optimizer = Adam(lr=config.lr, max_grad_norm=config.max_grad_norm)
    metrics = TrainingMetrics()
    invalid = 0
    step = 0
    outcome = env.reset(queries[int(rng.integers(len(queries)))])
    while step < config.total_steps:
        n = min(config.rollout_steps, config.total_steps - step)
        obs = np.zeros((n, env.observation_size))
        masks = np.zeros((n, n_actions), dtype=bool)
        actions = np.zeros(n, dtype=np.int64)
        logps = np.zeros(n)
        values = np.zeros(n)
        rewards = np.zeros(n)
        dones = np.zeros(n, dtype=bool)
        episode_rewards = []
        for t in range(n):
            x = outcome.observation.flattened
            out = net.forward(x)
            logp_row = masked_log_softmax(out[:-1], outcome.mask)
            action = _sample(logp_row, outcome.mask, rng)
            if not outcome.mask[action]:
                invalid += 1
            obs[t], masks[t], actions[t] = x, outcome.mask, action
            logps[t], values[t] = logp_row[action], out[-1]
            outcome = env.step(action)
            rewards[t], dones[t] = outcome.reward, outcome.done
            step += 1
            if outcome.done:
                episode_rewards.append(outcome.reward)
                outcome = env.reset(queries[int(rng.integers(len(queries)))])
        last_value = 0.0 if dones[-1] else float(net.forward(outcome.observation.flattened)[-1])
        adv, returns = gae(rewards, values, dones, last_value, config.gamma, config.gae_lambda)
        if config.normalize_advantages and n > 1:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        losses, entropies = [], []
        for _ in range(config.epochs):
            order = rng.permutation(n)
            for lo in range(0, n, config.minibatch_size):
                idx = order[lo : lo + config.minibatch_size]
                out, acts = net.forward_cached(obs[idx])
                res = ppo_losses(obs[idx], actions[idx], masks[idx], adv[idx], returns[idx], logps[idx], net, config,
                                 acts=acts, outputs=out)
                if not np.isfinite(res.total):
                    raise TrainingError(f"non-finite loss at step {step}")
                try:
                    optimizer.step(net, net.backward(acts, res.grad_out))
                except NetworkError as exc:
                    raise TrainingError(f"update failed at step {step}: {exc}") from exc
                losses.append(res.total)
                entropies.append(res.entropy)
        metrics.record(step, losses, episode_rewards, entropy=float(np.mean(entropies)))

    if invalid:
        raise TrainingError(f"{invalid} masked actions were executed")
    return Policy(PolicyKind.PPO, net, seed, config.to_dict(), config_digest(PolicyKind.PPO, config.to_dict()), step,
                  env.catalog.digest(), env.masking.value, metrics)


def masked_entropy(net: Mlp, obs: np.ndarray, mask: np.ndarray) -> float:
    out = net.forward(obs)
    logp = masked_log_softmax(out[..., :-1], mask)
    p = np.where(mask, np.exp(logp), 0.0)
    return float(-(np.where(mask, p * logp, 0.0)).sum(axis=-1).mean())
