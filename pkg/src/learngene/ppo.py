"""Lifetime learning: rollouts, GAE, and clipped-surrogate PPO on numpy MLPs."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .policy_net import AgentGenome, ParameterSet, backward, forward_cached

LOG_2PI = math.log(2.0 * math.pi)


class NaNLossError(FloatingPointError):
    """Raised when a PPO loss or gradient turns non-finite; the agent is flagged."""


@dataclass(frozen=True)
class PPOConfig:
    discount: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 4
    minibatch: int = 64
    lr: float = 3e-4
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    adam_eps: float = 1e-8
    steps_per_episode_max: int = 500

    def __post_init__(self) -> None:
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must be in (0, 1)")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.clip_eps <= 0 or self.epochs < 1 or self.minibatch < 1:
            raise ValueError("clip_eps, epochs and minibatch must be positive")
        if self.lr < 0 or self.entropy_coef < 0:
            raise ValueError("lr and entropy_coef must be non-negative")
        if self.steps_per_episode_max < 1:
            raise ValueError("steps_per_episode_max must be >= 1")


@dataclass
class EpisodeRecord:
    episode_index: int
    reward: float
    forward_distance: float
    control_cost: float
    steps: int


def step_reward(v_target: float, action, gamma_w: float = 1.0, delta_w: float = 0.05) -> float:
    sq = sum(float(a) * float(a) for a in action)
    return gamma_w * v_target - delta_w * sq


def episode_reward(step_rewards) -> float:
    return float(sum(step_rewards))


def compute_gae(rewards, values, dones, last_value: float, discount: float, gae_lambda: float,
                normalize: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(advantages, returns)``; ``dones[t]`` marks a true terminal after step t.

    ``last_value`` bootstraps a trajectory cut off without a terminal. Returns are
    computed from the raw advantages; ``normalize`` only rescales the advantages.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    n = len(rewards)
    if n == 0:
        raise ValueError("empty trajectory")
    adv = np.zeros(n)
    last = 0.0
    next_value = last_value
    for t in range(n - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + discount * next_value * nonterminal - values[t]
        last = delta + discount * gae_lambda * nonterminal * last
        adv[t] = last
        next_value = values[t]
    returns = adv + values
    if normalize:
        adv = normalize_advantages(adv)
    return adv, returns


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


# --- policy math ----------------------------------------------------------------


def gaussian_log_prob(mean: np.ndarray, log_std: np.ndarray, actions: np.ndarray) -> np.ndarray:
    z = (actions - mean) / np.exp(log_std)
    return -0.5 * (z * z).sum(axis=-1) - log_std.sum() - 0.5 * mean.shape[-1] * LOG_2PI


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self) -> int:
        return len(self.obs)

    def subset(self, idx) -> "Batch":
        return Batch(self.obs[idx], self.actions[idx], self.log_probs[idx], self.advantages[idx], self.returns[idx])


@dataclass
class Gradients:
    actor: ParameterSet
    critic: ParameterSet
    log_std: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return self.actor.weights + self.actor.biases + self.critic.weights + self.critic.biases + [self.log_std]


def genome_arrays(genome: AgentGenome) -> list[np.ndarray]:
    """Parameter arrays in the same order as :meth:`Gradients.arrays`."""
    a, c = genome.actor, genome.critic
    return a.weights + a.biases + c.weights + c.biases + [genome.log_std]


def set_genome_arrays(genome: AgentGenome, arrays: list[np.ndarray]) -> None:
    n = len(genome.actor.weights)
    genome.actor.weights = arrays[0:n]
    genome.actor.biases = arrays[n:2 * n]
    genome.critic.weights = arrays[2 * n:3 * n]
    genome.critic.biases = arrays[3 * n:4 * n]
    genome.log_std = arrays[4 * n]


def ppo_loss_and_grad(genome: AgentGenome, batch: Batch, config: PPOConfig) -> tuple[float, Gradients, dict]:
    """Clipped surrogate + value MSE - entropy bonus, and its exact gradient.

    ``batch.advantages`` are used as given; normalization happens in the caller.
    """
    n = len(batch)
    mean, a_in = forward_cached(genome.actor, batch.obs)
    value, c_in = forward_cached(genome.critic, batch.obs)
    value = value[:, 0]
    log_std = genome.log_std
    inv_var = np.exp(-2.0 * log_std)
    diff = batch.actions - mean
    logp = -0.5 * (diff * diff * inv_var).sum(axis=1) - log_std.sum() - 0.5 * mean.shape[1] * LOG_2PI
    ratio = np.exp(logp - batch.log_probs)
    adv = batch.advantages
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps) * adv
    policy_loss = -np.minimum(unclipped, clipped).mean()
    value_err = value - batch.returns
    value_loss = 0.5 * (value_err * value_err).mean()
    entropy = float((log_std + 0.5 * (LOG_2PI + 1.0)).sum())
    loss = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy

    # d policy_loss / d logp_i; zero where the clipped branch is the binding one
    active = np.where(adv >= 0, ratio <= 1.0 + config.clip_eps, ratio >= 1.0 - config.clip_eps)
    g_logp = -(ratio * adv * active) / n
    g_mean = g_logp[:, None] * diff * inv_var
    g_log_std = (g_logp[:, None] * (diff * diff * inv_var - 1.0)).sum(axis=0) - config.entropy_coef
    g_value = (config.value_coef * value_err / n)[:, None]

    grads = Gradients(backward(genome.actor, a_in, g_mean), backward(genome.critic, c_in, g_value), g_log_std)
    stats = {
        "loss": float(loss),
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": entropy,
        "clip_frac": float((np.abs(ratio - 1.0) > config.clip_eps).mean()),
        "approx_kl": float((batch.log_probs - logp).mean()),
    }
    return float(loss), grads, stats


# --- optimizer ------------------------------------------------------------------


@dataclass
class Adam:
    lr: float
    eps: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            out.append(p - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out


def ppo_update(genome: AgentGenome, batch: Batch, config: PPOConfig, rng: np.random.Generator,
               optimizer: Adam | None = None) -> tuple[AgentGenome, dict]:
    """``config.epochs`` passes of shuffled minibatch Adam steps. Mutates and returns ``genome``."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if optimizer is None:
        optimizer = Adam(config.lr, config.adam_eps)
    batch = Batch(batch.obs, batch.actions, batch.log_probs, normalize_advantages(batch.advantages), batch.returns)
    n = len(batch)
    history = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch):
            mb = batch.subset(order[start:start + config.minibatch])
            loss, grads, stats = ppo_loss_and_grad(genome, mb, config)
            g_arrays = grads.arrays()
            if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in g_arrays):
                raise NaNLossError(f"non-finite PPO loss {loss}")
            norm = math.sqrt(sum(float((g * g).sum()) for g in g_arrays))
            if config.max_grad_norm and norm > config.max_grad_norm:
                g_arrays = [g * (config.max_grad_norm / norm) for g in g_arrays]
            set_genome_arrays(genome, optimizer.step(genome_arrays(genome), g_arrays))
            stats["grad_norm"] = norm
            history.append(stats)
    summary = {k: float(np.mean([h[k] for h in history])) for k in history[0]}
    summary["updates"] = len(history)
    return genome, summary


# --- rollouts -------------------------------------------------------------------


@dataclass
class Rollout:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    control_costs: np.ndarray
    finished: bool
    last_obs: np.ndarray
    forward_distance: float

    @property
    def steps(self) -> int:
        return len(self.rewards)


def mean_action(weights, biases, x):
    last = len(weights) - 1
    for i in range(last):
        x = np.tanh(x @ weights[i] + biases[i])
    return x @ weights[last] + biases[last]


def collect_episode(genome: AgentGenome, env, rng: np.random.Generator | None, max_steps: int) -> Rollout:
    """Run one episode. ``rng=None`` takes the mean action (evaluation mode)."""
    w, b = genome.actor.weights, genome.actor.biases
    std = np.exp(genome.log_std)
    obs = env.reset()
    obs_buf, act_buf, rew_buf, cost_buf = [], [], [], []
    finished = False
    x = 0.0
    for _ in range(max_steps):
        mean = mean_action(w, b, obs)
        action = mean if rng is None else mean + std * rng.standard_normal(mean.shape[0])
        next_obs, r, done, info = env.step(action)
        obs_buf.append(obs)
        act_buf.append(action)
        rew_buf.append(r)
        cost_buf.append(info["control_cost"])
        x = info["forward_distance"]
        obs = next_obs
        if done:
            finished = info["finished"]
            break
    return Rollout(np.array(obs_buf), np.array(act_buf), np.array(rew_buf), np.array(cost_buf),
                   finished, obs, x)


def rollout_batch(genome: AgentGenome, ro: Rollout, config: PPOConfig) -> Batch:
    mean, _ = forward_cached(genome.actor, ro.obs)
    values, _ = forward_cached(genome.critic, np.vstack([ro.obs, ro.last_obs[None, :]]))
    values = values[:, 0]
    last_value = 0.0 if ro.finished else float(values[-1])
    dones = np.zeros(ro.steps)
    dones[-1] = float(ro.finished)
    adv, ret = compute_gae(ro.rewards, values[:-1], dones, last_value, config.discount, config.gae_lambda)
    logp = gaussian_log_prob(mean, genome.log_std, ro.actions)
    return Batch(ro.obs, ro.actions, logp, adv, ret)


def train_lifetime(genome: AgentGenome, env, lt: int, config: PPOConfig, seed,
                   learn: bool = True) -> tuple[AgentGenome, list[EpisodeRecord]]:
    """``lt`` episodes, one PPO update after each. ``genome`` is trained in place."""
    if lt < 1:
        raise ValueError("lifetime must be at least one episode")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    optimizer = Adam(config.lr, config.adam_eps)
    records = []
    for e in range(lt):
        ro = collect_episode(genome, env, rng, config.steps_per_episode_max)
        records.append(EpisodeRecord(e, episode_reward(ro.rewards), ro.forward_distance,
                                     float(ro.control_costs.sum()), ro.steps))
        if learn:
            ppo_update(genome, rollout_batch(genome, ro, config), config, rng, optimizer)
    return genome, records
