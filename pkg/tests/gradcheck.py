"""Central finite-difference check of the PPO loss gradient, shared by unit and acceptance tests."""
from __future__ import annotations

import numpy as np

from learngene.policy_net import NetworkArchitecture, forward, init_genome
from learngene.ppo import Batch, PPOConfig, gaussian_log_prob, genome_arrays, ppo_loss_and_grad


def random_batch(genome, rng, n: int, obs_dim: int, perturb: float = 0.3) -> Batch:
    """Batch whose behaviour log-probs come from a perturbed policy, so ratios differ from 1."""
    obs = rng.normal(size=(n, obs_dim))
    mean = forward(genome.actor, obs)
    actions = mean + np.exp(genome.log_std) * rng.normal(size=mean.shape)
    old = gaussian_log_prob(mean + perturb * rng.normal(size=mean.shape), genome.log_std, actions)
    return Batch(obs, actions, old, rng.normal(size=n), rng.normal(size=n))


def max_relative_error(genome, batch: Batch, config: PPOConfig, h: float = 1e-6) -> float:
    """Worst relative deviation between analytic and central-difference gradients.

    Relative error is ``|a - n| / max(|a| + |n|, 1e-8)`` per coordinate, skipping coordinates
    whose finite-difference stencil straddles a clip boundary (the loss is not differentiable there).
    """
    _, grads, _ = ppo_loss_and_grad(genome, batch, config)
    worst = 0.0
    for arr, g in zip(genome_arrays(genome), grads.arrays()):
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            lp, _, sp = ppo_loss_and_grad(genome, batch, config)
            flat[k] = orig - h
            lm, _, sm = ppo_loss_and_grad(genome, batch, config)
            flat[k] = orig
            if sp["clip_frac"] != sm["clip_frac"]:
                continue
            num = (lp - lm) / (2 * h)
            err = abs(gflat[k] - num) / max(abs(gflat[k]) + abs(num), 1e-8)
            worst = max(worst, err)
    return worst


def width4_genome(seed: int):
    return init_genome(NetworkArchitecture(6, 4, 2), NetworkArchitecture(6, 4, 1), "orthogonal", seed)
