"""Measurements over trained agents and run logs: transfer rates, instinct probes, baselines, traces."""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_checkpoint, read_checkpoint_body
from .config import RunConfig
from .evolution import form_probability
from .policy_net import (
    AgentGenome,
    LearngeneForm,
    build_network,
    init_genome,
    manhattan_change,
    payload_from_flat,
    transplant_learngene,
)
from .ppo import collect_episode, mean_action, train_lifetime
from .terrain import NEW_OBSTACLES, TRAINING_OBSTACLES, TerrainEnv, make_heightfield

ALL_TASKS = tuple(k.value for k in TRAINING_OBSTACLES + NEW_OBSTACLES)


def knowledge_transfer_rate(r_ji: float, r_ii: float, w_i: float) -> float:
    """How much training on task j helps task i, relative to training on i itself."""
    denom = r_ii - w_i
    if denom == 0:
        raise ZeroDivisionError("R_ii equals w_i; transfer rate undefined")
    return (r_ji - w_i) / denom


def bootstrap_ci(values, confidence: float = 0.95, resamples: int = 1000, seed: int = 0) -> tuple[float, float, float]:
    """Percentile bootstrap of the mean: ``(mean, low, high)``."""
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        raise ValueError("bootstrap needs at least two values")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, values.size, size=(resamples, values.size))
    means = values[idx].mean(axis=1)
    alpha = (1.0 - confidence) / 2.0
    mean = float(values.mean())
    low, high = np.quantile(means, [alpha, 1.0 - alpha])
    # percentile bounds can miss the sample mean by rounding on near-constant data
    return mean, float(min(low, mean)), float(max(high, mean))


def cis_disjoint(a: tuple[float, float, float], b: tuple[float, float, float]) -> bool:
    return a[2] < b[1] or b[2] < a[1]


# --- instinct -------------------------------------------------------------------


@dataclass
class InstinctReport:
    trajectory: list[tuple[int, float]]
    forward_distance: float
    control_cost: float
    steps: int


def instinct_probe(genome: AgentGenome, env: TerrainEnv, steps: int, every: int = 50) -> InstinctReport:
    """Mean-action behaviour with learning off; ``genome`` is only read."""
    if steps < every:
        raise ValueError("steps must be >= sampling interval")
    env = TerrainEnv(env.hf, dataclasses.replace(env.dyn, t_end=steps))
    w, b = genome.actor.weights, genome.actor.biases
    obs = env.reset()
    traj = [(0, 0.0)]
    x, cost, t = 0.0, 0.0, 0
    for t in range(1, steps + 1):
        obs, _, done, info = env.step(mean_action(w, b, obs))
        x = info["forward_distance"]
        cost += info["control_cost"]
        if t % every == 0:
            traj.append((t, x))
        if done:
            break
    return InstinctReport(traj, x, cost, t)


# --- baselines ------------------------------------------------------------------


@dataclass
class BaselineResult:
    kind: str
    task: str
    seed: int
    curve: list[float]
    birth: InstinctReport
    genome: AgentGenome
    gene_id: int | None = None


def optimal_form(pool) -> LearngeneForm:
    probs = form_probability(pool)
    return max(pool.forms, key=lambda f: (probs[f], f))


def pick_learngene(pool, seed: int):
    """Sample a resident of the most probable form, proportional to score."""
    form = optimal_form(pool)
    residents = pool.residents(form)
    scores = np.array([n.score for n in residents])
    rng = np.random.default_rng([seed, 17])
    p = scores / scores.sum() if scores.sum() > 0 else np.full(len(residents), 1.0 / len(residents))
    return residents[int(rng.choice(len(residents), p=p))]


def newborn(config: RunConfig, kind: str, seed: int, pool=None, init_method: str | None = None):
    method = init_method or config.evolution.init_method
    genome = init_genome(config.actor_arch, config.critic_arch, method, np.random.default_rng([seed, 3]))
    gene_id = None
    if kind == "learngene":
        if pool is None:
            raise ValueError("learngene baseline needs a pool checkpoint")
        gene = pick_learngene(pool, seed)
        transplant_learngene(gene.payload, genome)
        gene_id = gene.gene_id
    return genome, gene_id


def run_baseline(kind: str, task: str, episodes: int, seed: int, config: RunConfig, pool=None,
                 pretrain_multiple: int = 1, init_method: str | None = None, probe_every: int = 50) -> BaselineResult:
    """Reward curve of one agent: ``scratch``, ``learngene`` or ``pretrain`` (i x lifetime on the combined track)."""
    if kind not in ("scratch", "learngene", "pretrain"):
        raise ValueError(f"unknown baseline kind {kind!r}")
    genome, gene_id = newborn(config, "learngene" if kind == "learngene" else "scratch", seed, pool, init_method)
    if kind == "pretrain":
        combined = TerrainEnv(make_heightfield("combined", seed, config.terrain_scale), config.dynamics)
        train_lifetime(genome, combined, pretrain_multiple * config.evolution.lt, config.ppo, [seed, 5])
    env = TerrainEnv(make_heightfield(task, seed, config.terrain_scale), config.dynamics)
    birth = instinct_probe(genome, env, config.dynamics.t_end, probe_every)
    curve: list[float] = []
    if episodes > 0:
        _, records = train_lifetime(genome, env, episodes, config.ppo, [seed, 11])
        curve = [r.reward for r in records]
    return BaselineResult(kind, str(task), seed, curve, birth, genome, gene_id)


def curve_summary(curves: Sequence[Sequence[float]], seed: int = 0) -> list[tuple[float, float, float]]:
    """Per-episode (mean, low, high) across seeds."""
    arr = np.asarray(curves, dtype=float)
    return [bootstrap_ci(arr[:, e], seed=seed) for e in range(arr.shape[1])]


# --- knowledge transfer ---------------------------------------------------------


@dataclass
class TransferMatrix:
    tasks: list[str]
    entries: np.ndarray
    returns: np.ndarray  # returns[j, i]: trained on j, evaluated on i
    anchors: np.ndarray  # w_i

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["target\\source"] + self.tasks)
            for i, t in enumerate(self.tasks):
                w.writerow([t] + [repr(float(v)) for v in self.entries[i]])


def evaluate(genome: AgentGenome, task: str, seeds: Sequence[int], config: RunConfig) -> float:
    """Mean deterministic-policy episode reward over fresh instances of ``task``."""
    out = []
    for s in seeds:
        env = TerrainEnv(make_heightfield(task, s, config.terrain_scale), config.dynamics)
        out.append(float(collect_episode(genome, env, None, config.dynamics.t_end).rewards.sum()))
    return float(np.mean(out))


def transfer_matrix(config: RunConfig, tasks: Sequence[str] = ALL_TASKS, agents: int = 3, episodes: int | None = None,
                    eval_episodes: int = 5, seed: int = 0) -> TransferMatrix:
    """Train scratch agents per task, then score every (source, target) pair.

    ``w_i`` is the mean training reward at the lifetime midpoint on task i; ``episodes``
    defaults to one lifetime (``lt``).
    """
    tasks = list(tasks)
    episodes = episodes or config.evolution.lt
    trained: dict[str, list[AgentGenome]] = {}
    anchors = np.zeros(len(tasks))
    for i, task in enumerate(tasks):
        trained[task] = []
        mids = []
        for k in range(agents):
            s = seed * 1000 + i * 100 + k
            genome = init_genome(config.actor_arch, config.critic_arch, config.evolution.init_method, s)
            env = TerrainEnv(make_heightfield(task, s, config.terrain_scale), config.dynamics)
            _, records = train_lifetime(genome, env, episodes, config.ppo, s)
            mids.append(records[max(episodes // 2 - 1, 0)].reward)
            trained[task].append(genome)
        anchors[i] = np.mean(mids)
    eval_seeds = [seed * 1000 + 900 + e for e in range(eval_episodes)]
    returns = np.zeros((len(tasks), len(tasks)))
    for j, src in enumerate(tasks):
        for i, dst in enumerate(tasks):
            returns[j, i] = np.mean([evaluate(g, dst, eval_seeds, config) for g in trained[src]])
    entries = np.zeros((len(tasks), len(tasks)))
    for i in range(len(tasks)):
        for j in range(len(tasks)):
            entries[i, j] = knowledge_transfer_rate(returns[j, i], returns[i, i], anchors[i])
    return TransferMatrix(tasks, entries, returns, anchors)


# --- traces from run artifacts --------------------------------------------------


@dataclass
class ConvergenceTrace:
    generations: list[int]
    forms: list[str]
    probabilities: list[dict[str, float]]
    parameter_change: dict[str, dict[int, float]] = field(default_factory=dict)

    def matrix(self) -> np.ndarray:
        return np.array([[row[f] for f in self.forms] for row in self.probabilities])


def form_probability_trace(checkpoints: Sequence) -> ConvergenceTrace:
    if not checkpoints:
        raise FileNotFoundError("no checkpoints given")
    gens, rows, forms = [], [], None
    for path in checkpoints:
        if not Path(path).exists():
            raise FileNotFoundError(f"missing checkpoint {path}")
        state = load_checkpoint(path)
        probs = form_probability(state.pool)
        forms = forms or [f.key for f in state.pool.forms]
        gens.append(state.generation)
        rows.append({f.key: p for f, p in probs.items()})
    return ConvergenceTrace(gens, forms, rows)


def parameter_change_heatmap(events: Sequence[dict], shapes) -> dict[str, dict[int, float]]:
    """form -> generation -> mean over inherited genes of their carriers' mean lifetime change.

    ``shapes`` are the six ``(in, out)`` layer shapes of the learngene network.
    """
    birth = {}
    for ev in events:
        if ev["type"] == "birth":
            birth[ev["gene"]] = ev
    per_gene: dict[tuple[int, int], list[float]] = {}
    form_of: dict[int, str] = {}
    for ev in events:
        if ev["type"] != "carrier":
            continue
        src = birth[ev["gene"]]
        form = LearngeneForm.from_key(src["form"])
        before = payload_from_flat(form, shapes, src["payload"])
        after = payload_from_flat(form, shapes, ev["payload"])
        per_gene.setdefault((ev["gen"], ev["gene"]), []).append(manhattan_change(before, after))
        form_of[ev["gene"]] = src["form"]
    grid: dict[str, dict[int, list[float]]] = {}
    for (gen, gene), changes in per_gene.items():
        grid.setdefault(form_of[gene], {}).setdefault(gen, []).append(float(np.mean(changes)))
    return {f: {g: float(np.mean(v)) for g, v in sorted(cols.items())} for f, cols in sorted(grid.items())}


def heatmap_shapes(checkpoint) -> list[tuple[int, int]]:
    cfg = RunConfig.from_dict(read_checkpoint_body(checkpoint)["config"])
    arch = cfg.actor_arch if cfg.evolution.network == "actor" else cfg.critic_arch
    return build_network(arch)
