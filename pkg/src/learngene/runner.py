"""The generational loop: initialize, train, select, extract, decay, checkpoint."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import RunState, checkpoint_path, load_checkpoint, read_checkpoint_body, save_checkpoint
from .config import RunConfig
from .evolution import (
    MAX_REPLACEMENTS,
    Agent,
    FitnessRecord,
    Winner,
    apply_decay,
    compute_fitness,
    extract_and_replace,
    form_probability,
    inheritance_probability,
    initialize_generation,
    learngene_similarity,
    make_pool,
    normalize_fitness,
    run_tournaments,
)
from .policy_net import AgentGenome, LearngeneForm, extract_learngene
from .ppo import EpisodeRecord, NaNLossError, PPOConfig, train_lifetime
from .terrain import Dynamics, TerrainEnv, make_heightfield

log = logging.getLogger(__name__)

EVOLUTION_STREAM = 2**32 - 1
LOG_FILES = ("episodes.jsonl", "fitness.jsonl", "events.jsonl", "generations.jsonl")


class NaNAbort(RuntimeError):
    def __init__(self, message: str, checkpoint: Path | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


def evolution_rng(master_seed: int, generation: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, generation, EVOLUTION_STREAM]))


def train_agent(agent: Agent, lt: int, ppo: PPOConfig, dynamics: Dynamics, terrain_scale: float):
    """Lifetime RL for one newborn. Module-level so worker processes can unpickle it."""
    env = TerrainEnv(make_heightfield(agent.task, agent.terrain_seed, terrain_scale), dynamics)
    try:
        genome, records = train_lifetime(agent.genome, env, lt, ppo, agent.train_seed)
    except NaNLossError as exc:
        return agent.agent_id, agent.genome, [], str(exc)
    return agent.agent_id, genome, records, None


def _train_star(args):
    return train_agent(*args)


@dataclass
class RunResult:
    run_dir: Path
    final_checkpoint: Path | None
    generations_run: int
    summaries: list[dict] = field(default_factory=list)


def _append_jsonl(path: Path, rows) -> None:
    with path.open("a") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def read_jsonl(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with path.open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _truncate_logs(log_dir: Path, last_gen: int) -> None:
    for name in LOG_FILES:
        p = log_dir / name
        rows = [r for r in read_jsonl(p) if r["gen"] <= last_gen]
        p.write_text("".join(json.dumps(r) + "\n" for r in rows))


class _Trainer:
    def __init__(self, workers: int):
        self.pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None

    def map(self, jobs):
        if self.pool is None:
            return [train_agent(*j) for j in jobs]
        return list(self.pool.map(_train_star, jobs))

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def run_evolution(config: RunConfig, resume=None,
                  fitness_oracle: Callable[[Agent], list[float]] | Callable | None = None,
                  oracle_factory: Callable | None = None) -> RunResult:
    """Run ``config.evolution.generations`` generations into ``config.output_dir``.

    ``resume`` names a checkpoint to continue from. ``oracle_factory(pool)`` may return
    a callable replacing lifetime RL with synthetic per-episode rewards.
    """
    evo = config.evolution
    run_dir = Path(config.output_dir)
    log_dir = run_dir / "log"
    log_dir.mkdir(parents=True, exist_ok=True)
    config.save(run_dir / "config.json")

    if resume is not None:
        state = load_checkpoint(resume, expected_config=config)
        pool, start = state.pool, state.generation + 1
        _truncate_logs(log_dir, state.generation)
    else:
        pool, start = make_pool(config.evolution, config.actor_arch, config.critic_arch), 0
        for name in LOG_FILES:
            (log_dir / name).write_text("")

    result = RunResult(run_dir, Path(resume) if resume else None, 0)
    if evo.generations == 0 or start >= evo.generations:
        return result

    oracle = fitness_oracle or (oracle_factory(pool) if oracle_factory else None)
    trainer = _Trainer(config.workers) if oracle is None else None
    try:
        for gen in range(start, evo.generations):
            summary = _run_generation(config, pool, gen, oracle, trainer, log_dir, run_dir)
            result.summaries.append(summary)
            result.generations_run += 1
            if (gen + 1) % config.checkpoint_every == 0 or gen == evo.generations - 1:
                result.final_checkpoint = save_checkpoint(RunState(gen, config, pool),
                                                          checkpoint_path(run_dir, gen))
            log.info("generation %d done: best form %s", gen, summary["top_form"])
    finally:
        if trainer is not None:
            trainer.close()
    return result


def _run_generation(config: RunConfig, pool, gen: int, oracle, trainer, log_dir: Path, run_dir: Path) -> dict:
    evo = config.evolution
    agents = initialize_generation(pool, evo, gen, config.actor_arch, config.critic_arch)

    genomes: dict[int, AgentGenome] = {}
    rewards: dict[int, list[float]] = {}
    episode_rows = []
    if oracle is not None:
        for a in agents:
            genomes[a.agent_id] = a.genome
            rewards[a.agent_id] = list(oracle(a))
            episode_rows += [{"gen": gen, "agent_id": a.agent_id, "task": a.task, "e": e, "r_e": r,
                              "forward_distance": None, "control_cost": None, "steps": None}
                             for e, r in enumerate(rewards[a.agent_id])]
    else:
        jobs = [(a, evo.lt, config.ppo, config.dynamics, config.terrain_scale) for a in agents]
        failed = []
        for agent_id, genome, records, err in trainer.map(jobs):
            if err is not None:
                failed.append((agent_id, err))
                continue
            genomes[agent_id] = genome
            rewards[agent_id] = [r.reward for r in records]
            task = agents[agent_id].task
            episode_rows += [_episode_row(gen, agent_id, task, r) for r in records]
        if failed:
            diag = save_checkpoint(RunState(gen - 1, config, pool),
                                   Path(run_dir) / "checkpoints" / f"abort_gen_{gen:04d}.json")
            raise NaNAbort(f"generation {gen}: NaN loss in agents {[a for a, _ in failed]}: {failed[0][1]}", diag)

    events: list[dict] = []
    for a in agents:
        if a.paternal_gene is not None:
            trained = extract_learngene(genomes[a.agent_id], a.inherited.form)
            events.append({"type": "carrier", "gen": gen, "agent": a.agent_id, "gene": a.paternal_gene,
                           "form": a.inherited.form.key, "payload": trained.flat().tolist()})

    fitness = normalize_fitness([FitnessRecord(a.agent_id, a.task, compute_fitness(rewards[a.agent_id], evo.zeta))
                                 for a in agents])
    rng = evolution_rng(evo.master_seed, gen)
    winner_ids, groups = run_tournaments([f.agent_id for f in fitness], [f.normalized for f in fitness], evo.s, rng)
    winners = [Winner(i, genomes[i], fitness[i].normalized, agents[i].paternal_gene) for i in winner_ids]

    info = extract_and_replace(pool, winners, gen, rng, evo.eta, events)
    apply_decay(pool, evo.beta, events, gen)

    form_p = form_probability(pool)
    inherit = inheritance_probability(pool)
    summary = {
        "gen": gen,
        "form_probability": {f.key: p for f, p in form_p.items()},
        "form_probability_error": abs(math.fsum(form_p.values()) - 1.0),
        "extraction_error": max((abs(math.fsum(d.values()) - 1.0) for d in info["extraction"]), default=0.0),
        "inheritance_error": abs(math.fsum(p for _, p in inherit) - 1.0),
        "max_replacements": max(info["replacements"].values(), default=0),
        "residents_per_form": sorted({len(v) for v in pool.slots.values()}),
        "winners": winner_ids,
        "groups": groups,
        "top_form": max(form_p, key=form_p.get).key,
    }
    fitness_rows = [{"gen": gen, "agent_id": f.agent_id, "task": f.task, "raw": f.raw, "normalized": f.normalized,
                     "winner": f.agent_id in winner_ids, "paternal_gene": agents[f.agent_id].paternal_gene}
                    for f in fitness]
    _append_jsonl(log_dir / "episodes.jsonl", episode_rows)
    _append_jsonl(log_dir / "fitness.jsonl", fitness_rows)
    _append_jsonl(log_dir / "events.jsonl", events)
    _append_jsonl(log_dir / "generations.jsonl", [summary])
    return summary


def _episode_row(gen: int, agent_id: int, task: str, r: EpisodeRecord) -> dict:
    return {"gen": gen, "agent_id": agent_id, "task": task, "e": r.episode_index, "r_e": r.reward,
            "forward_distance": r.forward_distance, "control_cost": r.control_cost, "steps": r.steps}


# --- score provenance -----------------------------------------------------------


@dataclass
class ReplayReport:
    passed: bool
    checked: int
    mismatches: list[tuple[int, str]]

    @property
    def offending(self) -> list[int]:
        return sorted({g for g, _ in self.mismatches})

    def __str__(self) -> str:
        if self.passed:
            return f"replay ok: {self.checked} resident scores reproduced"
        lines = [f"replay FAILED: {len(self.offending)} gene(s) disagree"]
        lines += [f"  gene {g}: {why}" for g, why in self.mismatches[:50]]
        return "\n".join(lines)


def _close(a: float, b: float, tol: float) -> bool:
    return abs(a - b) <= tol * max(1.0, abs(b))


def replay_verify(checkpoint, events, eta: float | None = None, beta: float | None = None,
                  tol: float = 1e-9) -> ReplayReport:
    """Recompute every resident score from births, tree links, replacements and decays.

    Ancestor increments are re-derived from the lineage and compared to the logged ones,
    so a dropped or altered increment is caught even when it is numerically tiny.
    """
    body = read_checkpoint_body(checkpoint)
    cfg = RunConfig.from_dict(body["config"])
    eta = cfg.evolution.eta if eta is None else eta
    beta = cfg.evolution.beta if beta is None else beta
    widths = body["pool"]["widths"]
    last_gen = body["generation"]
    if not isinstance(events, list):
        events = read_jsonl(events)

    by_gen: dict[int, dict[str, list]] = {}
    for ev in events:
        if ev["gen"] > last_gen or ev["type"] == "carrier":
            continue
        by_gen.setdefault(ev["gen"], {"birth": [], "increment": [], "replace": [], "decay": []})[ev["type"]].append(ev)

    forms: dict[int, LearngeneForm] = {}
    parent: dict[int, int | None] = {}
    fitness: dict[int, float] = {}
    scores: dict[int, float] = {}
    residents: set[int] = set()
    bad: list[tuple[int, str]] = []

    for gen in sorted(by_gen):
        g = by_gen[gen]
        leaves = []
        for ev in g["birth"]:
            gid = ev["gene"]
            forms[gid] = LearngeneForm.from_key(ev["form"])
            parent[gid] = ev["parent"]
            fitness[gid] = ev["fitness"]
            scores[gid] = ev["fitness"] / sum(widths[i] for i in forms[gid].layer_indices)
            if not _close(scores[gid], ev["score"], tol):
                bad.append((gid, f"birth score {ev['score']!r} != recomputed {scores[gid]!r}"))
            if ev["resident"]:
                residents.add(gid)
            else:
                leaves.append(gid)

        expected = []
        for leaf in leaves:
            child, depth = leaf, 1
            while parent.get(child) is not None:
                anc = parent[child]
                if anc not in forms:
                    bad.append((leaf, f"parent {anc} was never born"))
                    break
                if anc in residents:
                    amount = learngene_similarity(forms[anc], forms[child], widths) * eta ** (depth + 1) * fitness[leaf]
                    if amount != 0.0:
                        scores[anc] += amount
                        expected.append((anc, leaf, depth, amount))
                child, depth = anc, depth + 1
        logged = {}
        for e in g["increment"]:
            key = (e["gene"], e["leaf"], e["depth"])
            if key in logged:
                bad.append((e["gene"], f"gen {gen}: duplicate increment from leaf {e['leaf']}"))
            logged[key] = e["amount"]
        for anc, leaf, depth, amount in expected:
            got = logged.pop((anc, leaf, depth), None)
            if got is None:
                bad.append((anc, f"gen {gen}: increment from leaf {leaf} missing from log"))
            elif not _close(got, amount, tol):
                bad.append((anc, f"gen {gen}: logged increment {got!r} != recomputed {amount!r}"))
        for (anc, leaf, _), _amt in logged.items():
            bad.append((anc, f"gen {gen}: unexplained increment from leaf {leaf}"))

        per_form: dict[str, int] = {}
        for ev in g["replace"]:
            if ev["evicted"] not in residents:
                bad.append((ev["evicted"], f"gen {gen}: evicted gene was not resident"))
            residents.discard(ev["evicted"])
            residents.add(ev["inserted"])
            per_form[ev["form"]] = per_form.get(ev["form"], 0) + 1
        for form_key, n in per_form.items():
            if n > MAX_REPLACEMENTS:
                bad.append((-1, f"gen {gen}: {n} replacements in form {form_key}"))
        for _ in g["decay"]:
            for gid in residents:
                scores[gid] *= 1.0 - beta

    stored = {gene["id"]: gene for gene in body["genes"]}
    pool_ids = {gid for ids in body["pool"]["slots"].values() for gid in ids}
    for gid in sorted(pool_ids ^ residents):
        bad.append((gid, "residency differs between log and checkpoint"))
    for gid in sorted(pool_ids & residents):
        if not _close(scores[gid], stored[gid]["score"], tol):
            bad.append((gid, f"score {stored[gid]['score']!r} != replayed {scores[gid]!r}"))
    return ReplayReport(not bad, len(pool_ids), bad)
