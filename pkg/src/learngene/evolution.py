"""Fitness, tournaments, the Gene Pool / Gene Tree, and learngene extraction and inheritance."""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Iterable, Sequence

import numpy as np

from .policy_net import (
    AgentGenome,
    LearngeneForm,
    LearngenePayload,
    N_LAYERS,
    NetworkArchitecture,
    extract_learngene,
    form_layer_widths,
    init_genome,
    transplant_learngene,
)
from .terrain import TRAINING_OBSTACLES

MAX_REPLACEMENTS = 2


@dataclass(frozen=True)
class EvolutionConfig:
    n_p: int = 50
    s: int = 3
    lt: int = 50
    zeta: float = 1000.0
    rho_max: int = 7
    eta: float = 0.1
    beta: float = 0.02
    m: int = 4
    network: str = "actor"
    n_l: int = 2
    generations: int = 100
    master_seed: int = 0
    init_method: str = "orthogonal"

    def __post_init__(self) -> None:
        if self.s < 2:
            raise ValueError("tournament size s must be >= 2")
        if self.n_p < self.s:
            raise ValueError("population n_p must be >= s")
        if not 1 <= self.n_l <= N_LAYERS - 1:
            raise ValueError("n_l must be in [1, 5]")
        if self.lt < 1 or self.rho_max < 1 or self.generations < 0:
            raise ValueError("lt, rho_max must be >= 1 and generations >= 0")
        if not 1 <= self.m <= len(TRAINING_OBSTACLES):
            raise ValueError(f"m must be in [1, {len(TRAINING_OBSTACLES)}]")
        if not 0.0 <= self.beta < 1.0 or self.eta < 0:
            raise ValueError("beta must be in [0, 1) and eta >= 0")
        if self.network not in ("actor", "critic"):
            raise ValueError("network must be 'actor' or 'critic'")


def all_forms(network: str, n_l: int) -> list[LearngeneForm]:
    return [LearngeneForm(network, c) for c in combinations(range(N_LAYERS), n_l)]


# --- fitness and tournaments ----------------------------------------------------


def compute_fitness(rewards: Sequence[float], zeta: float) -> float:
    """Mean lifetime episode reward plus the positivity offset."""
    if len(rewards) == 0:
        raise ValueError("fitness needs at least one episode")
    return float(sum(rewards) / len(rewards) + zeta)


@dataclass
class FitnessRecord:
    agent_id: int
    task: str
    raw: float
    normalized: float = float("nan")


def normalize_fitness(records: list[FitnessRecord]) -> list[FitnessRecord]:
    """Per-task min-max scaling times the population mean fitness (fills ``normalized``)."""
    if not records:
        return records
    mean_all = sum(r.raw for r in records) / len(records)
    by_task: dict[str, list[float]] = {}
    for r in records:
        by_task.setdefault(r.task, []).append(r.raw)
    bounds = {t: (min(v), max(v)) for t, v in by_task.items()}
    for r in records:
        lo, hi = bounds[r.task]
        unit = 0.5 if hi == lo else (r.raw - lo) / (hi - lo)
        r.normalized = unit * mean_all
    return records


def n_tournaments(n_p: int, s: int) -> int:
    return -(-n_p // s)


def run_tournaments(agent_ids: Sequence[int], fitness: Sequence[float], s: int,
                    rng: np.random.Generator) -> tuple[list[int], list[list[int]]]:
    """Shuffle, chunk into groups of ``s`` (last may be short); the max-fitness member wins.

    Ties go to the lower agent id. Returns ``(winners, groups)``.
    """
    order = rng.permutation(len(agent_ids))
    by_id = dict(zip(agent_ids, fitness))
    groups = [[agent_ids[i] for i in order[k:k + s]] for k in range(0, len(order), s)]
    winners = [min(g, key=lambda a: (-by_id[a], a)) for g in groups]
    return winners, groups


# --- gene scoring ---------------------------------------------------------------


def score_candidate(fitness: float, form: LearngeneForm, widths: Sequence[float]) -> float:
    """Winner fitness divided by the summed effective widths of the form's layers."""
    denom = sum(widths[i] for i in form.layer_indices)
    if denom == 0:
        raise ZeroDivisionError("zero effective layer width")
    if fitness < 0:
        raise ValueError("candidate fitness must be non-negative")
    return fitness / denom


def learngene_similarity(form_a: LearngeneForm, form_d: LearngeneForm, widths: Sequence[float]) -> float:
    if form_a.network != form_d.network:
        return 0.0
    a, d = set(form_a.layer_indices), set(form_d.layer_indices)
    return sum(widths[i] for i in sorted(a & d)) / sum(widths[i] for i in sorted(a | d))


# --- pool and tree --------------------------------------------------------------


@dataclass
class GeneNode:
    gene_id: int
    form: LearngeneForm
    parent: int | None
    score: float
    birth_score: float
    fitness: float
    birth_generation: int
    source_agent: int
    in_pool: bool = False
    children: list[int] = field(default_factory=list)
    payload: LearngenePayload | None = None


class GeneTree:
    """Lineage forest over every candidate ever extracted. Nodes are never deleted."""

    def __init__(self) -> None:
        self.nodes: dict[int, GeneNode] = {}

    def add(self, node: GeneNode) -> GeneNode:
        if node.gene_id in self.nodes:
            raise ValueError(f"duplicate gene id {node.gene_id}")
        if node.parent is not None:
            if node.parent not in self.nodes:
                raise KeyError(f"parent {node.parent} unknown")
            self.nodes[node.parent].children.append(node.gene_id)
        self.nodes[node.gene_id] = node
        return node

    def __getitem__(self, gene_id: int) -> GeneNode:
        return self.nodes[gene_id]

    def __len__(self) -> int:
        return len(self.nodes)

    def roots(self) -> list[GeneNode]:
        return [n for n in self.nodes.values() if n.parent is None]

    def root_of(self, gene_id: int) -> GeneNode:
        node = self.nodes[gene_id]
        while node.parent is not None:
            node = self.nodes[node.parent]
        return node

    def path_to_root(self, gene_id: int) -> list[GeneNode]:
        out, node = [], self.nodes[gene_id]
        while True:
            out.append(node)
            if node.parent is None:
                return out
            node = self.nodes[node.parent]

    def forests(self) -> dict[LearngeneForm, list[GeneNode]]:
        """Trees grouped by the form of their root."""
        out: dict[LearngeneForm, list[GeneNode]] = {}
        for r in self.roots():
            out.setdefault(r.form, []).append(r)
        return out

    def descendant_count(self, gene_id: int) -> int:
        stack, count = list(self.nodes[gene_id].children), 0
        while stack:
            g = stack.pop()
            count += 1
            stack.extend(self.nodes[g].children)
        return count


class GenePool:
    def __init__(self, forms: Iterable[LearngeneForm], rho_max: int, widths: Sequence[float]):
        self.forms = sorted(forms)
        self.rho_max = rho_max
        self.widths = list(widths)
        self.tree = GeneTree()
        self.slots: dict[LearngeneForm, list[int]] = {f: [] for f in self.forms}
        self.next_id = 0

    @property
    def bootstrapped(self) -> bool:
        return any(self.slots.values())

    def residents(self, form: LearngeneForm | None = None) -> list[GeneNode]:
        forms = self.forms if form is None else [form]
        return [self.tree[g] for f in forms for g in self.slots[f]]

    def form_score(self, form: LearngeneForm) -> float:
        return sum(self.tree[g].score for g in self.slots[form])

    def new_node(self, form, parent, fitness, generation, agent, payload) -> GeneNode:
        score = score_candidate(fitness, form, self.widths)
        node = GeneNode(self.next_id, form, parent, score, score, fitness, generation, agent, payload=payload)
        self.next_id += 1
        return self.tree.add(node)

    def admit(self, node: GeneNode) -> None:
        self.slots[node.form].append(node.gene_id)
        node.in_pool = True

    def evict(self, node: GeneNode) -> None:
        self.slots[node.form].remove(node.gene_id)
        node.in_pool = False
        node.payload = None


def apply_decay(pool: GenePool, beta: float, log: list | None = None, generation: int | None = None) -> GenePool:
    if not 0.0 <= beta < 1.0:
        raise ValueError("beta must be in [0, 1)")
    factor = 1.0 - beta
    for node in pool.residents():
        node.score *= factor
    if log is not None:
        log.append({"type": "decay", "gen": generation})
    return pool


def update_ancestor_scores(pool: GenePool, leaf_id: int, fitness: float, eta: float,
                           log: list | None = None, generation: int | None = None) -> list[tuple[int, float]]:
    """Walk leaf -> root; each pool-resident ancestor gains sim(anc, child) * eta^(depth+1) * fitness."""
    tree = pool.tree
    changes = []
    child = tree[leaf_id]
    depth = 1
    while child.parent is not None:
        anc = tree[child.parent]
        if anc.in_pool:
            sim = learngene_similarity(anc.form, child.form, pool.widths)
            amount = sim * eta ** (depth + 1) * fitness
            if amount != 0.0:
                anc.score += amount
                changes.append((anc.gene_id, amount))
                if log is not None:
                    log.append({"type": "increment", "gen": generation, "gene": anc.gene_id,
                                "child": child.gene_id, "leaf": leaf_id, "depth": depth, "amount": amount})
        child = anc
        depth += 1
    return changes


# --- probabilities --------------------------------------------------------------


def form_probability(pool: GenePool) -> dict[LearngeneForm, float]:
    scores = {f: pool.form_score(f) for f in pool.forms}
    if any(s < 0 for s in scores.values()):
        raise ValueError("negative gene scores")
    total = sum(scores.values())
    if total <= 0:
        raise ValueError("gene pool holds no score mass")
    return {f: s / total for f, s in scores.items()}


def extraction_probability(form_probs: dict[LearngeneForm, float],
                           paternal_form: LearngeneForm | None = None) -> dict[LearngeneForm, float]:
    """Form probabilities with the paternal form's weight raised to 1, renormalized."""
    if paternal_form is None:
        return dict(form_probs)
    h = {f: (1.0 if f == paternal_form else p) for f, p in form_probs.items()}
    total = sum(h.values())
    return {f: v / total for f, v in h.items()}


def inheritance_probability(pool: GenePool) -> list[tuple[GeneNode, float]]:
    form_p = form_probability(pool)
    out = []
    for f in pool.forms:
        s_form = pool.form_score(f)
        for node in pool.residents(f):
            out.append((node, form_p[f] * node.score / s_form if s_form > 0 else 0.0))
    return out


def _draw(probs: Sequence[float], rng: np.random.Generator) -> int:
    cum = np.cumsum(probs)
    i = bisect.bisect_right(cum.tolist(), rng.random() * cum[-1])
    return min(i, len(probs) - 1)


def sample_inheritance(pool: GenePool, rng: np.random.Generator) -> GeneNode:
    table = inheritance_probability(pool)
    if not table:
        raise ValueError("empty gene pool")
    return table[_draw([p for _, p in table], rng)][0]


# --- extraction and replacement -------------------------------------------------


@dataclass
class Winner:
    agent_id: int
    genome: AgentGenome
    fitness: float
    paternal_gene: int | None = None


def _payload_record(payload: LearngenePayload) -> list[float]:
    return payload.flat().tolist()


def _birth_event(node: GeneNode, resident: bool) -> dict:
    return {"type": "birth", "gen": node.birth_generation, "gene": node.gene_id, "form": node.form.key,
            "parent": node.parent, "agent": node.source_agent, "fitness": node.fitness,
            "score": node.score, "resident": resident, "payload": _payload_record(node.payload)}


def bootstrap_pool(pool: GenePool, winners: Sequence[Winner], generation: int, rng: np.random.Generator,
                   log: list | None = None) -> GenePool:
    """Fill every form with ``rho_max`` roots, each extracted from a uniformly drawn winner."""
    for form in pool.forms:
        for _ in range(pool.rho_max):
            w = winners[int(rng.integers(len(winners)))]
            node = pool.new_node(form, None, w.fitness, generation, w.agent_id, extract_learngene(w.genome, form))
            pool.admit(node)
            if log is not None:
                log.append(_birth_event(node, True))
    return pool


def extract_and_replace(pool: GenePool, winners: Sequence[Winner], generation: int, rng: np.random.Generator,
                        eta: float, log: list | None = None) -> dict:
    """One candidate per winner, ancestor score updates, then capped strict-improvement replacement."""
    if not pool.bootstrapped:
        bootstrap_pool(pool, winners, generation, rng, log)
        return {"births": pool.rho_max * len(pool.forms), "replacements": {}, "extraction": []}

    form_p = form_probability(pool)
    newborn: list[tuple[GeneNode, Winner]] = []
    extraction = []
    for w in winners:
        paternal_form = pool.tree[w.paternal_gene].form if w.paternal_gene is not None else None
        probs = extraction_probability(form_p, paternal_form)
        extraction.append(probs)
        form = pool.forms[_draw([probs[f] for f in pool.forms], rng)]
        node = pool.new_node(form, w.paternal_gene, w.fitness, generation, w.agent_id,
                             extract_learngene(w.genome, form))
        newborn.append((node, w))
        if log is not None:
            log.append(_birth_event(node, False))

    for node, w in newborn:
        update_ancestor_scores(pool, node.gene_id, w.fitness, eta, log, generation)

    replacements: dict[LearngeneForm, int] = {}
    for form in pool.forms:
        challengers = sorted((n for n, _ in newborn if n.form == form), key=lambda n: (-n.score, n.gene_id))
        count = 0
        for cand in challengers:
            if count == MAX_REPLACEMENTS:
                break
            weakest = min(pool.residents(form), key=lambda n: (n.score, -n.gene_id))
            if not cand.score > weakest.score:
                break
            pool.evict(weakest)
            pool.admit(cand)
            count += 1
            if log is not None:
                log.append({"type": "replace", "gen": generation, "form": form.key,
                            "evicted": weakest.gene_id, "inserted": cand.gene_id})
        if count:
            replacements[form] = count
    for node, _ in newborn:
        if not node.in_pool:
            node.payload = None
    return {"births": len(newborn), "replacements": replacements, "extraction": extraction}


# --- next generation ------------------------------------------------------------


@dataclass
class Agent:
    agent_id: int
    generation: int
    genome: AgentGenome
    task: str
    terrain_seed: int
    train_seed: int
    paternal_gene: int | None = None
    inherited: LearngenePayload | None = None


def agent_seed_sequence(master_seed: int, generation: int, agent_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master_seed, generation, agent_id])


def initialize_generation(pool: GenePool | None, config: EvolutionConfig, generation: int,
                          actor_arch: NetworkArchitecture, critic_arch: NetworkArchitecture) -> list[Agent]:
    """Newborns: random networks, plus a transplanted pool gene once the pool exists."""
    tasks = [t.value for t in TRAINING_OBSTACLES[:config.m]]
    agents = []
    for agent_id in range(config.n_p):
        init_ss, task_ss, gene_ss, train_ss = agent_seed_sequence(config.master_seed, generation, agent_id).spawn(4)
        genome = init_genome(actor_arch, critic_arch, config.init_method, np.random.default_rng(init_ss))
        task_rng = np.random.default_rng(task_ss)
        task = tasks[int(task_rng.integers(len(tasks)))]
        terrain_seed = int(task_rng.integers(2**31))
        train_seed = int(np.random.default_rng(train_ss).integers(2**63))
        paternal, inherited = None, None
        if pool is not None and pool.bootstrapped:
            gene = sample_inheritance(pool, np.random.default_rng(gene_ss))
            transplant_learngene(gene.payload, genome)
            paternal, inherited = gene.gene_id, gene.payload
        agents.append(Agent(agent_id, generation, genome, task, terrain_seed, train_seed, paternal, inherited))
    return agents


def synthetic_form_oracle(favored: LearngeneForm, pool: GenePool, bonus: float = 100.0,
                          noise: float = 10.0) -> Callable[[Agent], list[float]]:
    """Stand-in for lifetime RL: agents carrying ``favored`` earn ``bonus`` extra mean reward."""

    def oracle(agent: Agent) -> list[float]:
        rng = np.random.default_rng([agent.train_seed % 2**32, 7])
        carries = agent.paternal_gene is not None and pool.tree[agent.paternal_gene].form == favored
        return [float((bonus if carries else 0.0) + noise * rng.standard_normal())]

    return oracle


def make_pool(config: EvolutionConfig, actor_arch: NetworkArchitecture, critic_arch: NetworkArchitecture) -> GenePool:
    arch = actor_arch if config.network == "actor" else critic_arch
    return GenePool(all_forms(config.network, config.n_l), config.rho_max, form_layer_widths(arch))


def max_abs_normalization_error(dist: dict) -> float:
    return abs(math.fsum(dist.values()) - 1.0)
