"""Flatten a run directory into plot-ready CSV tables with fixed column order."""
from __future__ import annotations

import csv
import json
from pathlib import Path

from .analysis import heatmap_shapes, parameter_change_heatmap
from .checkpoint import list_checkpoints, load_checkpoint
from .evolution import form_probability
from .runner import read_jsonl

SCHEMA_VERSION = 1

COLUMNS = {
    "rewards.csv": ["generation", "agent_id", "task", "e", "r_e", "forward_distance", "control_cost", "steps"],
    "fitness.csv": ["generation", "agent_id", "task", "raw", "normalized", "winner", "paternal_gene"],
    "pool_scores.csv": ["generation", "form", "gene_id", "score", "birth_score", "birth_generation", "parent"],
    "events.csv": ["generation", "type", "gene", "form", "parent", "agent", "fitness", "score", "resident",
                   "child", "leaf", "depth", "amount", "evicted", "inserted"],
    "heatmap.csv": ["form", "generation", "mean_change"],
}


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(row.get(c)) for c in header])


def export_metrics(run_dir, out_dir=None) -> dict[str, Path]:
    """Write every table under ``<run_dir>/export`` (or ``out_dir``); missing inputs give header-only files."""
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir else run_dir / "export"
    out.mkdir(parents=True, exist_ok=True)
    log = run_dir / "log"
    paths = {name: out / name for name in list(COLUMNS) + ["form_probability.csv"]}

    episodes = [dict(r, generation=r["gen"]) for r in read_jsonl(log / "episodes.jsonl")]
    _write(paths["rewards.csv"], COLUMNS["rewards.csv"], episodes)
    fitness = [dict(r, generation=r["gen"]) for r in read_jsonl(log / "fitness.jsonl")]
    _write(paths["fitness.csv"], COLUMNS["fitness.csv"], fitness)

    events = read_jsonl(log / "events.jsonl")
    _write(paths["events.csv"], COLUMNS["events.csv"],
           (dict(e, generation=e["gen"]) for e in events if e["type"] != "carrier"))

    checkpoints = list_checkpoints(run_dir)
    score_rows, prob_rows, forms = [], [], []
    for cp in checkpoints:
        state = load_checkpoint(cp)
        forms = [f.key for f in state.pool.forms]
        probs = form_probability(state.pool)
        prob_rows.append({"generation": state.generation, **{f.key: p for f, p in probs.items()}})
        for node in state.pool.residents():
            score_rows.append({"generation": state.generation, "form": node.form.key, "gene_id": node.gene_id,
                               "score": node.score, "birth_score": node.birth_score,
                               "birth_generation": node.birth_generation, "parent": node.parent})
    if not forms and (run_dir / "config.json").exists():
        from .config import RunConfig
        from .evolution import all_forms

        cfg = RunConfig.from_dict(json.loads((run_dir / "config.json").read_text()))
        forms = [f.key for f in all_forms(cfg.evolution.network, cfg.evolution.n_l)]
    _write(paths["pool_scores.csv"], COLUMNS["pool_scores.csv"], score_rows)
    _write(paths["form_probability.csv"], ["generation"] + forms, prob_rows)

    heat_rows = []
    if checkpoints and events:
        grid = parameter_change_heatmap(events, heatmap_shapes(checkpoints[-1]))
        heat_rows = [{"form": f, "generation": g, "mean_change": v} for f, cols in grid.items() for g, v in cols.items()]
    _write(paths["heatmap.csv"], COLUMNS["heatmap.csv"], heat_rows)
    (out / "schema.json").write_text(json.dumps(
        {"version": SCHEMA_VERSION, "tables": {**COLUMNS, "form_probability.csv": ["generation"] + forms}},
        indent=1, sort_keys=True) + "\n")
    paths["schema.json"] = out / "schema.json"
    return paths
