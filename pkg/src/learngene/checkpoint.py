"""Versioned checkpoints: JSON metadata next to a raw float64 blob, both checksummed.

The blob holds the payloads of all pool residents back to back (little-endian
float64, in gene-id order); the JSON records each gene's offset and length.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .evolution import GeneNode, GenePool
from .policy_net import LearngeneForm, build_network, payload_from_flat

FORMAT = "learngene-checkpoint"
VERSION = 1


class CheckpointError(RuntimeError):
    """Corrupt or unreadable checkpoint."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by another format version or a different config."""


@dataclass
class RunState:
    generation: int
    config: RunConfig
    pool: GenePool


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1)


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _payload_shapes(config: RunConfig):
    arch = config.actor_arch if config.evolution.network == "actor" else config.critic_arch
    return build_network(arch)


def save_checkpoint(state: RunState, path) -> Path:
    """Write ``<path>`` (JSON) and ``<path stem>.bin``; returns the JSON path."""
    path = Path(path)
    pool = state.pool
    chunks, genes, offset = [], [], 0
    for gid in sorted(pool.tree.nodes):
        n = pool.tree[gid]
        ref = None
        if n.in_pool:
            flat = np.ascontiguousarray(n.payload.flat(), dtype="<f8")
            chunks.append(flat.tobytes())
            ref = {"offset": offset, "length": int(flat.size)}
            offset += int(flat.size)
        genes.append({
            "id": n.gene_id, "form": n.form.key, "parent": n.parent, "children": list(n.children),
            "score": n.score, "birth_score": n.birth_score, "fitness": n.fitness,
            "birth_generation": n.birth_generation, "source_agent": n.source_agent,
            "in_pool": n.in_pool, "payload": ref,
        })
    blob = b"".join(chunks)
    blob_path = path.with_suffix(".bin")
    body = {
        "format": FORMAT,
        "version": VERSION,
        "generation": state.generation,
        "config": state.config.trajectory_dict(),
        "config_hash": state.config.config_hash(),
        "rng": {
            "scheme": "SeedSequence([master_seed, generation, agent_id]); evolution phase uses agent_id=2**32-1",
            "master_seed": state.config.evolution.master_seed,
            "next_generation": state.generation + 1,
        },
        "pool": {
            "forms": [f.key for f in pool.forms],
            "rho_max": pool.rho_max,
            "widths": pool.widths,
            "slots": {f.key: list(pool.slots[f]) for f in pool.forms},
            "next_id": pool.next_id,
        },
        "genes": genes,
        "blob": {"file": blob_path.name, "dtype": "<f8", "sha256": _sha(blob), "length": offset},
    }
    body["checksum"] = _sha(_dumps(body).encode())
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(blob)
    path.write_text(_dumps(body) + "\n")
    return path


def read_checkpoint_body(path) -> dict:
    path = Path(path)
    try:
        body = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if body.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a learngene checkpoint")
    if body.get("version") != VERSION:
        raise CheckpointVersionError(f"checkpoint version {body.get('version')} != supported {VERSION}")
    stored = body.pop("checksum", None)
    if stored != _sha(_dumps(body).encode()):
        raise CheckpointError(f"checksum mismatch in {path}")
    body["checksum"] = stored
    return body


def load_checkpoint(path, expected_config: RunConfig | None = None) -> RunState:
    path = Path(path)
    body = read_checkpoint_body(path)
    if expected_config is not None and body["config_hash"] != expected_config.config_hash():
        raise CheckpointVersionError(
            f"config hash {body['config_hash'][:12]} does not match run config {expected_config.config_hash()[:12]}"
        )
    blob_path = path.with_name(body["blob"]["file"])
    try:
        blob = blob_path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"missing parameter blob {blob_path}") from exc
    if _sha(blob) != body["blob"]["sha256"]:
        raise CheckpointError(f"checksum mismatch in {blob_path}")
    values = np.frombuffer(blob, dtype="<f8")

    config = RunConfig.from_dict(body["config"])
    if config.config_hash() != body["config_hash"]:
        raise CheckpointVersionError("embedded config does not reproduce its hash")
    shapes = _payload_shapes(config)
    p = body["pool"]
    pool = GenePool([LearngeneForm.from_key(k) for k in p["forms"]], p["rho_max"], p["widths"])
    pool.next_id = p["next_id"]
    for g in body["genes"]:
        form = LearngeneForm.from_key(g["form"])
        payload = None
        if g["payload"] is not None:
            ref = g["payload"]
            payload = payload_from_flat(form, shapes, values[ref["offset"]:ref["offset"] + ref["length"]])
        node = GeneNode(g["id"], form, g["parent"], g["score"], g["birth_score"], g["fitness"],
                        g["birth_generation"], g["source_agent"], g["in_pool"], list(g["children"]), payload)
        pool.tree.nodes[node.gene_id] = node
    pool.slots = {LearngeneForm.from_key(k): list(v) for k, v in p["slots"].items()}
    return RunState(body["generation"], config, pool)


def checkpoint_hash(path) -> str:
    """Digest over the JSON file and its blob."""
    path = Path(path)
    body = json.loads(path.read_text())
    return _sha(path.read_bytes() + path.with_name(body["blob"]["file"]).read_bytes())


def checkpoint_path(run_dir, generation: int) -> Path:
    return Path(run_dir) / "checkpoints" / f"gen_{generation:04d}.json"


def list_checkpoints(run_dir) -> list[Path]:
    return sorted((Path(run_dir) / "checkpoints").glob("gen_*.json"))
