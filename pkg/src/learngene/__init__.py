"""Genetic reinforcement learning: evolve learngenes through a gene pool and gene tree."""
from __future__ import annotations

from .config import RunConfig, desk_profile, load_config, full_profile
from .runner import replay_verify, run_evolution

__all__ = ["RunConfig", "desk_profile", "full_profile", "load_config", "run_evolution", "replay_verify"]
__version__ = "0.1.0"
