"""Run configuration: one frozen record for every constant of an evolution run."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .evolution import EvolutionConfig
from .policy_net import INIT_METHODS, NetworkArchitecture
from .ppo import PPOConfig
from .terrain import ACTION_DIM, OBS_DIM, Dynamics

CONFIG_ENV_VAR = "LEARNGENE_CONFIG"

# fields that steer a run but cannot change its trajectory; excluded from the config hash
RUN_CONTROL_FIELDS = ("output_dir", "workers", "checkpoint_every")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    evolution: EvolutionConfig = field(default_factory=EvolutionConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    dynamics: Dynamics = field(default_factory=Dynamics)
    hidden_width: int = 48
    terrain_scale: float = 1.0
    output_dir: str = "runs/default"
    checkpoint_every: int = 1
    workers: int = 1

    def __post_init__(self) -> None:
        if self.hidden_width < 1:
            raise ConfigError("hidden_width must be >= 1")
        if self.terrain_scale <= 0:
            raise ConfigError("terrain_scale must be positive")
        if self.checkpoint_every < 1 or self.workers < 1:
            raise ConfigError("checkpoint_every and workers must be >= 1")
        if self.evolution.init_method not in INIT_METHODS:
            raise ConfigError(f"init_method must be one of {INIT_METHODS}")
        if self.dynamics.t_end != self.ppo.steps_per_episode_max:
            object.__setattr__(self, "dynamics",
                               dataclasses.replace(self.dynamics, t_end=self.ppo.steps_per_episode_max))

    @property
    def actor_arch(self) -> NetworkArchitecture:
        return NetworkArchitecture(OBS_DIM, self.hidden_width, ACTION_DIM)

    @property
    def critic_arch(self) -> NetworkArchitecture:
        return NetworkArchitecture(OBS_DIM, self.hidden_width, 1)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def trajectory_dict(self) -> dict:
        """Everything that influences results; ``generations`` is excluded so runs can be extended."""
        d = self.to_dict()
        for k in RUN_CONTROL_FIELDS:
            d.pop(k)
        d["evolution"].pop("generations")
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.trajectory_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def replace(self, **changes) -> "RunConfig":
        """Flat overrides: ``n_p=6`` lands in evolution, ``lr=1e-3`` in ppo, and so on."""
        groups = {"evolution": {}, "ppo": {}, "dynamics": {}}
        top = {}
        for key, value in changes.items():
            if value is None:
                continue
            if key == "t_end":
                key = "steps_per_episode_max"
            for g in groups:
                if key in {f.name for f in dataclasses.fields(getattr(self, g))}:
                    groups[g][key] = value
                    break
            else:
                if key not in {f.name for f in dataclasses.fields(self)}:
                    raise ConfigError(f"unknown config field {key!r}")
                top[key] = value
        try:
            for g, vals in groups.items():
                if vals:
                    top[g] = dataclasses.replace(getattr(self, g), **vals)
            return dataclasses.replace(self, **top)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        try:
            parts = {
                "evolution": EvolutionConfig(**d.pop("evolution", {})),
                "ppo": PPOConfig(**d.pop("ppo", {})),
                "dynamics": Dynamics(**d.pop("dynamics", {})),
            }
            return cls(**parts, **d)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def desk_profile(**overrides) -> RunConfig:
    """Small run that finishes in minutes on one core."""
    cfg = RunConfig(
        evolution=EvolutionConfig(n_p=12, s=3, lt=20, generations=40, eta=0.25),
        ppo=PPOConfig(steps_per_episode_max=500),
        hidden_width=16,
    )
    return cfg.replace(**overrides)


def full_profile(**overrides) -> RunConfig:
    """Full-scale run: 50 agents, 48-wide networks, 3000-step episodes."""
    cfg = RunConfig(
        evolution=EvolutionConfig(n_p=50, s=3, lt=50, generations=100),
        ppo=PPOConfig(steps_per_episode_max=3000),
        hidden_width=48,
    )
    return cfg.replace(**overrides)


PROFILES = {"desk": desk_profile, "full": full_profile}


def load_config(path=None, profile: str | None = None) -> RunConfig:
    """Read a JSON/YAML config; falls back to ``$LEARNGENE_CONFIG`` then the desk profile."""
    path = path or os.environ.get(CONFIG_ENV_VAR)
    if path is None:
        return PROFILES[profile or "desk"]()
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if profile:
        base = PROFILES[profile]().to_dict()
        for k, v in data.items():
            if isinstance(v, dict) and isinstance(base.get(k), dict):
                base[k].update(v)
            else:
                base[k] = v
        data = base
    return RunConfig.from_dict(data)
