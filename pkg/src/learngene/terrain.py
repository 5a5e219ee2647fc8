"""1-D heightfield crawler: procedural obstacle tracks and deterministic point-mass dynamics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .ppo import step_reward

GRID = 0.05
TRACK_LENGTH = 60.0
OBSTACLE_SPAN = (10.0, 45.0)
LOOKAHEAD = (0.5, 1.0, 2.0, 4.0)
OBS_DIM = 2 + len(LOOKAHEAD)
ACTION_DIM = 2


class ObstacleKind(str, Enum):
    STEP = "Step"
    BUMPY = "Bumpy"
    HILL = "Hill"
    RUBBLE = "Rubble"
    CHANNEL = "Channel"
    INCLINE = "Incline"
    DUNE = "Dune"
    SQUARE = "Square"

    @classmethod
    def parse(cls, value) -> "ObstacleKind":
        if isinstance(value, cls):
            return value
        for kind in cls:
            if kind.value.lower() == str(value).lower():
                return kind
        raise ValueError(f"unknown obstacle kind {value!r}")


TRAINING_OBSTACLES = (ObstacleKind.STEP, ObstacleKind.BUMPY, ObstacleKind.HILL, ObstacleKind.RUBBLE)
NEW_OBSTACLES = (ObstacleKind.CHANNEL, ObstacleKind.INCLINE, ObstacleKind.DUNE, ObstacleKind.SQUARE)


@dataclass
class Heightfield:
    kind: str
    samples: np.ndarray
    track_length: float
    obstacle_span: tuple[float, float]
    seed: int
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self._h = self.samples.tolist()
        self._n = len(self._h) - 1

    @property
    def xs(self) -> np.ndarray:
        return np.arange(len(self.samples)) * GRID

    def height(self, x: float) -> float:
        if x <= 0.0:
            return self._h[0]
        if x >= self.track_length:
            return self._h[-1]
        u = x / GRID
        i = int(u)
        if i >= self._n:
            return self._h[-1]
        frac = u - i
        if frac == 0.0:
            return self._h[i]
        return self._h[i] + frac * (self._h[i + 1] - self._h[i])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "h"])
            for x, h in zip(self.xs, self.samples):
                w.writerow([f"{x:.2f}", repr(float(h))])


# --- generators -----------------------------------------------------------------
# Each generator lays out profile segments from ``start`` and stops before ``end``;
# it returns a callable h(x) evaluated on the grid, plus logged parameters.


def _pieces(xs: np.ndarray, segments: list[tuple[float, float, callable]]) -> np.ndarray:
    h = np.zeros_like(xs)
    for a, b, fn in segments:
        m = (xs >= a) & (xs < b)
        h[m] = fn(xs[m] - a)
    return h


def _gen_step(rng, start, end, scale):
    segs, log = [], []
    x = start
    while True:
        tau = int(rng.integers(3, 7))
        risers = rng.uniform(0.10, 0.13, size=tau) * scale
        # tau levels up, then back down through the same risers in reverse
        levels = list(np.cumsum(risers)) + list(np.cumsum(risers)[-2::-1])
        treads = rng.uniform(2.0, 3.0, size=len(levels))
        if x + treads.sum() > end:
            break
        for lvl, tread in zip(levels, treads):
            segs.append((x, x + tread, (lambda u, v=float(lvl): np.full_like(u, v))))
            x += tread
        log.append({"tau": tau, "risers": risers.tolist(), "treads": treads.tolist()})
    return segs, {"sequences": log}


def _gen_bumpy(rng, start, end, scale):
    segs, heights = [], []
    width, ramp = 2.0, 0.5
    x = start
    while x + width <= end:
        hgt = float(rng.uniform(-0.20, 0.24)) * scale

        def trap(u, hgt=hgt):
            return hgt * np.clip(np.minimum(u, width - u) / ramp, 0.0, 1.0)

        segs.append((x, x + width, trap))
        heights.append(hgt)
        x += width
    return segs, {"heights": heights, "width": width}


def _gen_hill(rng, start, end, scale):
    segs, log = [], []
    x = start
    while True:
        w = float(rng.uniform(4.0, 10.0))
        hgt = float(rng.uniform(0.15, 0.60)) * scale
        if x + w > end:
            break
        segs.append((x, x + w, lambda u, w=w, hgt=hgt: hgt * np.sin(np.pi * u / w)))
        log.append({"width": w, "height": hgt})
        x += w
    return segs, {"hills": log}


def _gen_rubble(rng, start, end, scale):
    segs, log = [], []
    x = start
    while True:
        w = float(rng.uniform(2.0, 4.0))
        hgt = float(rng.uniform(0.25, 0.50)) * scale
        if x + w > end:
            break
        segs.append((x, x + w, lambda u, w=w, hgt=hgt: hgt * (1.0 - np.abs(2.0 * u / w - 1.0))))
        log.append({"width": w, "height": hgt})
        x += w
    return segs, {"pyramids": log}


def _gen_channel(rng, start, end, scale):
    segs, log = [], []
    x = start
    while True:
        gap = float(rng.uniform(1.0, 2.0))
        w = float(rng.uniform(1.0, 2.0))
        depth = float(rng.uniform(0.15, 0.30)) * scale
        if x + gap + w > end:
            break
        x += gap
        segs.append((x, x + w, lambda u, d=depth: np.full_like(u, -d)))
        log.append({"gap": gap, "width": w, "depth": depth})
        x += w
    return segs, {"trenches": log}


def _gen_incline(rng, start, end, scale):
    slope = float(rng.uniform(0.05, 0.15)) * scale
    # ramp up over the span, sheer drop back to ground at the span end
    return [(start, end, lambda u: slope * u)], {"slope": slope}


def _gen_dune(rng, start, end, scale):
    segs, log = [], []
    x = start
    while True:
        w = float(rng.uniform(4.0, 8.0))
        hgt = float(rng.uniform(0.20, 0.50)) * scale
        peak = 0.7 * w
        if x + w > end:
            break

        def dune(u, w=w, hgt=hgt, peak=peak):
            rise = hgt * np.sin(0.5 * np.pi * u / peak)
            fall = hgt * np.cos(0.5 * np.pi * (u - peak) / (w - peak))
            return np.where(u < peak, rise, fall)

        segs.append((x, x + w, dune))
        log.append({"width": w, "height": hgt, "peak": peak})
        x += w
    return segs, {"dunes": log}


def _gen_square(rng, start, end, scale):
    segs, log = [], []
    x = start
    while True:
        gap = float(rng.uniform(1.0, 3.0))
        w = float(rng.uniform(1.0, 3.0))
        hgt = float(rng.uniform(0.15, 0.30)) * scale
        if x + gap + w > end:
            break
        x += gap
        segs.append((x, x + w, lambda u, hgt=hgt: np.full_like(u, hgt)))
        log.append({"gap": gap, "width": w, "height": hgt})
        x += w
    return segs, {"blocks": log}


_GENERATORS = {
    ObstacleKind.STEP: _gen_step,
    ObstacleKind.BUMPY: _gen_bumpy,
    ObstacleKind.HILL: _gen_hill,
    ObstacleKind.RUBBLE: _gen_rubble,
    ObstacleKind.CHANNEL: _gen_channel,
    ObstacleKind.INCLINE: _gen_incline,
    ObstacleKind.DUNE: _gen_dune,
    ObstacleKind.SQUARE: _gen_square,
}


def _grid(length: float) -> np.ndarray:
    n = int(round(length / GRID))
    return np.arange(n + 1) * GRID


def generate_heightfield(
    kind,
    seed: int,
    scale: float = 1.0,
    track_length: float = TRACK_LENGTH,
    obstacle_span: tuple[float, float] = OBSTACLE_SPAN,
) -> Heightfield:
    kind = ObstacleKind.parse(kind)
    if scale <= 0:
        raise ValueError("scale must be positive")
    start, end = obstacle_span
    if not 0 <= start < end <= track_length:
        raise ValueError("obstacle span must lie inside the track")
    rng = np.random.default_rng([seed, list(ObstacleKind).index(kind)])
    segs, params = _GENERATORS[kind](rng, start, end, scale)
    xs = _grid(track_length)
    h = _pieces(xs, segs)
    h[(xs < start) | (xs > end)] = 0.0
    return Heightfield(kind.value, h, float(xs[-1]), (start, end), seed, params)


def flat_heightfield(track_length: float = TRACK_LENGTH) -> Heightfield:
    xs = _grid(track_length)
    return Heightfield("Flat", np.zeros_like(xs), float(xs[-1]), (0.0, 0.0), 0)


def combined_heightfield(seed: int, scale: float = 1.0, segment: float = 12.0, lead_in: float = 10.0) -> Heightfield:
    """One instance of each training obstacle back to back on an extended track."""
    length = lead_in + segment * len(TRAINING_OBSTACLES) + 15.0
    xs = _grid(length)
    h = np.zeros_like(xs)
    params = {}
    for k, kind in enumerate(TRAINING_OBSTACLES):
        a = lead_in + k * segment
        rng = np.random.default_rng([seed, list(ObstacleKind).index(kind), 99])
        segs, p = _GENERATORS[kind](rng, a, a + segment, scale)
        part = _pieces(xs, segs)
        m = (xs >= a) & (xs < a + segment)
        h[m] = part[m]
        params[kind.value] = p
    end = lead_in + segment * len(TRAINING_OBSTACLES)
    return Heightfield("Combined", h, float(xs[-1]), (lead_in, end), seed, params)


def make_heightfield(task, seed: int, scale: float = 1.0) -> Heightfield:
    if str(task).lower() == "flat":
        return flat_heightfield()
    if str(task).lower() == "combined":
        return combined_heightfield(seed, scale)
    return generate_heightfield(task, seed, scale)


# --- dynamics -------------------------------------------------------------------


@dataclass(frozen=True)
class Dynamics:
    dt: float = 0.05
    c1: float = 2.0
    c2: float = 5.0
    c3: float = 0.5
    v_max: float = 2.0
    slope_eps: float = 0.05
    gamma_w: float = 1.0
    delta_w: float = 0.05
    t_end: int = 500


@dataclass
class EnvState:
    x: float = 0.0
    v: float = 0.0
    t: int = 0


def height_and_slope(hf: Heightfield, x: float, eps: float = 0.05) -> tuple[float, float]:
    if not 0.0 <= x <= hf.track_length:
        raise ValueError(f"x={x} outside track [0, {hf.track_length}]")
    lo = max(0.0, x - eps)
    hi = min(hf.track_length, x + eps)
    return hf.height(x), (hf.height(hi) - hf.height(lo)) / (2.0 * eps)


def observe(hf: Heightfield, state: EnvState, eps: float = 0.05) -> np.ndarray:
    h0, s = height_and_slope(hf, state.x, eps)
    L = hf.track_length
    return np.array([state.v, s] + [hf.height(min(state.x + d, L)) - h0 for d in LOOKAHEAD])


def env_step(hf: Heightfield, state: EnvState, action, dyn: Dynamics = Dynamics()):
    """Advance one step. Returns ``(state', r_t, done, info)``; ``state`` is not mutated."""
    a1, a2 = float(action[0]), float(action[1])
    if math.isnan(a1) or math.isnan(a2):
        raise ValueError("NaN action")
    a1 = -1.0 if a1 < -1.0 else (1.0 if a1 > 1.0 else a1)
    a2 = -1.0 if a2 < -1.0 else (1.0 if a2 > 1.0 else a2)
    _, s = height_and_slope(hf, state.x, dyn.slope_eps)
    grip = 1.0 - min(1.0, abs(a2 - math.tanh(4.0 * s)))
    acc = dyn.c1 * a1 * (0.5 + 0.5 * grip) - dyn.c2 * s - dyn.c3 * state.v
    v = min(dyn.v_max, max(-dyn.v_max, state.v + dyn.dt * acc))
    x = min(hf.track_length, max(0.0, state.x + dyn.dt * v))
    t = state.t + 1
    cost = dyn.delta_w * (a1 * a1 + a2 * a2)
    r = step_reward(v, (a1, a2), dyn.gamma_w, dyn.delta_w)
    finished = x >= hf.track_length
    done = finished or t >= dyn.t_end
    return EnvState(x, v, t), r, done, {"control_cost": cost, "finished": finished, "forward_distance": x}


class TerrainEnv:
    """Stateful wrapper around :func:`env_step` for rollouts."""

    def __init__(self, hf: Heightfield, dyn: Dynamics = Dynamics()):
        self.hf = hf
        self.dyn = dyn
        self.state = EnvState()

    def reset(self, seed: int | None = None) -> np.ndarray:
        # dynamics have no randomness; seed accepted for interface symmetry
        self.state = EnvState()
        return observe(self.hf, self.state, self.dyn.slope_eps)

    def step(self, action):
        self.state, r, done, info = env_step(self.hf, self.state, action, self.dyn)
        return observe(self.hf, self.state, self.dyn.slope_eps), r, done, info


def env_reset(hf: Heightfield, seed: int | None = None, dyn: Dynamics = Dynamics()) -> tuple[EnvState, np.ndarray]:
    state = EnvState()
    return state, observe(hf, state, dyn.slope_eps)


def export_heightfield_csv(hf: Heightfield, path) -> Path:
    path = Path(path)
    hf.to_csv(path)
    return path
