"""Fixed six-layer MLPs for the actor and critic, plus learngene extraction/transplant.

Weights are stored as ``(fan_in, fan_out)`` matrices so a batch of observations
``obs @ W + b`` maps rows to rows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

N_LAYERS = 6
INIT_METHODS = ("orthogonal", "xavier_uniform", "xavier_normal", "kaiming_uniform", "kaiming_normal")
NETWORKS = ("actor", "critic")
LOG_STD_INIT = -0.5


class ShapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkArchitecture:
    input_dim: int
    hidden_width: int
    output_dim: int
    hidden_layers: int = 5
    activation: str = "tanh"

    def __post_init__(self) -> None:
        for name in ("input_dim", "hidden_width", "output_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden_layers != N_LAYERS - 1:
            raise ValueError("architecture is fixed to five hidden layers")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")


def build_network(arch: NetworkArchitecture) -> list[tuple[int, int]]:
    """Return the six ``(in, out)`` weight shapes of ``arch``."""
    h = arch.hidden_width
    return [(arch.input_dim, h)] + [(h, h)] * (arch.hidden_layers - 1) + [(h, arch.output_dim)]


@dataclass
class ParameterSet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w in self.weights]

    def copy(self) -> "ParameterSet":
        return ParameterSet([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def layer(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return self.weights[i], self.biases[i]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for w, b in zip(self.weights, self.biases) for a in (w, b)])

    def equals(self, other: "ParameterSet") -> bool:
        return all(
            np.array_equal(a, b)
            for a, b in zip(self.weights + self.biases, other.weights + other.biases)
        )


@dataclass
class AgentGenome:
    actor: ParameterSet
    critic: ParameterSet
    log_std: np.ndarray

    def network(self, name: str) -> ParameterSet:
        if name not in NETWORKS:
            raise ValueError(f"unknown network {name!r}")
        return self.actor if name == "actor" else self.critic

    def copy(self) -> "AgentGenome":
        return AgentGenome(self.actor.copy(), self.critic.copy(), self.log_std.copy())

    def equals(self, other: "AgentGenome") -> bool:
        return (
            self.actor.equals(other.actor)
            and self.critic.equals(other.critic)
            and np.array_equal(self.log_std, other.log_std)
        )


@dataclass(frozen=True, order=True)
class LearngeneForm:
    network: str
    layer_indices: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.network not in NETWORKS:
            raise ValueError(f"unknown network {self.network!r}")
        idx = tuple(sorted(set(self.layer_indices)))
        if not 1 <= len(idx) <= N_LAYERS - 1:
            raise ValueError("a learngene holds between 1 and 5 layers")
        if idx[0] < 0 or idx[-1] >= N_LAYERS:
            raise IndexError(f"layer index out of range: {self.layer_indices}")
        object.__setattr__(self, "layer_indices", idx)

    @property
    def n_layers(self) -> int:
        return len(self.layer_indices)

    @property
    def key(self) -> str:
        """Compact label such as ``a:45`` or ``c:0``."""
        return f"{self.network[0]}:{''.join(str(i) for i in self.layer_indices)}"

    @classmethod
    def from_key(cls, key: str) -> "LearngeneForm":
        net, digits = key.split(":")
        network = {"a": "actor", "c": "critic"}[net]
        return cls(network, tuple(int(d) for d in digits))


@dataclass
class LearngenePayload:
    form: LearngeneForm
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for w, b in zip(self.weights, self.biases) for a in (w, b)])

    def copy(self) -> "LearngenePayload":
        return LearngenePayload(self.form, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def equals(self, other: "LearngenePayload") -> bool:
        return self.form == other.form and all(
            np.array_equal(a, b)
            for a, b in zip(self.weights + self.biases, other.weights + other.biases)
        )


# --- initialization -------------------------------------------------------------


def _orthogonal(rng: np.random.Generator, shape: tuple[int, int], gain: float = 1.0) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    # sign fix makes the draw uniform over the orthogonal group
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q.reshape(shape)


def _init_weight(rng: np.random.Generator, shape: tuple[int, int], method: str) -> np.ndarray:
    fan_in, fan_out = shape
    if method == "orthogonal":
        return _orthogonal(rng, shape)
    if method == "xavier_uniform":
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)
    if method == "xavier_normal":
        return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=shape)
    if method == "kaiming_uniform":
        bound = math.sqrt(2.0) * math.sqrt(3.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)
    if method == "kaiming_normal":
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    raise ValueError(f"unknown init method {method!r}; expected one of {INIT_METHODS}")


def init_params(arch: NetworkArchitecture, method: str = "orthogonal", seed=0) -> ParameterSet:
    """Random weights by ``method``, zero biases. ``seed`` may be an int or a Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shapes = build_network(arch)
    weights = [_init_weight(rng, s, method) for s in shapes]
    biases = [np.zeros(s[1]) for s in shapes]
    return ParameterSet(weights, biases)


def init_genome(
    actor_arch: NetworkArchitecture,
    critic_arch: NetworkArchitecture,
    method: str = "orthogonal",
    seed=0,
) -> AgentGenome:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    actor = init_params(actor_arch, method, rng)
    critic = init_params(critic_arch, method, rng)
    return AgentGenome(actor, critic, np.full(actor_arch.output_dim, LOG_STD_INIT))


def zero_genome(actor_arch: NetworkArchitecture, critic_arch: NetworkArchitecture) -> AgentGenome:
    def zeros(arch):
        shapes = build_network(arch)
        return ParameterSet([np.zeros(s) for s in shapes], [np.zeros(s[1]) for s in shapes])

    return AgentGenome(zeros(actor_arch), zeros(critic_arch), np.full(actor_arch.output_dim, LOG_STD_INIT))


# --- forward / backward ---------------------------------------------------------


def forward(params: ParameterSet, obs) -> np.ndarray:
    """tanh on the five hidden layers, linear output. Accepts one vector or a batch."""
    x = np.asarray(obs, dtype=float)
    if np.isnan(x).any():
        raise ValueError("NaN in network input")
    if x.shape[-1] != params.weights[0].shape[0]:
        raise ShapeMismatchError(f"expected input dim {params.weights[0].shape[0]}, got {x.shape[-1]}")
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        x = x @ w + b
        if i < last:
            x = np.tanh(x)
    return x


def forward_cached(params: ParameterSet, obs: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Batch forward keeping each layer's input for :func:`backward`."""
    x = obs
    inputs = []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(x)
        x = x @ w + b
        if i < last:
            x = np.tanh(x)
    inputs.append(x)
    return x, inputs


def backward(params: ParameterSet, inputs: list[np.ndarray], grad_out: np.ndarray) -> ParameterSet:
    """Gradients of a scalar loss w.r.t. all layers, given dLoss/dOutput."""
    n = len(params.weights)
    gw: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    g = grad_out
    for i in range(n - 1, -1, -1):
        gw[i] = inputs[i].T @ g
        gb[i] = g.sum(axis=0)
        if i > 0:
            g = g @ params.weights[i].T
            # inputs[i] is tanh output of layer i-1
            g = g * (1.0 - inputs[i] ** 2)
    return ParameterSet(gw, gb)


# --- learngenes -----------------------------------------------------------------


def extract_learngene(genome: AgentGenome, form: LearngeneForm) -> LearngenePayload:
    net = genome.network(form.network)
    if form.layer_indices[-1] >= len(net.weights):
        raise IndexError(f"layer index out of range for {form.key}")
    return LearngenePayload(
        form,
        [net.weights[i].copy() for i in form.layer_indices],
        [net.biases[i].copy() for i in form.layer_indices],
    )


def transplant_learngene(payload: LearngenePayload, genome: AgentGenome) -> AgentGenome:
    """Overwrite the payload's layers in ``genome`` (in place) and return it."""
    net = genome.network(payload.form.network)
    for i, w, b in zip(payload.form.layer_indices, payload.weights, payload.biases):
        if net.weights[i].shape != w.shape or net.biases[i].shape != b.shape:
            raise ShapeMismatchError(
                f"layer {i}: payload {w.shape} does not fit network {net.weights[i].shape}"
            )
    for i, w, b in zip(payload.form.layer_indices, payload.weights, payload.biases):
        net.weights[i] = w.copy()
        net.biases[i] = b.copy()
    return genome


def layer_param_count(shape: tuple[int, int]) -> int:
    return shape[0] * shape[1] + shape[1]


def effective_layer_width(layer) -> float:
    """sqrt of a layer's weight+bias count. Accepts ``(W, b)`` or an ``(in, out)`` shape."""
    if isinstance(layer, tuple) and len(layer) == 2 and all(isinstance(v, (int, np.integer)) for v in layer):
        return math.sqrt(layer_param_count(layer))
    w, b = layer
    return math.sqrt(np.size(w) + np.size(b))


def form_layer_widths(arch: NetworkArchitecture) -> list[float]:
    return [effective_layer_width(s) for s in build_network(arch)]


def manhattan_change(before: LearngenePayload, after: LearngenePayload) -> float:
    """Mean absolute parameter change between two payloads of the same form."""
    if before.form != after.form:
        raise ShapeMismatchError(f"form mismatch {before.form.key} vs {after.form.key}")
    a, b = before.flat(), after.flat()
    if a.shape != b.shape:
        raise ShapeMismatchError("payload shapes differ")
    return float(np.abs(b - a).sum() / a.size)


def payload_from_flat(form: LearngeneForm, shapes: Sequence[tuple[int, int]], flat) -> LearngenePayload:
    """Inverse of :meth:`LearngenePayload.flat` for the given per-layer shapes."""
    flat = np.asarray(flat, dtype=float)
    weights, biases, pos = [], [], 0
    for i in form.layer_indices:
        r, c = shapes[i]
        weights.append(flat[pos:pos + r * c].reshape(r, c))
        pos += r * c
        biases.append(flat[pos:pos + c].copy())
        pos += c
    if pos != flat.size:
        raise ShapeMismatchError("flat payload length does not match form")
    return LearngenePayload(form, weights, biases)
