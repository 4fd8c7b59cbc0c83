"""Actor and critic heads on top of the encoded state."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

HIDDEN = (256, 256)
N_ACTIONS = 5


def init_mlp(prefix: str, dims: Sequence[int], rng: np.random.Generator) -> dict:
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:]), start=1):
        bound = 1.0 / math.sqrt(fan_in)
        params[f"{prefix}.l{i}.W"] = T.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                                                 f"{prefix}.l{i}.W")
        params[f"{prefix}.l{i}.b"] = T.parameter(np.zeros((1, fan_out)), f"{prefix}.l{i}.b")
    return params


def mlp_forward(x, params: dict, prefix: str, n_layers: int, tanh_output: bool) -> Tensor:
    h = T.as_tensor(x)
    if h.shape[-1] != params[f"{prefix}.l1.W"].shape[0]:
        raise T.ShapeError(f"{prefix}: input width {h.shape[-1]} != {params[f'{prefix}.l1.W'].shape[0]}")
    if h.data.ndim == 1:
        h = T.reshape(h, (1, h.shape[0]))
    for i in range(1, n_layers + 1):
        h = T.add(T.matmul(h, params[f"{prefix}.l{i}.W"]), params[f"{prefix}.l{i}.b"])
        if i < n_layers or tanh_output:
            h = T.tanh_elem(h)
    return h


def init_actor(in_dim: int, rng: np.random.Generator, hidden=HIDDEN) -> dict:
    return init_mlp("actor", (in_dim, *hidden, N_ACTIONS), rng)


def init_critic(in_dim: int, rng: np.random.Generator, hidden=HIDDEN) -> dict:
    return init_mlp("critic", (in_dim, *hidden, 1), rng)


def actor_preactivation(e, params: dict) -> Tensor:
    """Output-layer activations before the final Tanh, shape (batch, 5)."""
    n_layers = sum(1 for k in params if k.startswith("actor.l") and k.endswith(".W"))
    return mlp_forward(e, params, "actor", n_layers, tanh_output=False)


def actor_forward(e, params: dict) -> Tensor:
    """Tanh-bounded logits, shape (batch, 5)."""
    return T.tanh_elem(actor_preactivation(e, params))


def critic_forward(e, params: dict) -> Tensor:
    """Scalar value per row, shape (batch, 1); the output layer is linear."""
    n_layers = sum(1 for k in params if k.startswith("critic.l") and k.endswith(".W"))
    return mlp_forward(e, params, "critic", n_layers, tanh_output=False)


@dataclass
class ActionDistribution:
    """Categorical distribution over the meta-actions, from a batch of logits."""

    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.atleast_2d(np.asarray(self.logits, dtype=np.float64))
        z = self.logits - self.logits.max(axis=-1, keepdims=True)
        self.log_probs = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def log_prob(self, actions) -> np.ndarray:
        actions = np.asarray(actions)
        if np.any((actions < 0) | (actions >= self.logits.shape[-1])):
            raise ValueError(f"action ids must be in [0, {self.logits.shape[-1]})")
        return np.take_along_axis(self.log_probs, actions.reshape(-1, 1), axis=-1)[:, 0]

    def entropy(self) -> np.ndarray:
        return -(self.probs * self.log_probs).sum(axis=-1)

    def greedy(self) -> np.ndarray:
        return self.logits.argmax(axis=-1)


def sample_action(d: ActionDistribution, rng: np.random.Generator) -> tuple:
    """Inverse-CDF draw for every row; returns (actions, log-probs)."""
    cdf = np.cumsum(d.probs, axis=-1)
    u = rng.random(cdf.shape[0])
    actions = (cdf < u[:, None]).sum(axis=-1)
    actions = np.minimum(actions, cdf.shape[-1] - 1)
    return actions, d.log_prob(actions)


def log_prob_tensor(logits: Tensor, actions: np.ndarray) -> Tensor:
    """Differentiable log pi(a) per row."""
    logp = T.log_softmax_rows(logits)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(actions)), actions] = 1.0
    return T.sum_(T.mul(logp, onehot), axis=-1)


def entropy_tensor(logits: Tensor) -> Tensor:
    logp = T.log_softmax_rows(logits)
    return T.mul(T.sum_(T.mul(T.exp(logp), logp), axis=-1), -1.0)


class Actor:
    """Shared policy: encoder followed by the actor MLP."""

    def __init__(self, encoder, rng: np.random.Generator, hidden=HIDDEN):
        self.encoder = encoder
        self.params = init_actor(encoder.out_dim, rng, hidden)

    def logits(self, obs) -> Tensor:
        obs = T.as_tensor(obs)
        return actor_forward(self.encoder(obs), self.params)

    def preactivation(self, obs) -> Tensor:
        return actor_preactivation(self.encoder(T.as_tensor(obs)), self.params)

    def distribution(self, obs: np.ndarray) -> ActionDistribution:
        return ActionDistribution(self.logits(obs).data)


class Critic:
    """Value function over either one agent's encoding or all agents' encodings.

    ``scope='joint'`` concatenates the n per-agent encodings in agent order
    (inactive agents contribute zeros); ``scope='local'`` scores each agent
    on its own observation. Either way :meth:`values` returns shape (B, n).
    """

    def __init__(self, encoder, n_agents: int, scope: str, rng: np.random.Generator, hidden=HIDDEN):
        if scope not in ("joint", "local"):
            raise ValueError(f"critic scope must be 'joint' or 'local', got {scope!r}")
        self.encoder = encoder
        self.n_agents = n_agents
        self.scope = scope
        in_dim = encoder.out_dim * (n_agents if scope == "joint" else 1)
        self.params = init_critic(in_dim, rng, hidden)

    def values(self, obs, active: Optional[np.ndarray] = None) -> Tensor:
        obs = T.as_tensor(obs)
        b, n = obs.shape[:2]
        flat_obs = T.reshape(obs, (b * n,) + obs.shape[2:])
        enc = self.encoder(flat_obs)
        k = enc.shape[-1]
        if self.scope == "local":
            return T.reshape(critic_forward(enc, self.params), (b, n))
        enc = T.reshape(enc, (b, n, k))
        if active is not None:
            enc = T.mul(enc, np.asarray(active, dtype=np.float64)[:, :, None])
        v = critic_forward(T.reshape(enc, (b, n * k)), self.params)
        return T.matmul(v, np.ones((1, n)))
