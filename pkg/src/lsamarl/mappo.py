"""MAPPO training loop with parameter sharing (IPPO via a local critic)."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .lsa import FlattenEncoder, LsaEncoder
from .nets import Actor, ActionDistribution, Critic, entropy_tensor, log_prob_tensor, sample_action
from .sim import Action, ScenarioConfig, reset, step

log = logging.getLogger(__name__)


@dataclass
class Hyperparams:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    value_coef: float = 1.0
    entropy_coef: float = 0.01
    epochs_per_batch: int = 4
    n_minibatches: int = 4
    rollout_len: int = 128
    lr: float = 3e-4
    n_envs: int = 4
    critic_scope: str = "joint"
    encoder: str = "lsa"
    share_encoder: bool = False
    n_heads: Optional[int] = None
    n_blocks: int = 1
    hidden: tuple = (256, 256)
    max_grad_norm: float = 0.5
    reward_scale: float = 0.01
    normalize_advantages: bool = True
    logit_reg: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.clip_eps <= 0 or min(self.value_coef, self.entropy_coef, self.logit_reg) < 0:
            raise ValueError("clip radius must be positive and loss weights non-negative")
        if self.critic_scope not in ("joint", "local"):
            raise ValueError(f"critic_scope must be 'joint' or 'local', got {self.critic_scope!r}")
        if self.encoder not in ("lsa", "flatten"):
            raise ValueError(f"encoder must be 'lsa' or 'flatten', got {self.encoder!r}")
        if min(self.epochs_per_batch, self.n_minibatches, self.rollout_len, self.n_envs) < 1:
            raise ValueError("epochs, minibatches, rollout length and env count must be positive")


# ---------------------------------------------------------------------------
# model


class MappoModel:
    """Shared actor plus critic, each with its own encoder unless shared."""

    def __init__(self, cfg: ScenarioConfig, hp: Hyperparams, rng: np.random.Generator):
        self.n_agents = cfg.n_cav
        n, x = cfg.n_obs, cfg.n_features

        def make_encoder(prefix):
            if hp.encoder == "flatten":
                return FlattenEncoder(n, x)
            return LsaEncoder(n, x, hp.n_heads, hp.n_blocks, rng=rng, prefix=prefix)

        actor_enc = make_encoder("lsa")
        critic_enc = actor_enc if hp.share_encoder else make_encoder("critic.lsa")
        self.actor = Actor(actor_enc, rng, hp.hidden)
        self.critic = Critic(critic_enc, cfg.n_cav, hp.critic_scope, rng, hp.hidden)

        self.actor_names = list(actor_enc.params) + list(self.actor.params)
        critic_only = {} if hp.share_encoder else critic_enc.params
        self.critic_names = list(critic_only) + list(self.critic.params)
        self.params = {**actor_enc.params, **self.actor.params, **critic_only, **self.critic.params}

    def parameters(self) -> list:
        return list(self.params.values())

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, arrays: dict) -> None:
        for name, p in self.params.items():
            if arrays[name].shape != p.shape:
                raise T.ShapeError(f"{name}: snapshot shape {arrays[name].shape} != {p.shape}")
            p.data[...] = arrays[name]

    def distribution(self, obs: np.ndarray) -> ActionDistribution:
        return self.actor.distribution(obs)

    def values(self, obs: np.ndarray, active: np.ndarray) -> np.ndarray:
        return self.critic.values(obs, active).data


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class RolloutBatch:
    """Time-major arrays, shape (T, E, n, ...) unless noted."""

    obs: np.ndarray
    active: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray          # (T + 1, E, n), last row is the bootstrap
    next_values: np.ndarray     # successor value used in the TD residual
    rewards: np.ndarray         # shared reward replicated per agent
    dones: np.ndarray
    terminals: np.ndarray
    episodes: list = field(default_factory=list)

    @property
    def shape(self) -> tuple:
        return self.actions.shape


class EnvPool:
    """Independent environment instances with per-index seed streams."""

    def __init__(self, cfg: ScenarioConfig, n_envs: int, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.rngs = [np.random.default_rng([seed, i]) for i in range(n_envs)]
        self.episode_counts = [0] * n_envs
        self.states = []
        self.obs = []
        self.ep_reward = [0.0] * n_envs
        self.ep_steps = [0] * n_envs
        for i in range(n_envs):
            self._reset(i)

    def __len__(self) -> int:
        return len(self.states)

    def _episode_seed(self, i: int) -> int:
        return int(np.random.SeedSequence([self.seed, i, self.episode_counts[i]]).generate_state(1)[0])

    def _reset(self, i: int) -> None:
        state, obs = reset(self.cfg, self._episode_seed(i))
        self.episode_counts[i] += 1
        if i < len(self.states):
            self.states[i], self.obs[i] = state, obs
        else:
            self.states.append(state)
            self.obs.append(obs)
        self.ep_reward[i], self.ep_steps[i] = 0.0, 0

    def joint_obs(self) -> np.ndarray:
        return np.stack([np.stack(o) for o in self.obs])

    def active(self) -> np.ndarray:
        return np.array([s.active_agents() for s in self.states], dtype=bool)


def collect_rollout(pool: EnvPool, model: MappoModel, length: int) -> RolloutBatch:
    """Run ``length`` steps in every env with the shared actor; auto-reset on done."""
    n_env, n = len(pool), model.n_agents
    cfg = pool.cfg
    shape = (length, n_env, n)
    obs = np.zeros(shape + (cfg.n_obs, cfg.n_features))
    active = np.zeros(shape, dtype=bool)
    actions = np.full(shape, int(Action.IDLE), dtype=np.int64)
    log_probs = np.zeros(shape)
    values = np.zeros((length + 1, n_env, n))
    rewards = np.zeros(shape)
    dones = np.zeros(shape)
    terminals = np.zeros(shape)
    boot = []  # (t, env, agent mask, final joint obs, active-at-t mask)
    episodes = []

    for t in range(length):
        o = pool.joint_obs()
        act = pool.active()
        obs[t], active[t] = o, act
        values[t] = model.values(o, act)
        dist = model.distribution(o.reshape((n_env * n,) + o.shape[2:]))
        for e in range(n_env):
            rows = slice(e * n, (e + 1) * n)
            sub = ActionDistribution(dist.logits[rows])
            a, lp = sample_action(sub, pool.rngs[e])
            actions[t, e] = np.where(act[e], a, int(Action.IDLE))
            log_probs[t, e] = np.where(act[e], lp, 0.0)

        for e in range(n_env):
            state, next_obs, r, done, info = step(pool.states[e], actions[t, e].tolist())
            pool.obs[e] = next_obs
            rewards[t, e] = r
            pool.ep_reward[e] += r
            pool.ep_steps[e] += 1
            crashed = np.zeros(n, dtype=bool)
            crashed[info["crashed_cavs"]] = True
            now_active = np.array(info["active"], dtype=bool)
            ended = act[e] & (~now_active | done)
            truncated = ended & ~crashed
            dones[t, e] = np.where(act[e], ended, 1.0)
            terminals[t, e] = np.where(act[e], crashed, 1.0)
            if truncated.any():
                boot.append((t, e, truncated, np.stack(next_obs), act[e].copy()))
            if done:
                cavs = state.cavs
                episodes.append({
                    "mean_reward": pool.ep_reward[e] / pool.ep_steps[e],
                    "length": pool.ep_steps[e],
                    "crash_rate": sum(v.crashed for v in cavs) / len(cavs),
                })
                pool._reset(e)

    values[length] = model.values(pool.joint_obs(), pool.active())
    next_values = values[1:].copy()
    if boot:
        final_obs = np.stack([b[3] for b in boot])
        masks = np.stack([b[4] for b in boot])
        boot_values = model.values(final_obs, masks)
        for (t, e, which, _, _), v in zip(boot, boot_values):
            next_values[t, e, which] = v[which]

    return RolloutBatch(obs, active, actions, log_probs, values, next_values, rewards,
                        dones, terminals, episodes)


# ---------------------------------------------------------------------------
# advantage estimation and losses


def compute_gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray, gamma: float, lam: float,
                next_values: Optional[np.ndarray] = None, terminals: Optional[np.ndarray] = None):
    """Generalized advantage estimates along axis 0.

    ``values`` has one more row than ``rewards`` (the bootstrap).
    ``dones[t]`` stops the sum from reaching past step t; ``terminals[t]``
    (defaults to ``dones``) additionally drops the successor value.
    ``next_values`` overrides ``values[1:]`` as the successor value, which
    is how truncated trajectories bootstrap from their final observation.
    Returns ``(advantages, returns)`` with ``returns = advantages + values[:-1]``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    terminals = dones if terminals is None else np.asarray(terminals, dtype=np.float64)
    nxt = values[1:] if next_values is None else np.asarray(next_values, dtype=np.float64)
    deltas = rewards + gamma * nxt * (1.0 - terminals) - values[:-1]
    adv = np.zeros_like(rewards)
    running = np.zeros_like(rewards[0])
    for t in range(len(rewards) - 1, -1, -1):
        running = deltas[t] + gamma * lam * (1.0 - dones[t]) * running
        adv[t] = running
    return adv, adv + values[:-1]


def check_return_identity(advantages: np.ndarray, values: np.ndarray, returns: np.ndarray) -> None:
    """Value targets must be exactly advantage plus old value."""
    if not np.array_equal(returns, advantages + values):
        raise AssertionError("value targets drifted from advantages + old values")


def _masked_mean(x: T.Tensor, mask: Optional[np.ndarray]) -> T.Tensor:
    if mask is None:
        return T.mean(x)
    mask = np.asarray(mask, dtype=np.float64)
    return T.mul(T.sum_(T.mul(x, mask)), 1.0 / max(mask.sum(), 1.0))


def policy_loss(log_probs, old_log_probs, advantages, eps: float, mask=None) -> T.Tensor:
    """Clipped surrogate mean(min(rho A, clip(rho, 1-eps, 1+eps) A)); larger is better."""
    ratio = T.exp(T.sub(log_probs, np.asarray(old_log_probs)))
    adv = np.asarray(advantages, dtype=np.float64)
    surrogate = T.minimum(T.mul(ratio, adv), T.mul(T.clip(ratio, 1.0 - eps, 1.0 + eps), adv))
    return _masked_mean(surrogate, mask)


def critic_loss(values, old_values, targets, eps: float, mask=None) -> T.Tensor:
    """Clipped value regression mean(max((V - Vt)^2, (V_clip - Vt)^2))."""
    old = np.asarray(old_values, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    clipped = T.add(T.clip(T.sub(values, old), -eps, eps), old)
    loss = T.maximum(T.square(T.sub(values, targets)), T.square(T.sub(clipped, targets)))
    return _masked_mean(loss, mask)


def total_loss(policy, critic, entropy, value_coef: float, entropy_coef: float, n_agents: int = 1) -> T.Tensor:
    """Negated objective sum_i (L_pi - b1 L_V + b2 H); minimise this.

    With shared parameters every agent term has the same expectation, so
    the sum is the per-agent mean scaled by ``n_agents``.
    """
    objective = T.add(T.sub(policy, T.mul(critic, value_coef)), T.mul(entropy, entropy_coef))
    return T.mul(objective, -float(n_agents))


# ---------------------------------------------------------------------------
# training


class Trainer:
    """Owns the model, optimizer and environment pool for one seed."""

    def __init__(self, cfg: ScenarioConfig, hp: Optional[Hyperparams] = None, seed: int = 0):
        self.cfg = cfg
        self.hp = hp or Hyperparams()
        self.seed = seed
        self.model = MappoModel(cfg, self.hp, np.random.default_rng([seed, 7919]))
        self.optimizer = T.Adam(lr=self.hp.lr)
        self.pool = EnvPool(cfg, self.hp.n_envs, seed)
        self.shuffle_rng = np.random.default_rng([seed, 104729])
        self.epoch = 0

    def train_epoch(self) -> dict:
        hp, model = self.hp, self.model
        batch = collect_rollout(self.pool, model, hp.rollout_len)
        if not (np.isfinite(batch.values).all() and np.isfinite(batch.next_values).all()):
            raise FloatingPointError(f"non-finite critic values in rollout at epoch {self.epoch}")
        rewards = batch.rewards * hp.reward_scale
        adv, returns = compute_gae(rewards, batch.values, batch.dones, hp.gamma, hp.lam,
                                   batch.next_values, batch.terminals)
        check_return_identity(adv, batch.values[:-1], returns)

        active = batch.active
        norm_adv = adv.copy()
        if hp.normalize_advantages and active.any():
            sel = adv[active]
            norm_adv = (adv - sel.mean()) / max(sel.std(), 1e-8)

        steps = batch.shape[0] * batch.shape[1]
        n = model.n_agents

        def flat(a):
            return a.reshape((steps,) + a.shape[2:])

        obs, act_mask, actions = flat(batch.obs), flat(active), flat(batch.actions)
        old_lp, old_v = flat(batch.log_probs), flat(batch.values[:-1])
        f_adv, f_ret = flat(norm_adv), flat(returns)

        stats = {"policy_loss": [], "value_loss": [], "entropy": [], "clip_fraction": []}
        params = model.parameters()
        for _ in range(hp.epochs_per_batch):
            order = self.shuffle_rng.permutation(steps)
            for idx in np.array_split(order, hp.n_minibatches):
                m = act_mask[idx]
                if not m.any():
                    continue
                rows = obs[idx][m]
                with T.Tape() as tape:
                    pre = model.actor.preactivation(rows)
                    logits = T.tanh_elem(pre)
                    lp = log_prob_tensor(logits, actions[idx][m])
                    pl = policy_loss(lp, old_lp[idx][m], f_adv[idx][m], hp.clip_eps)
                    ent = T.mean(entropy_tensor(logits))
                    v = model.critic.values(obs[idx], m)
                    vl = critic_loss(v, old_v[idx], f_ret[idx], hp.clip_eps, mask=m)
                    loss = total_loss(pl, vl, ent, hp.value_coef, hp.entropy_coef, n)
                    if hp.logit_reg:
                        # keeps the output Tanh out of saturation, where Adam would freeze the policy
                        loss = T.add(loss, T.mul(T.mean(T.square(pre)), hp.logit_reg))
                if not np.isfinite(loss.data):
                    raise FloatingPointError(
                        f"non-finite loss at epoch {self.epoch}: policy={pl.data} value={vl.data} entropy={ent.data}")
                grads = T.backward(tape, loss, params)
                T.clip_grad_norm(grads, model.actor_names, hp.max_grad_norm)
                T.clip_grad_norm(grads, model.critic_names, hp.max_grad_norm)
                self.optimizer.step(params, grads)
                ratio = np.exp(lp.data - old_lp[idx][m])
                stats["policy_loss"].append(-float(pl.data))
                stats["value_loss"].append(float(vl.data))
                stats["entropy"].append(float(ent.data))
                stats["clip_fraction"].append(float(np.mean(np.abs(ratio - 1.0) > hp.clip_eps)))

        self.epoch += 1
        if batch.episodes:
            mean_reward = float(np.mean([ep["mean_reward"] for ep in batch.episodes]))
            crash_rate = float(np.mean([ep["crash_rate"] for ep in batch.episodes]))
        else:
            mean_reward = float(batch.rewards[:, :, 0].mean())
            crash_rate = float(batch.terminals[active].mean()) if active.any() else 0.0
        metrics = {
            "epoch": self.epoch,
            "mean_reward_norm": mean_reward,
            **{k: float(np.mean(v)) if v else 0.0 for k, v in stats.items()},
            "crash_rate": crash_rate,
        }
        log.debug("epoch %d: %s", self.epoch, metrics)
        return metrics

    def evaluate(self, episodes: int = 10, seed: int = 10_000) -> dict:
        return evaluate(self.model, self.cfg, episodes, seed)

    def config(self) -> dict:
        return asdict(self.hp)


def evaluate(model: MappoModel, cfg: ScenarioConfig, episodes: int, seed: int = 10_000) -> dict:
    """Greedy rollouts: mean normalized reward, crash rate, mean CAV speed, PV delay (s)."""
    if episodes < 1:
        raise ValueError("episodes must be at least 1")
    rewards, crashes, speeds, delays = [], [], [], []
    dt = 1.0 / cfg.policy_hz
    for k in range(episodes):
        state, obs = reset(cfg, seed + k)
        total, steps, delay, done = 0.0, 0, 0.0, False
        while not done:
            dist = model.distribution(np.stack(obs))
            actions = dist.greedy()
            pv = state.pv
            if pv is not None and not pv.finished and not pv.crashed:
                delay += dt * max(0.0, 1.0 - pv.vx / pv.target_speed)
            state, obs, r, done, info = step(state, actions.tolist())
            speeds.extend(v.vx for v, a in zip(state.cavs, info["active"]) if a)
            total += r
            steps += 1
        cavs = state.cavs
        rewards.append(total / steps)
        crashes.append(sum(v.crashed for v in cavs) / len(cavs))
        delays.append(delay)
    return {
        "mean_reward_norm": float(np.mean(rewards)),
        "crash_rate": float(np.mean(crashes)),
        "mean_speed": float(np.mean(speeds)) if speeds else 0.0,
        "pv_delay": float(np.mean(delays)),
    }
