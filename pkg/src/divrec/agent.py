"""Actor-critic agent whose action parameterizes the DPP kernel, trained with DDPG.

State: the user's feature vector plus the ``ell`` most recent positive items
(oldest first, left-padded with the sentinel ``-1`` whose feature row is all
zeros). The actor encodes the user vector with a two-layer MLP and the stacked
recent-item features with a two-layer CNN followed by a two-layer MLP, then
maps the concatenation to a tanh-bounded action of the feature dimension. The
critic has its own encoder of the same shape and scores ``[encoding, action]``.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Sequence

import numpy as np

from . import dpp
from .data import TemporalSplit
from .nn import (AdamState, Branches, Conv2D, Dense, Flatten, Network, ReLU, Sequential,
                 Tanh, adam_step, load_networks, save_networks, soft_update)

SENTINEL = -1
TARGET_BOUND = 0.9  # pretraining targets are scaled into [-0.9, 0.9]


@dataclasses.dataclass(frozen=True)
class NetConfig:
    d: int = 30
    ell: int = 5
    user_hidden: tuple = (64, 32)
    conv_channels: int = 8
    item_hidden: tuple = (64, 32)
    actor_hidden: tuple = (64, 32)
    critic_hidden: tuple = (64, 32)

    @property
    def state_dim(self) -> int:
        return self.user_hidden[-1] + self.item_hidden[-1]


@dataclasses.dataclass(frozen=True)
class DDPGConfig:
    gamma: float = 0.95
    tau: float = 0.01
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    batch_size: int = 64
    buffer_capacity: int = 100_000
    sigma0: float = 0.2
    sigma_decay: float = 0.9995
    sigma_floor: float = 0.02


@dataclasses.dataclass(frozen=True)
class AgentState:
    user_features: np.ndarray
    recent_items: tuple

    def __post_init__(self):
        if len(self.recent_items) < 2:
            raise ValueError("need at least 2 recent items for the convolutional encoder")


@dataclasses.dataclass(frozen=True)
class Transition:
    state: AgentState
    action: np.ndarray
    reward: float
    next_state: AgentState


def initial_recent(items: Sequence[int], ell: int) -> tuple:
    """Last ``ell`` items, left-padded with the sentinel."""
    items = [int(i) for i in items][-ell:] if ell else []
    return (SENTINEL,) * (ell - len(items)) + tuple(items)


def advance_recent(recent: tuple, hits: Sequence[int]) -> tuple:
    """Append positively rewarded items in order, dropping the oldest."""
    if not hits:
        return recent
    ell = len(recent)
    return (tuple(recent) + tuple(int(h) for h in hits))[-ell:]


# ---------------------------------------------------------------------------
# networks


def _mlp(sizes, rng, last_act="relu") -> list:
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        act = last_act if last else "relu"
        init = "kaiming" if act == "relu" else "xavier"
        layers.append(Dense(a, b, init, rng))
        if act == "relu":
            layers.append(ReLU())
        elif act == "tanh":
            layers.append(Tanh())
    return layers


def make_encoder(cfg: NetConfig, rng) -> Branches:
    if cfg.ell < 2:
        raise ValueError("ell must be >= 2 (convolution height is 2)")
    c = cfg.conv_channels
    user = Sequential(_mlp((cfg.d,) + tuple(cfg.user_hidden), rng))
    conv_out = c * (cfg.ell - 2)
    items = Sequential([
        Conv2D(1, c, 2, cfg.d, rng), ReLU(),   # full-width height-2 filters -> (c, ell-1, 1)
        Conv2D(c, c, 2, 1, rng), ReLU(),       # height-2 over the channel map -> (c, ell-2, 1)
        Flatten(),
        *_mlp((conv_out,) + tuple(cfg.item_hidden), rng),
    ])
    return Branches([user, items])


def make_actor(cfg: NetConfig, rng) -> Network:
    head = Sequential(_mlp((cfg.state_dim,) + tuple(cfg.actor_hidden) + (cfg.d,), rng, "tanh"))
    return Network(Sequential([make_encoder(cfg, rng), head]))


def make_critic(cfg: NetConfig, rng) -> Network:
    head = Sequential(_mlp((cfg.state_dim + cfg.d,) + tuple(cfg.critic_hidden) + (1,), rng, None))
    return Network(Sequential([Branches([make_encoder(cfg, rng), Sequential([])]), head]))


def state_inputs(user_features: np.ndarray, recent: np.ndarray, padded_features: np.ndarray):
    """Batch network inputs ``(U (B, d), X (B, 1, ell, d))``.

    ``padded_features`` has an extra all-zero last row so that the sentinel
    ``-1`` indexes it.
    """
    U = np.atleast_2d(np.asarray(user_features, dtype=float))
    R = np.atleast_2d(np.asarray(recent, dtype=np.int64))
    X = padded_features[R]
    return U, X[:, None, :, :]


def encode_state(actor: Network, inputs) -> np.ndarray:
    """State representation ``[v, z]`` produced by the actor's encoder."""
    return actor.root.layers[0].forward(inputs)[0]


def act(actor: Network, representation: np.ndarray) -> np.ndarray:
    return actor.root.layers[1].forward(representation)[0]


def critic_value(critic: Network, inputs, action) -> np.ndarray:
    return critic((inputs, np.atleast_2d(action)))[:, 0]


class GaussianNoise:
    """Additive N(0, sigma^2) exploration with multiplicative sigma decay and a floor."""

    def __init__(self, sigma0=0.2, decay=0.9995, floor=0.02, rng=None):
        self.sigma = float(sigma0)
        self.decay = decay
        self.floor = floor
        self.rng = np.random.default_rng() if rng is None else rng

    def __call__(self, action: np.ndarray) -> np.ndarray:
        noisy = action + self.rng.normal(0.0, 1.0, size=np.shape(action)) * self.sigma
        self.sigma = max(self.floor, self.sigma * self.decay)
        return np.clip(noisy, -1.0, 1.0)


class ReplayBuffer:
    """Fixed-capacity ring buffer; sampling is uniform without replacement."""

    def __init__(self, capacity: int, d: int, ell: int, rng=None):
        self.capacity = capacity
        self.rng = np.random.default_rng() if rng is None else rng
        self.s_user = np.zeros((capacity, d))
        self.s_recent = np.full((capacity, ell), SENTINEL, dtype=np.int64)
        self.action = np.zeros((capacity, d))
        self.reward = np.zeros(capacity)
        self.n_user = np.zeros((capacity, d))
        self.n_recent = np.full((capacity, ell), SENTINEL, dtype=np.int64)
        self.size = 0
        self.cursor = 0

    def __len__(self) -> int:
        return self.size

    def push(self, t: Transition) -> None:
        i = self.cursor
        self.s_user[i] = t.state.user_features
        self.s_recent[i] = t.state.recent_items
        self.action[i] = t.action
        self.reward[i] = t.reward
        self.n_user[i] = t.next_state.user_features
        self.n_recent[i] = t.next_state.recent_items
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int) -> dict:
        if self.size < n:
            raise ValueError(f"buffer holds {self.size} transitions, need {n}")
        idx = self.rng.choice(self.size, size=n, replace=False)
        return {
            "s_user": self.s_user[idx], "s_recent": self.s_recent[idx],
            "action": self.action[idx], "reward": self.reward[idx],
            "n_user": self.n_user[idx], "n_recent": self.n_recent[idx], "index": idx,
        }


class DDPGAgent:
    def __init__(self, item_features: np.ndarray, net: NetConfig = NetConfig(),
                 cfg: DDPGConfig = DDPGConfig(), seed: int = 0, nets: dict | None = None):
        if item_features.shape[1] != net.d:
            raise ValueError("item feature dimension differs from the network config")
        self.net_cfg = net
        self.cfg = cfg
        self.padded = np.vstack([item_features, np.zeros((1, net.d))])
        rng = np.random.default_rng(seed)
        if nets is None:
            self.actor = make_actor(net, rng)
            self.critic = make_critic(net, rng)
            self.target_actor = self.actor.copy()
            self.target_critic = self.critic.copy()
        else:
            self.actor, self.critic = nets["actor"], nets["critic"]
            self.target_actor = nets.get("target_actor") or self.actor.copy()
            self.target_critic = nets.get("target_critic") or self.critic.copy()
        self.actor_opt = AdamState.for_network(self.actor, cfg.actor_lr)
        self.critic_opt = AdamState.for_network(self.critic, cfg.critic_lr)
        self.flags = {"nonfinite_critic": 0, "nonfinite_actor": 0}

    # -- inference -------------------------------------------------------

    def inputs(self, user_features, recent):
        return state_inputs(user_features, recent, self.padded)

    def act(self, user_features, recent) -> np.ndarray:
        return self.actor(self.inputs(user_features, recent))

    def q_value(self, user_features, recent, action) -> np.ndarray:
        return critic_value(self.critic, self.inputs(user_features, recent), action)

    # -- learning --------------------------------------------------------

    def targets(self, batch: dict) -> np.ndarray:
        """``y = r + gamma * Q~(s', phi~(s'))`` from the target networks (no gradients)."""
        nxt = self.inputs(batch["n_user"], batch["n_recent"])
        q_next = self.target_critic((nxt, self.target_actor(nxt)))[:, 0]
        return batch["reward"] + self.cfg.gamma * q_next

    def critic_update(self, batch: dict) -> float:
        y = self.targets(batch)
        x = self.inputs(batch["s_user"], batch["s_recent"])
        q, tape = self.critic.forward((x, batch["action"]))
        diff = q[:, 0] - y
        loss = float(np.mean(diff ** 2))
        if not np.isfinite(loss):
            self.flags["nonfinite_critic"] += 1
            return loss
        grads, _ = self.critic.backward(tape, (2.0 / len(y)) * diff[:, None])
        if not adam_step(self.critic, grads, self.critic_opt):
            self.flags["nonfinite_critic"] += 1
        return loss

    def actor_update(self, batch: dict) -> float:
        """Descend on ``-mean Q(s, phi(s))`` with the critic held fixed."""
        x = self.inputs(batch["s_user"], batch["s_recent"])
        a, a_tape = self.actor.forward(x)
        q, q_tape = self.critic.forward((x, a))
        objective = float(np.mean(q))
        if not np.isfinite(objective):
            self.flags["nonfinite_actor"] += 1
            return objective
        _, (_, g_action) = self.critic.backward(q_tape, np.full_like(q, -1.0 / len(q)))
        grads, _ = self.actor.backward(a_tape, g_action)
        if not adam_step(self.actor, grads, self.actor_opt):
            self.flags["nonfinite_actor"] += 1
        return objective

    def soft_update_targets(self, tau: float | None = None) -> None:
        tau = self.cfg.tau if tau is None else tau
        soft_update(self.actor, self.target_actor, tau)
        soft_update(self.critic, self.target_critic, tau)

    def train_step(self, buffer: ReplayBuffer, batch_size: int | None = None) -> dict:
        batch = buffer.sample(batch_size or self.cfg.batch_size)
        critic_loss = self.critic_update(batch)
        actor_objective = self.actor_update(batch)
        self.soft_update_targets()
        return {"critic_loss": critic_loss, "actor_objective": actor_objective,
                "mean_reward": float(np.mean(batch["reward"]))}

    @property
    def numerical_flags(self) -> int:
        return sum(self.flags.values())

    # -- persistence -----------------------------------------------------

    def networks(self) -> dict:
        return {"actor": self.actor, "critic": self.critic,
                "target_actor": self.target_actor, "target_critic": self.target_critic}

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"net": dataclasses.asdict(self.net_cfg), "ddpg": dataclasses.asdict(self.cfg)}
        meta.update(extra or {})
        save_networks(path, self.networks(), meta)

    @classmethod
    def load(cls, path, item_features, cfg: DDPGConfig | None = None) -> "DDPGAgent":
        nets, extra = load_networks(path)
        net_cfg = NetConfig(**{k: tuple(v) if isinstance(v, list) else v
                               for k, v in extra["net"].items()})
        cfg = cfg or DDPGConfig(**extra["ddpg"])
        return cls(item_features, net_cfg, cfg, nets=nets)


# ---------------------------------------------------------------------------
# pretraining


def pretrain_pairs(split: TemporalSplit, ell: int, users=None):
    """(user, recent items, next item) for every train position past the first."""
    seqs = split.train.items_by_user()
    users = range(split.user_count) if users is None else users
    rows_u, rows_r, rows_n = [], [], []
    for u in users:
        seq = seqs[u]
        for p in range(1, len(seq)):
            rows_u.append(u)
            rows_r.append(initial_recent(seq[max(0, p - ell):p], ell))
            rows_n.append(int(seq[p]))
    return (np.asarray(rows_u, dtype=np.int64), np.asarray(rows_r, dtype=np.int64).reshape(-1, ell),
            np.asarray(rows_n, dtype=np.int64))


def pretrain_targets(item_features: np.ndarray) -> np.ndarray:
    """Item features divided by their global max-abs entry, scaled into (-1, 1)."""
    scale = np.max(np.abs(item_features))
    return item_features * (TARGET_BOUND / scale)


def pretrain_actor(agent: DDPGAgent, split: TemporalSplit, user_features: np.ndarray,
                   epochs: int = 5, batch_size: int = 64, seed: int = 0,
                   users=None, full_batch: bool = False) -> list:
    """Fit the actor to the (rescaled) feature vector of the next train item.

    Returns the mean squared distance per epoch, measured over all pairs
    after each epoch.
    """
    rng = np.random.default_rng(seed)
    pu, pr, pn = pretrain_pairs(split, agent.net_cfg.ell, users)
    targets = pretrain_targets(agent.padded[:-1])[pn]
    inputs = agent.inputs(user_features[pu], pr)

    def loss_all():
        return float(np.mean(np.sum((agent.actor(inputs) - targets) ** 2, axis=1)))

    history = [loss_all()]
    for _ in range(epochs):
        batches = [np.arange(len(pn))] if full_batch else \
            np.array_split(rng.permutation(len(pn)), max(1, math.ceil(len(pn) / batch_size)))
        for idx in batches:
            x = (inputs[0][idx], inputs[1][idx])
            out, tape = agent.actor.forward(x)
            g = 2.0 * (out - targets[idx]) / len(idx)
            grads, _ = agent.actor.backward(tape, g)
            adam_step(agent.actor, grads, agent.actor_opt)
        history.append(loss_all())
    soft_update(agent.actor, agent.target_actor, 1.0)
    return history


# ---------------------------------------------------------------------------
# offline transition generation from the train log


class TrainLogSession:
    """One user's replay of their own train log as an interactive episode.

    Starts from the first ``ell`` train positives; the remaining positives are
    the items that earn reward. Recommended items leave the candidate pool,
    matched items are consumed.
    """

    def __init__(self, user: int, seq: np.ndarray, n_items: int, ell: int):
        self.user = user
        start = seq[:ell]
        self.recent = initial_recent(start, ell)
        self.future = set(int(i) for i in seq[ell:])
        self.candidates = np.ones(n_items, dtype=bool)
        self.candidates[start] = False

    def candidate_ids(self) -> np.ndarray:
        return np.flatnonzero(self.candidates)

    def step(self, items: Sequence[int]):
        rewards = [1.0 if i in self.future else 0.0 for i in items]
        hits = [i for i, r in zip(items, rewards) if r > 0]
        self.future.difference_update(hits)
        self.candidates[list(items)] = False
        prev = self.recent
        self.recent = advance_recent(prev, hits)
        return rewards, prev, self.recent


def rollout_train_log(agent: DDPGAgent, split: TemporalSplit, user_features: np.ndarray,
                      buffer: ReplayBuffer, *, episodes: int, horizon: int, k: int,
                      beta: float, noise: GaussianNoise, rng, learn: str = "both",
                      log=None) -> list:
    """Generate transitions on train-log sessions and optionally learn from them.

    ``learn`` is ``"both"`` (full DDPG step), ``"critic"`` (critic only, actor
    frozen, targets synced) or ``"none"``. ``log`` receives one dict per
    learning step. Returns the per-episode reward sums.
    """
    seqs = split.train.items_by_user()
    eligible = [u for u in range(split.user_count) if len(seqs[u]) > agent.net_cfg.ell]
    totals = []
    step = 0
    for _ in range(episodes):
        u = int(rng.choice(eligible))
        sess = TrainLogSession(u, seqs[u], split.item_count, agent.net_cfg.ell)
        episode_reward = 0.0
        for _t in range(horizon):
            cands = sess.candidate_ids()
            if len(cands) == 0 or not sess.future:
                break
            action = noise(agent.act(user_features[u], sess.recent)[0])
            items, _, _ = dpp.select_diverse(action, agent.padded[:-1], cands, beta, k)
            rewards, prev, nxt = sess.step(items)
            reward = float(sum(rewards))
            episode_reward += reward
            buffer.push(Transition(AgentState(user_features[u], prev), action, reward,
                                   AgentState(user_features[u], nxt)))
            if learn != "none" and len(buffer) >= agent.cfg.batch_size:
                if learn == "both":
                    diag = agent.train_step(buffer)
                else:
                    batch = buffer.sample(agent.cfg.batch_size)
                    diag = {"critic_loss": agent.critic_update(batch), "actor_objective": float("nan"),
                            "mean_reward": float(np.mean(batch["reward"]))}
                    soft_update(agent.critic, agent.target_critic, agent.cfg.tau)
                    soft_update(agent.actor, agent.target_actor, 1.0)
                step += 1
                if log is not None:
                    log({"step": step, **diag, "sigma": noise.sigma})
        totals.append(episode_reward)
    return totals
