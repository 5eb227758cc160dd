"""Evaluation: precision / intra-list diversity, the offline replay protocol,
the MMR-style simulated user and the online learning loop.

Selectors decide how a recommendation set is drawn from an action:
``"dpp"`` (greedy MAP on the personalized kernel) or ``"relevance"`` (plain
top-k of the linear relevance score, the diversity-free reference).
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
from itertools import combinations
from typing import Callable, Iterable, Sequence

import numpy as np

from . import dpp
from .agent import (AgentState, DDPGAgent, GaussianNoise, ReplayBuffer, Transition,
                    advance_recent, initial_recent)
from .data import CategoryTable, Dataset
from .mf import FactorModel, NormalizedFeatures, topk

log = logging.getLogger(__name__)

RECORD_FIELDS = ("run_id", "mode", "user", "epoch", "precision", "diversity", "reward_sum")
CURVE_FIELDS = ("run_id", "mode", "epoch", "mean_precision", "mean_diversity")


@dataclasses.dataclass(frozen=True)
class EpisodeConfig:
    k: int = 5
    T: int = 50
    beta: float = 0.5
    seed: int = 0
    rho: float = 0.5
    selector: str = "dpp"
    similarity: str = "cosine"  # simulator dissimilarity source: "cosine" | "jaccard"
    history_init: str = "empty"  # simulator R at start: "empty" | "train" (train positives)

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2 for diversity to be defined")
        dpp.alpha_of_beta(self.beta)
        if self.selector not in ("dpp", "relevance"):
            raise ValueError(f"unknown selector {self.selector!r}")
        if self.similarity not in ("cosine", "jaccard"):
            raise ValueError(f"unknown similarity {self.similarity!r}")
        if self.history_init not in ("empty", "train"):
            raise ValueError(f"unknown history_init {self.history_init!r}")


@dataclasses.dataclass(frozen=True)
class EpochRecord:
    user: int
    epoch: int
    items: tuple
    rewards: tuple
    precision: float
    diversity: float

    @property
    def reward_sum(self) -> float:
        return float(sum(self.rewards))


# ---------------------------------------------------------------------------
# metrics


def precision_at(items: Sequence[int], ground_truth) -> float:
    if len(items) == 0:
        raise ValueError("empty recommendation set")
    truth = set(ground_truth)
    return sum(1 for i in items if i in truth) / len(items)


def jaccard(a: frozenset, b: frozenset) -> float:
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def ild_diversity(items: Sequence[int], categories: CategoryTable) -> float:
    """Intra-list distance with Jaccard category similarity.

    The ordered-pair double sum scaled by ``2 / (k (k - 1))`` counts every
    unordered pair twice; the mean over unordered pairs is the same number.
    """
    k = len(items)
    if k < 2:
        raise ValueError("diversity needs at least two items")
    total = sum(jaccard(categories[i], categories[j]) for i, j in combinations(items, 2))
    return 1.0 - total / (k * (k - 1) / 2)


# ---------------------------------------------------------------------------
# selection


def choose(action, item_features, candidates, config: EpisodeConfig) -> tuple[list, bool]:
    """Recommendation set for ``action``; second value flags an exp clamp."""
    k = min(config.k, len(candidates))
    if config.selector == "relevance":
        return dpp.select_relevant(action, item_features, candidates, k), False
    items, _, clamped = dpp.select_diverse(action, item_features, candidates, config.beta, k)
    return items, clamped


def _record(user, epoch, items, hits, categories) -> EpochRecord:
    rewards = tuple(1.0 if i in hits else 0.0 for i in items)
    div = ild_diversity(items, categories) if len(items) >= 2 else 0.0
    return EpochRecord(user, epoch, tuple(items), rewards, sum(rewards) / len(items), div)


# ---------------------------------------------------------------------------
# offline protocol


def offline_episode(user: int, agent: DDPGAgent, dataset: Dataset,
                    features: NormalizedFeatures, config: EpisodeConfig,
                    train_items=None, test_items=None) -> list[EpochRecord]:
    """Replay protocol against the user's held-out positives with a frozen agent.

    The state and display list start from the last ``ell`` train items;
    candidates are all items the user did not interact with in train. Test
    hits enter the display list FIFO and recommended items leave the pool.
    """
    split = dataset.split
    seq = split.train.items_by_user()[user] if train_items is None else train_items
    truth = set(int(i) for i in (split.test.items_by_user()[user] if test_items is None else test_items))
    if not truth:
        log.info("user %d has no test positives; skipped", user)
        return []
    recent = initial_recent(seq, agent.net_cfg.ell)
    pool = np.ones(split.item_count, dtype=bool)
    pool[seq] = False
    records = []
    for t in range(1, config.T + 1):
        cands = np.flatnonzero(pool)
        if len(cands) == 0:
            break
        action = agent.act(features.user_features[user], recent)[0]
        items, _ = choose(action, features.item_features, cands, config)
        hits = [i for i in items if i in truth]
        records.append(_record(user, t, items, set(hits), dataset.categories))
        recent = advance_recent(recent, hits)
        pool[items] = False
    return records


def offline_topk_episode(user: int, model: FactorModel, dataset: Dataset,
                         config: EpisodeConfig) -> list[EpochRecord]:
    """Non-interactive baseline: walk down the model's fixed ranking ``k`` at a time."""
    split = dataset.split
    seq = split.train.items_by_user()[user]
    truth = set(int(i) for i in split.test.items_by_user()[user])
    if not truth:
        return []
    pool = np.ones(split.item_count, dtype=bool)
    pool[seq] = False
    cands = np.flatnonzero(pool)
    ranking = topk(model.scores(user, cands), cands, len(cands))
    records = []
    for t in range(1, config.T + 1):
        items = [int(i) for i in ranking[(t - 1) * config.k:t * config.k]]
        if not items:
            break
        records.append(_record(user, t, items, truth.intersection(items), dataset.categories))
    return records


def evaluate_offline(agent: DDPGAgent, dataset: Dataset, features: NormalizedFeatures,
                     config: EpisodeConfig, users: Iterable[int] | None = None) -> dict:
    users = range(dataset.split.user_count) if users is None else users
    out = {}
    for u in users:
        recs = offline_episode(u, agent, dataset, features, config)
        if recs:
            out[u] = recs
    return out


# ---------------------------------------------------------------------------
# simulated user


@dataclasses.dataclass
class SimulatedUser:
    """MMR-style responder: LMF preference blended with novelty w.r.t. history ``R``."""

    user: int
    delta: float
    rho: float
    history: list
    preference: Callable  # items -> probabilities
    similarity: Callable  # (item, history list) -> similarities to each history item


def cosine_similarity_fn(features: NormalizedFeatures) -> Callable:
    X = features.item_features

    def sim(item, history):
        return X[history] @ X[item]
    return sim


def jaccard_similarity_fn(categories: CategoryTable) -> Callable:
    def sim(item, history):
        return np.array([jaccard(categories[item], categories[j]) for j in history])
    return sim


def simulate_feedback(user: SimulatedUser, items: Sequence[int]) -> list[int]:
    """Sequential feedback: each accepted item joins ``R`` before the next is judged."""
    probs = np.asarray(user.preference(list(items)), dtype=float)
    rewards = []
    for item, p in zip(items, probs):
        if user.history:
            novelty = float(np.mean(1.0 - user.similarity(item, user.history)))
            p = user.delta * p + (1.0 - user.delta) * novelty
        if p > user.rho:
            rewards.append(1)
            user.history.append(int(item))
        else:
            rewards.append(0)
    return rewards


def make_simulated_users(users: Sequence[int], dataset: Dataset, lmf: FactorModel,
                         features: NormalizedFeatures, config: EpisodeConfig) -> list[SimulatedUser]:
    """One simulated user per index; ``delta`` drawn uniformly in (0, 1) from the run seed."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xDE17A]))
    deltas = rng.uniform(np.nextafter(0.0, 1.0), 1.0, size=len(users))
    sim = (cosine_similarity_fn(features) if config.similarity == "cosine"
           else jaccard_similarity_fn(dataset.categories))
    seqs = dataset.split.train.items_by_user()
    out = []
    for u, delta in zip(users, deltas):
        out.append(SimulatedUser(int(u), float(delta), config.rho,
                                 [int(i) for i in seqs[u]] if config.history_init == "train" else [],
                                 lambda items, u=int(u): lmf.probability(u, np.asarray(items)),
                                 sim))
    return out


class OnlineSession:
    """One simulated user's interactive episode, advanced one epoch at a time."""

    def __init__(self, sim_user: SimulatedUser, agent: DDPGAgent, dataset: Dataset,
                 features: NormalizedFeatures, config: EpisodeConfig):
        self.sim_user = sim_user
        self.agent = agent
        self.dataset = dataset
        self.features = features
        self.config = config
        seq = dataset.split.train.items_by_user()[sim_user.user]
        self.recent = initial_recent(seq, agent.net_cfg.ell)
        self.pool = np.ones(dataset.split.item_count, dtype=bool)
        self.pool[seq] = False
        self.records: list[EpochRecord] = []
        self.exhausted = False

    def step(self, noise=None, buffer=None, learn=True, diagnostics=None) -> EpochRecord | None:
        agent, u = self.agent, self.sim_user.user
        t = len(self.records) + 1
        cands = np.flatnonzero(self.pool)
        if len(cands) == 0:
            log.warning("user %d: candidates exhausted at epoch %d", u, t)
            self.exhausted = True
            return None
        ufeat = self.features.user_features[u]
        action = agent.act(ufeat, self.recent)[0]
        if noise is not None:
            action = noise(action)
        items, _ = choose(action, self.features.item_features, cands, self.config)
        rewards = simulate_feedback(self.sim_user, items)
        hits = [i for i, r in zip(items, rewards) if r]
        nxt = advance_recent(self.recent, hits)
        if buffer is not None:
            buffer.push(Transition(AgentState(ufeat, self.recent), action, float(sum(rewards)),
                                   AgentState(ufeat, nxt)))
            if learn and len(buffer) >= agent.cfg.batch_size:
                diag = agent.train_step(buffer)
                if diagnostics is not None:
                    diagnostics.append(diag)
        record = _record(u, t, items, set(hits), self.dataset.categories)
        self.records.append(record)
        self.recent = nxt
        self.pool[items] = False
        return record


def online_episode(sim_user: SimulatedUser, agent: DDPGAgent, dataset: Dataset,
                   features: NormalizedFeatures, config: EpisodeConfig, *,
                   noise: GaussianNoise | None = None, buffer: ReplayBuffer | None = None,
                   learn: bool = True, diagnostics: list | None = None) -> list[EpochRecord]:
    """All ``T`` epochs of one user against the simulator; the agent may keep learning."""
    sess = OnlineSession(sim_user, agent, dataset, features, config)
    for _ in range(config.T):
        if sess.step(noise, buffer, learn, diagnostics) is None:
            break
    return sess.records


def evaluate_online(agent: DDPGAgent, dataset: Dataset, features: NormalizedFeatures,
                    lmf: FactorModel, config: EpisodeConfig, users: Sequence[int], *,
                    learn: bool = True, sigma0: float | None = None,
                    schedule: str = "round_robin", diagnostics: list | None = None) -> dict:
    """Simulated online run through one shared agent; returns records per user.

    ``schedule="round_robin"`` advances every user by one epoch before any user
    moves on, so epoch ``t`` of every user sees the agent after the same amount
    of online learning. ``"sequential"`` plays each user's whole episode in turn.
    """
    seeds = np.random.SeedSequence([config.seed, 0x0E11]).spawn(2)
    cfg = agent.cfg
    noise = GaussianNoise(cfg.sigma0 if sigma0 is None else sigma0, cfg.sigma_decay,
                          cfg.sigma_floor if sigma0 is None else min(cfg.sigma_floor, sigma0),
                          np.random.default_rng(seeds[0]))
    buffer = ReplayBuffer(cfg.buffer_capacity, agent.net_cfg.d, agent.net_cfg.ell,
                          np.random.default_rng(seeds[1]))
    sessions = [OnlineSession(s, agent, dataset, features, config)
                for s in make_simulated_users(users, dataset, lmf, features, config)]
    if schedule == "round_robin":
        for _ in range(config.T):
            for sess in sessions:
                if not sess.exhausted:
                    sess.step(noise, buffer, learn, diagnostics)
    elif schedule == "sequential":
        for sess in sessions:
            for _ in range(config.T):
                if sess.step(noise, buffer, learn, diagnostics) is None:
                    break
    else:
        raise ValueError(f"unknown schedule {schedule!r}")
    return {sess.sim_user.user: sess.records for sess in sessions}


# ---------------------------------------------------------------------------
# aggregation and CSV output


def aggregate(records: dict) -> list[dict]:
    """Per-epoch means over users; users without records are not counted."""
    by_epoch: dict = {}
    for user in sorted(records):
        for r in records[user]:
            by_epoch.setdefault(r.epoch, []).append(r)
    curves = []
    for epoch in sorted(by_epoch):
        rs = by_epoch[epoch]
        curves.append({
            "epoch": epoch,
            "mean_precision": float(np.mean([r.precision for r in rs])),
            "mean_diversity": float(np.mean([r.diversity for r in rs])),
            "mean_reward": float(np.mean([r.reward_sum for r in rs])),
            "users": len(rs),
        })
    return curves


def _fmt(x: float) -> str:
    return repr(float(x))


def records_csv(run_id: str, runs: dict) -> str:
    """``runs`` maps mode -> {user: [EpochRecord]}."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_FIELDS)
    for mode, records in runs.items():
        for user in sorted(records):
            for r in records[user]:
                w.writerow([run_id, mode, user, r.epoch, _fmt(r.precision), _fmt(r.diversity),
                            _fmt(r.reward_sum)])
    return buf.getvalue()


def curves_csv(run_id: str, runs: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_FIELDS)
    for mode, records in runs.items():
        for row in aggregate(records):
            w.writerow([run_id, mode, row["epoch"], _fmt(row["mean_precision"]),
                        _fmt(row["mean_diversity"])])
    return buf.getvalue()


def mean_of(records: dict, field: str) -> float:
    values = [getattr(r, field) for recs in records.values() for r in recs]
    return float(np.mean(values)) if values else float("nan")
