"""Matrix factorization on implicit positives: BPRMF (pairwise) and LMF (logistic).

BPRMF supplies user/item features to the agent and the DPP kernel; LMF
provides interaction probabilities for the simulated user. Both also act as
non-interactive top-k baselines.
"""

from __future__ import annotations

import dataclasses
import json
import os
import pathlib

import numpy as np

from .data import TemporalSplit

LEARNING_RATE_GRID = tuple(2.0 ** e for e in range(-5, 3))
REGULARIZATION_GRID = tuple(10.0 ** e for e in range(-4, 3))

CHECKPOINT_MAGIC = "divrec-factors"
CHECKPOINT_VERSION = 1


class NumericalError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class MFConfig:
    d: int = 30
    learning_rate: float = 2.0 ** -3
    regularization: float = 1e-2
    epochs: int = 30
    seed: int = 0
    batch_size: int = 128
    use_bias: bool = True  # LMF only
    init_std: float = 0.1


@dataclasses.dataclass
class FactorModel:
    kind: str  # "bpr" | "lmf"
    user_factors: np.ndarray
    item_factors: np.ndarray
    user_bias: np.ndarray
    item_bias: np.ndarray
    seed: int = 0
    history: list = dataclasses.field(default_factory=list)  # per-epoch objective

    @property
    def d(self) -> int:
        return self.user_factors.shape[1]

    def scores(self, user: int, items=None) -> np.ndarray:
        q = self.item_factors if items is None else self.item_factors[items]
        b = self.item_bias if items is None else self.item_bias[items]
        return q @ self.user_factors[user] + b + self.user_bias[user]

    def probability(self, user: int, items=None) -> np.ndarray:
        return sigmoid(self.scores(user, items))


@dataclasses.dataclass(frozen=True)
class NormalizedFeatures:
    item_features: np.ndarray  # unit L2 rows
    user_features: np.ndarray

    def similarity(self, rows, cols=None) -> np.ndarray:
        """Cosine similarity block ``C[rows, cols]``."""
        x = self.item_features
        return x[rows] @ (x if cols is None else x[cols]).T


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-np.logaddexp(0.0, -x))


def log_sigmoid(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=float))


def _init(split: TemporalSplit, config: MFConfig, kind: str, rng) -> FactorModel:
    n_users, n_items = split.user_count, split.item_count
    P = rng.normal(0.0, config.init_std, size=(n_users, config.d))
    Q = rng.normal(0.0, config.init_std, size=(n_items, config.d))
    return FactorModel(kind, P, Q, np.zeros(n_users), np.zeros(n_items), config.seed)


def _interaction_codes(split: TemporalSplit) -> np.ndarray:
    log = split.train
    return np.unique(log.users * log.item_count + log.items)


def _sample_negatives(users: np.ndarray, codes: np.ndarray, n_items: int, rng) -> np.ndarray:
    """Uniform items the user has no train interaction with (rejection sampling)."""
    neg = rng.integers(0, n_items, size=len(users))
    bad = np.isin(users * n_items + neg, codes)
    while bad.any():
        neg[bad] = rng.integers(0, n_items, size=int(bad.sum()))
        bad = np.isin(users * n_items + neg, codes)
    return neg


def _trainable_events(split: TemporalSplit, codes: np.ndarray):
    # users who interacted with every item cannot receive a negative
    log = split.train
    per_user = np.bincount(codes // log.item_count, minlength=log.user_count)
    ok = per_user[log.users] < log.item_count
    return log.users[ok], log.items[ok]


def bpr_pair_gradients(pu: np.ndarray, qi: np.ndarray, qj: np.ndarray):
    """Gradient of ``ln sigmoid(pu.qi - pu.qj)`` w.r.t. ``(pu, qi, qj)``.

    Works row-wise on batches. Returns ``(objective, g_pu, g_qi, g_qj)``.
    """
    x = np.sum(pu * (qi - qj), axis=-1)
    w = sigmoid(-x)[..., None]
    return log_sigmoid(x), w * (qi - qj), w * pu, -w * pu


def train_bprmf(split: TemporalSplit, config: MFConfig = MFConfig()) -> FactorModel:
    """Mini-batch stochastic gradient ascent on the BPR criterion.

    Each epoch visits every train positive once in a seeded random order and
    pairs it with a uniformly drawn non-interacted item.
    """
    if len(split.train) == 0:
        raise ValueError("empty train split")
    rng = np.random.default_rng(config.seed)
    model = _init(split, config, "bpr", rng)
    P, Q = model.user_factors, model.item_factors
    codes = _interaction_codes(split)
    users, items = _trainable_events(split, codes)
    lr, reg = config.learning_rate, config.regularization

    for epoch in range(config.epochs):
        order = rng.permutation(len(users))
        negs = _sample_negatives(users[order], codes, split.item_count, rng)
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            sl = order[start:start + config.batch_size]
            u, i, j = users[sl], items[sl], negs[start:start + config.batch_size]
            obj, gu, gi, gj = bpr_pair_gradients(P[u], Q[i], Q[j])
            total += float(obj.sum())
            du = lr * (gu - reg * P[u])
            di = lr * (gi - reg * Q[i])
            dj = lr * (gj - reg * Q[j])
            np.add.at(P, u, du)
            np.add.at(Q, i, di)
            np.add.at(Q, j, dj)
        mean = total / max(len(users), 1)
        if not np.isfinite(mean) or not (np.isfinite(P).all() and np.isfinite(Q).all()):
            raise NumericalError(f"BPRMF diverged at epoch {epoch} (lr={lr}, reg={reg})")
        model.history.append(mean)
    return model


def lmf_log_likelihood(model: FactorModel, users, items, labels, reg: float = 0.0) -> float:
    z = np.sum(model.user_factors[users] * model.item_factors[items], axis=1)
    z = z + model.user_bias[users] + model.item_bias[items]
    ll = np.sum(labels * log_sigmoid(z) + (1 - labels) * log_sigmoid(-z))
    penalty = reg * (np.sum(model.user_factors ** 2) + np.sum(model.item_factors ** 2))
    return float(ll - penalty)


def _full_batch_pairs(split: TemporalSplit):
    n_u, n_i = split.user_count, split.item_count
    users = np.repeat(np.arange(n_u), n_i)
    items = np.tile(np.arange(n_i), n_u)
    labels = np.isin(users * n_i + items, _interaction_codes(split)).astype(float)
    return users, items, labels


def train_lmf(split: TemporalSplit, config: MFConfig = MFConfig(),
              full_batch: bool = False) -> FactorModel:
    """Gradient ascent on the logistic likelihood of ``p = sigmoid(u.v + b_u + b_i)``.

    The default stochastic variant draws one non-interacted item per positive
    each epoch as an implicit negative. ``full_batch=True`` instead takes one
    exact gradient step per epoch over every (user, item) pair; used for small
    problems where monotone progress of the objective is checked.
    """
    if len(split.train) == 0:
        raise ValueError("empty train split")
    rng = np.random.default_rng(config.seed)
    model = _init(split, config, "lmf", rng)
    P, Q, bu, bi = model.user_factors, model.item_factors, model.user_bias, model.item_bias
    lr, reg = config.learning_rate, config.regularization

    if full_batch:
        users, items, labels = _full_batch_pairs(split)
        model.history.append(lmf_log_likelihood(model, users, items, labels, reg))
        for _ in range(config.epochs):
            _lmf_step(model, users, items, labels, lr, reg, config.use_bias, penalize_all=True)
            model.history.append(lmf_log_likelihood(model, users, items, labels, reg))
            if not np.isfinite(model.history[-1]):
                raise NumericalError("LMF diverged")
        return model

    codes = _interaction_codes(split)
    pos_u, pos_i = _trainable_events(split, codes)
    for epoch in range(config.epochs):
        neg_i = _sample_negatives(pos_u, codes, split.item_count, rng)
        users = np.concatenate([pos_u, pos_u])
        items = np.concatenate([pos_i, neg_i])
        labels = np.concatenate([np.ones(len(pos_u)), np.zeros(len(pos_u))])
        order = rng.permutation(len(users))
        users, items, labels = users[order], items[order], labels[order]
        for start in range(0, len(users), config.batch_size):
            sl = slice(start, start + config.batch_size)
            _lmf_step(model, users[sl], items[sl], labels[sl], lr, reg, config.use_bias)
        ll = lmf_log_likelihood(model, users, items, labels) / len(users)
        if not np.isfinite(ll) or not np.isfinite(P).all():
            raise NumericalError(f"LMF diverged at epoch {epoch} (lr={lr}, reg={reg})")
        model.history.append(ll)
    return model


def _lmf_step(model, users, items, labels, lr, reg, use_bias, penalize_all=False):
    P, Q = model.user_factors, model.item_factors
    z = np.sum(P[users] * Q[items], axis=1) + model.user_bias[users] + model.item_bias[items]
    err = (labels - sigmoid(z))[:, None]
    gu = err * Q[items]
    gi = err * P[users]
    if penalize_all:
        # exact gradient of the full objective
        dP = np.zeros_like(P)
        dQ = np.zeros_like(Q)
        np.add.at(dP, users, gu)
        np.add.at(dQ, items, gi)
        dP -= 2 * reg * P
        dQ -= 2 * reg * Q
        P += lr * dP
        Q += lr * dQ
    else:
        du = lr * (gu - reg * P[users])
        di = lr * (gi - reg * Q[items])
        np.add.at(P, users, du)
        np.add.at(Q, items, di)
    if use_bias:
        np.add.at(model.user_bias, users, lr * err[:, 0])
        np.add.at(model.item_bias, items, lr * err[:, 0])


def extract_features(model: FactorModel) -> NormalizedFeatures:
    """L2-normalize item rows; all-zero rows become the first basis vector."""
    Q = np.array(model.item_factors, dtype=float)
    norms = np.linalg.norm(Q, axis=1)
    zero = norms == 0
    Q[~zero] /= norms[~zero, None]
    Q[zero] = 0.0
    Q[zero, 0] = 1.0
    return NormalizedFeatures(Q, np.array(model.user_factors, dtype=float))


def topk(scores: np.ndarray, candidates: np.ndarray, k: int) -> np.ndarray:
    """``k`` best candidates by score, lower item index first on ties."""
    candidates = np.asarray(candidates)
    if len(candidates) == 0:
        raise ValueError("no candidates to rank")
    if k > len(candidates):
        raise ValueError(f"k={k} exceeds {len(candidates)} candidates")
    order = np.lexsort((candidates, -np.asarray(scores, dtype=float)))
    return candidates[order[:k]]


def rank_topk(model: FactorModel, user: int, candidates, k: int) -> np.ndarray:
    candidates = np.asarray(candidates)
    if len(candidates) == 0:
        raise ValueError("no candidates to rank")
    return topk(model.scores(user, candidates), candidates, k)


# ---------------------------------------------------------------------------
# checkpoints: one JSON header line, then row-major little-endian float64
# blocks in the order user_factors, item_factors, user_bias, item_bias.


def save_factor_model(model: FactorModel, path) -> None:
    header = {
        "format": CHECKPOINT_MAGIC, "version": CHECKPOINT_VERSION, "kind": model.kind,
        "d": model.d, "users": model.user_factors.shape[0],
        "items": model.item_factors.shape[0], "seed": model.seed,
        "history": [float(h) for h in model.history],
    }
    path = pathlib.Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for arr in (model.user_factors, model.item_factors, model.user_bias, model.item_bias):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_factor_model(path) -> FactorModel:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        body = fh.read()
    if header.get("format") != CHECKPOINT_MAGIC or header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version {CHECKPOINT_VERSION} factor checkpoint")
    n_u, n_i, d = header["users"], header["items"], header["d"]
    flat = np.frombuffer(body, dtype="<f8").astype(float)
    sizes = [n_u * d, n_i * d, n_u, n_i]
    if flat.size != sum(sizes):
        raise ValueError(f"{path}: truncated checkpoint")
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    return FactorModel(header["kind"], parts[0].reshape(n_u, d), parts[1].reshape(n_i, d),
                       parts[2], parts[3], header["seed"], header["history"])
