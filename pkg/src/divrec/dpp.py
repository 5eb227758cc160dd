"""Personalized DPP kernels and MAP selection.

The kernel over a candidate list is ``L = diag(q) C diag(q)`` with cosine
similarity ``C = X X^T`` of unit-norm item features and quality
``q = exp(alpha * r)``, where ``r = X a`` is a linear relevance score and
``alpha = beta / (1 - beta)`` trades relevance against diversity.
"""

from __future__ import annotations

import dataclasses
import itertools
import math

import numpy as np

JITTER = 1e-8
EXP_CLAMP = 30.0
MIN_GAIN = 1e-12  # determinant ratio below which greedy stops early
EXHAUSTIVE_BUDGET = 10 ** 6


class FactorizationError(ArithmeticError):
    pass


@dataclasses.dataclass(frozen=True)
class DppKernel:
    L: np.ndarray
    quality: np.ndarray
    alpha: float
    candidate_ids: np.ndarray
    clamped: bool = False  # alpha * r hit the +-EXP_CLAMP limit somewhere
    jitter: float = JITTER

    @property
    def n(self) -> int:
        return len(self.candidate_ids)


@dataclasses.dataclass(frozen=True)
class SelectionResult:
    items: list            # candidate positions (rows of L), in selection order
    log_det: float
    gains: list = dataclasses.field(default_factory=list)  # log det increments per step
    short: bool = False    # stopped before k items because the best gain underflowed
    refactored: bool = False

    def item_ids(self, kernel: DppKernel) -> list:
        return [int(kernel.candidate_ids[i]) for i in self.items]


def alpha_of_beta(beta: float) -> float:
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    return beta / (1.0 - beta)


def relevance(action, features) -> np.ndarray:
    action = np.asarray(action, dtype=float)
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or action.shape != (features.shape[1],):
        raise ValueError(f"action {action.shape} does not match features {features.shape}")
    return features @ action


def build_kernel(action, features, beta: float, candidate_ids=None,
                 jitter: float = JITTER) -> DppKernel:
    """Kernel over the rows of ``features`` (unit-norm item vectors)."""
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("empty candidate set")
    alpha = alpha_of_beta(beta)
    q, clamped = quality(action, features, beta)
    C = features @ features.T
    L = (q[:, None] * C) * q[None, :]
    L = 0.5 * (L + L.T)
    L[np.diag_indices_from(L)] += jitter
    ids = np.arange(len(q)) if candidate_ids is None else np.asarray(candidate_ids)
    return DppKernel(L, q, alpha, ids, clamped, jitter)


def _greedy(diag: np.ndarray, row, k: int):
    n = len(diag)
    cis = np.zeros((k, n))
    d2 = np.array(diag, dtype=float)
    selected, gains = [], []
    short = False
    for step in range(k):
        scores = d2.copy()
        scores[selected] = -np.inf
        j = int(np.argmax(scores))  # first maximum: lowest index on ties
        best = scores[j]
        if not np.isfinite(best):
            raise FactorizationError("non-finite marginal gain")
        if best <= MIN_GAIN:
            short = True
            break
        selected.append(j)
        gains.append(math.log(best))
        if step == k - 1:
            break
        e = (row(j) - cis[:step].T @ cis[:step, j]) / math.sqrt(best)
        cis[step] = e
        d2 = d2 - e * e
    return selected, gains, short


def greedy_map(kernel: DppKernel, k: int) -> SelectionResult:
    """Greedy MAP: repeatedly add the item with the largest gain in ``log det L_S``.

    The marginal gain of item ``i`` given ``S`` is the squared residual
    ``d_i^2 = L_ii - ||c_i||^2`` of an incrementally grown Cholesky factor,
    so one step costs ``O(n |S|)``.
    """
    n = kernel.n
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    L = kernel.L
    try:
        selected, gains, short = _greedy(np.diag(L), L.__getitem__, k)
        refactored = False
    except FactorizationError:
        L = L + 100.0 * max(kernel.jitter, JITTER) * np.eye(n)
        selected, gains, short = _greedy(np.diag(L), L.__getitem__, k)
        refactored = True
    return SelectionResult(selected, float(sum(gains)), gains, short, refactored)


def greedy_map_lowrank(features, q, k: int, jitter: float = JITTER) -> SelectionResult:
    """:func:`greedy_map` on ``diag(q) X X^T diag(q) + jitter I`` without forming it.

    Kernel rows are produced on demand, so a selection costs ``O(n d k)``
    instead of the ``O(n^2 d)`` needed to materialize ``L``.
    """
    X = np.asarray(features, dtype=float)
    q = np.asarray(q, dtype=float)
    n = len(q)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    diag = q * np.einsum("ij,ij->i", X, X) * q

    def run(eps):
        def row(j):
            r = (q * (X @ X[j])) * q[j]
            r[j] += eps
            return r
        return _greedy(diag + eps, row, k)

    try:
        selected, gains, short = run(jitter)
        refactored = False
    except FactorizationError:
        selected, gains, short = run(100.0 * max(jitter, JITTER))
        refactored = True
    return SelectionResult(selected, float(sum(gains)), gains, short, refactored)


def exhaustive_map(kernel: DppKernel, k: int) -> SelectionResult:
    """Best size-``k`` subset by enumeration; lexicographically smallest on ties."""
    n = kernel.n
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    if math.comb(n, k) > EXHAUSTIVE_BUDGET:
        raise ValueError(f"C({n},{k}) subsets exceed the enumeration budget")
    best, best_val = None, -np.inf
    combos = itertools.combinations(range(n), k)
    while True:
        chunk = list(itertools.islice(combos, 4096))
        if not chunk:
            break
        idx = np.array(chunk)
        sub = kernel.L[idx[:, :, None], idx[:, None, :]]
        sign, logdet = np.linalg.slogdet(sub)
        vals = np.where(sign > 0, logdet, -np.inf)
        j = int(np.argmax(vals))
        if vals[j] > best_val:
            best, best_val = chunk[j], float(vals[j])
    if best is None:
        best = tuple(range(k))
    return SelectionResult(list(best), best_val)


def quality(action, features, beta: float) -> tuple[np.ndarray, bool]:
    """``exp(alpha * r)`` with the exponent clamped; also reports whether clamping hit."""
    logits = alpha_of_beta(beta) * relevance(action, features)
    clamped = bool(np.any(np.abs(logits) > EXP_CLAMP)) or not np.all(np.isfinite(logits))
    return np.exp(np.clip(np.nan_to_num(logits), -EXP_CLAMP, EXP_CLAMP)), clamped


def select_diverse(action, features, candidates, beta: float, k: int):
    """Recommend ``k`` item ids from ``candidates`` by greedy MAP on the personalized kernel.

    Returns ``(items, result, clamped)``. If fewer than ``k`` candidates remain
    all of them are selected.
    """
    candidates = np.asarray(candidates)
    X = features[candidates]
    q, clamped = quality(action, X, beta)
    result = greedy_map_lowrank(X, q, min(k, len(candidates)))
    return [int(candidates[i]) for i in result.items], result, clamped


def select_relevant(action, features, candidates, k: int) -> list:
    """Diversity-free top-k by linear relevance, lower item id first on ties."""
    candidates = np.asarray(candidates)
    r = relevance(action, features[candidates])
    order = np.lexsort((candidates, -r))
    return [int(c) for c in candidates[order[:k]]]
