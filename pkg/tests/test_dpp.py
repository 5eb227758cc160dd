import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from divrec.dpp import (EXP_CLAMP, JITTER, DppKernel, FactorizationError, alpha_of_beta, build_kernel,
                        exhaustive_map, greedy_map, greedy_map_lowrank, quality, select_diverse,
                        select_relevant)


def cofactor_det(M) -> float:
    """Laplace expansion along the first row; independent of any factorization."""
    n = len(M)
    if n == 0:
        return 1.0
    if n == 1:
        return float(M[0][0])
    total = 0.0
    for j in range(n):
        minor = [row[:j] + row[j + 1:] for row in M[1:]]
        total += (-1) ** j * M[0][j] * cofactor_det(minor)
    return total


def naive_greedy(L: np.ndarray, k: int):
    """From-scratch greedy: each step recomputes det(L_{S+i}) for every candidate."""
    n = len(L)
    S, trace = [], []
    for _ in range(k):
        best, best_det = None, -math.inf
        for i in range(n):
            if i in S:
                continue
            idx = S + [i]
            det = cofactor_det([[float(L[a, b]) for b in idx] for a in idx])
            if det > best_det:  # strict: lowest index wins ties
                best, best_det = i, det
        S.append(best)
        trace.append(best_det)
    return S, trace


def random_kernel(rng, n):
    if rng.random() < 0.5:
        X = rng.normal(size=(n, int(rng.integers(n, n + 4))))
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        beta = float(rng.uniform(0.05, 0.95))
        return build_kernel(rng.uniform(-1, 1, X.shape[1]), X, beta)
    B = rng.normal(size=(n, n + 2))
    L = B @ B.T
    return DppKernel(L, np.ones(n), 1.0, np.arange(n))


def test_greedy_matches_naive_oracle_on_100_kernels():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        n = int(rng.integers(4, 13))
        k = int(rng.integers(1, min(4, n) + 1))
        kernel = random_kernel(rng, n)
        res = greedy_map(kernel, k)
        items, dets = naive_greedy(kernel.L, k)
        assert res.items == items
        assert abs(res.log_det - math.log(dets[-1])) <= 1e-9
        # every prefix of the trace agrees
        np.testing.assert_allclose(np.cumsum(res.gains), np.log(dets), atol=1e-9, rtol=0)
        best = exhaustive_map(kernel, k)
        assert best.log_det >= res.log_det - 1e-12


def test_lowrank_path_reproduces_full_kernel_trace(rng):
    for _ in range(30):
        n, d = int(rng.integers(5, 40)), int(rng.integers(2, 8))
        X = rng.normal(size=(n, d))
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        a = rng.uniform(-1, 1, d)
        kernel = build_kernel(a, X, 0.5)
        k = min(n, 5)
        full = greedy_map(kernel, k)
        low = greedy_map_lowrank(X, kernel.quality, k)
        assert low.items == full.items
        # past the feature rank the gains are jitter-sized and lose digits to cancellation
        tol = 1e-9 if k <= d else 1e-6
        assert low.log_det == pytest.approx(full.log_det, abs=tol)


def test_kernel_entries_follow_quality_similarity_product(rng):
    X = rng.normal(size=(6, 4))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    a = rng.uniform(-1, 1, 4)
    kernel = build_kernel(a, X, 0.3)
    q = np.exp(alpha_of_beta(0.3) * (X @ a))
    L = kernel.L - JITTER * np.eye(6)
    for i, j in itertools.product(range(6), repeat=2):
        assert L[i, j] == pytest.approx(q[i] * q[j] * float(X[i] @ X[j]), rel=1e-12, abs=1e-15)
    np.testing.assert_array_equal(kernel.L, kernel.L.T)


def test_alpha_examples():
    assert alpha_of_beta(0.5) == 1.0
    assert alpha_of_beta(0.9) == pytest.approx(9.0)
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            alpha_of_beta(bad)


def test_two_item_map_prefers_dissimilar_pair():
    X = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    kernel = build_kernel(np.zeros(2), X, 0.5)
    assert sorted(greedy_map(kernel, 2).items) in ([0, 2], [1, 2])
    assert greedy_map(kernel, 2).items == [0, 2]  # tie between 0 and 1 -> lower index


def test_duplicate_items_stop_greedy_early():
    X = np.tile([[1.0, 0.0]], (3, 1))
    res = greedy_map(build_kernel(np.zeros(2), X, 0.5, jitter=0.0), 3)
    assert res.short and res.items == [0]


def test_extreme_relevance_is_clamped():
    X = np.eye(3)
    q, clamped = quality(np.array([1.0, 0.0, 0.0]) * 1e3, X, 0.9)
    assert clamped
    assert q.max() == pytest.approx(math.exp(EXP_CLAMP))
    q, clamped = quality(np.array([0.1, 0.0, 0.0]), X, 0.5)
    assert not clamped


def test_nonfinite_kernel_raises_after_refactor_attempt():
    kernel = build_kernel(np.zeros(2), np.eye(2), 0.5)
    bad = kernel.L.copy()
    bad[1, 1] = np.nan
    broken = type(kernel)(bad, kernel.quality, kernel.alpha, kernel.candidate_ids)
    with pytest.raises(FactorizationError):
        greedy_map(broken, 2)


def test_exhaustive_budget_and_ties():
    kernel = build_kernel(np.zeros(2), np.tile([[1.0, 0.0]], (4, 1)), 0.5)
    assert exhaustive_map(kernel, 2).items == [0, 1]
    big = build_kernel(np.zeros(2), np.tile([[1.0, 0.0]], (60, 1)), 0.5)
    with pytest.raises(ValueError):
        exhaustive_map(big, 10)


def test_select_diverse_returns_candidate_ids(rng):
    X = rng.normal(size=(20, 5))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    cands = np.array([3, 5, 8, 13, 17])
    items, res, _ = select_diverse(rng.uniform(-1, 1, 5), X, cands, 0.5, 3)
    assert len(set(items)) == 3 and set(items) <= set(cands.tolist())
    items, _, _ = select_diverse(np.zeros(5), X, cands[:2], 0.5, 3)
    assert sorted(items) == [3, 5]


def test_select_relevant_orders_by_score_then_id():
    X = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [-1.0, 0.0]])
    assert select_relevant(np.array([1.0, 0.0]), X, np.array([0, 1, 2, 3]), 3) == [0, 2, 1]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 9), st.integers(1, 4))
def test_greedy_log_det_equals_direct_log_det(seed, n, k):
    rng = np.random.default_rng(seed)
    k = min(k, n)
    X = rng.normal(size=(n, n + 1))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    kernel = build_kernel(rng.uniform(-1, 1, n + 1), X, float(rng.uniform(0.1, 0.9)))
    res = greedy_map(kernel, k)
    sub = kernel.L[np.ix_(res.items, res.items)]
    sign, logdet = np.linalg.slogdet(sub)
    assert sign > 0 and res.log_det == pytest.approx(logdet, abs=1e-8)
    assert len(set(res.items)) == len(res.items)
