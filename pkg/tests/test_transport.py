import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from glmatch.transport import (
    AffinityMatrix,
    MatchSet,
    affinity,
    dustbin_marginals,
    extract_matches,
    sinkhorn,
    solve_matching,
)


def test_dustbin_marginals_balance():
    a, b = dustbin_marginals(3, 5)
    assert a.tolist() == [1, 1, 1, 5]
    assert b.tolist() == [1, 1, 1, 1, 1, 3]
    assert float(a.sum()) == float(b.sum()) == 8


def test_affinity_is_exp_of_bilinear_form():
    fa = torch.randn(4, 3, dtype=torch.float64)
    fb = torch.randn(5, 3, dtype=torch.float64)
    c = torch.randn(3, 3, dtype=torch.float64)
    m = affinity(fa, fb, c, 0.5)
    ref = np.exp(fa.numpy() @ c.numpy() @ fb.numpy().T / 0.5)
    np.testing.assert_allclose(m.values.numpy(), ref, rtol=1e-12)
    assert (m.values > 0).all()


def test_affinity_rejects_bad_inputs():
    fa, fb, c = torch.randn(3, 4), torch.randn(2, 4), torch.eye(4)
    with pytest.raises(ValueError, match="delta"):
        affinity(fa, fb, c, 0.0)
    with pytest.raises(ValueError, match="shape"):
        affinity(fa, torch.randn(2, 3), c, 0.5)


def test_affinity_large_logits_stay_finite_through_sinkhorn():
    fa = 40 * torch.randn(6, 8, dtype=torch.float64)
    fb = 40 * torch.randn(7, 8, dtype=torch.float64)
    _, p = solve_matching(fa, fb, torch.eye(8, dtype=torch.float64), 0.5, max_iters=500)
    assert torch.isfinite(p.values).all()


@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 10_000))
def test_sinkhorn_meets_dustbin_marginals(n, m, seed):
    g = torch.Generator().manual_seed(seed)
    fa = torch.nn.functional.normalize(torch.randn(n + 1, 8, generator=g, dtype=torch.float64), dim=1)
    fb = torch.nn.functional.normalize(torch.randn(m + 1, 8, generator=g, dtype=torch.float64), dim=1)
    _, p = solve_matching(fa, fb, torch.eye(8, dtype=torch.float64), 0.5, max_iters=200)
    a, b = dustbin_marginals(n, m)
    assert p.converged
    assert torch.allclose(p.values.sum(1), a, atol=1e-6)
    assert torch.allclose(p.values.sum(0), b, atol=1e-6)
    assert (p.values >= 0).all()


def test_sinkhorn_matches_plain_scaling_oracle():
    # textbook alternating normalisation in linear space
    rng = np.random.default_rng(3)
    k = np.exp(rng.normal(size=(5, 7)))
    a, b = dustbin_marginals(4, 6)
    u, v = np.ones(5), np.ones(7)
    for _ in range(5000):
        u = a.numpy() / (k @ v)
        v = b.numpy() / (k.T @ u)
    ref = u[:, None] * k * v[None, :]
    p = sinkhorn(torch.as_tensor(np.log(k)), a, b, max_iters=5000, tol=1e-12)
    np.testing.assert_allclose(p.values.numpy(), ref, atol=1e-9)


def test_sinkhorn_rejects_unbalanced_marginals():
    with pytest.raises(ValueError, match="unbalanced"):
        sinkhorn(torch.zeros(2, 2), torch.tensor([1.0, 1.0]), torch.tensor([1.0, 2.0]))


def test_sinkhorn_reports_non_convergence():
    logits = torch.tensor([[50.0, -50.0], [-50.0, 50.0]], dtype=torch.float64)
    p = sinkhorn(AffinityMatrix(logits), torch.tensor([1.0, 3.0]), torch.tensor([2.0, 2.0]), max_iters=2, tol=1e-12)
    assert not p.converged and p.iterations == 2
    assert torch.isfinite(p.values).all()


def test_empty_side_routes_everything_to_dustbin():
    fa = torch.randn(1, 4, dtype=torch.float64)  # dustbin only
    fb = torch.randn(4, 4, dtype=torch.float64)
    _, p = solve_matching(fa, fb, torch.eye(4, dtype=torch.float64))
    assert p.values.tolist() == [[1.0, 1.0, 1.0, 0.0]]
    assert extract_matches(p).unmatched_b == [0, 1, 2]


def _unique_optimum(scores):
    n = scores.shape[0]
    totals = sorted((sum(scores[i, perm[i]] for i in range(n)), perm) for perm in itertools.permutations(range(n)))
    best, second = totals[-1], totals[-2]
    return best[1] if best[0] - second[0] > 1e-3 else None


def test_sharpened_sinkhorn_recovers_exhaustive_assignment():
    rng = np.random.default_rng(11)
    hits = total = 0
    while total < 20:
        s = rng.uniform(size=(6, 6))
        perm = _unique_optimum(s)
        if perm is None:
            continue
        total += 1
        rows, cols = linear_sum_assignment(-s)
        assert tuple(cols[np.argsort(rows)]) == perm  # the two exact oracles agree
        ones = torch.ones(6, dtype=torch.float64)
        p = sinkhorn(torch.as_tensor(s / 0.002), ones, ones, max_iters=5000, tol=1e-9)
        pred = p.values.argmax(1).tolist()
        hits += pred == list(perm) and p.values.argmax(0).tolist() == list(np.argsort(perm))
    assert hits / total >= 0.95


def _brute_extract(v, floor):
    n, m = v.shape[0] - 1, v.shape[1] - 1
    out = []
    for i in range(n):
        for j in range(m):
            if v[i, j] >= floor and v[i, j] == v[i, :].max() and v[i, j] == v[:, j].max():
                out.append((i, j))
    return out


@given(st.integers(1, 7), st.integers(1, 7), st.integers(0, 10_000), st.floats(0.0, 0.6))
def test_extract_matches_equals_double_loop(n, m, seed, floor):
    v = torch.as_tensor(np.random.default_rng(seed).uniform(size=(n + 1, m + 1)))
    got = extract_matches(v, floor)
    assert sorted(got.pairs) == _brute_extract(v.numpy(), floor)
    assert len(got.matches) + len(got.unmatched_a) == n
    assert len(got.matches) + len(got.unmatched_b) == m


def test_extract_matches_never_returns_dustbin():
    v = torch.tensor([[0.1, 0.9], [0.9, 0.1]])
    # row 0 prefers the dustbin column; column 0 prefers the dustbin row
    assert extract_matches(v, 0.0).matches == []


def test_extract_matches_score_floor():
    v = torch.tensor([[0.3, 0.1], [0.1, 0.1]])
    assert extract_matches(v, 0.2).pairs == {(0, 0)}
    assert extract_matches(v, 0.31).pairs == set()


def test_matchset_round_trip():
    ms = MatchSet([(0, 2, 0.75)], [1], [0, 1])
    assert MatchSet.from_dict(ms.to_dict()) == ms
    assert math.isclose(ms.to_dict()["matches"][0][2], 0.75)


def test_sharp_logits_converge_given_more_iterations():
    # logits of the model's initial C = 10 I: slower, yet still converging
    g = torch.Generator().manual_seed(0)
    fa = torch.nn.functional.normalize(torch.randn(2, 32, generator=g, dtype=torch.float64), dim=1)
    fb = torch.nn.functional.normalize(torch.randn(4, 32, generator=g, dtype=torch.float64), dim=1)
    _, p = solve_matching(fa, fb, 10 * torch.eye(32, dtype=torch.float64), 0.5, max_iters=5000, tol=1e-6)
    assert p.converged
    a, b = dustbin_marginals(1, 3)
    assert torch.allclose(p.values.sum(0), b, atol=1e-6) and torch.allclose(p.values.sum(1), a, atol=1e-6)


def test_loss_through_sinkhorn_and_affinity_gradient():
    from oracles import grad_rel_error
    from glmatch.losses import MatchGroundTruth, matching_loss

    fb = torch.randn(5, 4, dtype=torch.float64)
    c = torch.eye(4, dtype=torch.float64)
    gt = MatchGroundTruth([(0, 3), (2, 0)], [1], [1, 2])

    def fn(fa):
        return matching_loss(solve_matching(fa, fb, c, 0.5, max_iters=60, tol=0.0)[1], gt)

    assert grad_rel_error(fn, torch.randn(4, 4, dtype=torch.float64)) < 1e-3


@given(st.integers(0, 1000), st.floats(0.1, 10.0))
def test_extract_matches_scale_invariant(seed, k):
    v = torch.as_tensor(np.random.default_rng(seed).uniform(size=(5, 6)))
    assert extract_matches(v, 0.3).pairs == extract_matches(v * k, 0.3 * k).pairs
