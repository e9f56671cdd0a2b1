"""Affinity, log-domain Sinkhorn with dustbin marginals, and hard match extraction."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch


@dataclass
class AffinityMatrix:
    """Strictly positive affinity ``M`` kept as logits (``log M``) to avoid overflow."""

    logits: torch.Tensor

    @property
    def values(self) -> torch.Tensor:
        return self.logits.exp()

    @property
    def shape(self):
        return tuple(self.logits.shape)


@dataclass
class AssignmentMatrix:
    values: torch.Tensor
    marginal_a: torch.Tensor
    marginal_b: torch.Tensor
    converged: bool = True
    iterations: int = 0
    residual: float = 0.0

    @property
    def shape(self):
        return tuple(self.values.shape)


@dataclass
class MatchSet:
    matches: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_a: list[int] = field(default_factory=list)
    unmatched_b: list[int] = field(default_factory=list)

    @property
    def pairs(self) -> set[tuple[int, int]]:
        return {(i, j) for i, j, _ in self.matches}

    def to_dict(self) -> dict:
        return {
            "matches": [[int(i), int(j), float(s)] for i, j, s in self.matches],
            "unmatched_a": [int(i) for i in self.unmatched_a],
            "unmatched_b": [int(j) for j in self.unmatched_b],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MatchSet":
        return cls(
            matches=[(int(i), int(j), float(s)) for i, j, s in d["matches"]],
            unmatched_a=[int(i) for i in d["unmatched_a"]],
            unmatched_b=[int(j) for j in d["unmatched_b"]],
        )


def dustbin_marginals(n: int, m: int, dtype=torch.float64, device=None):
    """Row marginal ``[1]*n + [m]`` and column marginal ``[1]*m + [n]``."""
    a = torch.ones(n + 1, dtype=dtype, device=device)
    b = torch.ones(m + 1, dtype=dtype, device=device)
    a[n] = m
    b[m] = n
    return a, b


def affinity(fa: torch.Tensor, fb: torch.Tensor, c: torch.Tensor, delta: float) -> AffinityMatrix:
    """``M = exp(Fa C Fb^T / delta)``, stored as its logits."""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    if fa.shape[1] != c.shape[0] or fb.shape[1] != c.shape[1]:
        raise ValueError(f"shape mismatch: Fa {tuple(fa.shape)}, C {tuple(c.shape)}, Fb {tuple(fb.shape)}")
    return AffinityMatrix(fa @ c @ fb.T / delta)


def sinkhorn(
    m: AffinityMatrix | torch.Tensor,
    a: torch.Tensor,
    b: torch.Tensor,
    max_iters: int = 100,
    tol: float = 1e-6,
) -> AssignmentMatrix:
    """Scale ``M`` to ``P = diag(u) M diag(v)`` with ``P 1 = a`` and ``P^T 1 = b``.

    Iterates in the log domain. Differentiation goes through the unrolled
    updates. A plain tensor argument is interpreted as ``log M``.
    """
    logits = m.logits if isinstance(m, AffinityMatrix) else m
    if logits.shape != (a.shape[0], b.shape[0]):
        raise ValueError(f"M has shape {tuple(logits.shape)}, marginals {a.shape[0]} and {b.shape[0]}")
    sa, sb = float(a.sum()), float(b.sum())
    if abs(sa - sb) > 1e-9 * max(1.0, sa):
        raise ValueError(f"unbalanced marginals: sum(a)={sa}, sum(b)={sb}")
    a = a.to(logits.dtype)
    b = b.to(logits.dtype)
    log_a, log_b = a.log(), b.log()
    log_u = torch.zeros_like(log_a)
    log_v = torch.zeros_like(log_b)
    converged = False
    it = 0
    residual = float("inf")
    for it in range(1, max_iters + 1):
        log_u = log_a - torch.logsumexp(logits + log_v[None, :], dim=1)
        log_v = log_b - torch.logsumexp(logits + log_u[:, None], dim=0)
        # columns are exact after the v-update; only rows can be off
        with torch.no_grad():
            rows = torch.logsumexp(logits + log_u[:, None] + log_v[None, :], dim=1).exp()
            residual = float((rows - a).abs().max())
        if residual <= tol:
            converged = True
            break
    p = (logits + log_u[:, None] + log_v[None, :]).exp()
    return AssignmentMatrix(p, a.detach(), b.detach(), converged, it, residual)


def solve_matching(
    fa: torch.Tensor,
    fb: torch.Tensor,
    c: torch.Tensor,
    delta: float = 0.5,
    max_iters: int = 100,
    tol: float = 1e-6,
) -> tuple[AffinityMatrix, AssignmentMatrix]:
    """Affinity followed by Sinkhorn under the dustbin marginals.

    ``fa``/``fb`` carry the dustbin as their last row.
    """
    n, m = fa.shape[0] - 1, fb.shape[0] - 1
    aff = affinity(fa, fb, c, delta)
    if n == 0 or m == 0:
        p = dustbin_plan(n, m, dtype=fa.dtype, device=fa.device)
        p.values = p.values + 0.0 * aff.logits
        return aff, p
    a, b = dustbin_marginals(n, m, dtype=fa.dtype, device=fa.device)
    return aff, sinkhorn(aff, a, b, max_iters=max_iters, tol=tol)


def dustbin_plan(n: int, m: int, dtype=torch.float64, device=None) -> AssignmentMatrix:
    """The only feasible plan when one side has no lines: everything goes to the dustbins."""
    if n and m:
        raise ValueError("a forced dustbin plan needs an empty side")
    a, b = dustbin_marginals(n, m, dtype=dtype, device=device)
    p = torch.zeros(n + 1, m + 1, dtype=dtype, device=device)
    p[:n, m] = 1.0
    p[n, :m] = 1.0
    return AssignmentMatrix(p, a, b, True, 0, 0.0)


def extract_matches(p: AssignmentMatrix | torch.Tensor, score_floor: float = 0.2) -> MatchSet:
    """Mutual-argmax matches on the detected block, dustbin excluded."""
    values = p.values if isinstance(p, AssignmentMatrix) else p
    values = values.detach()
    n, m = values.shape[0] - 1, values.shape[1] - 1
    if n == 0 or m == 0:
        return MatchSet([], list(range(n)), list(range(m)))
    row_best = values.argmax(dim=1)
    col_best = values.argmax(dim=0)
    matches = []
    for i in range(n):
        j = int(row_best[i])
        if j < m and int(col_best[j]) == i and float(values[i, j]) >= score_floor:
            matches.append((i, j, float(values[i, j])))
    got_a = {i for i, _, _ in matches}
    got_b = {j for _, j, _ in matches}
    return MatchSet(
        matches,
        [i for i in range(n) if i not in got_a],
        [j for j in range(m) if j not in got_b],
    )
