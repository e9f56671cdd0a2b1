"""Angular margin feature loss, assignment negative log-likelihood, and their blend."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import torch

from .transport import AssignmentMatrix

ACOS_EPS = 1e-7
LOG_EPS = 1e-12


@dataclass
class MatchGroundTruth:
    """Ground-truth pairs plus the unmatched lines of each image (0-based indices)."""

    pairs: list[tuple[int, int]] = field(default_factory=list)
    unmatched_a: list[int] = field(default_factory=list)
    unmatched_b: list[int] = field(default_factory=list)

    def validate(self, n: int | None = None, m: int | None = None) -> None:
        ia = [i for i, _ in self.pairs]
        jb = [j for _, j in self.pairs]
        if len(set(ia)) != len(ia) or len(set(jb)) != len(jb):
            raise ValueError("ground-truth pairs are not one-to-one")
        if set(ia) & set(self.unmatched_a):
            raise ValueError("a line of A is both matched and unmatched")
        if set(jb) & set(self.unmatched_b):
            raise ValueError("a line of B is both matched and unmatched")
        if len(set(self.unmatched_a)) != len(self.unmatched_a) or len(set(self.unmatched_b)) != len(self.unmatched_b):
            raise ValueError("duplicate unmatched index")
        if n is not None and sorted(ia + list(self.unmatched_a)) != list(range(n)):
            raise ValueError(f"lines of A are not partitioned into pairs/unmatched (n={n})")
        if m is not None and sorted(jb + list(self.unmatched_b)) != list(range(m)):
            raise ValueError(f"lines of B are not partitioned into pairs/unmatched (m={m})")

    def restrict(self, kept_a, kept_b) -> "MatchGroundTruth":
        """Re-index onto kept subsets; a pair that lost either line becomes unmatched."""
        ra = {int(o): k for k, o in enumerate(kept_a)}
        rb = {int(o): k for k, o in enumerate(kept_b)}
        pairs = [(ra[i], rb[j]) for i, j in self.pairs if i in ra and j in rb]
        got_a = {i for i, _ in pairs}
        got_b = {j for _, j in pairs}
        return MatchGroundTruth(
            pairs,
            [k for k in range(len(ra)) if k not in got_a],
            [k for k in range(len(rb)) if k not in got_b],
        )

    def to_dict(self) -> dict:
        return {
            "pairs": [[int(i), int(j)] for i, j in self.pairs],
            "unmatched_a": [int(i) for i in self.unmatched_a],
            "unmatched_b": [int(j) for j in self.unmatched_b],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MatchGroundTruth":
        return cls(
            [(int(i), int(j)) for i, j in d["pairs"]],
            [int(i) for i in d["unmatched_a"]],
            [int(j) for j in d["unmatched_b"]],
        )


@dataclass
class LossConfig:
    s3: float = 30.0
    s5: float = 5.0
    eta3: float = 0.5
    eta5: float = 0.2
    lam: float = 0.5

    def __post_init__(self):
        if self.s3 <= 0 or self.s5 <= 0:
            raise ValueError("scales must be positive")
        for eta in (self.eta3, self.eta5):
            if not 0 <= eta < torch.pi / 2:
                raise ValueError(f"margin {eta} outside [0, pi/2)")
        if not 0 <= self.lam <= 1:
            raise ValueError(f"lambda {self.lam} outside [0, 1]")


def _check_unit_rows(x: torch.Tensor, name: str, tol: float = 1e-4) -> None:
    norms = x.detach().norm(dim=1)
    if norms.numel() and float((norms - 1).abs().max()) > tol:
        raise ValueError(f"{name} rows must be unit-norm (max deviation {float((norms - 1).abs().max()):.3g})")


def angular_margin_loss(fa, fb, pairs, s: float, eta: float) -> torch.Tensor:
    """Additive angular margin softmax over cosine similarities, averaged over pairs.

    For pair (i, j) the positive logit is ``s*cos(theta_ij + eta)`` and the
    negatives are ``s*cos(theta_ik)`` for every other line k of ``fb``.
    """
    _check_unit_rows(fa, "Fa")
    _check_unit_rows(fb, "Fb")
    if len(pairs) == 0:
        warnings.warn("angular_margin_loss called with no pairs; returning 0", RuntimeWarning, stacklevel=2)
        return (fa.sum() + fb.sum()) * 0.0
    idx = torch.as_tensor(pairs, dtype=torch.long, device=fa.device)
    ii, jj = idx[:, 0], idx[:, 1]
    cos = fa[ii] @ fb.T  # (pairs, m)
    pos_cos = cos.gather(1, jj[:, None]).squeeze(1)
    theta = torch.acos(pos_cos.clamp(-1 + ACOS_EPS, 1 - ACOS_EPS))
    logits = s * cos
    logits = logits.scatter(1, jj[:, None], (s * torch.cos(theta + eta))[:, None])
    return torch.nn.functional.cross_entropy(logits, jj)


def feature_learning_loss(fa3, fb3, fa5, fb5, pairs, config: LossConfig | None = None) -> torch.Tensor:
    """Sum of A->B and B->A angular margin losses on the shallow and deep descriptors."""
    cfg = config or LossConfig()
    rev = [(j, i) for i, j in pairs]
    return (
        angular_margin_loss(fa3, fb3, pairs, cfg.s3, cfg.eta3)
        + angular_margin_loss(fb3, fa3, rev, cfg.s3, cfg.eta3)
        + angular_margin_loss(fa5, fb5, pairs, cfg.s5, cfg.eta5)
        + angular_margin_loss(fb5, fa5, rev, cfg.s5, cfg.eta5)
    )


def matching_loss(p: AssignmentMatrix | torch.Tensor, gt: MatchGroundTruth) -> torch.Tensor:
    """Negative log-likelihood of the ground-truth cells; dustbin cells for unmatched lines."""
    values = p.values if isinstance(p, AssignmentMatrix) else p
    n, m = values.shape[0] - 1, values.shape[1] - 1
    rows = [i for i, _ in gt.pairs] + list(gt.unmatched_a) + [n] * len(gt.unmatched_b)
    cols = [j for _, j in gt.pairs] + [m] * len(gt.unmatched_a) + list(gt.unmatched_b)
    if not rows:
        return values.sum() * 0.0
    if max(rows) > n or max(cols) > m or min(rows + cols) < 0:
        raise IndexError(f"ground truth indexes outside a {n + 1}x{m + 1} assignment")
    picked = values[torch.as_tensor(rows), torch.as_tensor(cols)]
    if bool((picked.detach() < LOG_EPS).any()):
        warnings.warn("matching_loss: assignment entry below 1e-12 clamped", RuntimeWarning, stacklevel=2)
        picked = picked.clamp_min(LOG_EPS)
    return -picked.log().sum()


def total_loss(l_feature, l_graph, lam: float = 0.5):
    return lam * l_feature + (1 - lam) * l_graph
