"""Learned line graphs: mutual top-k adjacency, intra-graph and cross-graph convolution."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
from torch import nn

from .transport import AssignmentMatrix, solve_matching


@dataclass
class Graph:
    features: torch.Tensor  # (n+1, p), dustbin last
    adjacency: torch.Tensor  # (n+1, n+1)


def layer_keep_ratio(layer: int) -> float:
    """Fraction of neighbours kept at graph layer ``layer`` (1-based)."""
    if int(layer) != layer or layer < 1:
        raise ValueError(f"layer index must be an integer >= 1, got {layer}")
    return max(0.4 / 2**layer, 0.1)


def neighbour_count(k: float, n: int) -> int:
    kn = math.ceil(k * n - 1e-9)
    if kn > n:
        warnings.warn(f"ceil(k*n)={kn} exceeds n={n}; clamped", RuntimeWarning, stacklevel=2)
        kn = n
    return max(kn, 1)


def relation_scores(f: torch.Tensor, a_vec: torch.Tensor, omega: torch.Tensor) -> torch.Tensor:
    """ReLU(a^T [Omega f_i || Omega f_j]) for every node pair."""
    if omega.shape[1] != f.shape[1] or a_vec.shape[0] != 2 * omega.shape[0]:
        raise ValueError(f"dimension mismatch: F {tuple(f.shape)}, Omega {tuple(omega.shape)}, a {tuple(a_vec.shape)}")
    h = f @ omega.T
    q = omega.shape[0]
    left = h @ a_vec[:q]
    right = h @ a_vec[q:]
    return torch.relu(left[:, None] + right[None, :])


def topk_mask(scores: torch.Tensor, kn: int) -> torch.Tensor:
    """Boolean mask of each row's ``kn`` largest entries; ties go to the lower index."""
    order = torch.argsort(-scores.detach(), dim=1, stable=True)[:, :kn]
    mask = torch.zeros(scores.shape, dtype=torch.bool, device=scores.device)
    mask.scatter_(1, order, True)
    return mask


def mutual_topk_adjacency(scores: torch.Tensor, k: float, n: int | None = None, strict: bool = True):
    """Sparse score matrix and normalised adjacency ``tanh(A_s A_s^T) / ceil(k n)``.

    ``scores`` is ``(n+1, n+1)`` with the dustbin last. Neighbours are picked
    among the ``n`` detected lines only. With ``strict`` an edge survives only
    if both endpoints rank each other in their top ``ceil(k n)``. The dustbin
    row and column of the adjacency are zero.
    """
    if n is None:
        n = scores.shape[0] - 1
    if n < 1:
        raise ValueError("need at least one detected line")
    if bool((scores.detach() < 0).any()):
        raise ValueError("scores must be non-negative")
    kn = neighbour_count(k, n)
    block = scores[:n, :n]
    mask = topk_mask(block, kn)
    if strict:
        mask = mask & mask.T
    a_s = torch.zeros_like(scores)
    a_s[:n, :n] = block * mask
    adj = torch.zeros_like(scores)
    adj[:n, :n] = torch.tanh(a_s[:n, :n] @ a_s[:n, :n].T) / kn
    return a_s, adj


def full_adjacency(num_nodes: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Fixed fully connected adjacency over detected lines (ablation fallback)."""
    n = num_nodes - 1
    adj = torch.zeros(num_nodes, num_nodes, dtype=dtype, device=device)
    if n > 0:
        adj[:n, :n] = 1.0 / n
    return adj


def intra_conv(graph: Graph, theta1: torch.Tensor, theta2: torch.Tensor) -> torch.Tensor:
    f, adj = graph.features, graph.adjacency
    if theta1.shape[0] != f.shape[1] or theta2.shape[0] != f.shape[1] or theta1.shape[1] != theta2.shape[1]:
        raise ValueError(f"dimension mismatch: F {tuple(f.shape)}, Theta1 {tuple(theta1.shape)}, Theta2 {tuple(theta2.shape)}")
    if adj.shape != (f.shape[0], f.shape[0]):
        raise ValueError(f"adjacency {tuple(adj.shape)} does not fit {f.shape[0]} nodes")
    return torch.relu(adj @ f @ theta1) + torch.relu(f @ theta2)


def cross_conv(fa: torch.Tensor, fb: torch.Tensor, p, w: torch.Tensor):
    """Aggregate soft-assigned partner features from the other graph.

    Detected rows of A become ``[P[:n] Fb || Fa[:n]] W`` and detected rows of
    B ``[P^T[:m] Fa || Fb[:m]] W``. The printed ``P(1:m,:)^T`` only has
    consistent shapes when read as rows of ``P^T`` (a column slice of ``P``).
    Dustbin rows aggregate nothing: they map as ``[0 || dustbin] W``.
    """
    pv = p.values if isinstance(p, AssignmentMatrix) else p
    n, m = fa.shape[0] - 1, fb.shape[0] - 1
    if pv.shape != (n + 1, m + 1):
        raise ValueError(f"P has shape {tuple(pv.shape)}, expected {(n + 1, m + 1)}")
    if fa.shape[1] != fb.shape[1] or w.shape[0] != 2 * fa.shape[1]:
        raise ValueError(f"dimension mismatch: Fa {tuple(fa.shape)}, Fb {tuple(fb.shape)}, W {tuple(w.shape)}")
    msg_a = torch.cat([pv[:n, :] @ fb, torch.zeros_like(fa[n:])], dim=0)
    msg_b = torch.cat([pv[:, :m].T @ fa, torch.zeros_like(fb[m:])], dim=0)
    return torch.cat([msg_a, fa], dim=1) @ w, torch.cat([msg_b, fb], dim=1) @ w


def _passthrough(in_dim: int, out_dim: int) -> torch.Tensor:
    """Init for the self term: identity when widths agree, else a signed pair ``[Q, -Q]``
    of orthonormal projections so that ReLU keeps both signs of the input."""
    if in_dim == out_dim:
        return torch.eye(in_dim)
    half = out_dim // 2
    q, _ = torch.linalg.qr(torch.randn(in_dim, max(in_dim, half)))
    q = q[:, :half]
    theta = torch.zeros(in_dim, out_dim)
    theta[:, :half] = q
    theta[:, half:2 * half] = -q
    return theta


class GraphLayer(nn.Module):
    """Parameters of one block; shared between the two graphs."""

    def __init__(self, in_dim: int, out_dim: int, score_dim: int, keep_ratio: float):
        super().__init__()
        self.keep_ratio = keep_ratio
        self.omega = nn.Parameter(torch.randn(score_dim, in_dim) / math.sqrt(in_dim))
        self.a_vec = nn.Parameter(torch.randn(2 * score_dim) / math.sqrt(2 * score_dim))
        self.theta1 = nn.Parameter(0.1 * torch.randn(in_dim, out_dim) / math.sqrt(in_dim))
        self.theta2 = nn.Parameter(_passthrough(in_dim, out_dim))
        # message block small, own-feature block identity: starts close to a pass-through
        self.w_cross = nn.Parameter(torch.cat([0.1 * torch.randn(out_dim, out_dim) / math.sqrt(out_dim), torch.eye(out_dim)]))

    def adjacency(self, f: torch.Tensor, learn_graph: bool = True, strict: bool = True) -> torch.Tensor:
        if not learn_graph:
            return full_adjacency(f.shape[0], f.dtype, f.device)
        return mutual_topk_adjacency(relation_scores(f, self.a_vec, self.omega), self.keep_ratio, strict=strict)[1]


class GraphMatcher(nn.Module):
    """Stacked blocks of adjacency learning, intra-graph conv, transport and cross-graph conv."""

    def __init__(
        self,
        in_dim: int = 128,
        width: int = 128,
        layers: int = 3,
        score_dim: int = 32,
        delta: float = 0.5,
        sinkhorn_iters: int = 100,
        sinkhorn_tol: float = 1e-6,
        strict_mutual: bool = True,
        learn_graph: bool = True,
        normalize_embeddings: bool = True,
        c_scale: float = 1.0,
    ):
        super().__init__()
        dims = [in_dim] + [width] * layers
        self.layers = nn.ModuleList(
            GraphLayer(dims[i], dims[i + 1], score_dim, layer_keep_ratio(i + 1)) for i in range(layers)
        )
        self.c = nn.Parameter(c_scale * torch.eye(width))
        self.delta = delta
        self.sinkhorn_iters = sinkhorn_iters
        self.sinkhorn_tol = sinkhorn_tol
        self.strict_mutual = strict_mutual
        self.learn_graph = learn_graph
        self.normalize_embeddings = normalize_embeddings

    def transport(self, fa, fb):
        if self.normalize_embeddings:
            fa = torch.nn.functional.normalize(fa, dim=1)
            fb = torch.nn.functional.normalize(fb, dim=1)
        return solve_matching(fa, fb, self.c, self.delta, self.sinkhorn_iters, self.sinkhorn_tol)

    def forward(self, fa: torch.Tensor, fb: torch.Tensor):
        """Return final (affinity, assignment) and per-layer intermediates."""
        inter = []
        for layer in self.layers:
            adj_a = layer.adjacency(fa, self.learn_graph, self.strict_mutual) if fa.shape[0] > 1 else torch.zeros(1, 1, dtype=fa.dtype)
            adj_b = layer.adjacency(fb, self.learn_graph, self.strict_mutual) if fb.shape[0] > 1 else torch.zeros(1, 1, dtype=fb.dtype)
            fa = intra_conv(Graph(fa, adj_a), layer.theta1, layer.theta2)
            fb = intra_conv(Graph(fb, adj_b), layer.theta1, layer.theta2)
            _, p = self.transport(fa, fb)
            fa, fb = cross_conv(fa, fb, p, layer.w_cross)
            inter.append({"adj_a": adj_a, "adj_b": adj_b, "P": p})
        m, p = self.transport(fa, fb)
        return m, p, inter
