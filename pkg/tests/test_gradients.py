import pytest
import torch

from oracles import GRADIENT_CASES, grad_rel_error


@pytest.mark.parametrize("name", sorted(GRADIENT_CASES))
def test_autograd_matches_finite_differences(name):
    fn, x, tol = GRADIENT_CASES[name]()
    assert grad_rel_error(fn, x, directions=4) < tol


def test_adjacency_gradient_vanishes_off_retained_entries():
    s = torch.rand(7, 7, dtype=torch.float64) + 0.1
    s.requires_grad_(True)
    a_s, adj = __import__("glmatch.graphnet", fromlist=["x"]).mutual_topk_adjacency(s, 0.2)
    adj.sum().backward()
    dropped = a_s.detach() == 0
    assert (s.grad[dropped] == 0).all()


def test_torch_gradcheck_sinkhorn_small():
    a = torch.tensor([1.0, 1.0, 2.0], dtype=torch.float64)
    b = torch.tensor([1.0, 1.0, 2.0], dtype=torch.float64)
    from glmatch.transport import sinkhorn

    x = torch.randn(3, 3, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda l: sinkhorn(l, a, b, max_iters=40, tol=0.0).values, (x,), atol=1e-6, rtol=1e-4)
