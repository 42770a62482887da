import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from flexcode.align import ProjectionHead, cca_loss, cca_loss_from_recon, info_nce, similarity_nce
from flexcode.numerics import grad_check
from flexcode.quantize import RqVae, rq_encode


def brute_info_nce(a, c, tau):
    n = len(a)
    total = 0.0
    for i in range(n):
        sims = [float(a[i] @ c[j] / (a[i].norm() * c[j].norm())) / tau for j in range(n)]
        total += -sims[i] + math.log(sum(math.exp(s) for s in sims))
    return total / n


def test_equal_similarities_give_log_n():
    for n in (2, 5, 16):
        a = torch.ones(n, 3, dtype=torch.float64)
        assert info_nce(a, a.clone(), 0.1).item() == pytest.approx(math.log(n), abs=1e-12)


def test_two_item_closed_form():
    # positives at cosine 1, the negative at -1: log(1 + exp(-2)) at unit temperature
    a = torch.tensor([[1.0, 0.0], [-1.0, 0.0]], dtype=torch.float64)
    assert info_nce(a, a.clone(), 1.0).item() == pytest.approx(0.12692801104297252, abs=1e-15)
    assert info_nce(a, a.clone(), 1.0, symmetric=True).item() == pytest.approx(0.12692801104297252, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 7), st.integers(1, 5), st.floats(0.05, 2.0), st.integers(0, 10_000))
def test_matches_brute_force(n, d, tau, seed):
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(n, d, generator=g, dtype=torch.float64) + 0.1
    c = torch.randn(n, d, generator=g, dtype=torch.float64) + 0.1
    if (a.norm(dim=1) == 0).any() or (c.norm(dim=1) == 0).any():
        return
    assert info_nce(a, c, tau).item() == pytest.approx(brute_info_nce(a, c, tau), rel=1e-9, abs=1e-12)
    sym = 0.5 * (brute_info_nce(a, c, tau) + brute_info_nce(c, a, tau))
    assert info_nce(a, c, tau, symmetric=True).item() == pytest.approx(sym, rel=1e-9, abs=1e-12)


def test_loss_falls_as_positive_aligns():
    base = torch.tensor([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]], dtype=torch.float64)
    prev = float("inf")
    for angle in [1.5, 1.0, 0.5, 0.1, 0.0]:
        cand = base.clone()
        cand[0] = torch.tensor([math.cos(angle), math.sin(angle)])
        cur = info_nce(base, cand, 0.1).item()
        assert cur < prev
        prev = cur


def test_scale_invariance():
    torch.manual_seed(0)
    a = torch.randn(6, 4, dtype=torch.float64)
    c = torch.randn(6, 4, dtype=torch.float64)
    scale = torch.tensor([0.01, 3.0, 7.0, 0.5, 100.0, 1.0], dtype=torch.float64)[:, None]
    assert info_nce(a * scale, c, 0.1).item() == pytest.approx(info_nce(a, c, 0.1).item(), rel=1e-12)


def test_errors():
    a = torch.ones(1, 3)
    with pytest.raises(ValueError):
        info_nce(a, a, 0.1)
    z = torch.zeros(3, 2)
    with pytest.raises(ValueError):
        info_nce(z, torch.ones(3, 2), 0.1)
    with pytest.raises(ValueError):
        info_nce(torch.ones(3, 2), torch.ones(3, 2), 0.0)


def test_similarity_nce_matches():
    torch.manual_seed(1)
    a = torch.randn(5, 3, dtype=torch.float64)
    c = torch.randn(5, 3, dtype=torch.float64)
    sim = torch.nn.functional.normalize(a, dim=1) @ torch.nn.functional.normalize(c, dim=1).T
    assert similarity_nce(sim, 0.2).item() == pytest.approx(info_nce(a, c, 0.2).item(), rel=1e-12)


def test_heads_grad_check():
    torch.manual_seed(2)
    sh = ProjectionHead(5, 4).double()
    ch = ProjectionHead(3, 4).double()
    s = torch.randn(6, 5, dtype=torch.float64)
    c = torch.randn(6, 3, dtype=torch.float64)
    params = {f"s.{k}": v for k, v in sh.named_parameters()} | {f"c.{k}": v for k, v in ch.named_parameters()}
    rep = grad_check(lambda: cca_loss_from_recon(s, c, sh, ch, 0.1, symmetric=True), params)
    assert rep.passed, rep.flagged


def test_cca_loss_from_codes_reaches_codebooks():
    torch.manual_seed(3)
    sem = RqVae(6, 4, 8, 2).double()
    col = RqVae(5, 4, 8, 2).double()
    sh, ch = ProjectionHead(6, 4).double(), ProjectionHead(5, 4).double()
    sc, _ = rq_encode(sem, torch.randn(10, 6, dtype=torch.float64))
    cc, _ = rq_encode(col, torch.randn(10, 5, dtype=torch.float64))
    loss = cca_loss(sc, cc, sem, col, sh, ch)
    loss.backward()
    assert sem.codebooks.grad is not None and sem.codebooks.grad.abs().sum() > 0
    assert col.codebooks.grad is not None and col.codebooks.grad.abs().sum() > 0
