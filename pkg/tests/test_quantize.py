import pytest
import torch
import torch.nn.functional as F

from prologue.errors import ConfigError
from prologue.quantize import Codebook, codebook_stats, prob_ste, vq_encode

# independently computed: softmax([2,1,0.5]) at tau=1 via 30-digit evaluation
SOFTMAX_2_1_05 = [0.6285317192117624, 0.23122389762214907, 0.14024438316608848]
# exp(H([2/3,1/3])) via 30-digit evaluation
PPL_001 = 1.8898815748423097


def make_codebook(size, dim, normalized, seed=0):
    return Codebook(size, dim, normalized=normalized, seed=seed)


def test_vq_exact_row_match():
    cb = make_codebook(8, 4, normalized=True)
    h = cb.weight[3].detach().clone().unsqueeze(0).unsqueeze(0)
    out = vq_encode(h, cb)
    assert out.ids.item() == 3
    assert out.commit_loss.item() < 1e-12


def test_vq_nearest_axis():
    cb = Codebook(2, 2, normalized=True)
    with torch.no_grad():
        cb.weight.copy_(torch.eye(2))
    h = torch.tensor([[[0.9, 0.1]]])
    h = F.normalize(h, dim=-1)
    out = vq_encode(h, cb)
    assert out.ids.item() == 0


def test_vq_matches_bruteforce_oracle():
    torch.manual_seed(7)
    for v in (4, 16, 64):
        cb = make_codebook(v, 6, normalized=True, seed=v)
        h = torch.randn(5, 9, 6)
        out = vq_encode(h, cb)
        h_norm = F.normalize(h, dim=-1)
        # exhaustive nearest neighbor over squared distances
        for b in range(5):
            for n in range(9):
                d = [(h_norm[b, n] - cb.weight[i]).pow(2).sum().item() for i in range(v)]
                assert out.ids[b, n].item() == min(range(v), key=d.__getitem__)


def test_vq_tie_breaks_lowest_index():
    cb = Codebook(3, 2, normalized=True)
    with torch.no_grad():
        cb.weight.copy_(torch.tensor([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]]))
    h = torch.tensor([[[2.0, 0.0]]])
    out = vq_encode(h, cb)
    assert out.ids.item() == 1


def test_vq_forward_is_code_backward_is_identity():
    cb = make_codebook(8, 4, normalized=True)
    h = torch.randn(2, 3, 4, requires_grad=True)
    out = vq_encode(h, cb)
    assert torch.equal(out.quantized_vecs, cb.weight[out.ids])
    w = torch.randn_like(out.quantized_vecs)
    (out.quantized_vecs * w).sum().backward()
    assert torch.allclose(h.grad, w)


def test_vq_commit_reaches_codebook():
    cb = make_codebook(8, 4, normalized=True)
    h = torch.randn(2, 3, 4)
    out = vq_encode(h, cb)
    g = torch.autograd.grad(out.commit_loss, cb.weight)[0]
    assert g.abs().sum() > 0


def test_vq_rejects_bad_input():
    cb = make_codebook(4, 3, normalized=True)
    with pytest.raises(ValueError):
        vq_encode(torch.tensor([[[float("nan"), 0, 0]]]), cb)
    with pytest.raises(ConfigError):
        vq_encode(torch.zeros(1, 1, 3), make_codebook(4, 3, normalized=False))


def test_prob_ste_argmax_and_tau_invariance():
    cb = Codebook(3, 3, normalized=False)
    with torch.no_grad():
        cb.weight.copy_(torch.eye(3))
    h = torch.tensor([[[2.0, 1.0, 0.5]]])  # logits equal h @ I
    ids = [prob_ste(h, cb, tau).hard_ids.item() for tau in (0.01, 0.1, 1.0, 10.0)]
    assert ids == [0, 0, 0, 0]


def test_prob_ste_soft_probs_match_direct_softmax():
    cb = Codebook(3, 3, normalized=False)
    with torch.no_grad():
        cb.weight.copy_(torch.eye(3))
    out = prob_ste(torch.tensor([[[2.0, 1.0, 0.5]]]), cb, tau=1.0)
    for got, want in zip(out.soft_probs.squeeze().tolist(), SOFTMAX_2_1_05):
        assert got == pytest.approx(want, abs=1e-6)
    assert out.soft_probs.sum(-1).item() == pytest.approx(1.0, abs=1e-6)


def test_prob_ste_pass_through_is_exact_one_hot():
    cb = make_codebook(16, 8, normalized=False, seed=3)
    out = prob_ste(torch.randn(4, 5, 8), cb, tau=0.1)
    pt = out.pass_through
    assert set(pt.unique().tolist()) <= {0.0, 1.0}
    assert torch.equal(pt.sum(-1), torch.ones(4, 5))
    assert torch.equal(pt.argmax(-1), out.hard_ids)
    assert torch.equal(out.hard_ids, out.soft_probs.argmax(-1))


def test_prob_ste_quantized_is_selected_code():
    cb = make_codebook(16, 8, normalized=False, seed=3)
    out = prob_ste(torch.randn(2, 3, 8), cb, tau=0.5)
    assert torch.allclose(out.quantized_vecs, cb.weight[out.hard_ids])


def test_prob_ste_rejects_bad_tau():
    cb = make_codebook(4, 3, normalized=False)
    for tau in (0.0, -1.0):
        with pytest.raises(ConfigError):
            prob_ste(torch.zeros(1, 1, 3), cb, tau)


def _fd_gradient(h, cb_weight, tau, w, eps):
    """Central finite differences of the soft objective w . softmax(h C^T / tau)."""
    g = torch.zeros_like(h)
    flat = h.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.numel()):
        for sign in (1.0, -1.0):
            bumped = flat.clone()
            bumped[i] += sign * eps
            soft = torch.softmax(bumped.reshape(h.shape) @ cb_weight.t() / tau, dim=-1)
            gflat[i] += sign * (w * soft).sum() / (2 * eps)
    return g


@pytest.mark.parametrize("tau,eps", [(0.1, 1e-4), (1.0, 1e-5)])
def test_prob_ste_gradient_matches_finite_differences(tau, eps):
    torch.manual_seed(int(tau * 10))
    cb64 = Codebook(5, 4, normalized=False, seed=11).double()
    for trial in range(10):
        h = torch.randn(1, 2, 4, dtype=torch.float64, requires_grad=True)
        out = prob_ste(h, cb64, tau)
        # stable argmax under the FD perturbation: max logit clearly separated
        logits = (h.detach() @ cb64.weight.detach().t() / tau)
        top2 = logits.topk(2, dim=-1).values
        if (top2[..., 0] - top2[..., 1]).min() < 1e-2:
            continue
        w = torch.randn_like(out.pass_through)
        (out.pass_through * w).sum().backward()
        fd = _fd_gradient(h.detach(), cb64.weight.detach(), tau, w, eps=eps)
        denom = fd.norm().clamp_min(1e-12)
        assert (h.grad - fd).norm() / denom < 1e-4


def test_prob_ste_hard_branch_contributes_zero_gradient():
    cb = Codebook(6, 4, normalized=False, seed=2)
    h = torch.randn(1, 3, 4, requires_grad=True)
    out = prob_ste(h, cb, tau=0.5)
    w = torch.randn_like(out.pass_through)
    g_pass = torch.autograd.grad((out.pass_through * w).sum(), h, retain_graph=True)[0]
    g_soft = torch.autograd.grad((out.soft_probs * w).sum(), h)[0]
    assert torch.allclose(g_pass, g_soft, atol=1e-7)


def test_codebook_stats():
    assert codebook_stats(torch.full((20,), 7), 16)["perplexity"] == pytest.approx(1.0)
    assert codebook_stats(torch.arange(16), 16)["perplexity"] == pytest.approx(16.0, rel=1e-9)
    assert codebook_stats(torch.tensor([0, 0, 1]), 4)["perplexity"] == pytest.approx(PPL_001, rel=1e-9)
    usage = codebook_stats(torch.tensor([0, 0, 1]), 4)["usage"]
    assert usage.tolist() == pytest.approx([2 / 3, 1 / 3, 0, 0])
    with pytest.raises(ValueError):
        codebook_stats(torch.zeros(0, dtype=torch.long), 4)


def test_codebook_renormalize():
    cb = Codebook(8, 4, normalized=True, seed=0)
    with torch.no_grad():
        cb.weight.add_(0.3)
    cb.renormalize()
    norms = cb.weight.norm(dim=-1)
    assert torch.allclose(norms, torch.ones(8), atol=1e-6)
    unnormed = Codebook(8, 4, normalized=False, seed=0)
    before = unnormed.weight.detach().clone()
    unnormed.renormalize()
    assert torch.equal(unnormed.weight, before)
