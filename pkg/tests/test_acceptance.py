"""Acceptance suite: one test per criterion, each printing a PASS line with
its measured values (run with -s to see them). Training-backed criteria share
session-scoped fixtures so the paired desk runs happen once.

Criteria 1-5 are exact/oracle checks; 6-10 are desk-scale directional analogs
on the synthetic dataset (10 classes, 32x32, seed 0).
"""

import math
import time

import numpy as np
import pytest
import torch

from prologue.ar import ar_loss, build_sequence
from prologue.data import synth_shapes
from prologue.diagnostics import (
    attention_maps,
    ce_decomposition,
    collapse_oracle,
    info_empirical,
    info_exact,
    linear_probe,
    random_joint,
)
from prologue.pipeline import (
    RunConfig,
    build_ar,
    build_tokenizer,
    evaluate_tokenizer,
    param_hash,
    train_prologue_post,
    train_stage1,
    train_stage2,
)
from prologue.quantize import Codebook, prob_ste
from prologue.sampling import CFGConfig, generate, guided_logits, visual_scale_at
from prologue.tokenizer import TokenGroups

# Desk-scale acceptance configuration: small enough for a 2-thread CPU box,
# large enough that every directional effect is unambiguous.
DESK = dict(
    image_size=32, patch_size=4, num_classes=10, samples_per_class=64,
    prologue_len=8, prologue_vocab=128, visual_vocab=512,
    dim=64, enc_layers=3, dec_layers=3, heads=4,
    ar_dim=64, ar_layers=4, ar_heads=4,
    batch_size=32, epochs=35, stage2_epochs=15, log_every=100,
    warmup_steps=20, holdout_frac=0.1, seed=0,
)
SWEEP_EPOCHS = 12


def desk_cfg(mode="prologue", **kw):
    d = dict(DESK)
    if mode.startswith("baseline"):
        d.update(prologue_len=0, visual_drop=0.0, ar_weight=0.0)
    d.update(kw)
    return RunConfig(mode=mode, **d).validate()


def report(num, ok, detail, limit_s=None, elapsed=None):
    stamp = f" [{elapsed:.1f}s < {limit_s}s]" if limit_s is not None else ""
    print(f"\n{'PASS' if ok else 'FAIL'} criterion {num}: {detail}{stamp}")
    assert ok, f"criterion {num}: {detail}"
    if limit_s is not None:
        assert elapsed < limit_s, f"criterion {num} runtime {elapsed:.1f}s over {limit_s}s"


# ---------------------------------------------------------------------------
# Criterion 1: routing exactness
# ---------------------------------------------------------------------------

def test_criterion_1_routing_exactness():
    t0 = time.monotonic()
    torch.manual_seed(0)
    cfg = desk_cfg()
    tok = build_tokenizer(cfg)
    ar = build_ar(cfg, compact=True)
    pixels = torch.rand(16, 3, 32, 32)
    labels = torch.randint(0, 10, (16,))
    enc = tok.encode(pixels)
    h_v = enc.h_v
    vq = tok.quantize_visual(h_v)
    ste = tok.quantize_prologue(enc.h_p)
    tg = TokenGroups(zp_ids=ste.hard_ids, zp_soft=ste.pass_through,
                     zv_ids=vq.ids.detach(), zv_vecs=vq.quantized_vecs)
    rng = torch.Generator().manual_seed(0)
    seq = build_sequence(tg, labels, cfg.visual_drop, cfg.class_drop, rng, cfg.num_classes)
    ce = ar_loss(ar, seq).ce_total
    g_cbv, g_hv, g_queries = torch.autograd.grad(
        ce, [tok.cb_v.weight, h_v, tok.encoder.queries], allow_unused=True)
    cbv_zero = g_cbv is None or bool((g_cbv == 0).all())
    hv_zero = g_hv is None or bool((g_hv == 0).all())
    queries_nonzero = g_queries is not None and g_queries.abs().sum() > 0
    elapsed = time.monotonic() - t0
    report(1, cbv_zero and hv_zero and queries_nonzero,
           f"dCE/dC_v zero={cbv_zero}, dCE/dh_v zero={hv_zero}, "
           f"dCE/dqueries nonzero={queries_nonzero}", 10, elapsed)


# ---------------------------------------------------------------------------
# Criterion 2: information identities on 1000 random joints
# ---------------------------------------------------------------------------

def test_criterion_2_information_identities():
    t0 = time.monotonic()
    rng = np.random.default_rng(0)
    worst_chain, worst_ce = 0.0, 0.0
    for i in range(1000):
        a, b = int(rng.integers(2, 10)), int(rng.integers(2, 10))
        joint = random_joint(rng, a, b)
        rep = info_exact(joint)
        worst_chain = max(worst_chain, abs(rep.h_joint - (rep.h_zv + rep.h_zp - rep.mi)))
        q, p = random_joint(rng, a, b), random_joint(rng, a, b)
        dec = ce_decomposition(q, p)
        worst_ce = max(worst_ce, abs(dec["ce"] - (dec["h_q"] + dec["kl"])))
    elapsed = time.monotonic() - t0
    report(2, worst_chain < 1e-9 and worst_ce < 1e-9,
           f"1000 joints: worst chain-rule err {worst_chain:.2e}, worst CE=H+KL err {worst_ce:.2e}",
           30, elapsed)


# ---------------------------------------------------------------------------
# Criterion 3: collapse null-benefit oracle
# ---------------------------------------------------------------------------

def test_criterion_3_collapse_null_benefit():
    t0 = time.monotonic()
    rng = np.random.default_rng(1)
    worst_null, worst_gap = 0.0, 0.0
    for i in range(1000):
        a, b = int(rng.integers(2, 10)), int(rng.integers(2, 10))
        joint = random_joint(rng, a, b)
        rep = collapse_oracle(joint)
        worst_null = max(worst_null, abs(rep["degenerate_total_ce"] - rep["baseline_total_ce"]))
        worst_gap = max(worst_gap, abs(rep["gap"] - rep["mi"]))
    elapsed = time.monotonic() - t0
    report(3, worst_null < 1e-12 and worst_gap < 1e-9,
           f"1000 joints: collapsed-vs-baseline CE err {worst_null:.2e}, "
           f"conditional-fit gap vs MI err {worst_gap:.2e}", 30, elapsed)


# ---------------------------------------------------------------------------
# Criterion 4: Prob-STE gradient check
# ---------------------------------------------------------------------------

def _fd_gradient(h, weight, tau, w, eps):
    g = torch.zeros_like(h)
    flat, gflat = h.reshape(-1), g.reshape(-1)
    for i in range(flat.numel()):
        for sign in (1.0, -1.0):
            bumped = flat.clone()
            bumped[i] += sign * eps
            soft = torch.softmax(bumped.reshape(h.shape) @ weight.t() / tau, dim=-1)
            gflat[i] += sign * (w * soft).sum() / (2 * eps)
    return g


def test_criterion_4_prob_ste_gradcheck():
    t0 = time.monotonic()
    worst = {0.1: 0.0, 1.0: 0.0}
    eps_for = {0.1: 1e-4, 1.0: 1e-5}
    for tau in (0.1, 1.0):
        torch.manual_seed(int(10 * tau))
        cb = Codebook(6, 5, normalized=False, seed=42).double()
        checked = 0
        while checked < 100:
            h = torch.randn(1, 1, 5, dtype=torch.float64, requires_grad=True)
            logits = h.detach() @ cb.weight.detach().t() / tau
            top2 = logits.topk(2, dim=-1).values
            if (top2[..., 0] - top2[..., 1]).min() < 1e-2:
                continue  # too close to an argmax decision boundary
            out = prob_ste(h, cb, tau)
            w = torch.randn_like(out.pass_through)
            (out.pass_through * w).sum().backward()
            fd = _fd_gradient(h.detach(), cb.weight.detach(), tau, w, eps_for[tau])
            rel = ((h.grad - fd).norm() / fd.norm().clamp_min(1e-12)).item()
            worst[tau] = max(worst[tau], rel)
            checked += 1
    elapsed = time.monotonic() - t0
    ok = all(v < 1e-4 for v in worst.values())
    report(4, ok, f"100 points per tau: worst rel err tau=0.1: {worst[0.1]:.2e}, "
                  f"tau=1.0: {worst[1.0]:.2e}", 30, elapsed)


# ---------------------------------------------------------------------------
# Criterion 5: causality and CFG identities
# ---------------------------------------------------------------------------

def test_criterion_5_causality_and_cfg():
    t0 = time.monotonic()
    torch.manual_seed(3)
    cfg = desk_cfg(ar_dropout=0.0)
    tok = build_tokenizer(cfg).eval()
    ar = build_ar(cfg, compact=True).eval()
    k, n = cfg.prologue_len, cfg.num_visual
    g = torch.Generator().manual_seed(0)
    zp = torch.randint(0, cfg.prologue_vocab, (1, k), generator=g)
    zv = torch.randint(0, cfg.visual_vocab, (1, n), generator=g)
    cond = torch.tensor([4])

    def flat_logits(zp_, zv_):
        lp, lv, _ = ar(cond, zp_, zv_)
        return torch.cat([lp.flatten(0, 1).sum(-1), lv.flatten(0, 1).sum(-1)])

    base = flat_logits(zp, zv)
    causal_ok = True
    for t in range(k + n):
        zp2, zv2 = zp.clone(), zv.clone()
        if t < k:
            zp2[0, t] = (zp2[0, t] + 1) % cfg.prologue_vocab
        else:
            zv2[0, t - k] = (zv2[0, t - k] + 1) % cfg.visual_vocab
        changed = flat_logits(zp2, zv2)
        if not torch.equal(changed[: t + 1], base[: t + 1]):
            causal_ok = False
            break

    # unit-scale guidance must reproduce conditional decoding exactly
    guided = generate(tok, ar, [0, 1], CFGConfig(s_pro=1.0, s_vis=1.0, guided=True),
                      torch.Generator().manual_seed(11), collect_probs=True)
    plain = generate(tok, ar, [0, 1], CFGConfig(guided=False),
                     torch.Generator().manual_seed(11), collect_probs=True)
    cfg_err = max((a - b).abs().max().item() for a, b in zip(guided.step_probs, plain.step_probs))
    cond_l = torch.randn(4, 7)
    uncond_l = torch.randn(4, 7)
    unit_exact = torch.equal(guided_logits(cond_l, uncond_l, 1.0), cond_l)

    endpoints_exact = (visual_scale_at(0, n, 3.75, 0.25) == 1.0
                       and visual_scale_at(n - 1, n, 3.75, 0.25) == 3.75)
    elapsed = time.monotonic() - t0
    ok = causal_ok and cfg_err <= 1e-6 and unit_exact and endpoints_exact
    report(5, ok, f"causality at all {k + n} positions: {causal_ok}; "
                  f"s=1 probs max err {cfg_err:.2e}; unit-scale exact {unit_exact}; "
                  f"cosine endpoints exact {endpoints_exact}", 60, elapsed)


# ---------------------------------------------------------------------------
# Shared trained fixtures (criteria 6, 8, 9, 10)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def desk_data():
    return synth_shapes(0, 10, 64, 32)


@pytest.fixture(scope="session")
def paired_runs(desk_data):
    t0 = time.monotonic()
    cfg_p = desk_cfg("prologue")
    cfg_b = desk_cfg("baseline_2d")
    s1_p = train_stage1(cfg_p, desk_data)
    s1_b = train_stage1(cfg_b, desk_data)
    s2_p = train_stage2(s1_p.tokenizer, cfg_p, desk_data)
    s2_b = train_stage2(s1_b.tokenizer, cfg_b, desk_data)
    return {"cfg_p": cfg_p, "cfg_b": cfg_b, "s1_p": s1_p, "s1_b": s1_b,
            "s2_p": s2_p, "s2_b": s2_b, "elapsed": time.monotonic() - t0}


def test_criterion_6_desk_end_to_end(paired_runs, desk_data):
    r = paired_runs
    ce_p = r["s2_p"].final["ce_visual"]
    ce_b = r["s2_b"].final["ce_visual"]
    l1_p = r["s1_p"].final["recon_l1"]
    l1_b = r["s1_b"].final["recon_l1"]
    ppl = r["s1_p"].final["zp_perplexity"]
    rel = abs(l1_p - l1_b) / l1_b
    ok = (ce_p < ce_b) and (rel <= 0.05) and (ppl > 1.5)
    report(6, ok,
           f"(a) stage-2 visual CE {ce_p:.4f} < baseline {ce_b:.4f}; "
           f"(b) recon L1 {l1_p:.4f} vs {l1_b:.4f} (rel {rel:.3f} <= 0.05); "
           f"(c) prologue perplexity {ppl:.2f} > 1.5",
           1800, r["elapsed"])


def test_trained_beats_untrained_reconstruction(paired_runs, desk_data):
    """Trained decode error must land below the fresh-init baseline."""
    cfg = paired_runs["cfg_p"]
    torch.manual_seed(123)
    fresh = build_tokenizer(cfg).eval()
    _, held = desk_data.split(cfg.holdout_frac, seed=cfg.seed)
    untrained = evaluate_tokenizer(fresh, held, cfg)["recon_l1"]
    trained = paired_runs["s1_p"].final["recon_l1"]
    print(f"\ntrained recon {trained:.4f} vs untrained {untrained:.4f}")
    assert trained < untrained


def test_trained_mi_proxy_positive(paired_runs, desk_data):
    """The stage-1 AR must actually use the prologue prefix it was trained with."""
    r = paired_runs
    _, held = desk_data.split(r["cfg_p"].holdout_frac, seed=r["cfg_p"].seed)
    rep, details = info_empirical(r["s1_p"].tokenizer, r["s1_p"].ar, held, r["cfg_p"])
    print(f"\nMI proxy (raw): {details['mi_proxy_raw']:.2f} nats over the visual block")
    assert details["mi_proxy_raw"] > 0
    assert rep.mi > 0


# ---------------------------------------------------------------------------
# Criterion 7: lambda-sweep shape (reduced grid)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def sweep_runs(desk_data):
    t0 = time.monotonic()
    results = {}
    for lam in (0.03, 3.0):
        cfg = desk_cfg("baseline_2d_arreg", ar_weight=lam, epochs=SWEEP_EPOCHS)
        results[("arreg", lam)] = train_stage1(cfg, desk_data).final
    for lam in (1.0, 3.0, 6.0):
        cfg = desk_cfg("prologue", ar_weight=lam, epochs=SWEEP_EPOCHS)
        results[("prologue", lam)] = train_stage1(cfg, desk_data).final
    return results, time.monotonic() - t0


def test_criterion_7_lambda_sweep_shape(sweep_runs):
    results, elapsed = sweep_runs
    arreg_low = results[("arreg", 0.03)]["recon_l1"]
    arreg_high = results[("arreg", 3.0)]["recon_l1"]
    pro = [results[("prologue", lam)]["recon_l1"] for lam in (1.0, 3.0, 6.0)]
    spread = (max(pro) - min(pro)) / min(pro)
    ok = (arreg_high > arreg_low) and (spread <= 0.10)
    report(7, ok,
           f"arreg recon L1 at weight 3 ({arreg_high:.4f}) > at 0.03 ({arreg_low:.4f}); "
           f"prologue recon L1 spread over weights 1/3/6 = {spread:.3f} <= 0.10",
           1800, elapsed)


# ---------------------------------------------------------------------------
# Criterion 8: probing and attention direction
# ---------------------------------------------------------------------------

def test_criterion_8_probe_and_attention(paired_runs, desk_data):
    t0 = time.monotonic()
    r = paired_runs
    probe_p = linear_probe(r["s1_p"].tokenizer, desk_data, "prologue", r["cfg_p"])
    probe_v = linear_probe(r["s1_b"].tokenizer, desk_data, "first_k_visual", r["cfg_b"],
                           first_k=r["cfg_p"].prologue_len)
    _, held = desk_data.split(r["cfg_p"].holdout_frac, seed=r["cfg_p"].seed)
    batch = held.batch(range(min(64, len(held))))
    att = attention_maps(r["s2_p"].ar, r["s1_p"].tokenizer, batch, r["cfg_p"],
                         layers=list(range(r["cfg_p"].ar_layers)))
    elapsed = time.monotonic() - t0
    ok = (probe_p["top1"] >= probe_v["top1"]) and (att["prologue_mass"] > att["uniform_baseline"])
    report(8, ok,
           f"probe top-1 prologue {probe_p['top1']:.3f} >= first-{r['cfg_p'].prologue_len}-visual "
           f"{probe_v['top1']:.3f}; attention mass on prologue {att['prologue_mass']:.3f} > "
           f"uniform {att['uniform_baseline']:.3f}", 900, elapsed)


# ---------------------------------------------------------------------------
# Criterion 9: post-hoc prologue contract
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def post_run(paired_runs, desk_data):
    t0 = time.monotonic()
    cfg = desk_cfg("prologue_post", epochs=15)
    base_tok = paired_runs["s1_b"].tokenizer
    probe = desk_data.batch(range(32))
    with torch.no_grad():
        recon_before = base_tok.eval().reconstruct(probe.pixels)[0]
    hash_before = param_hash(base_tok)
    result = train_prologue_post((base_tok, paired_runs["cfg_b"]), cfg, desk_data)
    return {"cfg": cfg, "result": result, "probe": probe, "recon_before": recon_before,
            "hash_before": hash_before, "elapsed": time.monotonic() - t0}


def test_criterion_9_post_contract(post_run):
    r = post_run
    post_tok = r["result"].tokenizer
    with torch.no_grad():
        recon_after = post_tok.base.reconstruct(r["probe"].pixels)[0]
    hash_ok = param_hash(post_tok.base) == r["hash_before"]
    recon_ok = torch.equal(r["recon_before"], recon_after)
    ces = [v for _, m, v in r["result"].metrics.history if m == "train/ce_total"]
    ce_ok = ces[-1] < ces[0]
    report(9, hash_ok and recon_ok and ce_ok,
           f"frozen hash constant {hash_ok}; recon bit-identical {recon_ok}; "
           f"AR CE {ces[0]:.3f} -> {ces[-1]:.3f} decreases {ce_ok}",
           900, r["elapsed"])


def test_post_improves_over_prologue_free_ar(post_run, paired_runs, desk_data):
    """Directional desk analog: a compact AR with the post-hoc prologue beats
    an equally-budgeted compact AR on the bare frozen tokens."""
    cfg_b = paired_runs["cfg_b"]
    ctrl_cfg = desk_cfg("baseline_2d", stage2_epochs=post_run["cfg"].epochs)
    ctrl = train_stage2(paired_runs["s1_b"].tokenizer, ctrl_cfg, desk_data, compact=True)
    post_ce = post_run["result"].final["ce_visual"]
    ctrl_ce = ctrl.final["ce_visual"]
    print(f"\npost visual CE {post_ce:.4f} vs prologue-free control {ctrl_ce:.4f}")
    assert post_ce < ctrl_ce


# ---------------------------------------------------------------------------
# Criterion 10: fixed-prologue resampling
# ---------------------------------------------------------------------------

def test_criterion_10_fixed_prologue_resampling(paired_runs, desk_data):
    t0 = time.monotonic()
    r = paired_runs
    tok, ar = r["s1_p"].tokenizer, r["s2_p"].ar
    with torch.no_grad():
        zp = tok.tokenize(desk_data.batch([0]).pixels).zp_ids[0]
    outs = []
    for seed in (0, 1, 2):
        outs.append(generate(tok, ar, [desk_data.labels[0].item()],
                             CFGConfig(guided=False, t_vis=1.0, t_pro=1.0),
                             torch.Generator().manual_seed(seed), fixed_zp=zp))
    zp_ok = all(torch.equal(o.zp_ids[0], zp) for o in outs)
    diffs = []
    for i in range(len(outs)):
        for j in range(i + 1, len(outs)):
            diffs.append((outs[i].images - outs[j].images).abs().mean().item())
    distinct = all(d > 1e-4 for d in diffs)
    elapsed = time.monotonic() - t0
    report(10, zp_ok and distinct,
           f"injected prologue identical in all outputs {zp_ok}; decoded images "
           f"pairwise distinct (mean|diff| {min(diffs):.4f}..{max(diffs):.4f})",
           300, elapsed)
