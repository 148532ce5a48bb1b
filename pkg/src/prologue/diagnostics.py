"""Information-theoretic oracles on enumerable joints, empirical estimators on
trained models, attention-pattern extraction, and linear probing.

All entropies are in nats. Oracles use direct summation over the full table
(with 0*log0 := 0), so each identity they are used to check is computed from
independent summations rather than derived from one another.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .ar import ar_loss, build_sequence
from .data import ImageDataset
from .errors import ConfigError
from .quantize import codebook_stats
from .tokenizer import TokenGroups


@dataclass
class DiscreteJoint:
    """A finite joint pmf; axis 0 indexes the prologue symbol, axis 1 the
    visual symbol."""

    pmf: np.ndarray

    def __post_init__(self):
        self.pmf = np.asarray(self.pmf, dtype=np.float64)
        if self.pmf.ndim != 2:
            raise ConfigError("joint pmf must be 2-D")
        if (self.pmf < 0).any():
            raise ConfigError("joint pmf has negative entries")
        total = self.pmf.sum()
        if abs(total - 1.0) > 1e-12:
            raise ConfigError(f"joint pmf sums to {total}, not 1")

    @property
    def marginal_zp(self):
        return self.pmf.sum(axis=1)

    @property
    def marginal_zv(self):
        return self.pmf.sum(axis=0)


def random_joint(rng: np.random.Generator, a: int, b: int, concentration: float = 1.0) -> DiscreteJoint:
    pmf = rng.gamma(concentration, size=(a, b))
    return DiscreteJoint(pmf / pmf.sum())


def _plogp(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


@dataclass
class InfoReport:
    h_joint: float
    h_zp: float
    h_zv: float
    h_zv_given_zp: float
    mi: float


def info_exact(joint: DiscreteJoint) -> InfoReport:
    """Plug-in entropies and mutual information by direct summation."""
    pmf = joint.pmf
    pa, pb = joint.marginal_zp, joint.marginal_zv
    h_joint = _plogp(pmf.reshape(-1))
    h_zp, h_zv = _plogp(pa), _plogp(pb)
    # conditional entropy summed directly over rows, not via subtraction
    h_cond = 0.0
    for a in range(pmf.shape[0]):
        if pa[a] > 0:
            h_cond += pa[a] * _plogp(pmf[a] / pa[a])
    outer = pa[:, None] * pb[None, :]
    nz = pmf > 0
    mi = float((pmf[nz] * np.log(pmf[nz] / outer[nz])).sum())
    return InfoReport(h_joint=h_joint, h_zp=h_zp, h_zv=h_zv, h_zv_given_zp=h_cond, mi=mi)


def ce_decomposition(q: DiscreteJoint, p_model: DiscreteJoint) -> dict:
    """Cross-entropy, data entropy, and KL, each from its own direct sum."""
    qp, pp = q.pmf, p_model.pmf
    if qp.shape != pp.shape:
        raise ConfigError(f"shape mismatch {qp.shape} vs {pp.shape}")
    bad = (qp > 0) & (pp == 0)
    if bad.any():
        cell = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ConfigError(f"model support violation: q>0 but p=0 at cell {cell}")
    mask = qp > 0
    ce = float(-(qp[mask] * np.log(pp[mask])).sum())
    h_q = _plogp(qp.reshape(-1))
    kl = float((qp[mask] * np.log(qp[mask] / pp[mask])).sum())
    return {"ce": ce, "h_q": h_q, "kl": kl}


def _fit_factorized(pmf: np.ndarray):
    """Exact-counting fit of prefix-marginal and conditional tables."""
    pa = pmf.sum(axis=1)
    cond = np.empty_like(pmf)
    for a in range(pmf.shape[0]):
        cond[a] = pmf[a] / pa[a] if pa[a] > 0 else 1.0 / pmf.shape[1]
    return pa, cond


def _joint_ce_under_fit(pmf: np.ndarray, pa: np.ndarray, cond: np.ndarray) -> float:
    ce = 0.0
    for a in range(pmf.shape[0]):
        for b in range(pmf.shape[1]):
            if pmf[a, b] > 0:
                ce -= pmf[a, b] * (np.log(pa[a]) + np.log(cond[a, b]))
    return float(ce)


def collapse_oracle(joint: DiscreteJoint) -> dict:
    """Compare the optimally-fit factorized model of the given joint against
    the degenerate variant with the prologue symbol collapsed to a constant.

    Conditioning is asserted to never hurt; the collapsed joint's total CE
    equals the no-prologue baseline exactly; the visual-part gap of the
    non-degenerate fit equals the mutual information.
    """
    info = info_exact(joint)
    pmf = joint.pmf
    pa, cond = _fit_factorized(pmf)
    total_ce = _joint_ce_under_fit(pmf, pa, cond)
    visual_ce_cond = 0.0
    for a in range(pmf.shape[0]):
        for b in range(pmf.shape[1]):
            if pmf[a, b] > 0:
                visual_ce_cond -= pmf[a, b] * np.log(cond[a, b])
    pb = joint.marginal_zv
    visual_ce_marg = _plogp(pb)

    # collapse the prologue symbol to a constant; visual marginal unchanged
    degenerate = pb[None, :].copy()
    da, dcond = _fit_factorized(degenerate)
    degenerate_total = _joint_ce_under_fit(degenerate, da, dcond)

    if visual_ce_cond > visual_ce_marg + 1e-9:
        raise RuntimeError("conditioning increased the visual CE; oracle violated")
    return {
        "h_zp": info.h_zp,
        "h_zv": info.h_zv,
        "mi": info.mi,
        "h_zv_given_zp": info.h_zv_given_zp,
        "total_ce": total_ce,
        "visual_ce_conditional": float(visual_ce_cond),
        "visual_ce_marginal": visual_ce_marg,
        "degenerate_total_ce": degenerate_total,
        "baseline_total_ce": visual_ce_marg,
        "gap": visual_ce_marg - float(visual_ce_cond),
    }


# ---------------------------------------------------------------------------
# Empirical estimators on trained models
# ---------------------------------------------------------------------------

@torch.no_grad()
def info_empirical(tokenizer, ar, dataset: ImageDataset, cfg, shuffle_seed: int = 0):
    """Per-position plug-in entropies plus a model-based MI proxy.

    The proxy evaluates visual CE under full visual-input dropout (so the
    model can rely only on the class token and the prologue prefix) twice:
    once with the true prologue ids and once with prologue blocks permuted
    across the batch, which preserves their marginal but breaks the
    dependence. The CE difference, scaled by the number of visual positions,
    lower-bounds how much prologue information the AR actually uses.
    """
    tokenizer.eval()
    ar.eval()
    zp, zv, labels = [], [], []
    for batch in dataset.batches(cfg.batch_size):
        tg = tokenizer.tokenize(batch.pixels)
        zp.append(tg.zp_ids)
        zv.append(tg.zv_ids)
        labels.append(batch.labels)
    zp, zv, labels = torch.cat(zp), torch.cat(zv), torch.cat(labels)
    m = zv.shape[0]
    k, n = zp.shape[1], zv.shape[1]

    h_zp = sum(_plogp(np.bincount(zp[:, i].numpy(), minlength=cfg.prologue_vocab) / m) for i in range(k))
    h_zv = sum(_plogp(np.bincount(zv[:, i].numpy(), minlength=cfg.visual_vocab) / m) for i in range(n))

    rng = torch.Generator().manual_seed(shuffle_seed)
    perm = torch.randperm(m, generator=rng)

    def visual_ce(zp_block):
        total, count = 0.0, 0
        for start in range(0, m, cfg.batch_size):
            stop = min(start + cfg.batch_size, m)
            tg = TokenGroups(zp_ids=zp_block[start:stop], zp_soft=None,
                             zv_ids=zv[start:stop], zv_vecs=None)
            seq = build_sequence(tg, labels[start:stop], 1.0, 0.0, rng, cfg.num_classes, hard=True)
            parts = ar_loss(ar, seq)
            total += parts.ce_visual.item() * (stop - start)
            count += stop - start
        return total / count

    ce_true = visual_ce(zp)
    ce_shuffled = visual_ce(zp[perm])
    mi_raw = (ce_shuffled - ce_true) * n
    mi = min(max(mi_raw, 0.0), h_zp, h_zv)

    details = {"mi_proxy_raw": mi_raw, "ce_visual_true_zp": ce_true,
               "ce_visual_shuffled_zp": ce_shuffled, "samples": m}
    table = max(cfg.prologue_vocab, cfg.visual_vocab)
    if m < 10 * table:
        details["caveat"] = (f"only {m} samples for tables of size {table}; "
                             "plug-in entropies are biased low")
        warnings.warn(details["caveat"])
    if k > 0:
        details["zp_perplexity"] = codebook_stats(zp, cfg.prologue_vocab)["perplexity"]
    report = InfoReport(h_joint=h_zp + h_zv - mi, h_zp=h_zp, h_zv=h_zv,
                        h_zv_given_zp=h_zv - mi, mi=mi)
    return report, details


# ---------------------------------------------------------------------------
# Attention patterns
# ---------------------------------------------------------------------------

def mask_and_renormalize(mat: np.ndarray) -> np.ndarray:
    """Zero the self-attention diagonal and the first-token column, then
    renormalize each row to sum 1 (all-zero rows stay zero). Idempotent."""
    out = mat.copy()
    np.fill_diagonal(out, 0.0)
    out[:, 0] = 0.0
    sums = out.sum(axis=1, keepdims=True)
    np.divide(out, sums, out=out, where=sums > 0)
    return out


@torch.no_grad()
def attention_maps(ar, tokenizer, batch, cfg, layers) -> dict:
    """Per-layer attention averaged over heads and batch, masked and
    renormalized, plus the mean attention mass visual positions place on the
    prologue key block."""
    tokenizer.eval()
    ar.eval()
    tg = tokenizer.tokenize(batch.pixels)
    rng = torch.Generator().manual_seed(0)
    seq = build_sequence(tg, batch.labels, 0.0, 0.0, rng, cfg.num_classes, hard=True)
    parts, attns = ar_loss(ar, seq, need_attn=True)
    num_layers = len(attns)
    for layer in layers:
        if not 0 <= layer < num_layers:
            raise ValueError(f"layer {layer} outside [0, {num_layers})")
    k, n = ar.num_prologue, ar.num_visual
    maps = {}
    masses = {}
    for layer in layers:
        mean = attns[layer].mean(dim=(0, 1)).cpu().numpy()  # over batch and heads
        masked = mask_and_renormalize(mean)
        maps[layer] = masked
        visual_rows = masked[1 + k : 1 + k + n]
        masses[layer] = float(visual_rows[:, 1 : 1 + k].sum(axis=1).mean()) if k > 0 else 0.0
    prologue_mass = float(np.mean([masses[l] for l in layers])) if layers else 0.0
    return {"maps": maps, "prologue_mass_per_layer": masses,
            "prologue_mass": prologue_mass, "uniform_baseline": k / (k + n)}


def prologue_token_heatmaps(maps: dict, k: int, n: int, grid: int) -> np.ndarray:
    """Per-prologue-token attention over the visual grid, averaged across the
    given layer maps first and normalized afterwards. Returns [K, g, g]."""
    if k == 0:
        raise ConfigError("model has no prologue tokens")
    stack = np.mean([m for m in maps.values()], axis=0)
    cols = stack[1 + k : 1 + k + n, 1 : 1 + k]  # visual rows x prologue keys
    heat = cols.T.reshape(k, grid, grid)
    peak = heat.max()
    return heat / peak if peak > 0 else heat


# ---------------------------------------------------------------------------
# Linear probing
# ---------------------------------------------------------------------------

def linear_probe_features(train_x, train_y, test_x, test_y, num_classes: int,
                          epochs: int = 50, lr: float = 1e-2, seed: int = 0) -> dict:
    """Single linear layer trained with CE under a fixed budget.

    Features are standardized with train-split statistics so the budget is
    comparable across feature sources of different scales."""
    mu = train_x.mean(dim=0, keepdim=True)
    sd = train_x.std(dim=0, keepdim=True).clamp_min(1e-6)
    train_x = (train_x - mu) / sd
    test_x = (test_x - mu) / sd
    torch.manual_seed(seed)
    head = nn.Linear(train_x.shape[1], num_classes)
    opt = torch.optim.Adam(head.parameters(), lr=lr)
    for _ in range(epochs):
        opt.zero_grad()
        F.cross_entropy(head(train_x), train_y).backward()
        opt.step()
    with torch.no_grad():
        logits = head(test_x)
    top1 = (logits.argmax(-1) == test_y).float().mean().item()
    kk = min(5, num_classes)
    topk = logits.topk(kk, dim=-1).indices
    top5 = (topk == test_y.unsqueeze(-1)).any(-1).float().mean().item()
    return {"top1": top1, "top5": top5}


@torch.no_grad()
def _probe_features(tokenizer, dataset, source: str, batch_size: int, first_k: int):
    feats = []
    for batch in dataset.batches(batch_size):
        tg = tokenizer.tokenize(batch.pixels)
        if source == "prologue":
            if tg.zp_ids.shape[1] == 0:
                raise ConfigError("tokenizer has no prologue tokens to probe")
            vecs = tokenizer.cb_p.lookup(tg.zp_ids)
        elif source == "first_k_visual":
            vecs = tokenizer.cb_v.lookup(tg.zv_ids[:, :first_k])
        else:
            raise ConfigError(f"unknown probe source {source!r}")
        feats.append(vecs.mean(dim=1))
    return torch.cat(feats)


def linear_probe(tokenizer, dataset: ImageDataset, source: str, cfg,
                 epochs: int = 50, lr: float = 1e-2, first_k: int | None = None) -> dict:
    """Probe mean-pooled quantized code vectors of the selected K tokens.

    The tokenizer stays frozen; train/test split and the optimizer budget are
    identical regardless of source. first_k sets the pool width for the
    first_k_visual source (defaults to the model's prologue length so both
    sources see the same token budget).
    """
    tokenizer.eval()
    counts = torch.bincount(dataset.labels, minlength=dataset.num_classes).float()
    if counts.min() > 0 and counts.max() / counts.min() > 10:
        warnings.warn(f"class imbalance {counts.max():.0f}:{counts.min():.0f} exceeds 10:1")
    if first_k is None:
        first_k = getattr(tokenizer, "num_prologue", 0)
    if source == "first_k_visual" and first_k <= 0:
        raise ConfigError("first_k must be given for a tokenizer without prologue tokens")
    train, test = dataset.split(0.25, seed=cfg.seed)
    feats_train = _probe_features(tokenizer, train, source, cfg.batch_size, first_k)
    feats_test = _probe_features(tokenizer, test, source, cfg.batch_size, first_k)
    return linear_probe_features(feats_train, train.labels, feats_test, test.labels,
                                 dataset.num_classes, epochs=epochs, lr=lr, seed=cfg.seed)
