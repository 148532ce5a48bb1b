"""Decoder-only causal transformer over [class; prologue; visual] tokens.

Input embeddings accept either hard ids or assignment-probability tensors
(probs @ embedding table), which is how quantizer gradients reach the
encoder. Visual-block dropout replaces *inputs* with the EOS embedding;
targets always stay the undropped ids.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .blocks import TransformerStack, causal_mask
from .tokenizer import TokenGroups


class _GradScale(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x

    @staticmethod
    def backward(ctx, grad):
        return grad * ctx.scale, None


def scale_gradient(x: torch.Tensor, scale: float) -> torch.Tensor:
    """Identity forward; multiplies the backward gradient by `scale`."""
    return _GradScale.apply(x, scale)


@dataclass
class ARSequence:
    """One batch of AR inputs/targets in generation order."""

    cond_id: torch.Tensor          # [B] class id or null class
    zp: torch.Tensor               # [B,K] long ids or [B,K,V_p] float probs
    zv: torch.Tensor               # [B,N] long ids or [B,N,V_v] float probs
    dropout_mask: torch.Tensor     # [B,N] bool; True = input replaced by EOS
    targets_p: torch.Tensor        # [B,K] long, undropped
    targets_v: torch.Tensor        # [B,N] long, undropped


@dataclass
class ARLossParts:
    ce_prologue: torch.Tensor
    ce_visual: torch.Tensor
    ce_total: torch.Tensor
    top1_acc: float


def build_sequence(tg: TokenGroups, labels: torch.Tensor, p_drop: float, class_drop: float,
                   rng: torch.Generator, num_classes: int, hard: bool = False,
                   zv_soft: torch.Tensor | None = None) -> ARSequence:
    """Assemble AR inputs. Visual dropout is all-or-nothing per sample.

    hard=True feeds prologue ids instead of assignment probabilities
    (frozen-tokenizer training). zv_soft, when given, replaces hard visual
    ids as the AR input so gradients can flow into the visual pathway.
    """
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError(f"p_drop must be in [0,1], got {p_drop}")
    b, n = tg.zv_ids.shape
    device = tg.zv_ids.device
    dropped = torch.rand(b, generator=rng, device=device) < p_drop
    mask = dropped.unsqueeze(1).expand(b, n)
    cdrop = torch.rand(b, generator=rng, device=device) < class_drop
    cond = torch.where(cdrop, torch.full_like(labels, num_classes), labels)
    zp_in = tg.zp_ids if hard else tg.zp_soft
    zv_in = tg.zv_ids if zv_soft is None else zv_soft
    return ARSequence(
        cond_id=cond, zp=zp_in, zv=zv_in, dropout_mask=mask,
        targets_p=tg.zp_ids.detach(), targets_v=tg.zv_ids.detach(),
    )


class ARModel(nn.Module):
    """Strictly causal transformer; prologue and visual positions have their
    own output heads since the two vocabularies are disjoint."""

    def __init__(self, *, num_prologue, num_visual, prologue_vocab, visual_vocab,
                 num_classes, dim=128, layers=4, heads=4, dropout=0.1):
        super().__init__()
        self.num_prologue = num_prologue
        self.num_visual = num_visual
        self.prologue_vocab = prologue_vocab
        self.visual_vocab = visual_vocab
        self.num_classes = num_classes
        self.eos_id = visual_vocab  # input-only token, never a CE target
        self.class_emb = nn.Embedding(num_classes + 1, dim)  # last row = null class
        self.emb_p = nn.Embedding(prologue_vocab, dim) if num_prologue > 0 else None
        self.emb_v = nn.Embedding(visual_vocab + 1, dim)
        seq_len = 1 + num_prologue + num_visual
        self.pos = nn.Parameter(torch.randn(seq_len, dim) * 0.02)
        self.emb_drop = nn.Dropout(dropout)
        self.stack = TransformerStack(dim, layers, heads, dropout)
        self.head_p = nn.Linear(dim, prologue_vocab) if num_prologue > 0 else None
        self.head_v = nn.Linear(dim, visual_vocab)

    def _embed_prologue(self, zp):
        if zp.dtype.is_floating_point:
            return zp @ self.emb_p.weight
        return self.emb_p(zp)

    def _embed_visual(self, zv, dropout_mask):
        if zv.dtype.is_floating_point:
            emb = zv @ self.emb_v.weight[: self.visual_vocab]
        else:
            if zv.numel() and zv.max() > self.eos_id:
                raise ValueError("visual id out of range")
            emb = self.emb_v(zv)
        if dropout_mask is not None and dropout_mask.any():
            emb = torch.where(dropout_mask.unsqueeze(-1), self.emb_v.weight[self.eos_id], emb)
        return emb

    def forward(self, cond_id, zp=None, zv=None, dropout_mask=None, need_attn=False):
        """Returns (prologue logits [B,K,V_p], visual logits [B,N,V_v], attns).

        Logits are indexed by the position they predict: prologue logits i
        come from the hidden state just before prologue token i, and so on.
        """
        k, n = self.num_prologue, self.num_visual
        parts = [self.class_emb(cond_id).unsqueeze(1)]
        if k > 0:
            if zp is None or zp.shape[1] != k:
                raise ValueError(f"expected prologue block of length {k}")
            parts.append(self._embed_prologue(zp))
        if zv is None or zv.shape[1] != n:
            raise ValueError(f"expected visual block of length {n}")
        parts.append(self._embed_visual(zv, dropout_mask))
        x = torch.cat(parts, dim=1) + self.pos
        x = self.emb_drop(x)
        allowed = causal_mask(x.shape[1], device=x.device)
        states, attns = self.stack(x, allowed=allowed, need_attn=need_attn)
        logits_p = self.head_p(states[:, :k]) if k > 0 else None
        logits_v = self.head_v(states[:, k : k + n])
        return logits_p, logits_v, attns


def ar_loss(model: ARModel, seq: ARSequence, need_attn: bool = False):
    """Cross-entropy of the full sequence against undropped targets."""
    if seq.targets_p is None or seq.targets_v is None:
        raise ValueError("sequence is missing CE targets")
    k, n = model.num_prologue, model.num_visual
    logits_p, logits_v, attns = model(seq.cond_id, seq.zp, seq.zv, seq.dropout_mask, need_attn=need_attn)
    ce_v = F.cross_entropy(logits_v.reshape(-1, model.visual_vocab), seq.targets_v.reshape(-1))
    hits = (logits_v.argmax(-1) == seq.targets_v).sum()
    if k > 0:
        ce_p = F.cross_entropy(logits_p.reshape(-1, model.prologue_vocab), seq.targets_p.reshape(-1))
        hits = hits + (logits_p.argmax(-1) == seq.targets_p).sum()
    else:
        ce_p = torch.zeros((), device=ce_v.device)
    ce_total = (k * ce_p + n * ce_v) / (k + n)
    top1 = hits.item() / (seq.targets_v.numel() + seq.targets_p.numel())
    parts = ARLossParts(ce_prologue=ce_p, ce_visual=ce_v, ce_total=ce_total, top1_acc=top1)
    return (parts, attns) if need_attn else parts
