"""Vector quantizers: L2-normed nearest-neighbor VQ and the probability-space
straight-through quantizer, plus codebook-usage statistics."""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError


class Codebook(nn.Module):
    """Ordered embedding table with optional unit-norm constraint on rows.

    init_scale matters for the soft-assignment quantizer: encoder features
    come out of a LayerNorm with norm ~sqrt(dim), so unit-Gaussian rows would
    saturate the softmax at low temperatures and freeze the assignment map.
    """

    def __init__(self, size: int, dim: int, normalized: bool, seed: int | None = None,
                 init_scale: float = 1.0):
        super().__init__()
        if size < 2:
            raise ConfigError("codebook size must be >= 2")
        g = None if seed is None else torch.Generator().manual_seed(seed)
        w = torch.randn(size, dim, generator=g) * init_scale
        if normalized:
            w = F.normalize(w, dim=-1)
        self.weight = nn.Parameter(w)
        self.normalized = normalized

    @property
    def size(self):
        return self.weight.shape[0]

    @property
    def dim(self):
        return self.weight.shape[1]

    @torch.no_grad()
    def renormalize(self):
        """Re-project rows to the unit sphere; call after every optimizer step."""
        if self.normalized:
            self.weight.copy_(F.normalize(self.weight, dim=-1))

    def lookup(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.min() < 0 or ids.max() >= self.size:
            raise ValueError(f"ids out of range [0, {self.size})")
        return self.weight[ids]


@dataclass
class VQOutput:
    ids: torch.Tensor            # [.., N] int64
    quantized_vecs: torch.Tensor  # [.., N, d]; forward = code rows, backward = identity to input
    commit_loss: torch.Tensor     # scalar


@dataclass
class ProbSTEOutput:
    hard_ids: torch.Tensor        # [.., K] int64
    soft_probs: torch.Tensor      # [.., K, V] rows sum to 1
    pass_through: torch.Tensor    # one-hot values, soft gradient
    quantized_vecs: torch.Tensor  # pass_through @ codebook


class _EmbedSTE(torch.autograd.Function):
    """Forward emits the code rows exactly; backward passes the downstream
    gradient unchanged to the continuous input and none to the codes."""

    @staticmethod
    def forward(ctx, h, codes):
        return codes

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def vq_encode(h: torch.Tensor, cb: Codebook) -> VQOutput:
    """Nearest-neighbor quantization by cosine similarity on unit-normed codes.

    Forward emits the selected code rows; the straight-through surrogate sends
    the downstream gradient unchanged to `h`. The commitment term pulls the
    normalized inputs and the selected codes toward each other (no
    stop-gradient on either side, so the codebook receives reconstruction-path
    gradient through it).
    """
    if not cb.normalized:
        raise ConfigError("visual VQ requires a normalized codebook")
    if h.shape[-1] != cb.dim:
        raise ConfigError(f"input dim {h.shape[-1]} != codebook dim {cb.dim}")
    if not torch.isfinite(h).all():
        raise ValueError("non-finite quantizer input")
    h_norm = F.normalize(h, dim=-1)
    sims = h_norm @ cb.weight.t()  # cosine similarity, codes are unit rows
    ids = sims.argmax(dim=-1)  # torch.argmax returns the first (lowest) index on ties
    codes = cb.weight[ids]
    quantized = _EmbedSTE.apply(h, codes.detach())
    commit = F.mse_loss(h_norm, codes)
    return VQOutput(ids=ids, quantized_vecs=quantized, commit_loss=commit)


def prob_ste(h: torch.Tensor, cb: Codebook, tau: float) -> ProbSTEOutput:
    """Soft-assignment quantizer: hard one-hot forward, softmax-path backward.

    soft = softmax(h @ codes.T / tau); pass_through has one-hot values but
    carries soft's gradient, so any loss on pass_through backpropagates
    exactly as if it were applied to soft.
    """
    if tau <= 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    if h.shape[-1] != cb.dim:
        raise ConfigError(f"input dim {h.shape[-1]} != codebook dim {cb.dim}")
    if not torch.isfinite(h).all():
        raise ValueError("non-finite quantizer input")
    logits = h @ cb.weight.t() / tau
    soft = torch.softmax(logits, dim=-1)
    hard_ids = soft.argmax(dim=-1)
    one_hot = F.one_hot(hard_ids, num_classes=cb.size).to(soft.dtype)
    pass_through = soft + (one_hot - soft).detach()
    quantized = pass_through @ cb.weight
    return ProbSTEOutput(hard_ids=hard_ids, soft_probs=soft, pass_through=pass_through, quantized_vecs=quantized)


def codebook_stats(ids, vocab_size: int) -> dict:
    """Empirical usage distribution and its exp-entropy (perplexity, nats)."""
    ids = torch.as_tensor(ids).reshape(-1)
    if ids.numel() == 0:
        raise ValueError("empty id stream")
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise ValueError(f"ids out of range [0, {vocab_size})")
    counts = torch.bincount(ids.long(), minlength=vocab_size).double()
    usage = counts / counts.sum()
    nz = usage[usage > 0]
    entropy = -(nz * nz.log()).sum()
    return {"usage": usage, "perplexity": entropy.exp().item()}
