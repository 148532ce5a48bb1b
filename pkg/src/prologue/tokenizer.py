"""Image tokenizer: a shared bidirectional encoder over [queries; patches],
separate quantizers per token group, and a visual-only decoder.

Structural gradient contract, by construction:
  - the decoder consumes visual code vectors only (prologue tokens cannot
    influence reconstruction),
  - the prologue codebook is touched only by the soft-assignment quantizer,
    so the reconstruction loss has zero gradient w.r.t. it.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .blocks import TransformerStack, cross_group_block_mask
from .data import PatchGrid, patchify, unpatchify
from .errors import ConfigError
from .quantize import Codebook, ProbSTEOutput, VQOutput, prob_ste, vq_encode


@dataclass
class EncoderOutput:
    h_p: torch.Tensor  # [B, K, d]
    h_v: torch.Tensor  # [B, N, d]


@dataclass
class TokenGroups:
    """Both token groups for a batch.

    zp_soft holds the straight-through assignment tensor: its values are
    exactly one-hot, its gradient is the softmax path's.
    """

    zp_ids: torch.Tensor    # [B, K] int64 (empty when K == 0)
    zp_soft: torch.Tensor   # [B, K, V_p]
    zv_ids: torch.Tensor    # [B, N] int64
    zv_vecs: torch.Tensor   # [B, N, d]


@dataclass
class ReconLoss:
    l1: torch.Tensor
    commit: torch.Tensor
    total: torch.Tensor


def recon_loss(pixels: torch.Tensor, recon: torch.Tensor, commit: torch.Tensor, commit_weight: float = 1.0) -> ReconLoss:
    """Mean absolute pixel error plus weighted commitment term."""
    if pixels.shape != recon.shape:
        raise ValueError(f"shape mismatch {tuple(pixels.shape)} vs {tuple(recon.shape)}")
    l1 = (pixels - recon).abs().mean()
    return ReconLoss(l1=l1, commit=commit, total=l1 + commit_weight * commit)


class SharedEncoder(nn.Module):
    """Bidirectional transformer with global attention over [queries; patches].

    Learnable query embeddings occupy the leading positions; flattened patch
    embeddings plus a learned positional table occupy the rest. Separate
    positional tables for the two groups.
    """

    def __init__(self, *, image_size, patch_size, channels, dim, layers, heads,
                 num_prologue, num_visual_queries=0, dropout=0.0):
        super().__init__()
        self.patch_size = patch_size
        self.channels = channels
        self.num_patches = (image_size // patch_size) ** 2
        self.num_prologue = num_prologue
        self.num_queries = num_prologue + num_visual_queries
        self.patch_embed = nn.Linear(patch_size * patch_size * channels, dim)
        if self.num_queries > 0:
            self.queries = nn.Parameter(torch.randn(self.num_queries, dim) * 0.02)
            self.query_pos = nn.Parameter(torch.randn(self.num_queries, dim) * 0.02)
        else:
            self.register_parameter("queries", None)
            self.register_parameter("query_pos", None)
        self.patch_pos = nn.Parameter(torch.randn(self.num_patches, dim) * 0.02)
        self.stack = TransformerStack(dim, layers, heads, dropout)

    def forward(self, pixels: torch.Tensor, block_cross_group: bool = False, need_attn: bool = False):
        if not torch.isfinite(pixels).all():
            raise ValueError("non-finite encoder input")
        grid = patchify(pixels, self.patch_size)
        if grid.num_patches != self.num_patches:
            raise ConfigError(f"batch yields {grid.num_patches} patches, model expects {self.num_patches}")
        tokens = self.patch_embed(grid.patches) + self.patch_pos
        if self.num_queries > 0:
            q = (self.queries + self.query_pos).unsqueeze(0).expand(pixels.shape[0], -1, -1)
            tokens = torch.cat([q, tokens], dim=1)
        allowed = None
        if block_cross_group:
            allowed = cross_group_block_mask(self.num_queries, tokens.shape[1], device=tokens.device)
        states, attns = self.stack(tokens, allowed=allowed, need_attn=need_attn)
        return states, attns


class Decoder(nn.Module):
    """Transformer over visual code vectors, linear pixel head, sigmoid output."""

    def __init__(self, *, image_size, patch_size, channels, dim, layers, heads, dropout=0.0):
        super().__init__()
        self.patch_size = patch_size
        self.channels = channels
        self.grid = image_size // patch_size
        n = self.grid * self.grid
        self.pos = nn.Parameter(torch.randn(n, dim) * 0.02)
        self.stack = TransformerStack(dim, layers, heads, dropout)
        self.head = nn.Linear(dim, patch_size * patch_size * channels)

    def forward(self, codes: torch.Tensor) -> torch.Tensor:
        states, _ = self.stack(codes + self.pos)
        patches = torch.sigmoid(self.head(states))
        return unpatchify(PatchGrid(patches, self.grid, self.grid, self.patch_size), self.channels)


class TokenizerModel(nn.Module):
    """Encoder + dual quantizers + decoder.

    visual_1d selects where visual tokens come from: dedicated learnable
    query positions (order-free) instead of patch positions (raster 2D).
    """

    def __init__(self, *, image_size, patch_size, channels=3, dim=128,
                 enc_layers=4, dec_layers=4, heads=4, num_prologue=8,
                 prologue_vocab=128, visual_vocab=512, tau=0.1, visual_1d=False):
        super().__init__()
        self.num_prologue = num_prologue
        self.num_visual = (image_size // patch_size) ** 2
        self.visual_1d = visual_1d
        self.tau = tau
        self.encoder = SharedEncoder(
            image_size=image_size, patch_size=patch_size, channels=channels,
            dim=dim, layers=enc_layers, heads=heads, num_prologue=num_prologue,
            num_visual_queries=self.num_visual if visual_1d else 0,
        )
        self.decoder = Decoder(
            image_size=image_size, patch_size=patch_size, channels=channels,
            dim=dim, layers=dec_layers, heads=heads,
        )
        self.cb_v = Codebook(visual_vocab, dim, normalized=True)
        self.cb_p = (Codebook(prologue_vocab, dim, normalized=False, init_scale=0.05)
                     if num_prologue > 0 else None)

    def encode(self, pixels: torch.Tensor, block_cross_group: bool = False) -> EncoderOutput:
        states, _ = self.encoder(pixels, block_cross_group=block_cross_group)
        k = self.num_prologue
        h_p = states[:, :k]
        h_v = states[:, k : k + self.num_visual]
        return EncoderOutput(h_p=h_p, h_v=h_v)

    def quantize_visual(self, h_v: torch.Tensor) -> VQOutput:
        return vq_encode(h_v, self.cb_v)

    def quantize_prologue(self, h_p: torch.Tensor) -> ProbSTEOutput:
        if self.cb_p is None:
            raise ConfigError("model has no prologue branch")
        return prob_ste(h_p, self.cb_p, self.tau)

    def tokenize(self, pixels: torch.Tensor) -> TokenGroups:
        enc = self.encode(pixels)
        vq = self.quantize_visual(enc.h_v)
        b = pixels.shape[0]
        if self.num_prologue > 0:
            ste = self.quantize_prologue(enc.h_p)
            zp_ids, zp_soft = ste.hard_ids, ste.pass_through
        else:
            zp_ids = torch.zeros(b, 0, dtype=torch.long, device=pixels.device)
            zp_soft = torch.zeros(b, 0, 1, device=pixels.device)
        return TokenGroups(zp_ids=zp_ids, zp_soft=zp_soft, zv_ids=vq.ids, zv_vecs=vq.quantized_vecs)

    def decode(self, zv_ids: torch.Tensor) -> torch.Tensor:
        """Decode visual token ids to pixels. Takes no prologue input."""
        return self.decoder(self.cb_v.lookup(zv_ids))

    def reconstruct(self, pixels: torch.Tensor):
        """Training path: encode, quantize visuals, decode. Returns (x_hat, vq)."""
        enc = self.encode(pixels)
        vq = self.quantize_visual(enc.h_v)
        return self.decoder(vq.quantized_vecs), vq, enc


class PostTokenizer(nn.Module):
    """Prologue branch bolted onto a frozen pre-trained visual tokenizer.

    Only the new prologue encoder and its codebook are trainable; the base
    tokenizer (and hence the whole reconstruction path) stays untouched.
    """

    def __init__(self, base: TokenizerModel, *, num_prologue, prologue_vocab,
                 enc_layers=2, heads=4, tau=0.1):
        super().__init__()
        if base.num_prologue != 0:
            raise ConfigError("post-hoc prologue expects a base tokenizer without one")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        dim = base.cb_v.dim
        image_size = base.encoder.patch_size * int(base.num_visual**0.5)
        self.num_prologue = num_prologue
        self.num_visual = base.num_visual
        self.tau = tau
        self.prologue_encoder = SharedEncoder(
            image_size=image_size, patch_size=base.encoder.patch_size,
            channels=base.encoder.channels, dim=dim, layers=enc_layers,
            heads=heads, num_prologue=num_prologue,
        )
        self.cb_p = Codebook(prologue_vocab, dim, normalized=False, init_scale=0.05)

    @property
    def cb_v(self):
        return self.base.cb_v

    def encode_prologue(self, pixels: torch.Tensor) -> torch.Tensor:
        states, _ = self.prologue_encoder(pixels)
        return states[:, : self.num_prologue]

    def quantize_prologue(self, h_p: torch.Tensor) -> ProbSTEOutput:
        return prob_ste(h_p, self.cb_p, self.tau)

    def tokenize(self, pixels: torch.Tensor) -> TokenGroups:
        with torch.no_grad():
            base_tg = self.base.tokenize(pixels)
        ste = self.quantize_prologue(self.encode_prologue(pixels))
        return TokenGroups(zp_ids=ste.hard_ids, zp_soft=ste.pass_through,
                           zv_ids=base_tg.zv_ids, zv_vecs=base_tg.zv_vecs)

    def decode(self, zv_ids: torch.Tensor) -> torch.Tensor:
        return self.base.decode(zv_ids)
