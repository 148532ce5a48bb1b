"""Autoregressive generation with per-group classifier-free guidance: a
constant scale on prologue positions and a cosine-scheduled scale on visual
positions, each group with its own temperature."""

import json
import math
from dataclasses import dataclass

import numpy as np
import torch

from .ar import ARModel
from .errors import ConfigError

_GREEDY_EPS = 1e-8


@dataclass
class CFGConfig:
    """Guidance scales, schedule shape, and per-group temperatures.

    guided=False decodes from the conditional branch only (temperatures still
    apply); a temperature of 0 means greedy argmax decoding.
    """

    s_pro: float = 0.7
    s_vis: float = 3.75
    cos_p: float = 0.25
    t_pro: float = 1.0
    t_vis: float = 1.0
    top_k: int | None = None
    guided: bool = True

    def validate(self) -> "CFGConfig":
        vals = [self.s_pro, self.s_vis, self.cos_p, self.t_pro, self.t_vis]
        if not all(math.isfinite(v) for v in vals):
            raise ConfigError("CFG parameters must be finite")
        if self.s_pro < 0 or self.s_vis < 0:
            raise ConfigError("guidance scales must be >= 0")
        if self.cos_p <= 0:
            raise ConfigError("cosine exponent must be > 0")
        if self.t_pro < 0 or self.t_vis < 0:
            raise ConfigError("temperatures must be >= 0")
        if self.top_k is not None and self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        return self


def guided_logits(cond: torch.Tensor, uncond: torch.Tensor, s: float) -> torch.Tensor:
    """uncond + s * (cond - uncond); s=1 returns cond exactly."""
    if cond.shape != uncond.shape:
        raise ValueError(f"shape mismatch {tuple(cond.shape)} vs {tuple(uncond.shape)}")
    if s == 1.0:
        return cond
    return uncond + s * (cond - uncond)


def visual_scale_at(t: int, n: int, s_vis: float, cos_p: float) -> float:
    """Cosine-shaped per-position guidance scale, endpoints (1, s_vis)."""
    if n < 2:
        return s_vis
    if not 0 <= t < n:
        raise ValueError(f"position {t} outside [0, {n})")
    shape = ((1.0 - math.cos(math.pi * t / (n - 1))) / 2.0) ** cos_p
    return 1.0 + (s_vis - 1.0) * shape


def _sample_step(logits: torch.Tensor, temperature: float, rng, top_k=None,
                 probs_out=None) -> torch.Tensor:
    if top_k is not None and top_k < logits.shape[-1]:
        kth = torch.topk(logits, top_k, dim=-1).values[..., -1:]
        logits = logits.masked_fill(logits < kth, float("-inf"))
    if temperature <= _GREEDY_EPS:
        if probs_out is not None:
            one_hot = torch.zeros_like(logits)
            one_hot.scatter_(-1, logits.argmax(-1, keepdim=True), 1.0)
            probs_out.append(one_hot)
        return logits.argmax(-1)
    probs = torch.softmax(logits / temperature, dim=-1)
    if probs_out is not None:
        probs_out.append(probs)
    return torch.multinomial(probs, 1, generator=rng).squeeze(-1)


@dataclass
class GenerationOutput:
    zp_ids: torch.Tensor     # [B, K]
    zv_ids: torch.Tensor     # [B, N]
    images: torch.Tensor     # [B, C, H, W]
    step_probs: list | None  # per sampled position, post-temperature probs


def generate(tokenizer, ar: ARModel, class_ids, cfg: CFGConfig, rng: torch.Generator,
             fixed_zp: torch.Tensor | None = None, collect_probs: bool = False) -> GenerationOutput:
    """Sample prologue tokens first, then visual tokens, then decode.

    The unconditional branch uses the null class. If fixed_zp is given the
    prologue block is injected verbatim and its sampling is skipped.
    """
    cfg.validate()
    ar.eval()
    class_ids = torch.as_tensor(class_ids, dtype=torch.long).reshape(-1)
    if class_ids.numel() == 0:
        raise ConfigError("need at least one class id")
    if class_ids.min() < 0 or class_ids.max() >= ar.num_classes:
        raise ConfigError(f"class id out of range [0, {ar.num_classes})")
    b, k, n = class_ids.shape[0], ar.num_prologue, ar.num_visual
    null = torch.full_like(class_ids, ar.num_classes)
    zp = torch.zeros(b, k, dtype=torch.long)
    zv = torch.zeros(b, n, dtype=torch.long)
    probs_log = [] if collect_probs else None

    def branch_logits():
        if cfg.guided:
            cond2 = torch.cat([class_ids, null])
            zp2 = torch.cat([zp, zp]) if k > 0 else None
            zv2 = torch.cat([zv, zv])
            lp, lv, _ = ar(cond2, zp2, zv2)
            return (lp[:b], lp[b:]) if lp is not None else (None, None), (lv[:b], lv[b:])
        lp, lv, _ = ar(class_ids, zp if k > 0 else None, zv)
        return (lp, None) if lp is not None else (None, None), (lv, None)

    with torch.no_grad():
        if k > 0:
            if fixed_zp is not None:
                fixed = torch.as_tensor(fixed_zp, dtype=torch.long)
                if fixed.ndim == 1:
                    fixed = fixed.unsqueeze(0).expand(b, -1)
                if fixed.shape != (b, k):
                    raise ConfigError(f"fixed prologue block must have length {k}")
                zp = fixed.clone()
            else:
                for i in range(k):
                    (lp_c, lp_u), _ = branch_logits()
                    step = guided_logits(lp_c[:, i], lp_u[:, i], cfg.s_pro) if cfg.guided else lp_c[:, i]
                    zp[:, i] = _sample_step(step, cfg.t_pro, rng, cfg.top_k, probs_log)
        for t in range(n):
            _, (lv_c, lv_u) = branch_logits()
            if cfg.guided:
                step = guided_logits(lv_c[:, t], lv_u[:, t], visual_scale_at(t, n, cfg.s_vis, cfg.cos_p))
            else:
                step = lv_c[:, t]
            zv[:, t] = _sample_step(step, cfg.t_vis, rng, cfg.top_k, probs_log)
        images = tokenizer.decode(zv)
    return GenerationOutput(zp_ids=zp, zv_ids=zv, images=images, step_probs=probs_log)


def tile_images(images: torch.Tensor, rows: int, cols: int, pad: int = 1) -> np.ndarray:
    """Arrange [rows*cols, C, H, W] images into one uint8 HWC grid array."""
    c, h, w = images.shape[1:]
    grid = np.ones((rows * (h + pad) + pad, cols * (w + pad) + pad, c), dtype=np.float32)
    for i in range(rows * cols):
        r, col = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + col * (w + pad)
        grid[y : y + h, x : x + w] = images[i].permute(1, 2, 0).numpy()
    return (grid * 255).round().astype(np.uint8)


def sample_grid(tokenizer, ar: ARModel, classes, n_per_class: int, cfg: CFGConfig,
                seed: int, out_png, manifest_path=None):
    """Batched generation over classes; writes a tiled PNG and a JSON-lines
    manifest (class, prologue ids, visual ids, seed per sample)."""
    from PIL import Image

    classes = list(classes)
    if not classes:
        raise ConfigError("empty class list")
    all_images, records = [], []
    for row, cls in enumerate(classes):
        rng = torch.Generator().manual_seed(seed + row)
        out = generate(tokenizer, ar, [cls] * n_per_class, cfg, rng)
        all_images.append(out.images)
        for j in range(n_per_class):
            records.append({
                "class": int(cls),
                "seed": seed + row,
                "zp_ids": out.zp_ids[j].tolist(),
                "zv_ids": out.zv_ids[j].tolist(),
            })
    grid = tile_images(torch.cat(all_images), len(classes), n_per_class)
    Image.fromarray(grid).save(out_png)
    if manifest_path is not None:
        with open(manifest_path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    return grid, records


def grid_from_manifest(tokenizer, records, rows: int, cols: int) -> np.ndarray:
    """Re-decode manifest token ids into the identical grid array."""
    ids = torch.tensor([rec["zv_ids"] for rec in records], dtype=torch.long)
    with torch.no_grad():
        images = tokenizer.decode(ids)
    return tile_images(images, rows, cols)
