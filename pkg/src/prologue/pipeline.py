"""Training protocols: joint stage-1 (tokenizer + compact AR), stage-2 AR on
frozen tokens, the post-hoc prologue variant, the one-stage variant, and the
AR-weight sweep driver.

Gradient routing is enforced structurally (which tensors enter which graph)
and re-asserted on a probe batch at the start of every run.
"""

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .ar import ARModel, ARSequence, ar_loss, build_sequence, scale_gradient
from .data import ImageDataset, synth_shapes
from .errors import ConfigError, TrainingDivergedError
from .quantize import codebook_stats, prob_ste
from .tokenizer import PostTokenizer, TokenGroups, TokenizerModel, recon_loss

MODES = (
    "prologue",
    "prologue_post",
    "prologue_onestage",
    "baseline_2d",
    "baseline_1d",
    "baseline_2d_arreg",
    "baseline_1d_arreg",
)
CKPT_VERSION = 1


@dataclass
class RunConfig:
    """Every knob of a training/sampling run. Serializable and hashable."""

    mode: str = "prologue"
    # data
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    num_classes: int = 10
    samples_per_class: int = 64
    augment: bool = False
    holdout_frac: float = 0.1
    # tokenizer
    prologue_len: int = 8
    prologue_vocab: int = 128
    visual_vocab: int = 512
    dim: int = 128
    enc_layers: int = 4
    dec_layers: int = 4
    heads: int = 4
    ste_tau: float = 0.1
    commit_weight: float = 1.0
    post_enc_layers: int = 2
    # AR model
    ar_dim: int = 128
    ar_layers: int = 4
    ar_heads: int = 4
    ar_dropout: float = 0.1
    visual_drop: float = 0.5
    class_drop: float = 0.1
    ar_weight: float = 3.0
    # optimization
    lr: float = 1e-3
    lr_min: float = 1e-4
    warmup_steps: int = 20
    stage2_lr: float = 1e-3
    stage2_lr_min: float = 1e-4
    ar_weight_decay: float = 3e-2
    grad_clip: float = 1.0
    batch_size: int = 32
    epochs: int = 30
    stage2_epochs: int = 30
    stage2_visual_drop: float = 0.0
    seed: int = 0
    log_every: int = 100
    device: str = "cpu"

    @property
    def num_visual(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def visual_1d(self) -> bool:
        return self.mode.startswith("baseline_1d")

    @property
    def arreg(self) -> bool:
        return self.mode.endswith("_arreg")

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.mode.startswith("baseline"):
            if self.prologue_len != 0:
                raise ConfigError(f"{self.mode} requires prologue_len=0")
            if self.visual_drop != 0.0:
                raise ConfigError(f"{self.mode} requires visual_drop=0")
            if self.arreg and self.ar_weight <= 0:
                raise ConfigError("arreg modes require ar_weight > 0")
            if not self.arreg and self.ar_weight != 0.0:
                raise ConfigError(f"{self.mode} requires ar_weight=0 (pure two-stage)")
        else:
            if self.prologue_len <= 0:
                raise ConfigError(f"{self.mode} requires prologue_len > 0")
        if self.ar_weight < 0:
            raise ConfigError("ar_weight must be >= 0")
        if self.ste_tau <= 0:
            raise ConfigError("ste_tau must be > 0")
        if not 0 <= self.visual_drop <= 1 or not 0 <= self.class_drop <= 1:
            raise ConfigError("drop probabilities must lie in [0,1]")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def with_overrides(self, overrides) -> "RunConfig":
        """Apply `key=value` strings; unknown keys or bad values raise."""
        d = self.to_dict()
        types = {f.name: f.type for f in fields(self)}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, _, raw = item.partition("=")
            key = key.strip()
            if key not in d:
                raise ConfigError(f"unknown config key {key!r}")
            d[key] = _parse_value(raw.strip(), types[key], key)
        return RunConfig.from_dict(d)


def _parse_value(raw: str, ftype, key: str):
    t = {int: int, "int": int, float: float, "float": float,
         bool: bool, "bool": bool, str: str, "str": str}.get(ftype, str)
    if t is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse {raw!r} as bool for {key}")
    try:
        return t(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r} for {key}: {exc}") from None


class MetricsLog:
    """Append-only (step, metric, value) history, optionally mirrored to CSV."""

    def __init__(self, csv_path=None):
        self.history = []
        self._fh = None
        self._writer = None
        if csv_path is not None:
            self._fh = open(csv_path, "w", newline="")
            self._writer = csv.writer(self._fh)
            self._writer.writerow(["step", "metric", "value"])

    def log(self, step: int, metric: str, value: float):
        value = float(value)
        self.history.append((step, metric, value))
        if self._writer is not None:
            self._writer.writerow([step, metric, repr(value)])
            self._fh.flush()

    def last(self, metric: str):
        for step, name, value in reversed(self.history):
            if name == metric:
                return value
        raise KeyError(metric)

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


@dataclass
class TrainResult:
    config: RunConfig
    tokenizer: nn.Module
    ar: ARModel | None
    metrics: MetricsLog
    final: dict
    ckpt_path: str | None = None


def build_tokenizer(cfg: RunConfig) -> TokenizerModel:
    return TokenizerModel(
        image_size=cfg.image_size, patch_size=cfg.patch_size, channels=cfg.channels,
        dim=cfg.dim, enc_layers=cfg.enc_layers, dec_layers=cfg.dec_layers, heads=cfg.heads,
        num_prologue=cfg.prologue_len, prologue_vocab=cfg.prologue_vocab,
        visual_vocab=cfg.visual_vocab, tau=cfg.ste_tau, visual_1d=cfg.visual_1d,
    )


def build_ar(cfg: RunConfig, compact: bool) -> ARModel:
    layers = max(1, cfg.ar_layers // 2) if compact else cfg.ar_layers
    return ARModel(
        num_prologue=cfg.prologue_len, num_visual=cfg.num_visual,
        prologue_vocab=cfg.prologue_vocab, visual_vocab=cfg.visual_vocab,
        num_classes=cfg.num_classes, dim=cfg.ar_dim, layers=layers,
        heads=cfg.ar_heads, dropout=cfg.ar_dropout,
    )


def param_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for key, tensor in sorted(module.state_dict().items()):
        h.update(key.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, cfg: RunConfig, stage: str, step: int, tokenizer=None,
                    ar=None, optimizer=None, metrics=None, base_config=None):
    payload = {
        "format_version": CKPT_VERSION,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "stage": stage,
        "step": step,
        "tokenizer_kind": "post" if isinstance(tokenizer, PostTokenizer) else "standard",
        "tokenizer_state": tokenizer.state_dict() if tokenizer is not None else None,
        "ar_state": ar.state_dict() if ar is not None else None,
        "ar_compact": getattr(ar, "_compact", None) if ar is not None else None,
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "metrics": list(metrics.history) if metrics is not None else [],
        "base_config": base_config.to_dict() if base_config is not None else None,
    }
    torch.save(payload, path)
    return str(path)


@dataclass
class Checkpoint:
    format_version: int
    config: RunConfig
    config_hash: str
    stage: str
    step: int
    tokenizer_kind: str
    tokenizer_state: dict | None
    ar_state: dict | None
    ar_compact: bool | None
    optimizer_state: dict | None
    metrics: list
    base_config: RunConfig | None

    def build_tokenizer(self):
        cfg = self.config
        if self.tokenizer_kind == "post":
            base = build_tokenizer(self.base_config)
            model = PostTokenizer(base, num_prologue=cfg.prologue_len,
                                  prologue_vocab=cfg.prologue_vocab,
                                  enc_layers=cfg.post_enc_layers, heads=cfg.heads,
                                  tau=cfg.ste_tau)
        else:
            model = build_tokenizer(cfg)
        model.load_state_dict(self.tokenizer_state)
        model.eval()
        return model

    def build_ar(self):
        if self.ar_state is None:
            return None
        model = build_ar(self.config, compact=bool(self.ar_compact))
        model.load_state_dict(self.ar_state)
        model.eval()
        return model


def load_checkpoint(path) -> Checkpoint:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CKPT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('format_version')}")
    cfg = RunConfig.from_dict(payload["config"])
    if payload["config_hash"] != cfg.config_hash():
        raise ConfigError("checkpoint config hash mismatch")
    base_cfg = payload.get("base_config")
    return Checkpoint(
        format_version=payload["format_version"], config=cfg,
        config_hash=payload["config_hash"], stage=payload["stage"], step=payload["step"],
        tokenizer_kind=payload["tokenizer_kind"], tokenizer_state=payload["tokenizer_state"],
        ar_state=payload["ar_state"], ar_compact=payload.get("ar_compact"),
        optimizer_state=payload["optimizer_state"], metrics=payload["metrics"],
        base_config=RunConfig.from_dict(base_cfg) if base_cfg else None,
    )


# ---------------------------------------------------------------------------
# Shared step machinery
# ---------------------------------------------------------------------------

def lr_at(step: int, total: int, lr: float, lr_min: float, warmup: int) -> float:
    """Linear warmup to `lr`, then linear decay to `lr_min`."""
    if warmup > 0 and step < warmup:
        return lr * (step + 1) / warmup
    frac = (step - warmup) / max(1, total - warmup)
    return lr + (lr_min - lr) * min(1.0, frac)


def _set_lr(optimizer, value):
    for group in optimizer.param_groups:
        group["lr"] = value


def _augment(pixels, rng):
    h, w = pixels.shape[-2:]
    padded = F.pad(pixels, (2, 2, 2, 2), mode="reflect")
    dy = int(torch.randint(0, 5, (1,), generator=rng))
    dx = int(torch.randint(0, 5, (1,), generator=rng))
    out = padded[..., dy : dy + h, dx : dx + w]
    if float(torch.rand(1, generator=rng)) < 0.5:
        out = out.flip(-1)
    return out


def stage1_losses(tokenizer: TokenizerModel, ar: ARModel, pixels, labels, cfg: RunConfig,
                  rng: torch.Generator, route_scale: float | None = None):
    """One joint forward. Returns (recon parts, AR parts, sequence).

    The AR CE reaches the AR parameters at full strength; the branch feeding
    tokenizer-side gradients is scaled by the configured AR weight, so the
    tokenizer optimizes recon + weight * CE while the AR head always trains.
    """
    scale = cfg.ar_weight if route_scale is None else route_scale
    x_hat, vq, enc = tokenizer.reconstruct(pixels)
    rl = recon_loss(pixels, x_hat, vq.commit_loss, cfg.commit_weight)
    b = pixels.shape[0]
    if cfg.prologue_len > 0:
        ste = tokenizer.quantize_prologue(enc.h_p)
        zp_ids, zp_soft = ste.hard_ids, scale_gradient(ste.pass_through, scale)
    else:
        zp_ids = torch.zeros(b, 0, dtype=torch.long, device=pixels.device)
        zp_soft = torch.zeros(b, 0, 1, device=pixels.device)
    zv_soft = None
    if cfg.arreg:
        ste_v = prob_ste(enc.h_v, tokenizer.cb_v, cfg.ste_tau)
        zv_soft = scale_gradient(ste_v.pass_through, scale)
    tg = TokenGroups(zp_ids=zp_ids, zp_soft=zp_soft, zv_ids=vq.ids.detach(), zv_vecs=vq.quantized_vecs)
    seq = build_sequence(tg, labels, cfg.visual_drop, cfg.class_drop, rng,
                         cfg.num_classes, zv_soft=zv_soft)
    parts = ar_loss(ar, seq)
    return rl, parts, seq


def _grad_is_zero(loss, param):
    if not param.requires_grad:
        return True
    g = torch.autograd.grad(loss, param, retain_graph=True, allow_unused=True)[0]
    return g is None or bool((g == 0).all())


def assert_routing(tokenizer, ar: ARModel, pixels, labels, cfg: RunConfig):
    """Verify the gradient-routing contract on one batch before training."""
    rng = torch.Generator().manual_seed(0)
    was_training = tokenizer.training
    tokenizer.eval()
    ar.eval()
    if cfg.mode == "prologue_post":
        ste = tokenizer.quantize_prologue(tokenizer.encode_prologue(pixels))
        with torch.no_grad():
            base_tg = tokenizer.base.tokenize(pixels)
        tg = TokenGroups(zp_ids=ste.hard_ids, zp_soft=ste.pass_through,
                         zv_ids=base_tg.zv_ids, zv_vecs=base_tg.zv_vecs)
        seq = build_sequence(tg, labels, cfg.visual_drop, cfg.class_drop, rng, cfg.num_classes)
        ce = ar_loss(ar, seq).ce_total
        checks = {
            "ce grad on frozen visual codebook": _grad_is_zero(ce, tokenizer.cb_v.weight),
            "ce grad on prologue queries": not _grad_is_zero(ce, tokenizer.prologue_encoder.queries),
        }
    else:
        rl, parts, _ = stage1_losses(tokenizer, ar, pixels, labels, cfg, rng, route_scale=1.0)
        checks = {}
        if cfg.arreg:
            checks["ce grad reaches visual codebook"] = not _grad_is_zero(parts.ce_total, tokenizer.cb_v.weight)
        else:
            checks["ce grad on visual codebook is zero"] = _grad_is_zero(parts.ce_total, tokenizer.cb_v.weight)
        if cfg.prologue_len > 0:
            checks["ce grad on prologue queries"] = not _grad_is_zero(parts.ce_total, tokenizer.encoder.queries)
            checks["recon grad on prologue codebook is zero"] = _grad_is_zero(rl.total, tokenizer.cb_p.weight)
    if was_training:
        tokenizer.train()
        ar.train()
    failed = [name for name, ok in checks.items() if not ok]
    if failed:
        raise RuntimeError(f"gradient routing violated: {failed}")


def _dump_diagnostics(run_dir, pixels, labels, modules, step):
    dump = {
        "step": step,
        "pixels": pixels.detach().cpu(),
        "labels": labels.detach().cpu(),
        "grads": {
            f"{mname}.{pname}": p.grad.detach().cpu()
            for mname, module in modules.items()
            for pname, p in module.named_parameters()
            if p.grad is not None
        },
    }
    path = Path(run_dir or ".") / "nan_dump.pt"
    torch.save(dump, path)
    return str(path)


def _load_data(cfg: RunConfig, dataset):
    if dataset is None:
        dataset = synth_shapes(cfg.seed, cfg.num_classes, cfg.samples_per_class,
                               cfg.image_size, cfg.patch_size)
    return dataset.split(cfg.holdout_frac, seed=cfg.seed)


@torch.no_grad()
def evaluate_tokenizer(tokenizer, dataset: ImageDataset, cfg: RunConfig) -> dict:
    tokenizer.eval()
    l1_sum, n = 0.0, 0
    for batch in dataset.batches(cfg.batch_size):
        if isinstance(tokenizer, PostTokenizer):
            tg = tokenizer.tokenize(batch.pixels)
            x_hat = tokenizer.decode(tg.zv_ids)
        else:
            x_hat, _, _ = tokenizer.reconstruct(batch.pixels)
        l1_sum += (batch.pixels - x_hat).abs().mean().item() * len(batch)
        n += len(batch)
    return {"recon_l1": l1_sum / n}


@torch.no_grad()
def evaluate_ar(tokenizer, ar: ARModel, dataset: ImageDataset, cfg: RunConfig,
                p_drop: float = 0.0) -> dict:
    """Held-out CE with hard inputs; dropout optional and deterministic."""
    tokenizer.eval()
    ar.eval()
    rng = torch.Generator().manual_seed(0)
    sums = {"ce_total": 0.0, "ce_visual": 0.0, "ce_prologue": 0.0, "top1": 0.0}
    zp_all, zv_all, n = [], [], 0
    for batch in dataset.batches(cfg.batch_size):
        tg = tokenizer.tokenize(batch.pixels)
        seq = build_sequence(tg, batch.labels, p_drop, 0.0, rng, cfg.num_classes, hard=True)
        parts = ar_loss(ar, seq)
        w = len(batch)
        sums["ce_total"] += parts.ce_total.item() * w
        sums["ce_visual"] += parts.ce_visual.item() * w
        sums["ce_prologue"] += parts.ce_prologue.item() * w
        sums["top1"] += parts.top1_acc * w
        zp_all.append(tg.zp_ids)
        zv_all.append(tg.zv_ids)
        n += w
    out = {k: v / n for k, v in sums.items()}
    if cfg.prologue_len > 0:
        out["zp_perplexity"] = codebook_stats(torch.cat(zp_all), cfg.prologue_vocab)["perplexity"]
    out["zv_perplexity"] = codebook_stats(torch.cat(zv_all), cfg.visual_vocab)["perplexity"]
    return out


def _log_eval(log, step, stats, prefix="eval"):
    for key, value in stats.items():
        log.log(step, f"{prefix}/{key}", value)


# ---------------------------------------------------------------------------
# Stage 1 (joint) and the one-stage variant
# ---------------------------------------------------------------------------

def train_stage1(cfg: RunConfig, dataset: ImageDataset | None = None,
                 run_dir=None, full_ar: bool = False) -> TrainResult:
    """Joint tokenizer + AR optimization with mode-dependent routing."""
    cfg.validate()
    if cfg.mode == "prologue_post":
        raise ConfigError("prologue_post runs through train_prologue_post")
    torch.manual_seed(cfg.seed)
    train, held = _load_data(cfg, dataset)
    tokenizer = build_tokenizer(cfg)
    compact = not (full_ar or cfg.mode == "prologue_onestage")
    ar = build_ar(cfg, compact=compact)
    ar._compact = compact
    probe = train.batch(range(min(8, len(train))))
    assert_routing(tokenizer, ar, probe.pixels, probe.labels, cfg)

    opt = torch.optim.AdamW(
        [
            {"params": tokenizer.parameters(), "weight_decay": 0.0},
            {"params": ar.parameters(), "weight_decay": cfg.ar_weight_decay},
        ],
        lr=cfg.lr, betas=(0.9, 0.99),
    )
    rng = torch.Generator().manual_seed(cfg.seed + 1)
    log = MetricsLog(Path(run_dir) / "metrics.csv" if run_dir else None)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    tokenizer.train()
    ar.train()
    for epoch in range(cfg.epochs):
        for batch in train.batches(cfg.batch_size, rng):
            _set_lr(opt, lr_at(step, total_steps, cfg.lr, cfg.lr_min, cfg.warmup_steps))
            pixels = _augment(batch.pixels, rng) if cfg.augment else batch.pixels
            rl, parts, _ = stage1_losses(tokenizer, ar, pixels, batch.labels, cfg, rng)
            loss = rl.total + parts.ce_total
            objective = rl.total.item() + cfg.ar_weight * parts.ce_total.item()
            opt.zero_grad()
            loss.backward()
            if not torch.isfinite(loss):
                path = _dump_diagnostics(run_dir, pixels, batch.labels,
                                         {"tokenizer": tokenizer, "ar": ar}, step)
                raise TrainingDivergedError(f"non-finite loss at step {step}", dump_path=path)
            nn.utils.clip_grad_norm_(tokenizer.parameters(), cfg.grad_clip)
            nn.utils.clip_grad_norm_(ar.parameters(), cfg.grad_clip)
            opt.step()
            tokenizer.cb_v.renormalize()
            step += 1
            if step % cfg.log_every == 0 or step == total_steps:
                log.log(step, "train/recon_l1", rl.l1.item())
                log.log(step, "train/commit", rl.commit.item())
                log.log(step, "train/ce_total", parts.ce_total.item())
                log.log(step, "train/ce_visual", parts.ce_visual.item())
                log.log(step, "train/ce_prologue", parts.ce_prologue.item())
                log.log(step, "train/objective", objective)
                log.log(step, "train/top1", parts.top1_acc)
        stats = evaluate_tokenizer(tokenizer, held, cfg)
        stats.update(evaluate_ar(tokenizer, ar, held, cfg))
        _log_eval(log, step, stats)
        tokenizer.train()
        ar.train()
    tokenizer.eval()
    ar.eval()
    final = evaluate_tokenizer(tokenizer, held, cfg)
    final.update(evaluate_ar(tokenizer, ar, held, cfg))
    ckpt_path = None
    if run_dir is not None:
        stage = "onestage" if cfg.mode == "prologue_onestage" else "stage1"
        ckpt_path = save_checkpoint(Path(run_dir) / f"{stage}.pt", cfg, stage, step,
                                    tokenizer=tokenizer, ar=ar, optimizer=opt, metrics=log)
    log.close()
    return TrainResult(cfg, tokenizer, ar, log, final, ckpt_path)


def train_onestage(cfg: RunConfig, dataset: ImageDataset | None = None, run_dir=None) -> TrainResult:
    """Single joint run with the full-size AR; no separate stage 2."""
    if cfg.mode != "prologue_onestage":
        cfg = replace(cfg, mode="prologue_onestage")
    return train_stage1(cfg, dataset, run_dir)


# ---------------------------------------------------------------------------
# Stage 2: full AR on the frozen tokenizer
# ---------------------------------------------------------------------------

@torch.no_grad()
def _tokenize_all(tokenizer, dataset: ImageDataset, batch_size: int):
    tokenizer.eval()
    zp, zv = [], []
    for batch in dataset.batches(batch_size):
        tg = tokenizer.tokenize(batch.pixels)
        zp.append(tg.zp_ids)
        zv.append(tg.zv_ids)
    return torch.cat(zp), torch.cat(zv)


def _train_ar_on_ids(ar, zp_ids, zv_ids, labels, held, cfg, lr, lr_min, epochs,
                     p_drop, log, run_dir, eval_fn):
    opt = torch.optim.AdamW(ar.parameters(), lr=lr, betas=(0.9, 0.99),
                            weight_decay=cfg.ar_weight_decay)
    rng = torch.Generator().manual_seed(cfg.seed + 2)
    n = zv_ids.shape[0]
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = epochs * steps_per_epoch
    step = 0
    ar.train()
    for epoch in range(epochs):
        order = torch.randperm(n, generator=rng)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _set_lr(opt, lr_at(step, total_steps, lr, lr_min, cfg.warmup_steps))
            tg = TokenGroups(zp_ids=zp_ids[idx], zp_soft=zp_ids[idx], zv_ids=zv_ids[idx], zv_vecs=zv_ids[idx])
            seq = build_sequence(tg, labels[idx], p_drop, cfg.class_drop, rng,
                                 cfg.num_classes, hard=True)
            parts = ar_loss(ar, seq)
            opt.zero_grad()
            parts.ce_total.backward()
            if not torch.isfinite(parts.ce_total):
                path = _dump_diagnostics(run_dir, zv_ids[idx], labels[idx], {"ar": ar}, step)
                raise TrainingDivergedError(f"non-finite CE at step {step}", dump_path=path)
            nn.utils.clip_grad_norm_(ar.parameters(), cfg.grad_clip)
            opt.step()
            step += 1
            if step % cfg.log_every == 0 or step == total_steps:
                log.log(step, "train/ce_total", parts.ce_total.item())
                log.log(step, "train/ce_visual", parts.ce_visual.item())
                log.log(step, "train/ce_prologue", parts.ce_prologue.item())
                log.log(step, "train/top1", parts.top1_acc)
        _log_eval(log, step, eval_fn())
        ar.train()
    ar.eval()
    return opt, step


def train_stage2(tok_ckpt, cfg: RunConfig, dataset: ImageDataset | None = None,
                 run_dir=None, compact: bool = False) -> TrainResult:
    """Train a fresh AR (full-size by default) on hard token ids from a
    frozen tokenizer."""
    cfg.validate()
    tokenizer = tok_ckpt.build_tokenizer() if isinstance(tok_ckpt, Checkpoint) else tok_ckpt
    for p in tokenizer.parameters():
        p.requires_grad_(False)
    tokenizer.eval()
    frozen_hash = param_hash(tokenizer)
    torch.manual_seed(cfg.seed + 1000)
    train, held = _load_data(cfg, dataset)
    zp_ids, zv_ids = _tokenize_all(tokenizer, train, cfg.batch_size)
    ar = build_ar(cfg, compact=compact)
    ar._compact = compact
    log = MetricsLog(Path(run_dir) / "metrics.csv" if run_dir else None)
    opt, step = _train_ar_on_ids(
        ar, zp_ids, zv_ids, train.labels, held, cfg, cfg.stage2_lr, cfg.stage2_lr_min,
        cfg.stage2_epochs, cfg.stage2_visual_drop, log, run_dir,
        eval_fn=lambda: evaluate_ar(tokenizer, ar, held, cfg),
    )
    if param_hash(tokenizer) != frozen_hash:
        raise RuntimeError("frozen tokenizer parameters changed during stage 2")
    final = evaluate_ar(tokenizer, ar, held, cfg)
    ckpt_path = None
    if run_dir is not None:
        ckpt_path = save_checkpoint(Path(run_dir) / "stage2.pt", cfg, "stage2", step,
                                    tokenizer=tokenizer, ar=ar, optimizer=opt, metrics=log)
    log.close()
    return TrainResult(cfg, tokenizer, ar, log, final, ckpt_path)


# ---------------------------------------------------------------------------
# Prologue-Post: bolt a prologue onto a frozen pre-trained tokenizer
# ---------------------------------------------------------------------------

def train_prologue_post(base_ckpt, cfg: RunConfig, dataset: ImageDataset | None = None,
                        run_dir=None) -> TrainResult:
    """Train only (prologue encoder, prologue codebook, compact AR) with the
    AR loss; the base tokenizer and thus reconstruction stay bit-identical."""
    cfg.validate()
    if cfg.mode != "prologue_post":
        raise ConfigError("config mode must be prologue_post")
    if isinstance(base_ckpt, Checkpoint):
        if base_ckpt.config.mode != "baseline_2d":
            raise ConfigError(f"base checkpoint must be baseline_2d, got {base_ckpt.config.mode}")
        base = base_ckpt.build_tokenizer()
        base_cfg = base_ckpt.config
    else:
        base, base_cfg = base_ckpt
        if base_cfg.mode != "baseline_2d":
            raise ConfigError(f"base tokenizer must be baseline_2d, got {base_cfg.mode}")
    torch.manual_seed(cfg.seed + 500)
    post = PostTokenizer(base, num_prologue=cfg.prologue_len,
                         prologue_vocab=cfg.prologue_vocab,
                         enc_layers=cfg.post_enc_layers, heads=cfg.heads, tau=cfg.ste_tau)
    ar = build_ar(cfg, compact=True)
    ar._compact = True
    train, held = _load_data(cfg, dataset)
    probe = train.batch(range(min(8, len(train))))
    assert_routing(post, ar, probe.pixels, probe.labels, cfg)
    base_hash = param_hash(base)

    trainable = [p for p in post.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(
        [
            {"params": trainable, "weight_decay": 0.0},
            {"params": ar.parameters(), "weight_decay": cfg.ar_weight_decay},
        ],
        lr=cfg.lr, betas=(0.9, 0.99),
    )
    rng = torch.Generator().manual_seed(cfg.seed + 3)
    log = MetricsLog(Path(run_dir) / "metrics.csv" if run_dir else None)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    ar.train()
    post.prologue_encoder.train()
    for epoch in range(cfg.epochs):
        for batch in train.batches(cfg.batch_size, rng):
            _set_lr(opt, lr_at(step, total_steps, cfg.lr, cfg.lr_min, cfg.warmup_steps))
            tg = post.tokenize(batch.pixels)
            seq = build_sequence(tg, batch.labels, cfg.visual_drop, cfg.class_drop,
                                 rng, cfg.num_classes)
            parts = ar_loss(ar, seq)
            opt.zero_grad()
            parts.ce_total.backward()
            if not torch.isfinite(parts.ce_total):
                path = _dump_diagnostics(run_dir, batch.pixels, batch.labels,
                                         {"post": post, "ar": ar}, step)
                raise TrainingDivergedError(f"non-finite CE at step {step}", dump_path=path)
            nn.utils.clip_grad_norm_(trainable, cfg.grad_clip)
            nn.utils.clip_grad_norm_(ar.parameters(), cfg.grad_clip)
            opt.step()
            step += 1
            if step % cfg.log_every == 0 or step == total_steps:
                log.log(step, "train/ce_total", parts.ce_total.item())
                log.log(step, "train/ce_visual", parts.ce_visual.item())
                log.log(step, "train/ce_prologue", parts.ce_prologue.item())
        _log_eval(log, step, evaluate_ar(post, ar, held, cfg))
        ar.train()
        post.prologue_encoder.train()
    post.eval()
    ar.eval()
    if param_hash(base) != base_hash:
        raise RuntimeError("frozen base tokenizer changed during post-hoc training")
    final = evaluate_ar(post, ar, held, cfg)
    final.update(evaluate_tokenizer(post, held, cfg))
    ckpt_path = None
    if run_dir is not None:
        ckpt_path = save_checkpoint(Path(run_dir) / "post.pt", cfg, "post", step,
                                    tokenizer=post, ar=ar, optimizer=opt, metrics=log,
                                    base_config=base_cfg)
    log.close()
    return TrainResult(cfg, post, ar, log, final, ckpt_path)


# ---------------------------------------------------------------------------
# AR-weight sweep
# ---------------------------------------------------------------------------

SWEEP_ARMS = ("prologue", "baseline_2d_arreg", "baseline_1d_arreg")


def lambda_sweep(base_cfg: RunConfig, lambdas, arms, dataset: ImageDataset | None = None,
                 run_root=None) -> list:
    """One stage-1 run per (arm, weight); returns rows of final metrics."""
    for arm in arms:
        if arm not in SWEEP_ARMS:
            raise ConfigError(f"sweep arm {arm!r} not in {SWEEP_ARMS}")
    rows = []
    for arm in arms:
        for lam in lambdas:
            cfg = replace(base_cfg, mode=arm, ar_weight=float(lam))
            if arm.startswith("baseline"):
                cfg = replace(cfg, prologue_len=0, visual_drop=0.0)
            run_dir = None
            if run_root is not None:
                run_dir = Path(run_root) / f"{cfg.config_hash()}-{arm}"
                run_dir.mkdir(parents=True, exist_ok=True)
            result = train_stage1(cfg, dataset, run_dir)
            rows.append({
                "arm": arm,
                "ar_weight": float(lam),
                "recon_l1": result.final["recon_l1"],
                "ce_total": result.final["ce_total"],
                "ce_visual": result.final["ce_visual"],
            })
    return rows
