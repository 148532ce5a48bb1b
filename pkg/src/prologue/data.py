"""Toy image datasets and patch extraction.

The synthetic dataset gives every class a distinct *global* layout
(shape type + canonical position + palette) so that class identity is a
whole-image property, while per-sample jitter keeps samples distinct.
"""

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DataError

CACHE_MAGIC = b"PLGD"
CACHE_VERSION = 1

_SHAPES = (
    "square",
    "circle",
    "cross",
    "triangle",
    "ring",
    "hbars",
    "vbars",
    "diamond",
    "checker",
    "xcross",
)

# Foreground hues are distinct per class; backgrounds are drawn from a small
# shared pool so that local patches alone do not identify the class.
_FG_COLORS = np.array(
    [
        (0.95, 0.15, 0.15),
        (0.15, 0.85, 0.20),
        (0.20, 0.30, 0.95),
        (0.95, 0.85, 0.10),
        (0.85, 0.15, 0.85),
        (0.10, 0.85, 0.85),
        (0.95, 0.55, 0.10),
        (0.55, 0.25, 0.85),
        (0.45, 0.85, 0.35),
        (0.90, 0.40, 0.60),
        (0.35, 0.60, 0.25),
        (0.60, 0.60, 0.95),
    ]
)
_BG_COLORS = np.array(
    [
        (0.12, 0.12, 0.16),
        (0.85, 0.85, 0.80),
        (0.35, 0.40, 0.45),
    ]
)


@dataclass
class ImageBatch:
    """A batch of images with integer class labels."""

    pixels: torch.Tensor  # [B, C, H, W] float32 in [0, 1]
    labels: torch.Tensor  # [B] int64
    ids: list

    def __post_init__(self):
        if self.pixels.ndim != 4:
            raise DataError(f"pixels must be [B,C,H,W], got shape {tuple(self.pixels.shape)}")
        if self.pixels.shape[0] < 1:
            raise DataError("batch must contain at least one sample")
        if not torch.isfinite(self.pixels).all():
            raise DataError("pixels contain non-finite values")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise DataError("pixels must lie in [0, 1]")

    def __len__(self):
        return self.pixels.shape[0]


@dataclass
class PatchGrid:
    """Raster-ordered flattened patches of an image batch."""

    patches: torch.Tensor  # [B, N, P*P*C]
    grid_h: int
    grid_w: int
    patch_size: int

    @property
    def num_patches(self):
        return self.grid_h * self.grid_w


class ImageDataset:
    """In-memory image dataset; immutable after construction.

    Shuffling is never done internally: training loops draw batches
    through `batches()` with an explicit seeded generator.
    """

    def __init__(self, pixels: torch.Tensor, labels: torch.Tensor, ids: list, num_classes: int):
        if len(pixels) == 0:
            raise DataError("no samples")
        if labels.min() < 0 or labels.max() >= num_classes:
            raise DataError("labels out of range")
        self.pixels = pixels
        self.labels = labels
        self.ids = list(ids)
        self.num_classes = num_classes

    def __len__(self):
        return self.pixels.shape[0]

    @property
    def image_size(self):
        return self.pixels.shape[-1]

    def subset(self, indices) -> "ImageDataset":
        idx = torch.as_tensor(indices, dtype=torch.long)
        return ImageDataset(
            self.pixels[idx],
            self.labels[idx],
            [self.ids[i] for i in idx.tolist()],
            self.num_classes,
        )

    def batch(self, indices) -> ImageBatch:
        idx = torch.as_tensor(indices, dtype=torch.long)
        return ImageBatch(self.pixels[idx], self.labels[idx], [self.ids[i] for i in idx.tolist()])

    def batches(self, batch_size: int, rng: torch.Generator | None = None, drop_last: bool = False):
        """Yield ImageBatch views; shuffled iff a generator is given."""
        n = len(self)
        if rng is None:
            order = torch.arange(n)
        else:
            order = torch.randperm(n, generator=rng)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if drop_last and len(idx) < batch_size:
                break
            yield self.batch(idx)

    def split(self, holdout_frac: float, seed: int = 0):
        """Deterministic stratified-ish split into (train, holdout)."""
        n = len(self)
        g = torch.Generator().manual_seed(seed)
        order = torch.randperm(n, generator=g)
        n_hold = max(1, int(round(n * holdout_frac)))
        return self.subset(order[n_hold:]), self.subset(order[:n_hold])


def _shape_mask(kind: str, size: int, cy: float, cx: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    r = radius
    if kind == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == "circle":
        return dy**2 + dx**2 <= r**2
    if kind == "cross":
        w = max(1.0, r / 2.5)
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    if kind == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    if kind == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if kind == "hbars":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r) & (np.floor(yy / 2) % 2 == 0)
    if kind == "vbars":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r) & (np.floor(xx / 2) % 2 == 0)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "checker":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r) & ((np.floor(yy / 3) + np.floor(xx / 3)) % 2 == 0)
    if kind == "xcross":
        w = max(1.0, r / 2.5)
        return (np.abs(dy - dx) <= w) & (np.abs(dy) <= r) | (np.abs(dy + dx) <= w) & (np.abs(dy) <= r)
    raise ValueError(f"unknown shape kind {kind!r}")


def synth_shapes(seed: int, num_classes: int, samples_per_class: int, size: int, patch_size: int = 4) -> ImageDataset:
    """Generate the class-structured toy dataset.

    Per class: a fixed shape type, canonical position, and palette. Per
    sample: a discrete class-specific style variant (foreground shading) plus
    position/size jitter, a global background-brightness factor, and texture
    noise. Class identity and sample style are whole-image properties, so
    tokens must capture the global layout to predict well.
    """
    if num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    if size % patch_size != 0:
        raise ConfigError(f"size {size} not divisible by patch size {patch_size}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x504C4744]))

    # Class-level layout, drawn once from the seeded stream.
    cls_shape = [_SHAPES[c % len(_SHAPES)] for c in range(num_classes)]
    offs = rng.uniform(-size / 5, size / 5, size=(num_classes, 2))
    cls_fg = _FG_COLORS[np.arange(num_classes) % len(_FG_COLORS)]
    cls_bg = _BG_COLORS[np.arange(num_classes) % len(_BG_COLORS)]
    # three global shading variants per class, applied to every fg pixel
    variant_scale = np.array([1.0, 0.55, 0.8])
    variant_lift = np.array([0.0, 0.0, 0.2])

    images = np.empty((num_classes * samples_per_class, 3, size, size), dtype=np.float32)
    labels = np.empty(num_classes * samples_per_class, dtype=np.int64)
    ids = []
    i = 0
    for c in range(num_classes):
        for s in range(samples_per_class):
            cy = size / 2 + offs[c, 0] + rng.uniform(-3, 3)
            cx = size / 2 + offs[c, 1] + rng.uniform(-3, 3)
            radius = size / 5 + rng.uniform(-2, 2)
            v = rng.integers(0, len(variant_scale))
            fg = np.clip(cls_fg[c] * variant_scale[v] + variant_lift[v] + rng.uniform(-0.05, 0.05, 3), 0, 1)
            bg = np.clip(cls_bg[c] * rng.uniform(0.85, 1.15) + rng.uniform(-0.03, 0.03, 3), 0, 1)
            mask = _shape_mask(cls_shape[c], size, cy, cx, radius)
            img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
            img = img + rng.normal(0, 0.02, img.shape)
            images[i] = np.clip(img, 0, 1)
            labels[i] = c
            ids.append(f"c{c:02d}_s{s:04d}")
            i += 1
    return ImageDataset(torch.from_numpy(images), torch.from_numpy(labels), ids, num_classes)


def load_folder(path: str, size: int) -> ImageDataset:
    """Load a `root/<class_name>/*.png|jpg` tree, center-cropped and resized."""
    from PIL import Image

    root = Path(path)
    if not root.is_dir():
        raise DataError(f"dataset folder {path!r} does not exist")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    pixels, labels, ids = [], [], []
    for label, cdir in enumerate(class_dirs):
        for f in sorted(cdir.iterdir()):
            if f.suffix.lower() not in (".png", ".jpg", ".jpeg"):
                continue
            try:
                with Image.open(f) as im:
                    im = im.convert("RGB")
                    w, h = im.size
                    side = min(w, h)
                    left, top = (w - side) // 2, (h - side) // 2
                    im = im.crop((left, top, left + side, top + side)).resize((size, size), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except Exception as exc:  # decode failures are skipped, not fatal
                warnings.warn(f"skipping unreadable image {f}: {exc}")
                continue
            pixels.append(torch.from_numpy(arr.transpose(2, 0, 1)))
            labels.append(label)
            ids.append(str(f))
    if not pixels:
        raise DataError("no samples")
    return ImageDataset(torch.stack(pixels), torch.tensor(labels, dtype=torch.long), ids, len(class_dirs))


def patchify(pixels: torch.Tensor, patch_size: int) -> PatchGrid:
    """Split [B,C,H,W] into raster-ordered flat patches [B,N,P*P*C]."""
    b, c, h, w = pixels.shape
    p = patch_size
    if h % p != 0 or w % p != 0:
        raise ConfigError(f"image dims {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = pixels.reshape(b, c, gh, p, gw, p)
    x = x.permute(0, 2, 4, 3, 5, 1)  # [B, gh, gw, p, p, C]
    return PatchGrid(x.reshape(b, gh * gw, p * p * c), gh, gw, p)


def unpatchify(grid: PatchGrid, channels: int = 3) -> torch.Tensor:
    """Exact inverse of `patchify`."""
    b, n, flat = grid.patches.shape
    p, gh, gw = grid.patch_size, grid.grid_h, grid.grid_w
    c = flat // (p * p)
    if c != channels:
        raise ConfigError(f"patch dim {flat} inconsistent with {channels} channels")
    x = grid.patches.reshape(b, gh, gw, p, p, c)
    x = x.permute(0, 5, 1, 3, 2, 4)  # [B, C, gh, p, gw, p]
    return x.reshape(b, c, gh * p, gw * p)


def save_cache(dataset: ImageDataset, path: str, seed: int) -> None:
    """Write the dataset to a single binary file with a versioned header."""
    pix = dataset.pixels.numpy()
    lab = dataset.labels.numpy()
    header = struct.pack(
        "<IqIII",
        CACHE_VERSION,
        seed,
        dataset.num_classes,
        len(dataset),
        dataset.image_size,
    )
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(header)
        np.save(fh, pix)
        np.save(fh, lab)
        np.save(fh, np.array(dataset.ids))


def load_cache(path: str) -> ImageDataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CACHE_MAGIC:
            raise DataError(f"{path!r} is not a dataset cache (bad magic {magic!r})")
        version, seed, num_classes, count, size = struct.unpack("<IqIII", fh.read(struct.calcsize("<IqIII")))
        if version != CACHE_VERSION:
            raise DataError(f"unsupported cache version {version}")
        pix = np.load(fh)
        lab = np.load(fh)
        ids = [str(s) for s in np.load(fh)]
    if pix.shape[0] != count or pix.shape[-1] != size:
        raise DataError("cache header inconsistent with payload")
    return ImageDataset(torch.from_numpy(pix), torch.from_numpy(lab), ids, num_classes)


def nearest_centroid_accuracy(train: ImageDataset, test: ImageDataset) -> float:
    """Pixel-space nearest-centroid classifier accuracy (sanity on separability)."""
    feats = train.pixels.flatten(1)
    centroids = torch.stack([feats[train.labels == c].mean(0) for c in range(train.num_classes)])
    test_feats = test.pixels.flatten(1)
    d = torch.cdist(test_feats, centroids)
    pred = d.argmin(1)
    return (pred == test.labels).float().mean().item()
