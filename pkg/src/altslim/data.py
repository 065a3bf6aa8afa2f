"""Seeded procedural shape images stored as raw little-endian float32 tensors."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptDataset, DataIoError, InvalidInput

MANIFEST = "manifest.json"
FORMAT = "altslim-shapes/1"


@dataclass
class Dataset:
    images: np.ndarray  # [n, C, S, S] in [0, 1]
    masks: np.ndarray  # [n, S, S] foreground in {0, 1}
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.images)
        self.n_val = max(1, n // 10) if n > 1 else 0

    @property
    def n(self) -> int:
        return len(self.images)

    @property
    def train_images(self) -> np.ndarray:
        return self.images[: self.n - self.n_val] if self.n_val else self.images

    @property
    def val_images(self) -> np.ndarray:
        return self.images[self.n - self.n_val:] if self.n_val else self.images

    @property
    def train_masks(self) -> np.ndarray:
        return self.masks[: self.n - self.n_val] if self.n_val else self.masks

    @property
    def val_masks(self) -> np.ndarray:
        return self.masks[self.n - self.n_val:] if self.n_val else self.masks

    @property
    def digest(self) -> str:
        return self.manifest.get("digest") or _digest(self.images, self.masks)

    @property
    def train_key(self) -> str:
        return self.digest + ":train"

    @property
    def val_key(self) -> str:
        return self.digest + ":val"


def _digest(images, masks) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(images, dtype="<f4").tobytes())
    h.update(np.ascontiguousarray(masks, dtype="<f4").tobytes())
    return h.hexdigest()


def render_shapes(seed: int, n: int, image_size: int, channels: int = 3):
    """Images of 1-3 coloured circles, rectangles or triangles on a textured background."""
    if n < 1:
        raise InvalidInput("dataset needs n >= 1")
    rng = np.random.default_rng(seed)
    S = image_size
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64) + 0.5
    images = np.empty((n, channels, S, S), dtype=np.float32)
    masks = np.zeros((n, S, S), dtype=np.float32)
    for i in range(n):
        bg = rng.uniform(0.0, 1.0, size=channels)
        grad_dir = rng.normal(size=2)
        ramp = (grad_dir[0] * yy + grad_dir[1] * xx) / (S * 4)
        img = bg[:, None, None] + ramp[None] + rng.normal(0.0, 0.03, size=(channels, S, S))
        fg = np.zeros((S, S), dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            kind = int(rng.integers(0, 3))
            cy, cx = rng.uniform(0.2 * S, 0.8 * S, size=2)
            size = rng.uniform(0.12 * S, 0.3 * S)
            if kind == 0:
                shape = (yy - cy) ** 2 + (xx - cx) ** 2 <= size ** 2
            elif kind == 1:
                hy, hx = size * rng.uniform(0.5, 1.0, size=2)
                shape = (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
            else:
                top = cy - size
                rel = (yy - top) / (2 * size)
                shape = (rel >= 0) & (rel <= 1) & (np.abs(xx - cx) <= rel * size)
            color = rng.uniform(0.0, 1.0, size=channels)
            img[:, shape] = color[:, None]
            fg |= shape
        images[i] = np.clip(img, 0.0, 1.0)
        masks[i] = fg
    return images, masks


def generate_synthetic_dataset(out_dir, seed: int, n: int, image_size: int = 32,
                               channels: int = 3) -> Dataset:
    images, masks = render_shapes(seed, n, image_size, channels)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "images.f32").write_bytes(np.ascontiguousarray(images, dtype="<f4").tobytes())
        (out / "masks.f32").write_bytes(np.ascontiguousarray(masks, dtype="<f4").tobytes())
        manifest = {
            "format": FORMAT, "seed": seed, "n": n, "image_size": image_size,
            "channels": channels, "images": "images.f32", "masks": "masks.f32",
            "digest": _digest(images, masks),
        }
        (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    except OSError as exc:
        raise DataIoError(f"cannot write dataset to {out}: {exc}") from exc
    return Dataset(images, masks, manifest)


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
        raw_img = (path / manifest["images"]).read_bytes()
        raw_msk = (path / manifest["masks"]).read_bytes()
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise CorruptDataset(f"cannot read dataset at {path}: {exc}") from exc
    n, S, C = manifest["n"], manifest["image_size"], manifest["channels"]
    if len(raw_img) != 4 * n * C * S * S or len(raw_msk) != 4 * n * S * S:
        raise CorruptDataset("payload size does not match manifest")
    images = np.frombuffer(raw_img, dtype="<f4").reshape(n, C, S, S).astype(np.float32)
    masks = np.frombuffer(raw_msk, dtype="<f4").reshape(n, S, S).astype(np.float32)
    if _digest(images, masks) != manifest["digest"]:
        raise CorruptDataset("dataset digest mismatch")
    return Dataset(images, masks, manifest)


def patch_rows(arr: np.ndarray, patch: int) -> np.ndarray:
    """``[n, C, S, S]`` (or ``[n, S, S]``) to per-patch rows ``[n, L, C*p*p]``."""
    if arr.ndim == 3:
        arr = arr[:, None]
    n, C, S, _ = arr.shape
    g = S // patch
    x = arr.reshape(n, C, g, patch, g, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(n, g * g, C * patch * patch)


def proxy_targets(images: np.ndarray, masks: np.ndarray, patch: int, out_dim: int) -> np.ndarray:
    """Per-patch hard labels: clean pixels and mask pixels, mapped to ``out_dim``.

    When the concatenated width differs from ``out_dim`` a fixed seeded
    projection maps it across.
    """
    rows = np.concatenate([patch_rows(images, patch), patch_rows(masks, patch)], axis=-1)
    width = rows.shape[-1]
    if width != out_dim:
        rng = np.random.default_rng(0)
        proj = rng.normal(size=(width, out_dim)) / np.sqrt(width)
        rows = rows @ proj
    return rows.astype(np.float32)
