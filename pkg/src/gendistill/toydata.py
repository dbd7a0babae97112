"""Synthetic image families used by the stub backend, the toy ADD run and tests."""

from __future__ import annotations

import colorsys
import hashlib

import numpy as np
import torch

from .core import ImageBatch, LabeledImages, LabelRegistry

PATTERNS = ("stripes", "checker", "rings", "spots")


def label_key(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")


def class_style(label: str) -> dict:
    """Deterministic per-label appearance parameters."""
    rng = np.random.default_rng(label_key(label))
    hue = rng.uniform()
    fg = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.7, 1.0)))
    bg = np.array(colorsys.hsv_to_rgb((hue + rng.uniform(0.3, 0.7)) % 1.0, rng.uniform(0.3, 0.9), rng.uniform(0.15, 0.5)))
    return {
        "pattern": PATTERNS[int(rng.integers(len(PATTERNS)))],
        "freq": float(rng.uniform(1.5, 4.0)),
        "fg": fg,
        "bg": bg,
    }


def render_texture(label: str, seed: int, resolution: int) -> np.ndarray:
    """One ``[3, R, R]`` unit-range texture for ``label``.

    Appearance is keyed by the label; orientation, phase, position, colour
    jitter and pixel noise come from ``seed``.
    """
    style = class_style(label)
    rng = np.random.default_rng(seed)
    r = resolution
    yy, xx = np.meshgrid((np.arange(r) + 0.5) / r - 0.5, (np.arange(r) + 0.5) / r - 0.5, indexing="ij")
    theta = rng.uniform(0, np.pi)
    cx, cy = rng.uniform(-0.2, 0.2, size=2)
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    f = style["freq"] * rng.uniform(0.85, 1.15)
    phase = rng.uniform(0, 2 * np.pi)
    kind = style["pattern"]
    if kind == "stripes":
        field = np.sin(2 * np.pi * f * u + phase)
    elif kind == "checker":
        field = np.sin(2 * np.pi * f * u + phase) * np.sin(2 * np.pi * f * v + phase)
    elif kind == "rings":
        field = np.sin(2 * np.pi * f * np.hypot(u, v) * 1.5 + phase)
    else:
        field = np.cos(2 * np.pi * f * u + phase) + np.cos(2 * np.pi * f * v - phase)
        field = field / 2
    mask = 1.0 / (1.0 + np.exp(-4.0 * field))
    fg = np.clip(style["fg"] + rng.normal(0, 0.05, 3), 0, 1)
    bg = np.clip(style["bg"] + rng.normal(0, 0.05, 3), 0, 1)
    img = mask[None] * fg[:, None, None] + (1 - mask[None]) * bg[:, None, None]
    img = img + rng.normal(0, 0.03, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def texture_store(registry: LabelRegistry, per_class: int, resolution: int, seed: int) -> LabeledImages:
    """Balanced store of procedural textures, e.g. a held-out test split for stub classes."""
    imgs, labels = [], []
    for k, name in enumerate(registry.class_names):
        for j in range(per_class):
            s = np.random.SeedSequence([seed, k, j, 0x7E57]).generate_state(1)[0]
            imgs.append(render_texture(name, int(s), resolution))
            labels.append(k)
    data = torch.from_numpy(np.stack(imgs)) if imgs else torch.zeros(0, 3, resolution, resolution)
    return LabeledImages(ImageBatch(data), torch.tensor(labels, dtype=torch.long), registry)


def two_class_blobs(per_class: int, resolution: int = 8, seed: int = 0) -> LabeledImages:
    """Two-class toy set: a bright reddish blob on dark ground vs. a dark blob on bluish ground."""
    rng = np.random.default_rng(seed)
    r = resolution
    yy, xx = np.meshgrid(np.arange(r), np.arange(r), indexing="ij")
    imgs, labels = [], []
    for k in range(2):
        for _ in range(per_class):
            cy, cx = rng.uniform(1.5, r - 2.5, size=2)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (r / 6) ** 2))
            if k == 0:
                img = np.stack([0.1 + 0.85 * blob, 0.1 + 0.5 * blob, 0.1 + 0.3 * blob])
            else:
                img = np.stack([0.35 - 0.3 * blob, 0.55 - 0.45 * blob, 0.9 - 0.7 * blob])
            img = img + rng.normal(0, 0.02, img.shape)
            imgs.append(np.clip(img, 0, 1).astype(np.float32))
            labels.append(k)
    return LabeledImages(ImageBatch(torch.from_numpy(np.stack(imgs))), torch.tensor(labels), LabelRegistry(("blob", "hole")))


def palette(num_classes: int) -> np.ndarray:
    """``num_classes`` well separated RGB colours."""
    cols = []
    levels = (1.0, 0.55)
    per_ring = int(np.ceil(num_classes / len(levels)))
    for i in range(num_classes):
        ring, j = divmod(i, per_ring)
        cols.append(colorsys.hsv_to_rgb(j / per_ring, 0.9, levels[ring % len(levels)]))
    return np.array(cols, dtype=np.float32)


def solid_color_store(num_classes: int, per_class: int, resolution: int, seed: int = 0, noise: float = 0.0,
                      registry: LabelRegistry | None = None) -> LabeledImages:
    rng = np.random.default_rng(seed)
    cols = palette(num_classes)
    data = np.repeat(cols, per_class, axis=0)[:, :, None, None] * np.ones((1, 1, resolution, resolution), np.float32)
    if noise:
        data = data + rng.normal(0, noise, data.shape).astype(np.float32)
    labels = np.repeat(np.arange(num_classes), per_class)
    registry = registry or LabelRegistry.numbered(num_classes, "color")
    return LabeledImages(ImageBatch(torch.from_numpy(np.clip(data, 0, 1).astype(np.float32))),
                         torch.from_numpy(labels), registry)
