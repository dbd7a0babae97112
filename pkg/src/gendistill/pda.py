"""Post data augmentation: multiply the images-per-class of a generated set by
expanding every image into itself plus randomly augmented copies.

The augmentation chain, applied in this order, is random crop, horizontal
flip (p=0.8), vertical flip (p=0.8), brightness/contrast (p=0.5), rotation
within +-60 degrees (p=0.8) and gamma (p=0.5).
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy import ndimage

from .core import DistilledDataset, ImageBatch, Provenance, resample

STEP_ORDER = ("random_crop", "hflip", "vflip", "brightness_contrast", "rotate", "gamma")


@dataclass(frozen=True)
class AugmentationSpec:
    size: int
    hflip_p: float = 0.8
    vflip_p: float = 0.8
    brightness_contrast_p: float = 0.5
    brightness_limit: float = 0.2
    contrast_limit: float = 0.2
    rotate_p: float = 0.8
    rotate_limit: float = 60.0
    gamma_p: float = 0.5
    gamma_range: tuple[float, float] = (0.8, 1.2)
    source_scale: float = 1.25
    seed: int = 0

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError("crop size must be > 0")
        for name in ("hflip_p", "vflip_p", "brightness_contrast_p", "rotate_p", "gamma_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} is not a probability")
        if self.source_scale < 1.0:
            raise ValueError("source_scale must be >= 1")
        lo, hi = self.gamma_range
        if not 0 < lo <= hi:
            raise ValueError("gamma_range must satisfy 0 < lo <= hi")
        object.__setattr__(self, "gamma_range", (float(lo), float(hi)))

    @property
    def steps(self) -> tuple[str, ...]:
        return STEP_ORDER

    @property
    def source_size(self) -> int:
        return int(round(self.size * self.source_scale))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gamma_range"] = list(self.gamma_range)
        d["steps"] = list(STEP_ORDER)
        return d

    @classmethod
    def disabled(cls, size: int, **kw) -> "AugmentationSpec":
        """Every probabilistic step switched off (crop remains)."""
        return cls(size, hflip_p=0.0, vflip_p=0.0, brightness_contrast_p=0.0, rotate_p=0.0, gamma_p=0.0, **kw)


@dataclass(frozen=True)
class ExpansionPlan:
    factor: int = 5

    def __post_init__(self):
        if int(self.factor) < 1:
            raise ValueError(f"expansion factor must be >= 1, got {self.factor}")


# ---------------------------------------------------------------- primitives
# All primitives take and return float32 arrays shaped [C, H, W].


def random_crop(image: np.ndarray, size: int, rng: np.random.Generator | None = None,
                offset: tuple[int, int] | None = None) -> np.ndarray:
    _, h, w = image.shape
    if size > h or size > w:
        raise ValueError(f"crop size {size} exceeds image size {h}x{w}")
    if offset is None:
        if rng is None:
            raise ValueError("random_crop needs an rng or an explicit offset")
        offset = (int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1)))
    top, left = offset
    if not (0 <= top <= h - size and 0 <= left <= w - size):
        raise ValueError(f"crop offset {offset} out of bounds")
    return image[:, top:top + size, left:left + size]


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    _, h, w = image.shape
    return random_crop(image, size, offset=((h - size) // 2, (w - size) // 2))


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, :, ::-1]


def vflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1, :]


def brightness_contrast(image: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    return np.clip(alpha * image + beta, 0.0, 1.0).astype(np.float32)


def rotate(image: np.ndarray, angle: float) -> np.ndarray:
    """Rotate about the image centre: bilinear sampling, mirrored borders."""
    if angle == 0:
        return image
    _, h, w = image.shape
    rad = np.deg2rad(angle)
    c, s = np.cos(rad), np.sin(rad)
    # output (r, q) samples input at R^-1 ((r, q) - centre) + centre
    mat = np.array([[c, s], [-s, c]])
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - mat @ centre
    out = np.stack([
        ndimage.affine_transform(ch, mat, offset=offset, order=1, mode="mirror") for ch in image
    ])
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def gamma(image: np.ndarray, g: float) -> np.ndarray:
    if g == 1.0:
        return image
    return np.power(np.clip(image, 0.0, 1.0), g).astype(np.float32)


# ---------------------------------------------------------------- composition


def augment_one(image, spec: AugmentationSpec, rng: np.random.Generator, *,
                crop_offset: tuple[int, int] | None = None):
    """Apply the augmentation chain to one ``[C, H, W]`` unit-range image."""
    as_tensor = isinstance(image, torch.Tensor)
    x = image.numpy() if as_tensor else np.asarray(image)
    x = x.astype(np.float32, copy=False)
    x = random_crop(x, spec.size, rng, crop_offset)
    if rng.random() < spec.hflip_p:
        x = hflip(x)
    if rng.random() < spec.vflip_p:
        x = vflip(x)
    if rng.random() < spec.brightness_contrast_p:
        alpha = 1.0 + rng.uniform(-spec.contrast_limit, spec.contrast_limit)
        beta = rng.uniform(-spec.brightness_limit, spec.brightness_limit)
        x = brightness_contrast(x, alpha, beta)
    if rng.random() < spec.rotate_p:
        x = rotate(x, rng.uniform(-spec.rotate_limit, spec.rotate_limit))
    if rng.random() < spec.gamma_p:
        x = gamma(x, rng.uniform(*spec.gamma_range))
    x = np.ascontiguousarray(np.clip(x, 0.0, 1.0), dtype=np.float32)
    return torch.from_numpy(x) if as_tensor else x


def image_stream(seed: int, image: np.ndarray, label: int, copy_index: int) -> np.random.Generator:
    """Per-copy RNG keyed by image content, so streams do not depend on dataset order."""
    digest = hashlib.sha256(np.ascontiguousarray(image).tobytes() + label.to_bytes(4, "little")).digest()
    key = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, *key, copy_index]))


def conform_sources(images: ImageBatch, spec: AugmentationSpec) -> torch.Tensor:
    """Bring source images to the crop-source size (``source_scale`` x crop size)."""
    return resample(images.to_unit().data.float(), spec.source_size)


def _expand_one(args):
    src, label, spec, factor, seed = args
    out = [center_crop(src, spec.size)]
    for j in range(1, factor):
        out.append(augment_one(src, spec, image_stream(seed, src, label, j)))
    return out


def expand_dataset(ds: DistilledDataset, spec: AugmentationSpec, plan: ExpansionPlan, seed: int | None = None,
                   *, workers: int = 1, quantize: bool = True) -> DistilledDataset:
    """Expand every image into its centre crop plus ``factor - 1`` augmented copies.

    Output ipc is ``ds.ipc * factor``; copies follow their source in order and
    every output image (the centre crop included) records the index of its
    source image in ``source``.
    """
    factor = int(plan.factor)
    seed = spec.seed if seed is None else seed
    sources = conform_sources(ds.images, spec).numpy()
    labels = ds.labels.tolist()
    jobs = [(sources[i], labels[i], spec, factor, seed) for i in range(len(ds))]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(_expand_one, jobs))
    else:
        results = [_expand_one(j) for j in jobs]

    imgs, out_labels, prov, source = [], [], [], []
    for i, copies in enumerate(results):
        for j, img in enumerate(copies):
            imgs.append(np.ascontiguousarray(img))
            out_labels.append(labels[i])
            prov.append(ds.provenance[i] if j == 0 else Provenance.AUGMENTED)
            source.append(i)
    c = ds.images.shape[1]
    data = torch.from_numpy(np.stack(imgs)) if imgs else torch.zeros(0, c, spec.size, spec.size)
    batch = ImageBatch(data.clamp(0.0, 1.0))
    if quantize:
        batch = batch.quantized()
    meta = dict(ds.metadata)
    meta["pda"] = {**spec.to_dict(), "seed": seed, "factor": factor, "source_ipc": ds.ipc}
    return DistilledDataset(batch, torch.tensor(out_labels, dtype=torch.long), tuple(prov), ds.ipc * factor,
                            ds.registry, torch.tensor(source, dtype=torch.long), meta)
