"""Shared data model: image batches, label registries, distilled datasets,
persistence and ingestion of the real evaluation splits."""

from __future__ import annotations

import enum
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
CIFAR_RECORD_BYTES = 3074
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}

CIFAR100_FINE_LABELS = (
    "apple", "aquarium_fish", "baby", "bear", "beaver", "bed", "bee", "beetle",
    "bicycle", "bottle", "bowl", "boy", "bridge", "bus", "butterfly", "camel",
    "can", "castle", "caterpillar", "cattle", "chair", "chimpanzee", "clock",
    "cloud", "cockroach", "couch", "crab", "crocodile", "cup", "dinosaur",
    "dolphin", "elephant", "flatfish", "forest", "fox", "girl", "hamster",
    "house", "kangaroo", "keyboard", "lamp", "lawn_mower", "leopard", "lion",
    "lizard", "lobster", "man", "maple_tree", "motorcycle", "mountain", "mouse",
    "mushroom", "oak_tree", "orange", "orchid", "otter", "palm_tree", "pear",
    "pickup_truck", "pine_tree", "plain", "plate", "poppy", "porcupine",
    "possum", "rabbit", "raccoon", "ray", "road", "rocket", "rose", "sea",
    "seal", "shark", "shrew", "skunk", "skyscraper", "snail", "snake", "spider",
    "squirrel", "streetcar", "sunflower", "sweet_pepper", "table", "tank",
    "telephone", "television", "tiger", "tractor", "train", "trout", "tulip",
    "turtle", "wardrobe", "whale", "willow_tree", "wolf", "woman", "worm",
)


class DatasetError(ValueError):
    """Raised when a dataset violates its invariants or a file is malformed."""


class ValueRange(str, enum.Enum):
    UNIT = "unit"
    SYMMETRIC = "symmetric"

    @property
    def bounds(self) -> tuple[float, float]:
        return (0.0, 1.0) if self is ValueRange.UNIT else (-1.0, 1.0)


class Precision(str, enum.Enum):
    FULL = "full"
    HALF = "half"


class Provenance(str, enum.Enum):
    GENERATED = "generated"
    AUGMENTED = "augmented"


@dataclass(frozen=True)
class ImageBatch:
    """Dense ``[N, C, H, W]`` image tensor with a declared value range."""

    data: torch.Tensor
    value_range: ValueRange = ValueRange.UNIT
    dtype_hint: Precision = Precision.FULL

    def __post_init__(self):
        object.__setattr__(self, "value_range", ValueRange(self.value_range))
        object.__setattr__(self, "dtype_hint", Precision(self.dtype_hint))
        x = self.data
        if not isinstance(x, torch.Tensor) or x.dim() != 4:
            raise DatasetError("ImageBatch data must be a 4-d tensor [N, C, H, W]")
        if not x.is_floating_point():
            raise DatasetError(f"ImageBatch data must be floating point, got {x.dtype}")
        n, c, h, w = x.shape
        if c not in (1, 3):
            raise DatasetError(f"channel count must be 1 or 3, got {c}")
        if h <= 0 or w <= 0:
            raise DatasetError(f"spatial size must be positive, got {h}x{w}")
        if n:
            lo, hi = self.value_range.bounds
            xmin, xmax = float(x.min()), float(x.max())
            if not (math.isfinite(xmin) and math.isfinite(xmax)):
                raise DatasetError("ImageBatch contains non-finite values")
            if xmin < lo or xmax > hi:
                raise DatasetError(
                    f"values [{xmin:.4g}, {xmax:.4g}] outside {self.value_range.value} range [{lo}, {hi}]"
                )

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.data.shape)

    @property
    def resolution(self) -> int:
        return self.data.shape[-1]

    @classmethod
    def empty(cls, channels: int = 3, resolution: int = 32) -> "ImageBatch":
        return cls(torch.zeros(0, channels, resolution, resolution))

    def to_unit(self) -> "ImageBatch":
        if self.value_range is ValueRange.UNIT:
            return self
        return ImageBatch(((self.data + 1.0) / 2.0).clamp(0.0, 1.0), ValueRange.UNIT, self.dtype_hint)

    def to_symmetric(self) -> "ImageBatch":
        if self.value_range is ValueRange.SYMMETRIC:
            return self
        return ImageBatch((self.data * 2.0 - 1.0).clamp(-1.0, 1.0), ValueRange.SYMMETRIC, self.dtype_hint)

    def quantized(self) -> "ImageBatch":
        """Snap a unit-range batch onto the 8-bit grid used by on-disk storage."""
        unit = self.to_unit()
        q = torch.round(unit.data.float() * 255.0) / 255.0
        return ImageBatch(q, ValueRange.UNIT, self.dtype_hint)

    def is_quantized(self) -> bool:
        if self.value_range is not ValueRange.UNIT:
            return False
        x = self.data.float()
        return bool(torch.equal(torch.round(x * 255.0) / 255.0, x))

    def cat(self, other: "ImageBatch") -> "ImageBatch":
        if other.value_range is not self.value_range:
            raise DatasetError("cannot concatenate batches with different value ranges")
        return ImageBatch(torch.cat([self.data, other.data]), self.value_range, self.dtype_hint)


@dataclass(frozen=True)
class LabelRegistry:
    """Ordered class names; index <-> name is a bijection."""

    class_names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.class_names)
        object.__setattr__(self, "class_names", names)
        if any((not isinstance(n, str)) or not n for n in names):
            raise DatasetError("class names must be non-empty strings")
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise DatasetError(f"duplicate class names: {dupes}")

    @property
    def count(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.class_names)

    def index(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise KeyError(name) from None

    def name(self, index: int) -> str:
        return self.class_names[index]

    @classmethod
    def numbered(cls, count: int, prefix: str = "class") -> "LabelRegistry":
        width = max(3, len(str(count - 1))) if count else 3
        return cls(tuple(f"{prefix}_{i:0{width}d}" for i in range(count)))

    @classmethod
    def from_file(cls, path: str | Path) -> "LabelRegistry":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(s.strip() for s in lines if s.strip()))


@dataclass(frozen=True)
class BudgetSpec:
    wall_clock_seconds: float
    ipc: int
    num_classes: int

    def __post_init__(self):
        if not self.wall_clock_seconds > 0:
            raise ValueError("wall_clock_seconds must be > 0")
        if self.ipc < 0:
            raise ValueError("ipc must be >= 0")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    resolution: int
    registry: LabelRegistry

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be > 0")

    @property
    def num_classes(self) -> int:
        return self.registry.count


@dataclass(frozen=True)
class LabeledImages:
    """A plain labeled store, e.g. a real train/test split."""

    images: ImageBatch
    labels: torch.Tensor
    registry: LabelRegistry

    def __post_init__(self):
        labels = torch.as_tensor(self.labels, dtype=torch.long).reshape(-1)
        object.__setattr__(self, "labels", labels)
        if labels.numel() != len(self.images):
            raise DatasetError(f"{labels.numel()} labels for {len(self.images)} images")
        if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= self.registry.count):
            raise DatasetError("label index outside registry")

    def __len__(self) -> int:
        return len(self.images)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels.numpy(), minlength=self.registry.count)


@dataclass(frozen=True)
class DistilledDataset:
    """Labeled, exactly class-balanced image set with per-image provenance.

    ``source`` points each augmented image at the index of the image it was
    derived from in the pre-augmentation set; generated images carry -1.
    """

    images: ImageBatch
    labels: torch.Tensor
    provenance: tuple[Provenance, ...]
    ipc: int
    registry: LabelRegistry
    source: torch.Tensor | None = None
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n = len(self.images)
        labels = torch.as_tensor(self.labels, dtype=torch.long).reshape(-1)
        object.__setattr__(self, "labels", labels)
        prov = tuple(Provenance(p) for p in self.provenance)
        object.__setattr__(self, "provenance", prov)
        source = self.source
        if source is None:
            source = torch.full((n,), -1, dtype=torch.long)
        source = torch.as_tensor(source, dtype=torch.long).reshape(-1)
        object.__setattr__(self, "source", source)
        if labels.numel() != n:
            raise DatasetError(f"labels length {labels.numel()} != number of images {n}")
        if len(prov) != n or source.numel() != n:
            raise DatasetError("provenance/source length must equal number of images")
        if self.ipc < 0:
            raise DatasetError("ipc must be >= 0")
        if n and (int(labels.min()) < 0 or int(labels.max()) >= self.registry.count):
            raise DatasetError("label index outside registry")
        counts = np.bincount(labels.numpy(), minlength=self.registry.count)
        bad = [(self.registry.name(i), int(c)) for i, c in enumerate(counts) if c != self.ipc]
        if bad:
            shown = ", ".join(f"{name!r}: {c}" for name, c in bad[:5])
            raise DatasetError(f"class balance violated (expected ipc={self.ipc}): {shown}")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return self.registry.count

    @property
    def resolution(self) -> int:
        return self.images.resolution

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels.numpy(), minlength=self.registry.count)

    def as_store(self) -> LabeledImages:
        return LabeledImages(self.images, self.labels, self.registry)

    def select(self, indices: Sequence[int], ipc: int) -> "DistilledDataset":
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        return DistilledDataset(
            ImageBatch(self.images.data[idx], self.images.value_range, self.images.dtype_hint),
            self.labels[idx],
            tuple(self.provenance[i] for i in idx.tolist()),
            ipc,
            self.registry,
            self.source[idx],
            dict(self.metadata),
        )

    @classmethod
    def empty(cls, registry: LabelRegistry, resolution: int, channels: int = 3) -> "DistilledDataset":
        return cls(ImageBatch.empty(channels, resolution), torch.zeros(0, dtype=torch.long), (), 0, registry)


# ---------------------------------------------------------------- resampling


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    # weight = overlap of the output cell with each input pixel, normalized by cell width
    scale = n_in / n_out
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        a, b = i * scale, (i + 1) * scale
        for j in range(int(math.floor(a)), min(n_in, int(math.ceil(b)))):
            m[i, j] = (min(b, j + 1) - max(a, j)) / scale
    return m


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = min(max((i + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-d resampling operator: exact area averaging when shrinking, bilinear when growing."""
    if n_in == n_out:
        return np.eye(n_in)
    return _area_matrix(n_in, n_out) if n_out < n_in else _bilinear_matrix(n_in, n_out)


def resample(data: torch.Tensor, size: int | tuple[int, int]) -> torch.Tensor:
    """Resample ``[N, C, H, W]`` to ``size`` with separable area/bilinear operators.

    Returns the input object unchanged when the size already matches.
    """
    oh, ow = (size, size) if isinstance(size, int) else size
    if oh <= 0 or ow <= 0:
        raise ValueError("target size must be positive")
    h, w = data.shape[-2:]
    if (h, w) == (oh, ow):
        return data
    mh = torch.from_numpy(resize_matrix(h, oh))
    mw = torch.from_numpy(resize_matrix(w, ow))
    out = torch.einsum("ih,nchw,jw->ncij", mh, data.double(), mw)
    if data.numel():
        # both operators are convex combinations; clamping only removes rounding drift
        out = out.clamp(float(data.min()), float(data.max()))
    return out.to(data.dtype)


# ---------------------------------------------------------------- persistence


def _safe_dirname(name: str) -> str:
    cleaned = re.sub(r"[^A-Za-z0-9_.\-]+", "_", name).strip("._")
    return cleaned or "class"


def _to_uint8(chw: torch.Tensor) -> np.ndarray:
    arr = torch.round(chw.float() * 255.0).clamp(0, 255).to(torch.uint8).numpy()
    return arr[0] if arr.shape[0] == 1 else np.transpose(arr, (1, 2, 0))


def _from_uint8(arr: np.ndarray) -> torch.Tensor:
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return torch.from_numpy(np.transpose(arr, (2, 0, 1)).copy()).float() / 255.0


def save_distilled(ds: DistilledDataset, path: str | Path, *, quantize: bool = False) -> Path:
    """Write ``ds`` as ``<root>/<class>/<index>.png`` plus ``manifest.json``.

    Images are stored as 8-bit PNG. Data must already sit on the 8-bit grid
    (see :meth:`ImageBatch.quantized`) unless ``quantize`` is set, so that a
    save/load round trip is exact.
    """
    root = Path(path)
    counts = ds.class_counts()
    if len(ds) and not np.all(counts == ds.ipc):
        raise DatasetError("refusing to write an unbalanced dataset")
    images = ds.images.to_unit()
    if len(ds) and not images.is_quantized():
        if not quantize:
            raise DatasetError("images are not on the 8-bit grid; pass quantize=True to round them")
        images = images.quantized()
    root.mkdir(parents=True, exist_ok=True)

    dirs: list[str] = []
    for name in ds.registry.class_names:
        d = _safe_dirname(name)
        while d in dirs:
            d += "_"
        dirs.append(d)

    ordinal = np.zeros(ds.num_classes, dtype=int)
    files = []
    for i in range(len(ds)):
        label = int(ds.labels[i])
        rel = f"{dirs[label]}/{ordinal[label]:05d}.png"
        ordinal[label] += 1
        target = root / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(_to_uint8(images.data[i])).save(target, format="PNG")
        files.append({
            "path": rel,
            "label": label,
            "provenance": ds.provenance[i].value,
            "source": int(ds.source[i]),
        })

    n, c, h, w = images.shape
    manifest = {
        "version": MANIFEST_VERSION,
        "class_names": list(ds.registry.class_names),
        "class_dirs": dirs,
        "ipc": ds.ipc,
        "num_images": n,
        "channels": c,
        "resolution": [h, w],
        "value_range": ValueRange.UNIT.value,
        "image_format": "png8",
        "files": files,
        "metadata": ds.metadata,
    }
    manifest_path = root / MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    log.info("saved %d images (%d classes, ipc=%d) to %s", n, ds.num_classes, ds.ipc, root)
    return manifest_path


def read_manifest(path: str | Path) -> dict:
    root = Path(path)
    mpath = root / MANIFEST_NAME if root.is_dir() else root
    if not mpath.is_file():
        raise DatasetError(f"manifest not found: {mpath}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt manifest {mpath}: {exc}") from exc
    required = ("version", "class_names", "class_dirs", "ipc", "files", "resolution", "channels")
    missing = [k for k in required if k not in manifest]
    if missing:
        raise DatasetError(f"manifest {mpath} missing keys: {missing}")
    if manifest["version"] > MANIFEST_VERSION:
        raise DatasetError(f"manifest version {manifest['version']} is newer than supported {MANIFEST_VERSION}")
    return manifest


def load_distilled(path: str | Path) -> DistilledDataset:
    root = Path(path)
    manifest = read_manifest(root)
    registry = LabelRegistry(tuple(manifest["class_names"]))
    dirs = manifest["class_dirs"]
    ipc = int(manifest["ipc"])
    if len(dirs) != registry.count:
        raise DatasetError("manifest class_dirs and class_names differ in length")

    for k, d in enumerate(dirs):
        on_disk = len([p for p in (root / d).glob("*.png")]) if (root / d).is_dir() else 0
        if on_disk != ipc:
            raise DatasetError(
                f"class {registry.name(k)!r} ({d}/) has {on_disk} image files but manifest claims ipc={ipc}"
            )
    files = manifest["files"]
    if len(files) != registry.count * ipc:
        raise DatasetError(f"manifest lists {len(files)} files, expected {registry.count} x {ipc}")

    valid = {p.value for p in Provenance}
    c = int(manifest["channels"])
    h, w = manifest["resolution"]
    tensors, labels, prov, source = [], [], [], []
    for entry in files:
        if entry["provenance"] not in valid:
            raise DatasetError(f"unknown provenance tag {entry['provenance']!r} for {entry['path']}")
        with Image.open(root / entry["path"]) as im:
            arr = np.asarray(im)
        t = _from_uint8(arr)
        if tuple(t.shape) != (c, h, w):
            raise DatasetError(f"{entry['path']} has shape {tuple(t.shape)}, manifest says {(c, h, w)}")
        tensors.append(t)
        labels.append(int(entry["label"]))
        prov.append(entry["provenance"])
        source.append(int(entry.get("source", -1)))
    data = torch.stack(tensors) if tensors else torch.zeros(0, c, h, w)
    return DistilledDataset(
        ImageBatch(data),
        torch.tensor(labels, dtype=torch.long),
        tuple(prov),
        ipc,
        registry,
        torch.tensor(source, dtype=torch.long),
        manifest.get("metadata", {}),
    )


# ---------------------------------------------------------------- ingestion


def read_cifar100_file(path: str | Path, registry: LabelRegistry | None = None) -> LabeledImages:
    """Parse one CIFAR-100 binary file (fine labels)."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD_BYTES:
        offset = (raw.size // CIFAR_RECORD_BYTES) * CIFAR_RECORD_BYTES
        raise DatasetError(
            f"{path}: length {raw.size} is not a multiple of {CIFAR_RECORD_BYTES}; "
            f"truncated record at byte offset {offset}"
        )
    records = raw.reshape(-1, CIFAR_RECORD_BYTES)
    fine = records[:, 1].astype(np.int64)
    pixels = records[:, 2:].reshape(-1, 3, 32, 32)
    registry = registry or LabelRegistry(CIFAR100_FINE_LABELS)
    if fine.size and fine.max() >= registry.count:
        raise DatasetError(f"{path}: fine label {fine.max()} outside {registry.count} classes")
    images = torch.from_numpy(pixels).float() / 255.0
    return LabeledImages(ImageBatch(images), torch.from_numpy(fine), registry)


def import_cifar100(path: str | Path, splits: Iterable[str] = ("train", "test")) -> dict[str, LabeledImages]:
    """Load ``train.bin`` / ``test.bin`` from a ``cifar-100-binary`` directory.

    Class names come from ``fine_label_names.txt`` when present.
    """
    root = Path(path)
    names_file = root / "fine_label_names.txt"
    registry = LabelRegistry.from_file(names_file) if names_file.is_file() else LabelRegistry(CIFAR100_FINE_LABELS)
    out = {}
    for split in splits:
        f = root / f"{split}.bin"
        if not f.is_file():
            raise FileNotFoundError(f)
        out[split] = read_cifar100_file(f, registry)
    return out


def import_image_directory(path: str | Path, spec: DatasetSpec) -> LabeledImages:
    """Read ``<root>/<class_name>/**/<image>`` into a store resized to ``spec.resolution``."""
    root = Path(path)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    known = set(spec.registry.class_names)
    unknown = [p.name for p in class_dirs if p.name not in known]
    if unknown:
        raise DatasetError(f"class directories not in registry: {unknown}")
    tensors, labels = [], []
    for d in class_dirs:
        label = spec.registry.index(d.name)
        for f in sorted(d.rglob("*")):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            with Image.open(f) as im:
                arr = np.asarray(im.convert("RGB"))
            t = _from_uint8(arr)[None]
            tensors.append(resample(t, spec.resolution)[0])
            labels.append(label)
    r = spec.resolution
    data = torch.stack(tensors) if tensors else torch.zeros(0, 3, r, r)
    return LabeledImages(ImageBatch(data.clamp(0.0, 1.0)), torch.tensor(labels, dtype=torch.long), spec.registry)


def builtin_dataset_spec(name: str, classes_file: str | Path | None = None, num_classes: int | None = None) -> DatasetSpec:
    """Dataset presets: ``cifar100`` (32 px, fine labels), ``tinyimagenet`` (64 px)."""
    key = name.lower().replace("-", "").replace("_", "")
    registry = LabelRegistry.from_file(classes_file) if classes_file else None
    if key == "cifar100":
        return DatasetSpec("cifar100", 32, registry or LabelRegistry(CIFAR100_FINE_LABELS))
    if key == "tinyimagenet":
        return DatasetSpec("tinyimagenet", 64, registry or LabelRegistry.numbered(num_classes or 200))
    if registry is None:
        if num_classes is None:
            raise ValueError(f"unknown dataset {name!r}: supply a classes file or a class count")
        registry = LabelRegistry.numbered(num_classes)
    return DatasetSpec(name, 32, registry)
