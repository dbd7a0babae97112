"""Fixed evaluation protocol: train ConvNetD3-W128 on a distilled set, score it
on a real test split, repeat and report ``mean±std``."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import DistilledDataset, LabeledImages, LabelRegistry

log = logging.getLogger(__name__)

CHALLENGE_EPOCHS = 1000
CHALLENGE_REPEATS = 3


class LabelSpaceMismatch(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, last_finite_epoch: int):
        super().__init__(f"non-finite training loss at epoch {epoch}; last finite epoch {last_finite_epoch}")
        self.epoch = epoch
        self.last_finite_epoch = last_finite_epoch


@dataclass(frozen=True)
class ConvNetSpec:
    depth: int = 3
    width: int = 128
    norm: str = "instancenorm"
    pool: str = "avgpool"
    head_size: int = 4

    def __post_init__(self):
        if self.depth < 1 or self.width < 1:
            raise ValueError("depth and width must be positive")
        if self.norm not in ("instancenorm", "batchnorm", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.pool not in ("avgpool", "maxpool"):
            raise ValueError(f"unknown pool {self.pool!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = CHALLENGE_EPOCHS
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.lr <= 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0, lr and batch_size > 0")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("momentum must be in [0, 1) and weight_decay >= 0")

    @classmethod
    def challenge(cls, seed: int = 0) -> "TrainConfig":
        return cls(CHALLENGE_EPOCHS, 0.01, 0.9, 0.0005, 256, seed)

    @classmethod
    def desk(cls, epochs: int, seed: int = 0, batch_size: int = 256) -> "TrainConfig":
        return cls(epochs, 0.01, 0.9, 0.0005, batch_size, seed)

    def is_challenge(self) -> bool:
        return (self.epochs, self.lr, self.momentum, self.weight_decay) == (CHALLENGE_EPOCHS, 0.01, 0.9, 0.0005)


class ConvNet(nn.Module):
    """``depth`` x [conv3x3 -> norm -> ReLU -> 2x pool], adaptive pool, linear head."""

    def __init__(self, spec: ConvNetSpec, num_classes: int, channels: int = 3):
        super().__init__()
        self.spec = spec
        self.num_classes = num_classes
        layers: list[nn.Module] = []
        c = channels
        for _ in range(spec.depth):
            layers.append(nn.Conv2d(c, spec.width, 3, padding=1))
            if spec.norm == "instancenorm":
                layers.append(nn.GroupNorm(spec.width, spec.width, affine=True))
            elif spec.norm == "batchnorm":
                layers.append(nn.BatchNorm2d(spec.width))
            layers.append(nn.ReLU(inplace=True))
            layers.append(nn.AvgPool2d(2) if spec.pool == "avgpool" else nn.MaxPool2d(2))
            c = spec.width
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(spec.head_size)
        self.classifier = nn.Linear(spec.width * spec.head_size**2, num_classes)

    def forward(self, x):
        return self.classifier(torch.flatten(self.pool(self.features(x)), 1))


def build_convnet(spec: ConvNetSpec, num_classes: int, resolution: int, channels: int = 3, seed: int = 0) -> ConvNet:
    if resolution < 2**spec.depth:
        raise ValueError(f"resolution {resolution} too small for {spec.depth} pooling stages")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ConvNet(spec, num_classes, channels)


def _xy(data) -> tuple[torch.Tensor, torch.Tensor, LabelRegistry]:
    if isinstance(data, (DistilledDataset, LabeledImages)):
        return data.images.to_unit().data.float(), data.labels, data.registry
    raise TypeError(f"expected a dataset, got {type(data).__name__}")


def train_classifier(model: nn.Module, ds, cfg: TrainConfig) -> tuple[nn.Module, list[float]]:
    """Momentum SGD with cross-entropy; returns the model and per-epoch mean loss."""
    x, y, _ = _xy(ds)
    if len(x) == 0:
        raise ValueError("cannot train on an empty dataset")
    if isinstance(ds, DistilledDataset) and not np.all(ds.class_counts() == ds.ipc):
        raise ValueError("distilled dataset is not balanced")
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    curve: list[float] = []
    bs = min(cfg.batch_size, len(x))
    model.train()
    for epoch in range(cfg.epochs):
        perm = torch.randperm(len(x), generator=gen)
        total, count = 0.0, 0
        for i in range(0, len(x), bs):
            idx = perm[i:i + bs]
            loss = F.cross_entropy(model(x[idx]), y[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(epoch, epoch - 1)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        curve.append(total / count)
    model.eval()
    return model, curve


def check_label_space(train_registry: LabelRegistry, test_registry: LabelRegistry) -> None:
    if train_registry.class_names != test_registry.class_names:
        a, b = set(train_registry.class_names), set(test_registry.class_names)
        raise LabelSpaceMismatch(
            f"label spaces differ ({train_registry.count} vs {test_registry.count} classes; "
            f"only in train: {sorted(a - b)[:5]}, only in test: {sorted(b - a)[:5]})"
        )


@torch.no_grad()
def predict(model: nn.Module, images: torch.Tensor, batch_size: int = 500) -> torch.Tensor:
    model.eval()
    return torch.cat([model(images[i:i + batch_size]).argmax(dim=1) for i in range(0, len(images), batch_size)])


def evaluate(model: nn.Module, test: LabeledImages, registry: LabelRegistry | None = None) -> float:
    """Top-1 accuracy on ``test``."""
    x, y, test_registry = _xy(test)
    if len(x) == 0:
        raise ValueError("empty test set")
    if registry is not None:
        check_label_space(registry, test_registry)
    n_out = getattr(model, "num_classes", None)
    if n_out is not None and n_out != test_registry.count:
        raise LabelSpaceMismatch(f"model predicts {n_out} classes, test set has {test_registry.count}")
    pred = predict(model, x)
    return float((pred == y).sum()) / len(y)


def sample_std(values) -> float:
    v = np.asarray(values, dtype=float)
    return float(v.std(ddof=1)) if len(v) > 1 else 0.0


def format_accuracy(mean: float, std: float) -> str:
    return f"{mean:.4f}±{std:.4f}"


@dataclass
class EvalReport:
    per_run_acc: list[float]
    mean: float
    std: float
    dataset: str
    ipc: int
    config_hash: str
    config: dict = field(default_factory=dict)
    mode: str = "desk"
    label: str = ""
    loss_curves: list[list[float]] = field(default_factory=list)

    @classmethod
    def from_runs(cls, accs, dataset: str, ipc: int, config: dict, mode: str = "desk", label: str = "",
                  loss_curves=None) -> "EvalReport":
        accs = [float(a) for a in accs]
        return cls(accs, float(np.mean(accs)), sample_std(accs), dataset, ipc, config_hash(config), config, mode,
                   label, loss_curves or [])

    @property
    def formatted(self) -> str:
        return format_accuracy(self.mean, self.std)

    def check(self, tol: float = 1e-12) -> None:
        if not self.per_run_acc:
            raise ValueError("report has no runs")
        if any(not 0.0 <= a <= 1.0 for a in self.per_run_acc):
            raise ValueError("accuracies must lie in [0, 1]")
        if abs(self.mean - float(np.mean(self.per_run_acc))) > tol:
            raise ValueError("report mean disagrees with per-run accuracies")
        if abs(self.std - sample_std(self.per_run_acc)) > tol:
            raise ValueError("report std disagrees with per-run accuracies")

    def table_row(self) -> dict:
        return {"model": self.label or self.dataset, "dataset": self.dataset, "ipc": self.ipc,
                "accuracy": self.formatted}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["formatted"] = self.formatted
        d["repeats"] = len(self.per_run_acc)
        return d

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        fields = {k: d[k] for k in ("per_run_acc", "mean", "std", "dataset", "ipc", "config_hash")}
        rep = cls(**fields, config=d.get("config", {}), mode=d.get("mode", "desk"), label=d.get("label", ""),
                  loss_curves=d.get("loss_curves", []))
        rep.check()
        return rep


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def run_seed(base: int, run: int) -> int:
    return int(np.random.SeedSequence([base & 0xFFFFFFFF, run, 0xE7A1]).generate_state(1)[0] & 0x7FFFFFFF)


def repeat_evaluate(ds: DistilledDataset, test: LabeledImages, cfg: TrainConfig, repeats: int = CHALLENGE_REPEATS,
                    spec: ConvNetSpec = ConvNetSpec(), dataset_name: str | None = None, label: str = "") -> EvalReport:
    """Train a fresh ConvNet ``repeats`` times (run-derived seeds) and report mean and sample std."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    check_label_space(ds.registry, test.registry)
    resolution = ds.images.resolution
    if test.images.resolution != resolution:
        raise ValueError(f"test resolution {test.images.resolution} != distilled resolution {resolution}")
    accs, curves = [], []
    for run in range(repeats):
        seed = run_seed(cfg.seed, run)
        model = build_convnet(spec, ds.num_classes, resolution, ds.images.shape[1], seed=seed)
        run_cfg = TrainConfig(cfg.epochs, cfg.lr, cfg.momentum, cfg.weight_decay, cfg.batch_size, seed)
        model, curve = train_classifier(model, ds, run_cfg)
        acc = evaluate(model, test, ds.registry)
        log.info("run %d/%d: accuracy %.4f", run + 1, repeats, acc)
        accs.append(acc)
        curves.append(curve)
    config = {
        "convnet": asdict(spec),
        "train": asdict(cfg),
        "repeats": repeats,
        "num_classes": ds.num_classes,
        "resolution": resolution,
        "num_train": len(ds),
        "num_test": len(test),
    }
    mode = "challenge" if cfg.is_challenge() and repeats == CHALLENGE_REPEATS else "desk"
    name = dataset_name or ds.metadata.get("dataset", "distilled")
    return EvalReport.from_runs(accs, name, ds.ipc, config, mode, label, curves)
