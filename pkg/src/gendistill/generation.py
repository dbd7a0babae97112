"""Class labels -> prompts -> one-step samples -> class-balanced distilled set,
under an images-per-class and wall-clock budget."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .backends import GenerationConfig, GeneratorBackend, PromptTemplate, build_prompts
from .core import BudgetSpec, DatasetSpec, DistilledDataset, ImageBatch, Provenance, resample

log = logging.getLogger(__name__)


def conform_resolution(batch: ImageBatch, target: int) -> ImageBatch:
    """Square ``target`` x ``target`` output; area averaging when shrinking."""
    if target <= 0:
        raise ValueError("target resolution must be > 0")
    if batch.shape[-2:] == (target, target):
        return batch
    return ImageBatch(resample(batch.data, target), batch.value_range, batch.dtype_hint)


def image_seed(run_seed: int, class_index: int, image_index: int) -> int:
    return int(np.random.SeedSequence([run_seed & 0xFFFFFFFF, class_index, image_index]).generate_state(1)[0])


@dataclass
class TimingReport:
    budget_seconds: float
    phases: dict[str, float] = field(default_factory=dict)
    per_class_seconds: list[float] = field(default_factory=list)
    images: int = 0
    aborted: bool = False
    abort_phase: str | None = None

    @property
    def total(self) -> float:
        return float(sum(self.phases.values()))

    @property
    def within_budget(self) -> bool:
        return not self.aborted and self.total <= self.budget_seconds

    @property
    def images_per_second(self) -> float:
        gen = self.phases.get("generation", 0.0)
        return self.images / gen if gen > 0 else 0.0

    def add_phase(self, name: str, seconds: float) -> None:
        self.phases[name] = self.phases.get(name, 0.0) + float(seconds)

    def to_dict(self) -> dict:
        return {
            "budget_seconds": self.budget_seconds,
            "phases": dict(self.phases),
            "per_class_seconds": list(self.per_class_seconds),
            "total": self.total,
            "within_budget": self.within_budget,
            "aborted": self.aborted,
            "abort_phase": self.abort_phase,
            "images": self.images,
            "images_per_second": self.images_per_second,
        }


def timing_report(run: "TimingReport | DistilledDataset | BudgetExceededError") -> str:
    """Render a run's timing accounting as JSON text."""
    if isinstance(run, BudgetExceededError):
        run = run.report
    if isinstance(run, DistilledDataset):
        run = run.metadata["timing_report"]
    if isinstance(run, dict):
        return json.dumps(run, indent=2)
    return json.dumps(run.to_dict(), indent=2)


class BudgetExceededError(RuntimeError):
    """Wall clock ran out; ``partial`` holds the complete rounds generated so far."""

    def __init__(self, partial: DistilledDataset, report: TimingReport):
        super().__init__(
            f"budget of {report.budget_seconds:.1f}s exceeded during {report.abort_phase} "
            f"after {partial.ipc} complete round(s)"
        )
        self.partial = partial
        self.report = report


def _assemble(spec, placed, rounds, channels, quantize, metadata) -> DistilledDataset:
    k = spec.num_classes
    r = spec.resolution
    if rounds == 0:
        return DistilledDataset(ImageBatch.empty(channels, r), torch.zeros(0, dtype=torch.long), (), 0,
                                spec.registry, metadata=metadata)
    order = [(c, j) for c in range(k) for j in range(rounds)]
    data = torch.stack([placed[key] for key in order])
    batch = ImageBatch(data.clamp(0.0, 1.0))
    if quantize:
        batch = batch.quantized()
    labels = torch.tensor([c for c, _ in order], dtype=torch.long)
    return DistilledDataset(batch, labels, (Provenance.GENERATED,) * len(order), rounds, spec.registry,
                            metadata=metadata)


def distill_dataset(spec: DatasetSpec, budget: BudgetSpec, backend: GeneratorBackend, template: PromptTemplate,
                    config: GenerationConfig, *, workers: int = 1, quantize: bool = True,
                    clock: Callable[[], float] = time.perf_counter) -> DistilledDataset:
    """Generate ``budget.ipc`` images for every class of ``spec``.

    Classes are visited round-robin (image 0 of every class, then image 1, ...)
    so an early stop still leaves a balanced prefix. Each image's seed depends
    only on ``(config.seed, class, index)``.
    """
    if budget.num_classes != spec.num_classes:
        raise ValueError(f"budget is for {budget.num_classes} classes, dataset has {spec.num_classes}")
    report = TimingReport(budget.wall_clock_seconds, per_class_seconds=[0.0] * spec.num_classes)
    prompts = build_prompts(spec.registry, template)
    meta = {
        "dataset": spec.name,
        "backend": getattr(backend, "name", type(backend).__name__),
        "template": template.template,
        "generation": {
            "num_inference_steps": config.num_inference_steps,
            "guidance_scale": config.guidance_scale,
            "seed": config.seed,
            "native_resolution": config.native_resolution,
            "precision": config.precision.value,
        },
        "resolution": spec.resolution,
    }
    channels = 3
    if budget.ipc == 0:
        meta["timing_report"] = report.to_dict()
        return _assemble(spec, {}, 0, channels, quantize, meta)

    start = clock()
    t0 = clock()
    backend.load()
    report.add_phase("model_load", clock() - t0)

    k = spec.num_classes
    placed: dict[tuple[int, int], torch.Tensor] = {}
    rounds_done = 0
    bs = config.batch_size
    parallel = workers > 1 and getattr(backend, "reentrant", False)
    pool = ThreadPoolExecutor(workers) if parallel else None

    def run_batch(batch_keys):
        t_b = clock()
        out = backend.generate([prompts[c] for c, _ in batch_keys], config,
                               [image_seed(config.seed, c, j) for c, j in batch_keys])
        if len(out) != len(batch_keys):
            raise RuntimeError(f"backend returned {len(out)} images for {len(batch_keys)} prompts")
        out = conform_resolution(out.to_unit(), spec.resolution)
        return batch_keys, out.data.float(), clock() - t_b

    try:
        for j in range(budget.ipc):
            keys = [(c, j) for c in range(k)]
            batches = [keys[i:i + bs] for i in range(0, k, bs)]
            t_round = clock()
            results = pool.map(run_batch, batches) if pool else map(run_batch, batches)
            over = False
            for batch_keys, data, seconds in results:
                channels = data.shape[1]
                for (c, jj), img in zip(batch_keys, data):
                    placed[(c, jj)] = img
                    report.per_class_seconds[c] += seconds / len(batch_keys)
                if clock() - start > budget.wall_clock_seconds:
                    over = True
                    break
            report.add_phase("generation", clock() - t_round)
            if all((c, j) in placed for c in range(k)):
                rounds_done = j + 1
            if over:
                report.aborted = True
                report.abort_phase = "generation"
                break
    finally:
        if pool:
            pool.shutdown()

    report.images = rounds_done * k
    meta["timing_report"] = report.to_dict()
    ds = _assemble(spec, placed, rounds_done, channels, quantize, meta)
    if report.aborted:
        log.warning("budget exceeded after %d/%d rounds", rounds_done, budget.ipc)
        raise BudgetExceededError(ds, report)
    log.info("generated %d images in %.2fs (%.1f img/s)", report.images, report.total, report.images_per_second)
    return ds
