"""Generator backends: prompts in, ``ImageBatch`` at native resolution out."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
import torch

from .core import ImageBatch, LabelRegistry, Precision
from .diffusion import NoiseSchedule, add_noise
from .networks import Denoiser
from .toydata import render_texture

log = logging.getLogger(__name__)

DEFAULT_TEMPLATE = "a photo of a {label}"
PLACEHOLDER = "{label}"


class BackendUnavailable(RuntimeError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    template: str = DEFAULT_TEMPLATE
    underscores_to_spaces: bool = True

    def __post_init__(self):
        n = self.template.count(PLACEHOLDER)
        if n != 1:
            raise ValueError(f"template must contain exactly one {PLACEHOLDER} placeholder, found {n}: {self.template!r}")

    def render(self, label: str) -> str:
        if self.underscores_to_spaces:
            label = label.replace("_", " ")
        return self.template.replace(PLACEHOLDER, label)


@dataclass(frozen=True)
class GenerationConfig:
    num_inference_steps: int = 1
    guidance_scale: float = 0.0
    seed: int = 0
    native_resolution: int = 64
    precision: Precision = Precision.FULL
    batch_size: int = 64

    def __post_init__(self):
        object.__setattr__(self, "precision", Precision(self.precision))
        if self.num_inference_steps < 1:
            raise ValueError("num_inference_steps must be >= 1")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")
        if self.native_resolution <= 0 or self.batch_size <= 0:
            raise ValueError("native_resolution and batch_size must be positive")


@runtime_checkable
class GeneratorBackend(Protocol):
    name: str
    reentrant: bool

    def load(self) -> None: ...

    def generate(self, prompts: Sequence[str], config: GenerationConfig, seeds: Sequence[int]) -> ImageBatch: ...


def build_prompts(registry: LabelRegistry, template: PromptTemplate) -> list[str]:
    if registry.count == 0:
        raise ValueError("registry is empty")
    return [template.render(name) for name in registry.class_names]


class StubBackend:
    """Procedural per-class textures keyed by the prompt text; no model weights."""

    name = "stub"
    reentrant = True

    def __init__(self):
        self.calls = 0

    def load(self) -> None:
        pass

    def generate(self, prompts, config, seeds):
        if len(prompts) != len(seeds):
            raise ValueError("one seed per prompt required")
        self.calls += 1
        r = config.native_resolution
        if not prompts:
            return ImageBatch.empty(3, r)
        imgs = np.stack([render_texture(p, int(s), r) for p, s in zip(prompts, seeds)])
        return ImageBatch(torch.from_numpy(imgs))


class ToyStudentBackend:
    """One-step sampling with an ADD-trained class-conditional student.

    Prompts are mapped back to class indices through the registry and
    template the backend was built with. With ``guidance_scale <= 1`` a single
    conditional evaluation is made per step; above 1 the null-class branch is
    mixed in classifier-free style.
    """

    name = "toy"
    reentrant = False

    def __init__(self, student: Denoiser, schedule: NoiseSchedule, registry: LabelRegistry,
                 template: PromptTemplate, t_student: Sequence[int] = (999,), resolution: int = 8):
        self.student = student.eval()
        self.schedule = schedule
        self.t_student = tuple(sorted(int(t) for t in t_student))
        self.resolution = resolution
        self.channels = int(student.config["channels"])
        self._class_of = {p: i for i, p in enumerate(build_prompts(registry, template))}

    @classmethod
    def from_checkpoint(cls, path: str | Path, template: PromptTemplate, registry: LabelRegistry | None = None) -> "ToyStudentBackend":
        from .trainer import load_checkpoint

        ck = load_checkpoint(path)
        registry = registry or LabelRegistry(ck.class_names)
        if registry.count != ck.student.num_classes:
            raise ValueError(f"checkpoint has {ck.student.num_classes} classes, registry has {registry.count}")
        return cls(ck.student, ck.schedule, registry, template, ck.config.t_student, ck.resolution or 8)

    def load(self) -> None:
        pass

    def _predict(self, x, s, y, guidance_scale):
        cond = self.student.predict_x0(x, s, y, self.schedule)
        if guidance_scale <= 1.0:
            return cond
        uncond = self.student.predict_x0(x, s, torch.full_like(y, self.student.null_class), self.schedule)
        return (uncond + guidance_scale * (cond - uncond)).clamp(-1.0, 1.0)

    @torch.no_grad()
    def generate(self, prompts, config, seeds):
        if len(prompts) != len(seeds):
            raise ValueError("one seed per prompt required")
        try:
            y = torch.tensor([self._class_of[p] for p in prompts], dtype=torch.long)
        except KeyError as exc:
            raise ValueError(f"prompt {exc.args[0]!r} does not map to a known class") from None
        r, c = self.resolution, self.channels
        if not prompts:
            return ImageBatch.empty(c, r)
        steps = config.num_inference_steps
        if steps > len(self.t_student):
            raise ValueError(f"{steps} steps requested, student trained on {len(self.t_student)} timesteps")
        taus = self.t_student[::-1][:steps] if steps > 1 else (self.t_student[-1],)
        gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
        noise = torch.stack([torch.randn(c, r, r, generator=g) for g in gens])
        x = noise * self.schedule.sigma(taus[0]) if self.schedule.alpha(taus[0]) > 0 else noise
        x = self._predict(x, taus[0], y, config.guidance_scale)
        for tau in taus[1:]:
            eps = torch.stack([torch.randn(c, r, r, generator=g) for g in gens])
            x = self._predict(add_noise(x, tau, eps, self.schedule), tau, y, config.guidance_scale)
        return ImageBatch(x.float(), "symmetric").to_unit()


class ExternalBackend:
    """Adapter for a pretrained one-step text-to-image pipeline (diffusers).

    Needs the optional ``diffusers`` dependency and, realistically, a GPU.
    """

    name = "external"
    reentrant = False

    def __init__(self, model_id: str = "stabilityai/sdxl-turbo", device: str | None = None,
                 precision: Precision = Precision.HALF):
        self.model_id = model_id
        self.device = device or ("cuda" if torch.cuda.is_available() else "cpu")
        self.precision = Precision(precision)
        self.pipe = None

    def load(self) -> None:
        try:
            from diffusers import AutoPipelineForText2Image
        except ImportError as exc:
            raise BackendUnavailable("the external backend needs `pip install diffusers transformers accelerate`") from exc
        half = self.precision is Precision.HALF and self.device != "cpu"
        kwargs = {"torch_dtype": torch.float16, "variant": "fp16"} if half else {}
        self.pipe = AutoPipelineForText2Image.from_pretrained(self.model_id, **kwargs).to(self.device)
        self.pipe.set_progress_bar_config(disable=True)

    def generate(self, prompts, config, seeds):
        if self.pipe is None:
            self.load()
        gens = [torch.Generator(self.device).manual_seed(int(s)) for s in seeds]
        out = self.pipe(
            prompt=list(prompts),
            num_inference_steps=config.num_inference_steps,
            guidance_scale=config.guidance_scale,
            height=config.native_resolution,
            width=config.native_resolution,
            generator=gens,
            output_type="pt",
        ).images
        return ImageBatch(out.float().cpu().clamp(0.0, 1.0))
