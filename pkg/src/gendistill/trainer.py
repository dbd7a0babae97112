"""Desk-scale adversarial diffusion distillation.

A frozen teacher denoiser and a frozen feature extractor are pretrained on a
small labeled image set; a student initialized from the teacher is then
trained with alternating discriminator (hinge + R1) and generator
(adversarial + weighted distillation) updates.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .core import ImageBatch, LabeledImages
from .diffusion import NoiseSchedule, TimestepSet, add_noise, sample_student_timestep
from .losses import (
    DEFAULT_R1_GAMMA,
    AddLossBundle,
    WeightingScheme,
    discriminator_hinge_loss,
    distillation_loss,
    generator_adversarial_loss,
    r1_penalty,
)
from .networks import Denoiser, DiscriminatorStack, FeatureExtractor

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "gendistill-add-student"
CHECKPOINT_VERSION = 1
HISTORY_FIELDS = ("step", "s", "t", "gen_adv", "disc", "distill", "r1")


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, bundle: AddLossBundle):
        super().__init__(f"non-finite loss at step {step}: {bundle}")
        self.step = step
        self.bundle = bundle


@dataclass
class AddConfig:
    steps: int = 500
    batch_size: int = 32
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    seed: int = 0
    t_student: tuple[int, ...] = (250, 500, 750, 999)
    weighting: str = "exponential"
    gamma: float = DEFAULT_R1_GAMMA
    lambda_distill: float = 1.0
    num_timesteps: int = 1000
    schedule: str = "cosine"
    distill_t_min: int = 1
    student_init: str = "teacher"
    checkpoint_every: int = 0
    out_dir: str | None = None
    # desk-scale pretraining of the frozen parts
    teacher_steps: int = 1500
    teacher_lr: float = 2e-3
    teacher_width: int = 48
    teacher_blocks: int = 2
    extractor_steps: int = 200
    extractor_lr: float = 2e-3

    def __post_init__(self):
        self.t_student = tuple(int(t) for t in self.t_student)

    def make_schedule(self) -> NoiseSchedule:
        if self.schedule == "cosine":
            return NoiseSchedule.cosine(self.num_timesteps)
        if self.schedule == "linear":
            return NoiseSchedule.linear(self.num_timesteps)
        raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class AddModels:
    student: Denoiser
    teacher: Denoiser
    disc: DiscriminatorStack
    schedule: NoiseSchedule
    class_names: tuple[str, ...] = ()


@dataclass
class TrainState:
    step: int
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    rng: np.random.Generator
    gen: torch.Generator
    seed: int
    history: list[AddLossBundle] = field(default_factory=list)


def param_checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _symmetric(x0) -> torch.Tensor:
    if isinstance(x0, ImageBatch):
        return x0.to_symmetric().data.float()
    return x0


def init_state(models: AddModels, config: AddConfig) -> TrainState:
    opt_g = torch.optim.AdamW(models.student.parameters(), lr=config.lr_g, betas=(0.5, 0.999))
    opt_d = torch.optim.AdamW(models.disc.head_parameters(), lr=config.lr_d, betas=(0.5, 0.999))
    gen = torch.Generator().manual_seed(config.seed)
    return TrainState(0, opt_g, opt_d, np.random.default_rng(config.seed), gen, config.seed)


def teacher_target(student_x0: torch.Tensor, teacher: Denoiser, t: int, y: torch.Tensor, schedule: NoiseSchedule,
                   eps: torch.Tensor, stop_gradient: bool = True) -> torch.Tensor:
    """Teacher denoising of the re-noised student output at timestep ``t``.

    With ``stop_gradient`` the student output is detached first, so this
    branch contributes no gradient to the student parameters.
    """
    x = student_x0.detach() if stop_gradient else student_x0
    x_t = add_noise(x, t, eps, schedule)
    return teacher.predict_x0(x_t, t, y, schedule)


def train_step(state: TrainState, x0, labels: torch.Tensor, models: AddModels, schedule: NoiseSchedule,
               scheme: WeightingScheme, gamma: float, lambda_distill: float = 1.0,
               t_student: TimestepSet | None = None, s: int | None = None, t: int | None = None,
               distill_t_min: int = 1) -> tuple[TrainState, AddLossBundle]:
    """One discriminator update followed by one generator update."""
    x0 = _symmetric(x0)
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    labels = labels.long()
    t_student = t_student or TimestepSet((schedule.t_max,))
    if s is None:
        s = sample_student_timestep(t_student, state.rng)
    if t is None:
        t = int(state.rng.integers(distill_t_min, schedule.t_max + 1))
    eps = torch.randn(x0.shape, generator=state.gen)
    eps_t = torch.randn(x0.shape, generator=state.gen)
    x_s = add_noise(x0, s, eps, schedule)
    student, teacher, disc = models.student, models.teacher, models.disc

    # discriminator: hinge on real vs. one-step samples, R1 at the real images
    disc.train()
    with torch.no_grad():
        fake = student.predict_x0(x_s, s, labels, schedule)
    r1 = r1_penalty(lambda x: disc(x, labels), x0)
    real_heads = disc(x0, labels)
    fake_heads = disc(fake, labels)
    d_loss = discriminator_hinge_loss(real_heads, fake_heads, r1, gamma)
    state.opt_d.zero_grad(set_to_none=True)
    d_loss.backward()
    state.opt_d.step()

    # generator: adversarial + c(t)-weighted distance to the teacher on sg(x_hat)
    x_hat = student.predict_x0(x_s, s, labels, schedule)
    g_heads = disc(x_hat, labels)
    g_adv = generator_adversarial_loss(g_heads)
    target = teacher_target(x_hat, teacher, t, labels, schedule, eps_t, stop_gradient=True)
    distill = distillation_loss(x_hat, target, t, scheme, schedule)
    g_loss = g_adv + lambda_distill * distill
    state.opt_g.zero_grad(set_to_none=True)
    g_loss.backward()
    state.opt_g.step()
    # the generator backward also reaches the heads; keep their grads out of the next D step
    disc.zero_grad(set_to_none=True)

    bundle = AddLossBundle(
        gen_adv=float(g_adv.detach()),
        disc=float(d_loss.detach()),
        distill=float(distill.detach()),
        r1=float(r1.detach()),
        per_head_means=fake_heads.detach().mean(dim=0).tolist(),
        s=int(s),
        t=int(t),
    )
    if not bundle.finite():
        raise NonFiniteLossError(state.step, bundle)
    state.step += 1
    state.history.append(bundle)
    return state, bundle


# ---------------------------------------------------------------- pretraining


def pretrain_teacher(store: LabeledImages, schedule: NoiseSchedule, config: AddConfig) -> Denoiser:
    """Fit a class-conditional v-prediction denoiser; 10% of labels are dropped to the null class."""
    torch.manual_seed(config.seed)
    x = store.images.to_symmetric().data.float()
    y = store.labels
    n_cls = store.registry.count
    model = Denoiser(x.shape[1], n_cls, config.teacher_width, config.teacher_blocks, t_max=schedule.t_max)
    opt = torch.optim.AdamW(model.parameters(), lr=config.teacher_lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(config.teacher_steps, 1))
    gen = torch.Generator().manual_seed(config.seed + 1)
    bs = min(config.batch_size * 2, len(x))
    a, s = schedule.alphas.float(), schedule.sigmas.float()
    for _ in range(config.teacher_steps):
        idx = torch.randint(0, len(x), (bs,), generator=gen)
        x0, yb = x[idx], y[idx].clone()
        drop = torch.rand(bs, generator=gen) < 0.1
        yb[drop] = n_cls
        t = torch.randint(0, schedule.t_max + 1, (bs,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        at, st = a[t].view(-1, 1, 1, 1), s[t].view(-1, 1, 1, 1)
        x_t = at * x0 + st * eps
        v = at * eps - st * x0
        loss = F.mse_loss(model(x_t, t, yb), v)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def pretrain_extractor(store: LabeledImages, config: AddConfig) -> FeatureExtractor:
    torch.manual_seed(config.seed + 2)
    x = store.images.to_symmetric().data.float()
    y = store.labels
    model = FeatureExtractor(x.shape[1], num_classes=store.registry.count)
    opt = torch.optim.AdamW(model.parameters(), lr=config.extractor_lr)
    gen = torch.Generator().manual_seed(config.seed + 3)
    bs = min(config.batch_size * 2, len(x))
    for _ in range(config.extractor_steps):
        idx = torch.randint(0, len(x), (bs,), generator=gen)
        loss = F.cross_entropy(model(x[idx]), y[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return model.freeze()


def build_models(store: LabeledImages, config: AddConfig) -> AddModels:
    schedule = config.make_schedule()
    teacher = pretrain_teacher(store, schedule, config)
    extractor = pretrain_extractor(store, config)
    torch.manual_seed(config.seed + 4)
    disc = DiscriminatorStack(extractor, store.registry.count)
    if config.student_init == "teacher":
        student = copy.deepcopy(teacher)
    elif config.student_init == "scratch":
        torch.manual_seed(config.seed + 5)
        student = Denoiser(**teacher.config)
    else:
        raise ValueError(f"unknown student_init {config.student_init!r}")
    student.train()
    for p in student.parameters():
        p.requires_grad_(True)
    return AddModels(student, teacher, disc, schedule, store.registry.class_names)


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    student: Denoiser
    history: list[AddLossBundle]
    models: AddModels
    config: AddConfig


def train(config: AddConfig, store: LabeledImages, models: AddModels | None = None) -> TrainResult:
    """Run ``config.steps`` ADD steps on ``store``; deterministic for a fixed seed."""
    if len(store) < config.batch_size:
        raise ValueError(f"dataset has {len(store)} images, smaller than batch size {config.batch_size}")
    models = models or build_models(store, config)
    schedule = models.schedule
    tset = TimestepSet(config.t_student)
    tset.validate(schedule)
    scheme = WeightingScheme(config.weighting)
    torch.manual_seed(config.seed)
    state = init_state(models, config)
    x = store.images.to_symmetric().data.float()
    y = store.labels
    out_dir = Path(config.out_dir) if config.out_dir else None
    for _ in range(config.steps):
        idx = torch.from_numpy(state.rng.choice(len(x), size=config.batch_size, replace=False))
        state, bundle = train_step(state, x[idx], y[idx], models, schedule, scheme, config.gamma,
                                   config.lambda_distill, tset, distill_t_min=config.distill_t_min)
        if state.step % 50 == 0:
            log.info("step %d  gen_adv %.4f  disc %.4f  distill %.5f  r1 %.4g",
                     state.step, bundle.gen_adv, bundle.disc, bundle.distill, bundle.r1)
        if out_dir and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            save_checkpoint(out_dir / f"student_{state.step:06d}.pt", models, config, store)
    models.student.eval()
    return TrainResult(models.student, state.history, models, config)


def history_csv(history: list[AddLossBundle]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for i, b in enumerate(history, start=1):
        w.writerow([i, b.s, b.t, repr(b.gen_adv), repr(b.disc), repr(b.distill), repr(b.r1)])
    return buf.getvalue()


def read_history_csv(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return {k: np.array([float(r[k]) for r in rows]) for k in HISTORY_FIELDS}


def moving_average(values, window: int = 20) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if len(v) < window:
        return np.array([v.mean()]) if len(v) else v
    return np.convolve(v, np.ones(window) / window, mode="valid")


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, models: AddModels, config: AddConfig, store: LabeledImages | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "schedule": models.schedule.to_dict(),
        "class_names": list(models.class_names),
        "denoiser": models.student.config,
        "student": models.student.state_dict(),
        "resolution": int(store.images.resolution) if store is not None else None,
    }
    torch.save(payload, path)
    return path


@dataclass
class StudentCheckpoint:
    student: Denoiser
    schedule: NoiseSchedule
    class_names: tuple[str, ...]
    config: AddConfig
    resolution: int | None


def load_checkpoint(path: str | Path) -> StudentCheckpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a student checkpoint")
    student = Denoiser(**payload["denoiser"])
    student.load_state_dict(payload["student"])
    student.eval()
    cfg = AddConfig(**payload["config"])
    return StudentCheckpoint(student, NoiseSchedule.from_dict(payload["schedule"]), tuple(payload["class_names"]),
                             cfg, payload.get("resolution"))
