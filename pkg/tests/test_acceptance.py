"""Acceptance suite. Each test prints one ``A<n> PASS|FAIL`` line with the measured
quantity next to its threshold; run with ``pytest tests/test_acceptance.py -v``."""

import copy
import time

import numpy as np
import pytest
import torch
import torch.nn as nn
from scipy.stats import binomtest

from gendistill.backends import GenerationConfig, PromptTemplate, StubBackend
from gendistill.core import BudgetSpec, DatasetSpec, DistilledDataset, LabelRegistry, load_distilled, save_distilled
from gendistill.diffusion import NoiseSchedule
from gendistill.evaluator import (
    ConvNetSpec,
    EvalReport,
    TrainConfig,
    build_convnet,
    evaluate,
    format_accuracy,
    repeat_evaluate,
    sample_std,
    train_classifier,
)
from gendistill.generation import distill_dataset
from gendistill.losses import (
    WeightingScheme,
    discriminator_hinge_loss,
    distillation_loss,
    generator_adversarial_loss,
    r1_penalty,
)
from gendistill.networks import Denoiser
from gendistill.pda import AugmentationSpec, ExpansionPlan, expand_dataset
from gendistill.toydata import solid_color_store, texture_store, two_class_blobs
from gendistill.trainer import AddConfig, build_models, moving_average, param_checksum, teacher_target, train

from fd import autograd_grads, central_diff, rel_error


@pytest.fixture
def verdict(capsys):
    def emit(cid, ok, detail):
        with capsys.disabled():
            print(f"\n{cid} {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"{cid}: {detail}"
    return emit


class SmoothDisc(nn.Module):
    """Two-head double-precision critic with smooth activations, for finite differences."""

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(3, 4, 3, padding=1)
        self.head1 = nn.Linear(4, 1)
        self.head2 = nn.Linear(4 * 16, 1)

    def forward(self, x):
        h = torch.tanh(self.conv(x))
        k1 = self.head1(h.mean(dim=(2, 3)))
        k2 = self.head2(nn.functional.avg_pool2d(h, 2).flatten(1))
        return torch.cat([k1, k2], dim=1)


def test_a1_loss_gradients_match_finite_differences(verdict):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    disc = SmoothDisc().double()
    params = list(disc.parameters())
    real = torch.randn(4, 3, 8, 8, dtype=torch.float64)
    fake = torch.randn(4, 3, 8, 8, dtype=torch.float64, requires_grad=True)
    sched = NoiseSchedule.cosine(1000)
    target = torch.randn(4, 3, 8, 8, dtype=torch.float64)
    gamma = 0.5

    def gen_loss():
        return generator_adversarial_loss(disc(fake))

    def disc_loss():
        r1 = r1_penalty(disc, real)
        return discriminator_hinge_loss(disc(real), disc(fake.detach()), r1, gamma)

    def dist_loss():
        return distillation_loss(fake, target, 600, WeightingScheme("sds"), sched)

    errs = {
        "gen_adv[x]": rel_error(autograd_grads(gen_loss, [fake]), central_diff(gen_loss, [fake])),
        "gen_adv[D]": rel_error(autograd_grads(gen_loss, params), central_diff(gen_loss, params)),
        "disc+R1[D]": rel_error(autograd_grads(disc_loss, params), central_diff(disc_loss, params)),
        "distill[x]": rel_error(autograd_grads(dist_loss, [fake]), central_diff(dist_loss, [fake])),
    }
    r1_only = lambda: r1_penalty(disc, real)  # noqa: E731
    errs["R1[D]"] = rel_error(autograd_grads(r1_only, params), central_diff(r1_only, params))

    # exact zero cases
    sat = discriminator_hinge_loss(torch.full((4, 2), 1.0), torch.full((4, 2), -1.0), 0.0, gamma).item()
    ident = distillation_loss(target, target.clone(), 600, WeightingScheme(), sched).item()
    worst = max(errs.values())
    dt = time.perf_counter() - t0
    ok = worst < 1e-4 and sat == 0.0 and ident == 0.0 and dt < 60
    detail = ", ".join(f"{k}={v:.1e}" for k, v in errs.items())
    verdict("A1", ok, f"max rel err {worst:.2e} < 1e-4 ({detail}); hinge-saturated={sat}, identity={ident}; {dt:.1f}s")


def test_a2_stop_gradient(verdict):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    sched = NoiseSchedule.cosine(1000)
    teacher = Denoiser(3, 2, width=16, num_blocks=1, emb_dim=32)
    for p in teacher.parameters():
        p.requires_grad_(False)
    student = copy.deepcopy(teacher)
    for p in student.parameters():
        p.requires_grad_(True)
    x = torch.rand(4, 3, 8, 8) * 2 - 1
    y = torch.tensor([0, 1, 0, 1])
    eps = torch.randn_like(x)

    def teacher_branch_grad(sg):
        student.zero_grad(set_to_none=True)
        x_hat = student.predict_x0(x, 999, y, sched)
        target = teacher_target(x_hat, teacher, 500, y, sched, eps, stop_gradient=sg)
        # the isolated term: gradient reaching theta only through the teacher target
        term = distillation_loss(x_hat.detach(), target, 500, WeightingScheme(), sched)
        if not term.requires_grad:
            return 0.0
        term.backward()
        return sum(float(p.grad.abs().sum()) for p in student.parameters() if p.grad is not None)

    with_sg, without_sg = teacher_branch_grad(True), teacher_branch_grad(False)
    dt = time.perf_counter() - t0
    ok = with_sg == 0.0 and without_sg > 0.0 and dt < 60
    verdict("A2", ok, f"|grad| with sg = {with_sg} (== 0), without sg = {without_sg:.3e} (> 0); {dt:.1f}s")


def _stub_200(ipc, resolution, seed):
    reg = LabelRegistry.numbered(200, "n")
    spec = AugmentationSpec(resolution, seed=seed)
    src = distill_dataset(DatasetSpec("tinyimagenet", spec.source_size, reg), BudgetSpec(600, ipc, 200),
                          StubBackend(), PromptTemplate(), GenerationConfig(seed=seed, native_resolution=32))
    return src, spec


def test_a3_pda_arithmetic(verdict):
    t0 = time.perf_counter()
    checks, mapping = [], []
    for ipc, resolution in ((10, 16), (20, 16)):
        src, spec = _stub_200(ipc, resolution, seed=1)
        a = expand_dataset(src, spec, ExpansionPlan(5))
        b = expand_dataset(src, spec, ExpansionPlan(5))
        mapping.append(f"{src.ipc}->{a.ipc}")
        checks += [
            a.ipc == 5 * ipc,
            a.class_counts().tolist() == [5 * ipc] * 200,
            a.images.shape == (200 * 5 * ipc, 3, resolution, resolution),
            float(a.images.data.min()) >= 0.0 and float(a.images.data.max()) <= 1.0,
            torch.equal(a.images.data, b.images.data),
            torch.equal(a.labels, b.labels) and a.provenance == b.provenance,
        ]
    dt = time.perf_counter() - t0
    ok = all(checks) and mapping == ["10->50", "20->100"] and dt < 120
    verdict("A3", ok, f"ipc {', '.join(mapping)} (want 10->50, 20->100) on 200 classes; "
                      f"{sum(checks)}/{len(checks)} balance/shape/range/bit-identity checks; {dt:.1f}s")


@pytest.mark.slow
def test_a4_toy_add_training(verdict):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    store = two_class_blobs(256, 8, seed=0)
    cfg = AddConfig(steps=500, seed=0, student_init="scratch")
    models = build_models(store, cfg)
    before = (param_checksum(models.teacher), param_checksum(models.disc.extractor))
    hist = train(cfg, store, models).history
    after = (param_checksum(models.teacher), param_checksum(models.disc.extractor))
    ma = moving_average([b.distill for b in hist], 20)
    ratio = ma[-1] / ma[0]
    finite = all(b.finite() for b in hist)
    frozen = before == after
    dt = time.perf_counter() - t0
    ok = len(hist) == 500 and ratio <= 0.5 and finite and frozen and dt < 300
    verdict("A4", ok, f"distill MA20 {ma[0]:.4f} -> {ma[-1]:.4f} (ratio {ratio:.3f} <= 0.5); all finite={finite}; "
                      f"teacher+extractor sha256 unchanged={frozen}; {dt:.1f}s")


class ConstantPredictor(nn.Module):
    def __init__(self, num_classes):
        super().__init__()
        self.num_classes = num_classes

    def forward(self, x):
        return torch.zeros(len(x), self.num_classes)


@pytest.mark.slow
def test_a5_evaluator_sanity(verdict):
    t0 = time.perf_counter()
    classes, ipc = 10, 50
    tr = solid_color_store(classes, ipc, 32, seed=1, noise=0.02)
    te = solid_color_store(classes, 20, 32, seed=2, noise=0.02, registry=tr.registry)
    ds = DistilledDataset(tr.images, tr.labels, ("generated",) * len(tr), ipc, tr.registry)
    model = build_convnet(ConvNetSpec(), classes, 32, seed=0)
    model, _ = train_classifier(model, ds, TrainConfig.desk(50))
    acc = evaluate(model, te, ds.registry)
    const = evaluate(ConstantPredictor(classes), te)
    dt = time.perf_counter() - t0
    ok = acc >= 0.95 and const == 1.0 / classes and dt < 300
    verdict("A5", ok, f"desk-50 accuracy {acc:.4f} >= 0.95 on separable colours; constant predictor {const} "
                      f"== 1/{classes}; {dt:.1f}s")


@pytest.mark.slow
def test_a6_end_to_end(verdict, tmp_path):
    t0 = time.perf_counter()
    reg = LabelRegistry.numbered(100, "c")
    target = 32
    aug = AugmentationSpec(target, seed=0)
    src = distill_dataset(DatasetSpec("cifar100", aug.source_size, reg), BudgetSpec(600, 20, 100), StubBackend(),
                          PromptTemplate(), GenerationConfig(seed=0, native_resolution=64))
    src.metadata.pop("timing_report")
    expanded = expand_dataset(src, aug, ExpansionPlan(5))
    save_distilled(expanded, tmp_path / "d")
    loaded = load_distilled(tmp_path / "d")
    round_trip = torch.equal(loaded.images.data, expanded.images.data) and torch.equal(loaded.labels, expanded.labels)
    test = texture_store(reg, 10, target, seed=123)
    report = repeat_evaluate(loaded, test, TrainConfig.desk(1, seed=0), repeats=3, dataset_name="cifar100",
                             label="stub")
    report.check()
    back = EvalReport.load(report.save(tmp_path / "report.json"))
    recomputed = format_accuracy(float(np.mean(back.per_run_acc)), sample_std(back.per_run_acc))
    ipc_ok = (src.ipc, loaded.ipc, len(loaded)) == (20, 100, 10_000) and \
        loaded.class_counts().tolist() == [100] * 100
    dt = time.perf_counter() - t0
    ok = round_trip and ipc_ok and recomputed == back.formatted and len(back.per_run_acc) == 3 and dt < 600
    verdict("A6", ok, f"stub IPC {src.ipc} -> PDA x5 -> IPC {loaded.ipc} ({len(loaded)} images), "
                      f"round trip exact={round_trip}; row 'stub  cifar100  IPC 100  {back.formatted}' "
                      f"recomputed={recomputed}; {dt:.1f}s")


@pytest.mark.slow
def test_a7_pda_benefit_direction(verdict):
    t0 = time.perf_counter()
    classes, ipc, res, epochs, repeats, seeds = 5, 4, 16, 100, 3, 5
    reg = LabelRegistry.numbered(classes, "tex")
    test = texture_store(reg, 40, res, seed=999)
    aug_res = AugmentationSpec(res).source_size
    without, with_pda = [], []
    for seed in range(seeds):
        src = distill_dataset(DatasetSpec("toy", aug_res, reg), BudgetSpec(600, ipc, classes), StubBackend(),
                              PromptTemplate("{label}"), GenerationConfig(seed=seed, native_resolution=32))
        spec = AugmentationSpec(res, seed=seed)
        base = expand_dataset(src, spec, ExpansionPlan(1))
        pda = expand_dataset(src, spec, ExpansionPlan(5))
        cfg = TrainConfig.desk(epochs, seed=seed)
        without.append(repeat_evaluate(base, test, cfg, repeats).mean)
        with_pda.append(repeat_evaluate(pda, test, cfg, repeats).mean)
    diffs = np.array(with_pda) - np.array(without)
    wins = int((diffs > 0).sum())
    p = binomtest(wins, seeds, 0.5, alternative="greater").pvalue
    dt = time.perf_counter() - t0
    ok = diffs.mean() >= 0 and p <= 0.05 and dt < 900
    pairs = ", ".join(f"{a:.3f}/{b:.3f}" for a, b in zip(without, with_pda))
    verdict("A7", ok, f"mean acc no-PDA {np.mean(without):.4f} vs PDA {np.mean(with_pda):.4f} "
                      f"(diff {diffs.mean():+.4f} >= 0); PDA wins {wins}/{seeds}, sign test p={p:.4f} <= 0.05; "
                      f"pairs {pairs}; {dt:.1f}s")


def test_a8_hardware_gated(capsys):
    with capsys.disabled():
        print("\nA8 SKIP  needs a pretrained one-step text-to-image backend, a GPU and CIFAR-100; "
              "run `gendistill distill --backend external` then `gendistill evaluate --mode challenge`")
    pytest.skip("hardware-gated: external pretrained backend + GPU + full CIFAR-100 required")
